#pragma once

#include <atomic>
#include <cstddef>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace kgnc {

// Runs fn(block) for block in [0, num_blocks) on up to `jobs` threads.
// Callers that need determinism must make each block write to block-owned
// storage and reduce over blocks in index order afterwards; the block
// partition itself never depends on the thread count.
inline void parallel_blocks(std::size_t num_blocks, int jobs,
                            const std::function<void(std::size_t)>& fn) {
    if (num_blocks == 0) return;
    const std::size_t workers =
        std::min<std::size_t>(num_blocks, jobs < 1 ? 1 : static_cast<std::size_t>(jobs));
    if (workers <= 1) {
        for (std::size_t b = 0; b < num_blocks; ++b) fn(b);
        return;
    }
    std::atomic<std::size_t> cursor{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    auto work = [&]() {
        for (;;) {
            const std::size_t b = cursor.fetch_add(1);
            if (b >= num_blocks) return;
            try {
                fn(b);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (!error) error = std::current_exception();
                return;
            }
        }
    };
    std::vector<std::thread> threads;
    threads.reserve(workers - 1);
    for (std::size_t t = 1; t < workers; ++t) threads.emplace_back(work);
    work();
    for (auto& t : threads) t.join();
    if (error) std::rethrow_exception(error);
}

inline int default_jobs() {
    const unsigned int hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

} // namespace kgnc
