#pragma once

#include <algorithm>
#include <cstdint>
#include <cstddef>
#include <utility>
#include <vector>

namespace kgnc {

// Compressed-sparse-row matrix. Rows with no entries are simply empty spans;
// nonzero_rows lists the rows that have at least one entry so kernels can
// skip the rest.
template <class T>
struct Csr {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::size_t> row_ptr; // size rows+1
    std::vector<std::uint32_t> col;   // size nnz
    std::vector<T> val;               // size nnz
    std::vector<std::uint32_t> nonzero_rows;

    std::size_t nnz() const { return col.size(); }

    void finalize() {
        nonzero_rows.clear();
        for (std::size_t i = 0; i < rows; ++i)
            if (row_ptr[i + 1] > row_ptr[i]) nonzero_rows.push_back(static_cast<std::uint32_t>(i));
    }

    static Csr identity(std::size_t n) {
        Csr m;
        m.rows = m.cols = n;
        m.row_ptr.resize(n + 1);
        m.col.resize(n);
        m.val.assign(n, T(1));
        for (std::size_t i = 0; i < n; ++i) {
            m.row_ptr[i] = i;
            m.col[i] = static_cast<std::uint32_t>(i);
        }
        m.row_ptr[n] = n;
        m.finalize();
        return m;
    }

    // Builds from (row, col, value) triples; duplicates are summed.
    static Csr from_coo(std::size_t rows, std::size_t cols,
                        const std::vector<std::size_t>& ri, const std::vector<std::size_t>& ci,
                        const std::vector<T>& vi) {
        Csr m;
        m.rows = rows;
        m.cols = cols;
        m.row_ptr.assign(rows + 1, 0);
        for (std::size_t r : ri) m.row_ptr[r + 1]++;
        for (std::size_t i = 0; i < rows; ++i) m.row_ptr[i + 1] += m.row_ptr[i];
        m.col.resize(ri.size());
        m.val.resize(ri.size());
        std::vector<std::size_t> cursor(m.row_ptr.begin(), m.row_ptr.end() - 1);
        for (std::size_t k = 0; k < ri.size(); ++k) {
            const std::size_t at = cursor[ri[k]]++;
            m.col[at] = static_cast<std::uint32_t>(ci[k]);
            m.val[at] = vi[k];
        }
        m.sort_rows_and_merge();
        m.finalize();
        return m;
    }

    Csr transposed() const {
        Csr t;
        t.rows = cols;
        t.cols = rows;
        t.row_ptr.assign(cols + 1, 0);
        for (std::uint32_t c : col) t.row_ptr[c + 1]++;
        for (std::size_t i = 0; i < cols; ++i) t.row_ptr[i + 1] += t.row_ptr[i];
        t.col.resize(col.size());
        t.val.resize(val.size());
        std::vector<std::size_t> cursor(t.row_ptr.begin(), t.row_ptr.end() - 1);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t k = row_ptr[r]; k < row_ptr[r + 1]; ++k) {
                const std::size_t at = cursor[col[k]]++;
                t.col[at] = static_cast<std::uint32_t>(r);
                t.val[at] = val[k];
            }
        }
        t.finalize();
        return t;
    }

    template <class U>
    Csr<U> cast() const {
        Csr<U> m;
        m.rows = rows;
        m.cols = cols;
        m.row_ptr = row_ptr;
        m.col = col;
        m.val.assign(val.begin(), val.end());
        m.nonzero_rows = nonzero_rows;
        return m;
    }

    std::vector<T> to_dense() const {
        std::vector<T> d(rows * cols, T(0));
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t k = row_ptr[r]; k < row_ptr[r + 1]; ++k)
                d[r * cols + col[k]] += val[k];
        return d;
    }

private:
    void sort_rows_and_merge() {
        std::vector<std::uint32_t> tmp_col;
        std::vector<T> tmp_val;
        std::vector<std::size_t> new_ptr(rows + 1, 0);
        std::vector<std::pair<std::uint32_t, T>> row;
        tmp_col.reserve(col.size());
        tmp_val.reserve(val.size());
        for (std::size_t r = 0; r < rows; ++r) {
            row.clear();
            for (std::size_t k = row_ptr[r]; k < row_ptr[r + 1]; ++k)
                row.emplace_back(col[k], val[k]);
            std::sort(row.begin(), row.end(),
                      [](const auto& a, const auto& b) { return a.first < b.first; });
            const std::size_t row_start = tmp_col.size();
            for (const auto& [c, v] : row) {
                if (tmp_col.size() > row_start && tmp_col.back() == c)
                    tmp_val.back() += v;
                else {
                    tmp_col.push_back(c);
                    tmp_val.push_back(v);
                }
            }
            new_ptr[r + 1] = tmp_col.size();
        }
        row_ptr = std::move(new_ptr);
        col = std::move(tmp_col);
        val = std::move(tmp_val);
    }
};

} // namespace kgnc
