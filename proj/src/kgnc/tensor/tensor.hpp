#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "kgnc/common.hpp"

namespace kgnc {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

template <class T>
class Tensor;

// One value node in the reverse-mode graph. Values are computed eagerly by
// the op that creates the node; backward_fn propagates this node's gradient
// into its parents' gradient buffers.
template <class T>
struct TensorNode {
    Shape shape;
    std::shared_ptr<std::vector<T>> values;
    std::shared_ptr<std::vector<T>> grad; // allocated lazily
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode<T>>> parents;
    std::function<void(TensorNode<T>&)> backward_fn;

    std::size_t size() const { return values->size(); }

    void ensure_grad() {
        if (!grad) grad = std::make_shared<std::vector<T>>(values->size(), T(0));
    }
};

// Tracking switch: while disabled, ops compute values but record no graph.
// Used for inference passes where gradients are not wanted.
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool previous;
    NoGradGuard() : previous(grad_mode_flag()) { grad_mode_flag() = false; }
    ~NoGradGuard() { grad_mode_flag() = previous; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Value-semantic handle to a TensorNode. Copies share the node.
template <class T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0)) {
        node_ = std::make_shared<TensorNode<T>>();
        node_->shape = std::move(shape);
        node_->values = std::make_shared<std::vector<T>>(shape_size(node_->shape), fill);
    }

    Tensor(Shape shape, std::vector<T> values) {
        if (values.size() != shape_size(shape))
            throw ShapeError("value count " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(shape));
        node_ = std::make_shared<TensorNode<T>>();
        node_->shape = std::move(shape);
        node_->values = std::make_shared<std::vector<T>>(std::move(values));
    }

    static Tensor scalar(T v) { return Tensor({1}, std::vector<T>{v}); }

    bool defined() const { return node_ != nullptr; }

    const Shape& shape() const { return node_->shape; }
    std::size_t size() const { return node_->values->size(); }
    std::size_t dim(std::size_t i) const { return node_->shape[i]; }
    std::size_t rank() const { return node_->shape.size(); }

    std::vector<T>& values() { return *node_->values; }
    const std::vector<T>& values() const { return *node_->values; }
    T* data() { return node_->values->data(); }
    const T* data() const { return node_->values->data(); }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool v = true) {
        node_->requires_grad = v;
        if (v) node_->ensure_grad();
        return *this;
    }

    bool has_grad() const { return node_->grad != nullptr; }
    std::vector<T>& grad() {
        node_->ensure_grad();
        return *node_->grad;
    }
    const std::vector<T>& grad() const { return *node_->grad; }

    void zero_grad() {
        if (node_->grad) std::fill(node_->grad->begin(), node_->grad->end(), T(0));
    }

    T item() const {
        if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
        return (*node_->values)[0];
    }

    // Detached copy of the values (no graph, no grad sharing).
    Tensor clone_values() const { return Tensor(node_->shape, *node_->values); }

    // New leaf sharing this tensor's value storage but with its own gradient
    // buffer. Lets several workers evaluate the same parameters while
    // accumulating gradients into disjoint buffers.
    Tensor shadow() const {
        Tensor t;
        t.node_ = std::make_shared<TensorNode<T>>();
        t.node_->shape = node_->shape;
        t.node_->values = node_->values;
        t.node_->requires_grad = node_->requires_grad;
        if (node_->requires_grad) t.node_->ensure_grad();
        return t;
    }

    std::shared_ptr<TensorNode<T>>& node() { return node_; }
    const std::shared_ptr<TensorNode<T>>& node() const { return node_; }

    // Reverse-mode sweep from this tensor. seed must match this tensor's
    // size; by default a scalar loss is seeded with 1.
    void backward(const std::vector<T>* seed = nullptr) {
        if (!seed && size() != 1)
            throw ShapeError("backward() without seed requires a scalar, got " +
                             shape_str(shape()));
        if (seed && seed->size() != size())
            throw ShapeError("backward seed size mismatch");

        std::vector<TensorNode<T>*> order;
        std::unordered_set<TensorNode<T>*> seen;
        topo_sort(node_.get(), seen, order);

        node_->ensure_grad();
        if (seed) {
            auto& g = *node_->grad;
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += (*seed)[i];
        } else {
            (*node_->grad)[0] += T(1);
        }

        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            TensorNode<T>* n = *it;
            if (n->backward_fn && n->grad) n->backward_fn(*n);
        }
    }

    // Builds a node from an op: values already computed, parents recorded
    // only while grad mode is on and some parent is on the gradient path.
    static Tensor from_op(Shape shape, std::vector<T> values,
                          std::vector<Tensor<T>> parents,
                          std::function<void(TensorNode<T>&)> backward_fn) {
        Tensor t(std::move(shape), std::move(values));
        if (grad_mode_flag()) {
            bool track = false;
            for (const auto& p : parents)
                if (p.node()->requires_grad || p.node()->backward_fn) track = true;
            if (track) {
                t.node_->parents.reserve(parents.size());
                for (auto& p : parents) t.node_->parents.push_back(p.node());
                t.node_->backward_fn = std::move(backward_fn);
            }
        }
        return t;
    }

private:
    static void topo_sort(TensorNode<T>* n, std::unordered_set<TensorNode<T>*>& seen,
                          std::vector<TensorNode<T>*>& order) {
        // Iterative DFS; graphs can be deep (per-epoch chains).
        struct Frame {
            TensorNode<T>* node;
            std::size_t next_parent;
        };
        std::vector<Frame> stack;
        if (seen.count(n)) return;
        seen.insert(n);
        stack.push_back({n, 0});
        while (!stack.empty()) {
            Frame& f = stack.back();
            if (f.next_parent < f.node->parents.size()) {
                TensorNode<T>* p = f.node->parents[f.next_parent++].get();
                if (!seen.count(p)) {
                    seen.insert(p);
                    stack.push_back({p, 0});
                }
            } else {
                order.push_back(f.node);
                stack.pop_back();
            }
        }
    }

    std::shared_ptr<TensorNode<T>> node_;
};

// Ensures a parent node has a gradient buffer before accumulation.
template <class T>
inline std::vector<T>& grad_of(const std::shared_ptr<TensorNode<T>>& n) {
    n->ensure_grad();
    return *n->grad;
}

} // namespace kgnc
