#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "maxdrop/error.hpp"

namespace maxdrop {

// Train mode enables stochastic layers and batch statistics; eval mode is
// the deterministic inference path.
enum class Mode { kTrain, kEval };

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << "]";
    return os.str();
}

namespace detail {

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> values;
    std::vector<T> grad;       // persistent accumulator; sized when tracked
    std::vector<T> pass_grad;  // scratch for a single backward sweep
    bool tracked = false;
    std::uint64_t seq = 0;  // execution stamp; 0 = leaf (no recorded op)
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_rule;
};

inline std::uint64_t next_seq() {
    thread_local std::uint64_t counter = 0;
    return ++counter;
}

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Disables op recording within a scope (evaluation loops).
struct NoGradGuard {
    NoGradGuard() : saved_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = saved_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool saved_;
};

// Dense N-d value array, row-major. A Tensor is a shared handle to its
// storage; copying a Tensor aliases, clone() deep-copies. When `tracked`,
// the tensor owns a same-shape gradient buffer and participates in
// reverse-mode differentiation.
template <typename T>
class Tensor {
public:
    Tensor() : node_(std::make_shared<detail::Node<T>>()) {}

    explicit Tensor(Shape shape, T fill = T(0), bool tracked = false)
        : node_(std::make_shared<detail::Node<T>>()) {
        node_->shape = std::move(shape);
        node_->values.assign(numel(node_->shape), fill);
        set_tracked(tracked);
    }

    static Tensor from(Shape shape, std::vector<T> values, bool tracked = false) {
        if (numel(shape) != values.size()) {
            throw ShapeError("tensor: shape " + shape_str(shape) + " expects " +
                             std::to_string(numel(shape)) + " elements, got " +
                             std::to_string(values.size()));
        }
        Tensor t;
        t.node_->shape = std::move(shape);
        t.node_->values = std::move(values);
        t.set_tracked(tracked);
        return t;
    }

    static Tensor scalar(T v, bool tracked = false) { return from({1}, {v}, tracked); }

    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t size() const { return node_->values.size(); }

    std::vector<T>& values() { return node_->values; }
    const std::vector<T>& values() const { return node_->values; }

    T operator[](std::size_t i) const { return node_->values[i]; }
    T& operator[](std::size_t i) { return node_->values[i]; }

    T item() const {
        if (size() != 1) throw ShapeError("item(): tensor " + shape_str(shape()) + " is not scalar");
        return node_->values[0];
    }

    bool tracked() const { return node_->tracked; }

    void set_tracked(bool on) {
        node_->tracked = on;
        if (on && node_->grad.size() != node_->values.size())
            node_->grad.assign(node_->values.size(), T(0));
        if (!on) node_->grad.clear();
    }

    std::vector<T>& grad() {
        if (!node_->tracked) throw Error("grad(): tensor is not tracked");
        return node_->grad;
    }
    const std::vector<T>& grad() const {
        if (!node_->tracked) throw Error("grad(): tensor is not tracked");
        return node_->grad;
    }

    void zero_grad() {
        if (node_->tracked) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    }

    // Deep copy of values; result is untracked and detached from the graph.
    Tensor clone() const {
        Tensor t;
        t.node_->shape = node_->shape;
        t.node_->values = node_->values;
        return t;
    }

    std::shared_ptr<detail::Node<T>> node() const { return node_; }

    static Tensor wrap(std::shared_ptr<detail::Node<T>> n) {
        Tensor t;
        t.node_ = std::move(n);
        return t;
    }

private:
    std::shared_ptr<detail::Node<T>> node_;
};

template <typename T>
bool all_finite(const Tensor<T>& t) {
    for (T v : t.values())
        if (!std::isfinite(v)) return false;
    return true;
}

namespace detail {

// Builds an op-output node. The rule receives the output node with
// pass_grad populated and accumulates into tracked parents' pass_grad.
template <typename T>
Tensor<T> make_op(Shape shape, std::vector<T> values, std::vector<Tensor<T>> parents,
                  std::function<void(Node<T>&)> rule) {
    Tensor<T> out = Tensor<T>::from(std::move(shape), std::move(values));
    bool track = grad_enabled() &&
                 std::any_of(parents.begin(), parents.end(),
                             [](const Tensor<T>& p) { return p.tracked(); });
    if (track) {
        auto n = out.node();
        n->tracked = true;
        n->grad.assign(n->values.size(), T(0));
        n->seq = next_seq();
        for (auto& p : parents) n->parents.push_back(p.node());
        n->backward_rule = std::move(rule);
    }
    return out;
}

}  // namespace detail

// Ordered record of the operations reachable from a root tensor, in
// execution order. Replaying backward visits them in exact reverse
// execution order; gradient accumulation is additive.
template <typename T>
struct Tape {
    std::vector<std::shared_ptr<detail::Node<T>>> ops;       // ascending by seq
    std::vector<std::shared_ptr<detail::Node<T>>> reachable; // every node seen

    static Tape record(const Tensor<T>& root) {
        Tape tape;
        std::unordered_set<detail::Node<T>*> seen;
        std::vector<std::shared_ptr<detail::Node<T>>> stack{root.node()};
        while (!stack.empty()) {
            auto n = stack.back();
            stack.pop_back();
            if (!seen.insert(n.get()).second) continue;
            tape.reachable.push_back(n);
            if (n->backward_rule) tape.ops.push_back(n);
            for (auto& p : n->parents) stack.push_back(p);
        }
        std::sort(tape.ops.begin(), tape.ops.end(),
                  [](const auto& a, const auto& b) { return a->seq < b->seq; });
        return tape;
    }

    // Runs every recorded rule in reverse execution order. pass_grad of the
    // root must be seeded by the caller; afterwards each tracked node's
    // persistent grad has the sweep's contribution added.
    void replay_backward() {
        for (auto it = ops.rbegin(); it != ops.rend(); ++it) (*it)->backward_rule(**it);
        for (auto& n : reachable) {
            if (n->tracked) {
                for (std::size_t i = 0; i < n->grad.size(); ++i) n->grad[i] += n->pass_grad[i];
            }
            n->pass_grad.clear();
            n->pass_grad.shrink_to_fit();
        }
    }
};

// Reverse-mode sweep from a scalar tracked loss. Every tracked tensor
// reachable on the tape receives dLoss/dTensor; repeated calls without
// zero_grad accumulate.
template <typename T>
void backward(const Tensor<T>& loss) {
    if (loss.size() != 1)
        throw ShapeError("backward(): loss must be scalar, got " + shape_str(loss.shape()));
    if (!loss.tracked()) throw Error("backward(): loss is not tracked");
    Tape<T> tape = Tape<T>::record(loss);
    for (auto& n : tape.reachable)
        if (n->tracked) n->pass_grad.assign(n->values.size(), T(0));
    loss.node()->pass_grad[0] = T(1);
    tape.replay_backward();
}

// ---- elementwise ops ----------------------------------------------------

namespace detail {

template <typename T>
void check_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape("add", a, b);
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    return detail::make_op<T>(a.shape(), std::move(out), {a, b}, [](detail::Node<T>& n) {
        for (int k = 0; k < 2; ++k) {
            auto& p = n.parents[k];
            if (!p->tracked) continue;
            for (std::size_t i = 0; i < n.pass_grad.size(); ++i) p->pass_grad[i] += n.pass_grad[i];
        }
    });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape("sub", a, b);
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    return detail::make_op<T>(a.shape(), std::move(out), {a, b}, [](detail::Node<T>& n) {
        auto& pa = n.parents[0];
        auto& pb = n.parents[1];
        if (pa->tracked)
            for (std::size_t i = 0; i < n.pass_grad.size(); ++i) pa->pass_grad[i] += n.pass_grad[i];
        if (pb->tracked)
            for (std::size_t i = 0; i < n.pass_grad.size(); ++i) pb->pass_grad[i] -= n.pass_grad[i];
    });
}

// Elementwise multiply; d/da = b, d/db = a. The kernel a binary keep-mask
// rides on: multiplying by an untracked 0/1 mask routes gradient only
// through the kept positions.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape("mul", a, b);
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    return detail::make_op<T>(a.shape(), std::move(out), {a, b}, [](detail::Node<T>& n) {
        auto& pa = n.parents[0];
        auto& pb = n.parents[1];
        if (pa->tracked)
            for (std::size_t i = 0; i < n.pass_grad.size(); ++i)
                pa->pass_grad[i] += n.pass_grad[i] * pb->values[i];
        if (pb->tracked)
            for (std::size_t i = 0; i < n.pass_grad.size(); ++i)
                pb->pass_grad[i] += n.pass_grad[i] * pa->values[i];
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, T s) {
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
    return detail::make_op<T>(a.shape(), std::move(out), {a}, [s](detail::Node<T>& n) {
        auto& pa = n.parents[0];
        if (pa->tracked)
            for (std::size_t i = 0; i < n.pass_grad.size(); ++i)
                pa->pass_grad[i] += n.pass_grad[i] * s;
    });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, T s) {
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + s;
    return detail::make_op<T>(a.shape(), std::move(out), {a}, [](detail::Node<T>& n) {
        auto& pa = n.parents[0];
        if (pa->tracked)
            for (std::size_t i = 0; i < n.pass_grad.size(); ++i) pa->pass_grad[i] += n.pass_grad[i];
    });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    T s = T(0);
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i];
    return detail::make_op<T>({1}, {s}, {a}, [](detail::Node<T>& n) {
        auto& pa = n.parents[0];
        if (pa->tracked)
            for (std::size_t i = 0; i < pa->pass_grad.size(); ++i)
                pa->pass_grad[i] += n.pass_grad[0];
    });
}

// View with a new shape over the same element count.
template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    if (numel(shape) != a.size())
        throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape) +
                         " changes element count");
    std::vector<T> out = a.values();
    return detail::make_op<T>(std::move(shape), std::move(out), {a}, [](detail::Node<T>& n) {
        auto& pa = n.parents[0];
        if (pa->tracked)
            for (std::size_t i = 0; i < n.pass_grad.size(); ++i) pa->pass_grad[i] += n.pass_grad[i];
    });
}

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace maxdrop
