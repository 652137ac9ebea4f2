#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace haltingvt {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? ", " : "") << shape[i];
    }
    os << "]";
    return os.str();
}

// Raised by a primitive whose operands do not conform; names the primitive and both shapes.
class ShapeError : public std::invalid_argument {
public:
    ShapeError(const std::string& primitive, const Shape& lhs, const Shape& rhs)
        : std::invalid_argument(primitive + ": shape mismatch " + shape_string(lhs) + " vs " +
                                shape_string(rhs)),
          primitive_(primitive) {}
    ShapeError(const std::string& primitive, const std::string& what)
        : std::invalid_argument(primitive + ": " + what), primitive_(primitive) {}

    const std::string& primitive() const noexcept { return primitive_; }

private:
    std::string primitive_;
};

class TapeError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

// Forward-pass multiply-add instrumentation. Only matmul-class work is counted
// (matmul, attention scores and value mixing, the halting affine head), each
// multiply-add as two operations.
struct FlopCounter {
    bool enabled = false;
    std::uint64_t flops = 0;

    static FlopCounter& local() {
        thread_local FlopCounter counter;
        return counter;
    }
    void add(std::uint64_t n) {
        if (enabled) {
            flops += n;
        }
    }
};

// Enables the thread's FlopCounter for the lifetime of the guard.
class CountFlops {
public:
    CountFlops() : saved_(FlopCounter::local()) {
        FlopCounter::local() = FlopCounter{true, 0};
    }
    ~CountFlops() { FlopCounter::local() = saved_; }
    CountFlops(const CountFlops&) = delete;
    CountFlops& operator=(const CountFlops&) = delete;

    std::uint64_t flops() const { return FlopCounter::local().flops; }

private:
    FlopCounter saved_;
};

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    std::uint64_t id = 0;
    std::function<void(const Node&)> backward;

    void ensure_grad() {
        if (grad.size() != value.size()) {
            grad.assign(value.size(), T(0));
        }
    }
    void accumulate(std::size_t i, T g) {
        ensure_grad();
        grad[i] += g;
    }

    static std::uint64_t next_id() {
        thread_local std::uint64_t counter = 0;
        return ++counter;
    }
};

template <typename T>
class Tape;

template <typename T>
class Tensor {
public:
    using value_type = T;
    using NodePtr = std::shared_ptr<Node<T>>;

    Tensor() = default;
    explicit Tensor(NodePtr node) : node_(std::move(node)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        std::vector<T> values(shape_size(shape), T(0));
        return from(std::move(shape), std::move(values), requires_grad);
    }

    static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
        if (shape_size(shape) != values.size()) {
            throw ShapeError("tensor", shape, Shape{values.size()});
        }
        auto node = std::make_shared<Node<T>>();
        node->shape = std::move(shape);
        node->value = std::move(values);
        node->requires_grad = requires_grad;
        node->id = Node<T>::next_id();
        return Tensor(std::move(node));
    }

    static Tensor scalar(T v) { return from(Shape{1}, std::vector<T>{v}); }

    // Leaf tensor that accumulates gradients across backward passes.
    static Tensor parameter(Shape shape, std::vector<T> values) {
        return from(std::move(shape), std::move(values), true);
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t size() const { return node_->value.size(); }
    std::size_t rows() const { return node_->shape.at(0); }
    std::size_t cols() const { return rank() >= 2 ? node_->shape[1] : 1; }
    std::uint64_t id() const { return node_->id; }

    std::span<const T> values() const { return node_->value; }
    std::span<T> mutable_values() { return node_->value; }
    T operator[](std::size_t i) const { return node_->value[i]; }
    T at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }
    T item() const {
        if (size() != 1) {
            throw ShapeError("item", shape(), Shape{1});
        }
        return node_->value[0];
    }

    bool requires_grad() const { return node_ && node_->requires_grad; }
    void set_requires_grad(bool flag) { node_->requires_grad = flag; }
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> mutable_grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() { node_->grad.assign(node_->value.size(), T(0)); }

    // Deep copy of the values, detached from any graph.
    Tensor detach() const { return from(shape(), node_->value, false); }

    const NodePtr& node() const { return node_; }

private:
    NodePtr node_;
};

// Ordered record of the differentiable operations of one forward pass. Results
// are only recorded while a Scope for this tape is active on the thread;
// without an active tape all operations run in inference mode.
template <typename T>
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    class Scope {
    public:
        explicit Scope(Tape& tape) : previous_(current_) { current_ = &tape; }
        ~Scope() { current_ = previous_; }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        Tape* previous_;
    };

    static Tape* current() { return current_; }

    void record(const std::shared_ptr<Node<T>>& node) {
        if (consumed_) {
            throw TapeError("tape: cannot record on a consumed tape");
        }
        nodes_.push_back(node);
    }

    std::size_t size() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }

    // Reverse sweep from a scalar loss. Leaf gradients accumulate additively;
    // intermediate buffers are released as the sweep passes them.
    void backward(const Tensor<T>& loss) {
        if (consumed_) {
            throw TapeError("backward: tape already consumed");
        }
        if (!loss.defined() || loss.size() != 1) {
            throw ShapeError("backward", loss.defined() ? loss.shape() : Shape{}, Shape{1});
        }
        consumed_ = true;
        if (!loss.requires_grad()) {
            nodes_.clear();
            return;
        }
        loss.node()->accumulate(0, T(1));
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            Node<T>& node = **it;
            if (node.backward && node.grad.size() == node.value.size()) {
                node.backward(node);
            }
            node.backward = nullptr;
            std::vector<T>().swap(node.grad);
        }
        nodes_.clear();
    }

private:
    static inline thread_local Tape* current_ = nullptr;
    std::vector<std::shared_ptr<Node<T>>> nodes_;
    bool consumed_ = false;
};

namespace detail {

template <typename T>
bool any_requires_grad(std::initializer_list<const Tensor<T>*> inputs) {
    for (const Tensor<T>* in : inputs) {
        if (in->requires_grad()) {
            return true;
        }
    }
    return false;
}

// Creates an op result; when a tape is active and an input requires a
// gradient, the result is recorded together with its backward closure.
template <typename T, typename Backward>
Tensor<T> make_result(Shape shape, std::vector<T> values, bool needs_grad, Backward&& backward) {
    Tensor<T> out = Tensor<T>::from(std::move(shape), std::move(values));
    Tape<T>* tape = Tape<T>::current();
    if (tape == nullptr || !needs_grad) {
        return out;
    }
    out.node()->requires_grad = true;
    out.node()->backward = std::forward<Backward>(backward);
    tape->record(out.node());
    return out;
}

template <typename T>
bool wants_grad(const std::shared_ptr<Node<T>>& node) {
    return node && node->requires_grad;
}

}  // namespace detail

}  // namespace haltingvt
