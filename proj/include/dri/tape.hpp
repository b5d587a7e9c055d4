#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "dri/tensor.hpp"

namespace dri {

template <typename T>
class Tape;

/// Handle to a value recorded on a Tape.
template <typename T>
class Var {
public:
    Var() = default;
    Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

    bool valid() const { return tape_ != nullptr; }
    Tape<T>* tape() const { return tape_; }
    std::size_t id() const { return id_; }

    const Tensor<T>& value() const;
    const Shape& shape() const { return value().shape; }
    std::size_t numel() const { return value().size(); }
    /// Gradient of a `Tape::input` leaf after backward.
    const std::vector<T>& grad() const;

private:
    Tape<T>* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// Reverse-mode tape. Nodes are appended in execution order, so index order is
/// a topological order and backward is a single reverse sweep.
template <typename T>
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, std::size_t self)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var<T> constant(Tensor<T> value);
    /// A leaf whose gradient is kept on the tape (readable through Var::grad).
    Var<T> input(Tensor<T> value, bool requires_grad = true);
    /// A leaf aliasing a parameter; gradients accumulate into the parameter.
    Var<T> param(Parameter<T>& p);

    Var<T> record(Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn fn);

    const Tensor<T>& value(std::size_t id) const;
    bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
    /// Gradient buffer of a node during backward. Only valid for needs_grad nodes.
    std::vector<T>& grad(std::size_t id) { return nodes_[id].grad; }
    const std::vector<T>& leaf_grad(std::size_t id) const;

    /// Seeds d(loss)/d(loss) = 1 and sweeps backward. Parameter and input
    /// gradients accumulate across calls; callers zero them explicitly.
    void backward(const Var<T>& loss);

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor<T> own;
        Tensor<T>* external = nullptr;
        std::vector<std::size_t> inputs;
        BackwardFn backward;
        bool needs_grad = false;
        bool leaf = false;
        std::vector<T> grad;
    };

    std::vector<Node> nodes_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
    return tape_->value(id_);
}

template <typename T>
const std::vector<T>& Var<T>::grad() const {
    return tape_->leaf_grad(id_);
}

}  // namespace dri
