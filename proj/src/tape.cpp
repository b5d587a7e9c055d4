#include "dri/tape.hpp"

#include <string>

namespace dri {

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
    Node n;
    n.own = std::move(value);
    n.own.requires_grad = false;
    n.leaf = true;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::input(Tensor<T> value, bool requires_grad) {
    Node n;
    n.own = std::move(value);
    n.own.requires_grad = requires_grad;
    n.own.grad.clear();
    n.needs_grad = requires_grad;
    n.leaf = true;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::param(Parameter<T>& p) {
    Node n;
    n.external = &p.tensor;
    n.needs_grad = p.trainable;
    n.leaf = true;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn fn) {
    const std::size_t id = nodes_.size();
    bool needs = false;
    for (auto in : inputs) {
        if (in >= id) throw ContractError("tape input " + std::to_string(in) + " recorded after its consumer");
        needs = needs || nodes_[in].needs_grad;
    }
    Node n;
    n.own = std::move(value);
    n.needs_grad = needs;
    n.inputs = std::move(inputs);
    if (needs) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return {this, id};
}

template <typename T>
const Tensor<T>& Tape<T>::value(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.external ? *n.external : n.own;
}

template <typename T>
const std::vector<T>& Tape<T>::leaf_grad(std::size_t id) const {
    const Node& n = nodes_.at(id);
    if (!n.leaf) throw ContractError("leaf_grad requested for an interior node");
    return n.external ? n.external->grad : n.own.grad;
}

template <typename T>
void Tape<T>::backward(const Var<T>& loss) {
    if (loss.tape() != this) throw ContractError("backward: loss was recorded on a different tape");
    if (value(loss.id()).size() != 1) {
        throw ContractError("backward requires a scalar loss, got shape " + shape_str(value(loss.id()).shape));
    }
    const std::size_t last = loss.id();
    for (std::size_t i = 0; i <= last; ++i) {
        Node& n = nodes_[i];
        if (n.needs_grad) {
            n.grad.assign(value(i).size(), T(0));
        } else {
            n.grad.clear();
        }
    }
    if (!nodes_[last].needs_grad) return;
    nodes_[last].grad[0] = T(1);
    for (std::size_t i = last + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.needs_grad) continue;
        if (n.backward) {
            n.backward(*this, i);
        } else if (n.leaf) {
            Tensor<T>& target = n.external ? *n.external : n.own;
            target.accumulate_grad(n.grad);
        }
    }
}

template class Tape<float>;
template class Tape<double>;

}  // namespace dri
