#include "dri/tensor.hpp"

#include <sstream>

namespace dri {

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape s, T fill) : shape(std::move(s)), data(numel(shape), fill) {
    for (auto d : shape) {
        if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
    }
}

template <typename T>
Tensor<T>::Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
    if (numel(shape) != data.size()) {
        throw DimensionError("shape " + shape_str(shape) + " does not match " + std::to_string(data.size()) +
                             " values");
    }
}

template <typename T>
void Tensor<T>::zero_grad() {
    if (requires_grad) {
        grad.assign(data.size(), T(0));
    } else {
        grad.clear();
    }
}

template <typename T>
void Tensor<T>::accumulate_grad(const std::vector<T>& g) {
    if (!requires_grad) return;
    if (g.size() != data.size()) {
        throw DimensionError("gradient length " + std::to_string(g.size()) + " does not match tensor " +
                             shape_str(shape));
    }
    if (grad.empty()) grad.assign(data.size(), T(0));
    for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
}

template <typename T>
void Parameter<T>::set_trainable(bool on) {
    trainable = on;
    tensor.requires_grad = on;
    if (!on) tensor.grad.clear();
}

template <typename T>
Parameter<T>& ParameterStore<T>::create(const std::string& name, Shape shape, bool trainable) {
    if (index_.count(name)) throw ContractError("duplicate parameter name: " + name);
    auto p = std::make_unique<Parameter<T>>();
    p->name = name;
    p->tensor = Tensor<T>(std::move(shape));
    p->set_trainable(trainable);
    index_[name] = params_.size();
    params_.push_back(std::move(p));
    return *params_.back();
}

template <typename T>
Tensor<T>& ParameterStore<T>::create_buffer(const std::string& name, Shape shape, T fill) {
    for (auto& [n, _] : buffers_) {
        if (n == name) throw ContractError("duplicate buffer name: " + name);
    }
    if (index_.count(name)) throw ContractError("buffer name collides with parameter: " + name);
    buffers_.emplace_back(name, std::make_unique<Tensor<T>>(std::move(shape), fill));
    return *buffers_.back().second;
}

template <typename T>
Parameter<T>* ParameterStore<T>::find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].get();
}

template <typename T>
const Parameter<T>* ParameterStore<T>::find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].get();
}

template <typename T>
Parameter<T>& ParameterStore<T>::at(const std::string& name) {
    auto* p = find(name);
    if (!p) throw ContractError("unknown parameter: " + name);
    return *p;
}

template <typename T>
Tensor<T>* ParameterStore<T>::find_buffer(const std::string& name) {
    for (auto& [n, t] : buffers_) {
        if (n == name) return t.get();
    }
    return nullptr;
}

template <typename T>
std::size_t ParameterStore<T>::count(bool trainable_only) const {
    std::size_t n = 0;
    for (const auto& p : params_) {
        if (!trainable_only || p->trainable) n += p->tensor.size();
    }
    return n;
}

template <typename T>
void ParameterStore<T>::zero_grad() {
    for (auto& p : params_) p->tensor.zero_grad();
}

template <typename T>
void ParameterStore<T>::set_all_trainable(bool on) {
    for (auto& p : params_) p->set_trainable(on);
}

template struct Tensor<float>;
template struct Tensor<double>;
template struct Parameter<float>;
template struct Parameter<double>;
template class ParameterStore<float>;
template class ParameterStore<double>;

}  // namespace dri
