#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace dri {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Dense row-major array. `grad` is either empty or the same length as `data`.
template <typename T>
struct Tensor {
    Shape shape;
    std::vector<T> data;
    bool requires_grad = false;
    std::vector<T> grad;

    Tensor() = default;
    explicit Tensor(Shape s, T fill = T(0));
    Tensor(Shape s, std::vector<T> values);

    std::size_t size() const { return data.size(); }
    std::size_t dim(std::size_t i) const { return shape.at(i); }
    std::size_t rank() const { return shape.size(); }

    T& operator[](std::size_t i) { return data[i]; }
    const T& operator[](std::size_t i) const { return data[i]; }

    bool has_grad() const { return !grad.empty(); }
    void zero_grad();
    /// Adds `g` into the gradient buffer. No-op when requires_grad is false.
    void accumulate_grad(const std::vector<T>& g);
};

/// A named model weight. `trainable` and `tensor.requires_grad` are kept in sync.
template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> tensor;
    bool trainable = true;

    void set_trainable(bool on);
};

/// Owns every parameter and buffer of a model, keyed by unique hierarchical name.
template <typename T>
class ParameterStore {
public:
    Parameter<T>& create(const std::string& name, Shape shape, bool trainable = true);
    Tensor<T>& create_buffer(const std::string& name, Shape shape, T fill = T(0));

    Parameter<T>* find(const std::string& name);
    const Parameter<T>* find(const std::string& name) const;
    Parameter<T>& at(const std::string& name);
    Tensor<T>* find_buffer(const std::string& name);

    const std::vector<std::unique_ptr<Parameter<T>>>& params() const { return params_; }
    const std::vector<std::pair<std::string, std::unique_ptr<Tensor<T>>>>& buffers() const { return buffers_; }

    std::size_t count(bool trainable_only) const;
    void zero_grad();
    void set_all_trainable(bool on);

private:
    std::vector<std::unique_ptr<Parameter<T>>> params_;
    std::unordered_map<std::string, std::size_t> index_;
    std::vector<std::pair<std::string, std::unique_ptr<Tensor<T>>>> buffers_;
};

}  // namespace dri
