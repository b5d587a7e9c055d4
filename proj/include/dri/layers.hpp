#pragma once

#include <string>

#include "dri/ops.hpp"
#include "dri/optim.hpp"
#include "dri/tape.hpp"
#include "dri/tensor.hpp"

namespace dri {

/// Affine layer y = x W^T + b with W stored [out, in]. Non-owning.
template <typename T>
struct Linear {
    Parameter<T>* weight = nullptr;
    Parameter<T>* bias = nullptr;

    static Linear create(ParameterStore<T>& store, const std::string& prefix, std::size_t in, std::size_t out,
                         bool with_bias = true);

    std::size_t in_features() const { return weight->tensor.dim(1); }
    std::size_t out_features() const { return weight->tensor.dim(0); }
    std::size_t param_count() const { return weight->tensor.size() + (bias ? bias->tensor.size() : 0); }

    Var<T> operator()(Tape<T>& tape, const Var<T>& x) const;
};

/// Low-rank update attached to a frozen linear layer: h = W0 x + (alpha / r) B A x.
template <typename T>
struct LoraAdapter {
    Parameter<T>* a = nullptr;  // [r, k]
    Parameter<T>* b = nullptr;  // [d, r]
    std::size_t rank = 0;
    T alpha = T(1);
    std::string target;

    /// A is trunc-normal, B is zero, so the update starts at exactly zero.
    static LoraAdapter create(ParameterStore<T>& store, const std::string& prefix, const Linear<T>& base,
                              std::size_t rank, T alpha, Rng& rng);

    T scaling() const { return alpha / static_cast<T>(rank); }
    std::size_t param_count() const { return a->tensor.size() + b->tensor.size(); }

    /// The low-rank path alone, (alpha / r) B A x.
    Var<T> delta(Tape<T>& tape, const Var<T>& x) const;
    /// Dense W0 + (alpha / r) B A.
    Tensor<T> merged(const Tensor<T>& w0) const;
};

/// Base linear plus an optional LoRA path.
template <typename T>
Var<T> lora_forward(Tape<T>& tape, const Var<T>& x, const Linear<T>& base, const LoraAdapter<T>* adapter);

/// Serial bottleneck y = x + up(gelu(down(x))). `up` starts at zero.
template <typename T>
struct BottleneckAdapter {
    Linear<T> down;
    Linear<T> up;

    static BottleneckAdapter create(ParameterStore<T>& store, const std::string& prefix, std::size_t dim,
                                    std::size_t hidden, Rng& rng);

    std::size_t param_count() const { return down.param_count() + up.param_count(); }
    Var<T> operator()(Tape<T>& tape, const Var<T>& x) const;
};

}  // namespace dri
