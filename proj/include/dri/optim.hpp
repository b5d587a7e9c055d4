#pragma once

#include <cstdint>
#include <random>
#include <unordered_map>
#include <vector>

#include "dri/tensor.hpp"

namespace dri {

/// SGD with momentum and L2 weight decay:
///   v <- momentum * v + g + weight_decay * w
///   w <- w - lr * v
/// Velocity buffers are created lazily and only for trainable parameters.
template <typename T>
class Sgd {
public:
    T learning_rate = T(0.0015);
    T momentum = T(0.9);
    T weight_decay = T(1e-4);

    Sgd() = default;
    Sgd(T lr, T momentum_, T weight_decay_) : learning_rate(lr), momentum(momentum_), weight_decay(weight_decay_) {}

    void step(ParameterStore<T>& store);
    const std::unordered_map<const Parameter<T>*, std::vector<T>>& velocity() const { return velocity_; }

private:
    std::unordered_map<const Parameter<T>*, std::vector<T>> velocity_;
};

using Rng = std::mt19937_64;

/// Normal(0, std) truncated to [-2 std, 2 std] by rejection.
template <typename T>
void trunc_normal(Tensor<T>& t, T std, Rng& rng);

template <typename T>
void uniform(Tensor<T>& t, T lo, T hi, Rng& rng);

template <typename T>
void normal(Tensor<T>& t, T std, Rng& rng);

/// 64-bit FNV-1a over the raw bytes of the data buffer.
template <typename T>
std::uint64_t checksum(const Tensor<T>& t);

}  // namespace dri
