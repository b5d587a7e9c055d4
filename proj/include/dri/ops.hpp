#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "dri/tape.hpp"
#include "dri/tensor.hpp"

// Differentiable primitives. Every op checks shapes eagerly and throws
// DimensionError naming the offending shapes.
namespace dri::ops {

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b);

/// y = x W^T + b over the last dimension. W is [out, in]; bias may be invalid.
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias);

/// Elementwise a + b. `b` may also have a shape equal to a suffix of a's shape,
/// in which case it is broadcast over the leading dimensions.
template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> scale(const Var<T>& a, T factor);

/// x: [B, T, D], delta: [B, D]. Adds delta[b] to every token of sample b.
template <typename T>
Var<T> add_per_sample(const Var<T>& x, const Var<T>& delta);

template <typename T>
Var<T> sum(const Var<T>& a);

template <typename T>
Var<T> mean(const Var<T>& a);

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps);

template <typename T>
Var<T> softmax(const Var<T>& x);

/// Exact GELU, x * Phi(x).
template <typename T>
Var<T> gelu(const Var<T>& x);

template <typename T>
struct BatchNormState {
    Tensor<T>* running_mean = nullptr;
    Tensor<T>* running_var = nullptr;
    T momentum = T(0.1);
    T eps = T(1e-5);
    bool training = true;
};

/// x: [B, D]. Training mode normalizes with batch statistics (biased variance)
/// and updates running statistics (unbiased variance). `beta` may be invalid.
template <typename T>
Var<T> batch_norm_1d(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                     const BatchNormState<T>& state);

/// Multi-head scaled dot-product attention over packed qkv [B, T, 3D].
/// When `positions` is non-empty (length T), q and k are rotated per head
/// with rotary embeddings; position 0 is the identity rotation.
template <typename T>
Var<T> attention(const Var<T>& qkv, std::size_t heads, const std::vector<std::size_t>& positions);

/// Concatenate [B, t_i, D] blocks along the token axis.
template <typename T>
Var<T> concat_tokens(const std::vector<Var<T>>& parts);

/// Repeat v ([D] or [t, D]) for each of B samples, giving [B, t, D].
template <typename T>
Var<T> broadcast_batch(const Var<T>& v, std::size_t batch);

/// x: [B, T, D] -> [B, D] at token index `token`.
template <typename T>
Var<T> select_token(const Var<T>& x, std::size_t token);

/// Mean cross-entropy of logits [B, C] against labels in [0, C).
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<std::int64_t>& labels);

/// Batch-hard triplet loss with Euclidean distance and hinge margin. Anchors
/// without an in-batch positive are skipped.
template <typename T>
Var<T> triplet_batch_hard(const Var<T>& features, const std::vector<std::int64_t>& labels, T margin);

/// Rotates consecutive (2i, 2i+1) pairs of `row` (length head_dim) by
/// pos * base^(-2i/head_dim). `inverse` rotates by the negative angle.
template <typename T>
void rope_rotate(T* row, std::size_t head_dim, std::size_t pos, bool inverse = false);

/// Applies rope_rotate to each row of x [N, head_dim] at the matching position.
template <typename T>
Tensor<T> rope(const Tensor<T>& x, const std::vector<std::size_t>& positions);

inline constexpr double kRopeBase = 10000.0;

}  // namespace dri::ops
