#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dri/layers.hpp"
#include "dri/tape.hpp"
#include "dri/tensor.hpp"

namespace dri {

enum class PosMode { LearnedAbsolute, Rope };

PosMode parse_pos_mode(const std::string& s);
std::string to_string(PosMode m);

struct ViTConfig {
    std::size_t depth = 4;
    std::size_t dim = 64;
    std::size_t heads = 4;
    std::size_t mlp_ratio = 4;
    std::size_t patch = 8;
    std::size_t image_h = 32;
    std::size_t image_w = 32;
    std::size_t channels = 3;
    PosMode pos_mode = PosMode::LearnedAbsolute;
    /// Non-patch tokens placed after CLS (the ship-size token uses one).
    std::size_t extra_tokens = 0;
    double ln_eps = 1e-6;

    void validate() const;
    std::size_t num_patches() const { return (image_h / patch) * (image_w / patch); }
    std::size_t seq_len() const { return 1 + extra_tokens + num_patches(); }
    std::size_t patch_dim() const { return patch * patch * channels; }
};

template <typename T>
struct TransformerBlock {
    Parameter<T>* norm1_weight = nullptr;
    Parameter<T>* norm1_bias = nullptr;
    Linear<T> qkv;
    Linear<T> proj;
    Parameter<T>* norm2_weight = nullptr;
    Parameter<T>* norm2_bias = nullptr;
    Linear<T> fc1;
    Linear<T> fc2;
    std::size_t heads = 1;
    double ln_eps = 1e-6;
};

/// Where the in-block (norm-slot) deviations go relative to LayerNorm.
enum class NormSlot { PostNorm, PreNorm };

/// Feature deviations for one block. Each is [B, D], broadcast to every token.
/// Absent deviations are exact zeros: no op is recorded for them.
template <typename T>
struct BlockDeviation {
    std::optional<Var<T>> attn_delta;
    std::optional<Var<T>> mlp_delta;
    std::optional<Var<T>> attn_residual;
    std::optional<Var<T>> mlp_residual;
    NormSlot slot = NormSlot::PostNorm;
};

/// Weight-space adapters attached to one block (all optional).
template <typename T>
struct BlockAdapters {
    const LoraAdapter<T>* qkv_lora = nullptr;
    const LoraAdapter<T>* proj_lora = nullptr;
    const BottleneckAdapter<T>* attn_adapter = nullptr;
    const BottleneckAdapter<T>* mlp_adapter = nullptr;
};

template <typename T>
struct BlockHooks {
    BlockDeviation<T> deviation;
    BlockAdapters<T> adapters;
};

/// Splits image [C, H, W] into [N, P*P*C] rows. Patches are taken in row-major
/// scan order; each row is channel-major, then row-major inside the patch.
template <typename T>
Tensor<T> patchify(const Tensor<T>& image, std::size_t patch);

/// Batched form: [B, C, H, W] -> [B, N, P*P*C].
template <typename T>
Tensor<T> patchify_batch(const Tensor<T>& images, std::size_t patch);

/// Rotary positions for a token sequence: leading non-patch tokens get 0
/// (identity rotation), patch i gets i + 1.
std::vector<std::size_t> token_positions(std::size_t leading, std::size_t patches);

/// Multi-head self-attention sub-layer on already-normalized input.
template <typename T>
Var<T> attention_forward(Tape<T>& tape, const Var<T>& normed, const TransformerBlock<T>& block,
                         const std::vector<std::size_t>& positions, const BlockAdapters<T>& adapters = {});

/// Pre-LN block:
///   x' = x + Attn(Norm(x) + d_attn) [+ r_attn]
///   y  = x' + MLP(Norm(x') + d_mlp) [+ r_mlp]
/// with d_* moved inside the norm when slot == PreNorm.
template <typename T>
Var<T> block_forward(Tape<T>& tape, const Var<T>& x, const TransformerBlock<T>& block,
                     const std::vector<std::size_t>& positions, const BlockHooks<T>& hooks = {});

template <typename T>
class VisionTransformer {
public:
    VisionTransformer(const ViTConfig& cfg, ParameterStore<T>& store, const std::string& prefix, Rng& rng);

    const ViTConfig& config() const { return cfg_; }
    const std::string& prefix() const { return prefix_; }
    const std::vector<TransformerBlock<T>>& blocks() const { return blocks_; }
    std::vector<Parameter<T>*> parameters() const { return params_; }

    /// Returns the final-normed first token, [B, D]. `extra` holds
    /// [B, extra_tokens, D] when the config requests extra tokens. `hooks`
    /// is empty or has one entry per block. `taps` receives each block output.
    Var<T> forward(Tape<T>& tape, const Tensor<T>& images, const Var<T>* extra = nullptr,
                   std::span<const BlockHooks<T>> hooks = {}, std::vector<Var<T>>* taps = nullptr) const;

private:
    ViTConfig cfg_;
    std::string prefix_;
    Linear<T> patch_embed_;
    Parameter<T>* cls_token_ = nullptr;
    Parameter<T>* pos_embed_ = nullptr;
    std::vector<TransformerBlock<T>> blocks_;
    Parameter<T>* norm_weight_ = nullptr;
    Parameter<T>* norm_bias_ = nullptr;
    std::vector<Parameter<T>*> params_;
};

}  // namespace dri
