#include "dri/vit.hpp"

#include "dri/errors.hpp"

namespace dri {

PosMode parse_pos_mode(const std::string& s) {
    if (s == "learned" || s == "learned-absolute") return PosMode::LearnedAbsolute;
    if (s == "rope") return PosMode::Rope;
    throw ConfigError("unknown position mode '" + s + "' (expected learned-absolute or rope)");
}

std::string to_string(PosMode m) {
    return m == PosMode::Rope ? "rope" : "learned-absolute";
}

void ViTConfig::validate() const {
    if (depth == 0 || dim == 0 || heads == 0 || patch == 0 || channels == 0 || mlp_ratio == 0)
        throw ConfigError("vit config: depth, dim, heads, patch, channels and mlp_ratio must be positive");
    if (dim % heads != 0)
        throw ConfigError("vit config: dim " + std::to_string(dim) + " not divisible by heads " + std::to_string(heads));
    if (image_h % patch != 0 || image_w % patch != 0) {
        throw ConfigError("vit config: image " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                          " not divisible by patch " + std::to_string(patch));
    }
    if (pos_mode == PosMode::Rope && (dim / heads) % 2 != 0)
        throw ConfigError("vit config: rotary embedding needs an even head dimension");
    if (!(ln_eps > 0)) throw ConfigError("vit config: ln_eps must be positive");
}

template <typename T>
Tensor<T> patchify(const Tensor<T>& image, std::size_t patch) {
    if (image.rank() != 3) throw DimensionError("patchify: expected [C, H, W], got " + shape_str(image.shape));
    Tensor<T> batched(Shape{1, image.dim(0), image.dim(1), image.dim(2)}, image.data);
    Tensor<T> rows = patchify_batch(batched, patch);
    return Tensor<T>(Shape{rows.dim(1), rows.dim(2)}, std::move(rows.data));
}

template <typename T>
Tensor<T> patchify_batch(const Tensor<T>& images, std::size_t patch) {
    if (images.rank() != 4) throw DimensionError("patchify: expected [B, C, H, W], got " + shape_str(images.shape));
    const std::size_t B = images.dim(0), C = images.dim(1), H = images.dim(2), W = images.dim(3);
    if (patch == 0 || H % patch != 0 || W % patch != 0) {
        throw DimensionError("patchify: image " + shape_str(images.shape) + " not divisible by patch " +
                             std::to_string(patch));
    }
    const std::size_t gh = H / patch, gw = W / patch, N = gh * gw, row = patch * patch * C;
    Tensor<T> out(Shape{B, N, row});
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t py = 0; py < gh; ++py) {
            for (std::size_t px = 0; px < gw; ++px) {
                T* dst = out.data.data() + (b * N + py * gw + px) * row;
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t y = 0; y < patch; ++y)
                        for (std::size_t x = 0; x < patch; ++x)
                            *dst++ = images.data[((b * C + c) * H + py * patch + y) * W + px * patch + x];
            }
        }
    }
    return out;
}

std::vector<std::size_t> token_positions(std::size_t leading, std::size_t patches) {
    std::vector<std::size_t> pos(leading + patches, 0);
    for (std::size_t i = 0; i < patches; ++i) pos[leading + i] = i + 1;
    return pos;
}

template <typename T>
Var<T> attention_forward(Tape<T>& tape, const Var<T>& normed, const TransformerBlock<T>& block,
                         const std::vector<std::size_t>& positions, const BlockAdapters<T>& adapters) {
    Var<T> qkv = lora_forward(tape, normed, block.qkv, adapters.qkv_lora);
    Var<T> mixed = ops::attention(qkv, block.heads, positions);
    return lora_forward(tape, mixed, block.proj, adapters.proj_lora);
}

template <typename T>
Var<T> block_forward(Tape<T>& tape, const Var<T>& x, const TransformerBlock<T>& block,
                     const std::vector<std::size_t>& positions, const BlockHooks<T>& hooks) {
    const auto& dev = hooks.deviation;
    const std::size_t D = block.norm1_weight->tensor.size();
    for (const auto* d : {&dev.attn_delta, &dev.mlp_delta, &dev.attn_residual, &dev.mlp_residual}) {
        if (d->has_value() && ((*d)->shape().size() != 2 || (*d)->shape()[1] != D)) {
            throw DimensionError("block_forward: deviation " + shape_str((*d)->shape()) + " has width != " +
                                 std::to_string(D));
        }
    }
    const T eps = static_cast<T>(block.ln_eps);
    const bool pre = dev.slot == NormSlot::PreNorm;

    auto normed = [&](const Var<T>& in, Parameter<T>* w, Parameter<T>* b, const std::optional<Var<T>>& delta) {
        Var<T> src = (pre && delta) ? ops::add_per_sample(in, *delta) : in;
        Var<T> n = ops::layer_norm(src, tape.param(*w), tape.param(*b), eps);
        if (!pre && delta) n = ops::add_per_sample(n, *delta);
        return n;
    };

    Var<T> a = attention_forward(tape, normed(x, block.norm1_weight, block.norm1_bias, dev.attn_delta), block,
                                 positions, hooks.adapters);
    if (hooks.adapters.attn_adapter) a = (*hooks.adapters.attn_adapter)(tape, a);
    Var<T> x1 = ops::add(x, a);
    if (dev.attn_residual) x1 = ops::add_per_sample(x1, *dev.attn_residual);

    Var<T> h = block.fc1(tape, normed(x1, block.norm2_weight, block.norm2_bias, dev.mlp_delta));
    Var<T> m = block.fc2(tape, ops::gelu(h));
    if (hooks.adapters.mlp_adapter) m = (*hooks.adapters.mlp_adapter)(tape, m);
    Var<T> x2 = ops::add(x1, m);
    if (dev.mlp_residual) x2 = ops::add_per_sample(x2, *dev.mlp_residual);
    return x2;
}

template <typename T>
VisionTransformer<T>::VisionTransformer(const ViTConfig& cfg, ParameterStore<T>& store, const std::string& prefix,
                                        Rng& rng)
    : cfg_(cfg), prefix_(prefix) {
    cfg_.validate();
    const std::size_t D = cfg_.dim;
    const std::size_t hidden = D * cfg_.mlp_ratio;
    auto track = [&](Parameter<T>* p) {
        params_.push_back(p);
        return p;
    };
    auto track_linear = [&](Linear<T> l) {
        track(l.weight);
        if (l.bias) track(l.bias);
        trunc_normal(l.weight->tensor, T(0.02), rng);
        return l;
    };
    auto ones = [](Parameter<T>* p) {
        std::fill(p->tensor.data.begin(), p->tensor.data.end(), T(1));
        return p;
    };

    patch_embed_ = track_linear(Linear<T>::create(store, prefix + ".patch_embed", cfg_.patch_dim(), D));
    cls_token_ = track(&store.create(prefix + ".cls_token", Shape{D}));
    trunc_normal(cls_token_->tensor, T(0.02), rng);
    if (cfg_.pos_mode == PosMode::LearnedAbsolute) {
        pos_embed_ = track(&store.create(prefix + ".pos_embed", Shape{cfg_.num_patches(), D}));
        trunc_normal(pos_embed_->tensor, T(0.02), rng);
    }
    for (std::size_t l = 0; l < cfg_.depth; ++l) {
        const std::string bp = prefix + ".block" + std::to_string(l);
        TransformerBlock<T> blk;
        blk.heads = cfg_.heads;
        blk.ln_eps = cfg_.ln_eps;
        blk.norm1_weight = ones(track(&store.create(bp + ".norm1.weight", Shape{D})));
        blk.norm1_bias = track(&store.create(bp + ".norm1.bias", Shape{D}));
        blk.qkv = track_linear(Linear<T>::create(store, bp + ".attn.qkv", D, 3 * D));
        blk.proj = track_linear(Linear<T>::create(store, bp + ".attn.proj", D, D));
        blk.norm2_weight = ones(track(&store.create(bp + ".norm2.weight", Shape{D})));
        blk.norm2_bias = track(&store.create(bp + ".norm2.bias", Shape{D}));
        blk.fc1 = track_linear(Linear<T>::create(store, bp + ".mlp.fc1", D, hidden));
        blk.fc2 = track_linear(Linear<T>::create(store, bp + ".mlp.fc2", hidden, D));
        blocks_.push_back(blk);
    }
    norm_weight_ = ones(track(&store.create(prefix + ".norm.weight", Shape{D})));
    norm_bias_ = track(&store.create(prefix + ".norm.bias", Shape{D}));
}

template <typename T>
Var<T> VisionTransformer<T>::forward(Tape<T>& tape, const Tensor<T>& images, const Var<T>* extra,
                                     std::span<const BlockHooks<T>> hooks, std::vector<Var<T>>* taps) const {
    if (images.rank() != 4 || images.dim(1) != cfg_.channels || images.dim(2) != cfg_.image_h ||
        images.dim(3) != cfg_.image_w) {
        throw DimensionError("vit forward: images " + shape_str(images.shape) + " do not match config [B, " +
                             std::to_string(cfg_.channels) + ", " + std::to_string(cfg_.image_h) + ", " +
                             std::to_string(cfg_.image_w) + "]");
    }
    const std::size_t B = images.dim(0);
    if (cfg_.extra_tokens > 0 && extra == nullptr) {
        throw DataError("vit forward: config expects " + std::to_string(cfg_.extra_tokens) +
                        " extra token(s) (ship-size metadata) but none were given");
    }
    if (extra) {
        if (extra->shape() != Shape{B, cfg_.extra_tokens, cfg_.dim}) {
            throw DimensionError("vit forward: extra tokens " + shape_str(extra->shape()) + " expected " +
                                 shape_str(Shape{B, cfg_.extra_tokens, cfg_.dim}));
        }
    }
    if (!hooks.empty() && hooks.size() != blocks_.size()) {
        throw ContractError("vit forward: " + std::to_string(hooks.size()) + " hooks for " +
                            std::to_string(blocks_.size()) + " blocks");
    }

    Var<T> patches = tape.constant(patchify_batch(images, cfg_.patch));
    Var<T> tokens = patch_embed_(tape, patches);
    if (pos_embed_) tokens = ops::add(tokens, tape.param(*pos_embed_));
    std::vector<Var<T>> parts{ops::broadcast_batch(tape.param(*cls_token_), B)};
    if (extra) parts.push_back(*extra);
    parts.push_back(tokens);
    Var<T> x = ops::concat_tokens(parts);

    std::vector<std::size_t> positions;
    if (cfg_.pos_mode == PosMode::Rope) positions = token_positions(1 + cfg_.extra_tokens, cfg_.num_patches());

    for (std::size_t l = 0; l < blocks_.size(); ++l) {
        x = hooks.empty() ? block_forward(tape, x, blocks_[l], positions) : block_forward(tape, x, blocks_[l], positions, hooks[l]);
        if (taps) taps->push_back(x);
    }
    Var<T> first = ops::select_token(x, 0);
    return ops::layer_norm(first, tape.param(*norm_weight_), tape.param(*norm_bias_), static_cast<T>(cfg_.ln_eps));
}

template Tensor<float> patchify(const Tensor<float>&, std::size_t);
template Tensor<double> patchify(const Tensor<double>&, std::size_t);
template Tensor<float> patchify_batch(const Tensor<float>&, std::size_t);
template Tensor<double> patchify_batch(const Tensor<double>&, std::size_t);
template Var<float> attention_forward(Tape<float>&, const Var<float>&, const TransformerBlock<float>&,
                                      const std::vector<std::size_t>&, const BlockAdapters<float>&);
template Var<double> attention_forward(Tape<double>&, const Var<double>&, const TransformerBlock<double>&,
                                       const std::vector<std::size_t>&, const BlockAdapters<double>&);
template Var<float> block_forward(Tape<float>&, const Var<float>&, const TransformerBlock<float>&,
                                  const std::vector<std::size_t>&, const BlockHooks<float>&);
template Var<double> block_forward(Tape<double>&, const Var<double>&, const TransformerBlock<double>&,
                                   const std::vector<std::size_t>&, const BlockHooks<double>&);
template class VisionTransformer<float>;
template class VisionTransformer<double>;

}  // namespace dri
