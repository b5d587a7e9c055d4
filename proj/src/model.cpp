#include "dri/model.hpp"

#include <algorithm>
#include <map>

namespace dri {

PeftMode parse_peft_mode(const std::string& s) {
    if (s == "frozen") return PeftMode::Frozen;
    if (s == "full-ft") return PeftMode::FullFt;
    if (s == "lora") return PeftMode::Lora;
    if (s == "adapter") return PeftMode::Adapter;
    if (s == "dri") return PeftMode::Dri;
    throw ConfigError("unknown peft mode '" + s + "' (frozen, full-ft, lora, adapter, dri)");
}

std::string to_string(PeftMode m) {
    switch (m) {
        case PeftMode::Frozen:
            return "frozen";
        case PeftMode::FullFt:
            return "full-ft";
        case PeftMode::Lora:
            return "lora";
        case PeftMode::Adapter:
            return "adapter";
        case PeftMode::Dri:
            return "dri";
    }
    return "?";
}

ViTConfig ModelConfig::effective_backbone() const {
    ViTConfig c = backbone;
    c.extra_tokens = sst ? 1 : 0;
    return c;
}

namespace {

Rng stream(std::uint64_t seed, std::uint64_t tag) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(tag)};
    return Rng(seq);
}

const std::vector<std::string>& component_order() {
    static const std::vector<std::string> order{"backbone", "dri.oe", "dri.modulators", "lora",
                                                "adapter",  "sst",    "head.classifier", "head.bn"};
    return order;
}

ParamTable make_table(const std::map<std::string, std::size_t>& counts) {
    ParamTable t;
    for (const auto& c : component_order()) {
        auto it = counts.find(c);
        if (it != counts.end() && it->second > 0) t.items.push_back({c, it->second});
    }
    return t;
}

}  // namespace

std::string component_of(const std::string& name) {
    auto starts = [&](const char* p) { return name.rfind(p, 0) == 0; };
    if (starts("dri.oe.")) return "dri.oe";
    if (starts("dri.mod.")) return "dri.modulators";
    if (starts("head.classifier")) return "head.classifier";
    if (starts("head.bn")) return "head.bn";
    return name.substr(0, name.find('.'));
}

template <typename T>
ReidModel<T>::ReidModel(const ModelConfig& cfg) : cfg_(cfg) {
    const ViTConfig bb = cfg_.effective_backbone();
    {
        Rng rng = stream(cfg_.seed, 1);
        backbone_ = std::make_unique<VisionTransformer<T>>(bb, store_, "backbone", rng);
    }
    Rng peft_rng = stream(cfg_.seed, 2);
    switch (cfg_.peft.mode) {
        case PeftMode::Dri:
            injector_ = std::make_unique<DomainInjector<T>>(cfg_.peft.dri, bb, store_, peft_rng);
            break;
        case PeftMode::Lora:
            for (std::size_t l = 0; l < bb.depth; ++l) {
                const auto& blk = backbone_->blocks()[l];
                const std::string p = "lora.block" + std::to_string(l);
                const T alpha = static_cast<T>(cfg_.peft.lora.alpha);
                if (cfg_.peft.lora.target_qkv)
                    lora_.push_back(LoraAdapter<T>::create(store_, p + ".qkv", blk.qkv, cfg_.peft.lora.rank, alpha, peft_rng));
                if (cfg_.peft.lora.target_proj)
                    lora_.push_back(LoraAdapter<T>::create(store_, p + ".proj", blk.proj, cfg_.peft.lora.rank, alpha, peft_rng));
            }
            break;
        case PeftMode::Adapter:
            if (cfg_.peft.adapter.hidden == 0) throw ConfigError("adapter hidden width must be positive");
            for (std::size_t l = 0; l < bb.depth; ++l) {
                const std::string p = "adapter.block" + std::to_string(l);
                adapters_.push_back(BottleneckAdapter<T>::create(store_, p + ".attn", bb.dim, cfg_.peft.adapter.hidden, peft_rng));
                adapters_.push_back(BottleneckAdapter<T>::create(store_, p + ".mlp", bb.dim, cfg_.peft.adapter.hidden, peft_rng));
            }
            break;
        default:
            break;
    }
    if (cfg_.sst) {
        Rng rng = stream(cfg_.seed, 3);
        sst_ = std::make_unique<SstEncoder<T>>(bb.dim, store_, rng);
    }
    Rng head_rng = stream(cfg_.seed, 4);
    head_ = std::make_unique<BnNeckHead<T>>(bb.dim, cfg_.num_ids, store_, head_rng);
    apply_mode(*this, cfg_.peft);
}

template <typename T>
std::vector<BlockHooks<T>> ReidModel<T>::hooks(Tape<T>& tape, const Tensor<T>& images) const {
    const std::size_t L = backbone_->blocks().size();
    std::vector<BlockHooks<T>> out(L);
    if (injector_) {
        Var<T> f_d = injector_->encode_domain(tape, images);
        auto devs = injector_->deviations(tape, f_d);
        for (std::size_t l = 0; l < L; ++l) out[l].deviation = std::move(devs[l]);
    }
    for (const auto& ad : lora_) {
        // target names look like backbone.block3.attn.qkv.weight
        const auto& t = ad.target;
        const std::size_t start = t.find(".block") + 6;
        const std::size_t l = std::stoul(t.substr(start, t.find('.', start) - start));
        if (t.find(".qkv.") != std::string::npos) {
            out[l].adapters.qkv_lora = &ad;
        } else {
            out[l].adapters.proj_lora = &ad;
        }
    }
    for (std::size_t i = 0; i < adapters_.size(); ++i) {
        auto& a = out[i / 2].adapters;
        (i % 2 == 0 ? a.attn_adapter : a.mlp_adapter) = &adapters_[i];
    }
    return out;
}

template <typename T>
Var<T> ReidModel<T>::embed(Tape<T>& tape, const Tensor<T>& images, const std::vector<std::array<T, 2>>* meta) const {
    std::optional<Var<T>> extra;
    if (sst_) {
        if (!meta) throw DataError("model uses the ship-size token but no size metadata was supplied");
        extra = sst_->forward(tape, *meta);
    }
    auto hk = hooks(tape, images);
    return backbone_->forward(tape, images, extra ? &*extra : nullptr, hk);
}

template <typename T>
Var<T> ReidModel<T>::embed_frozen(Tape<T>& tape, const Tensor<T>& images,
                                  const std::vector<std::array<T, 2>>* meta) const {
    std::optional<Var<T>> extra;
    if (sst_) {
        if (!meta) throw DataError("model uses the ship-size token but no size metadata was supplied");
        extra = sst_->forward(tape, *meta);
    }
    return backbone_->forward(tape, images, extra ? &*extra : nullptr);
}

template <typename T>
ParamTable ReidModel<T>::trainable_table() const {
    std::map<std::string, std::size_t> counts;
    for (const auto& p : store_.params()) {
        if (p->trainable) counts[component_of(p->name)] += p->tensor.size();
    }
    return make_table(counts);
}

template <typename T>
ParamTable apply_mode(ReidModel<T>& model, const PeftConfig& cfg) {
    const PeftMode built = model.config().peft.mode;
    const bool compatible = cfg.mode == built || cfg.mode == PeftMode::Frozen || cfg.mode == PeftMode::FullFt;
    if (!compatible) {
        throw ConfigError("cannot switch a model assembled for '" + to_string(built) + "' to '" + to_string(cfg.mode) +
                          "'");
    }
    for (const auto& p : model.store().params()) {
        const std::string c = component_of(p->name);
        bool on = c == "head.classifier" || c == "head.bn" || c == "sst";
        switch (cfg.mode) {
            case PeftMode::Frozen:
                break;
            case PeftMode::FullFt:
                on = on || c == "backbone";
                break;
            case PeftMode::Lora:
                on = on || c == "lora";
                break;
            case PeftMode::Adapter:
                on = on || c == "adapter";
                break;
            case PeftMode::Dri:
                on = on || c == "dri.oe" || c == "dri.modulators";
                break;
        }
        p->set_trainable(on);
    }
    return model.trainable_table();
}

ParamTable trainable_param_count(const ModelConfig& cfg) {
    const ViTConfig bb = cfg.effective_backbone();
    const std::size_t D = bb.dim, L = bb.depth;
    std::map<std::string, std::size_t> counts;
    counts["head.classifier"] = D * cfg.num_ids;
    counts["head.bn"] = D;
    if (cfg.sst) counts["sst"] = 2 * D + D;
    switch (cfg.peft.mode) {
        case PeftMode::Frozen:
            break;
        case PeftMode::FullFt: {
            std::size_t n = bb.patch_dim() * D + D;  // patch embedding
            n += D;                                  // CLS token
            if (bb.pos_mode == PosMode::LearnedAbsolute) n += bb.num_patches() * D;
            n += L * vit_block_params(D, bb.mlp_ratio);
            n += 2 * D;  // final norm
            counts["backbone"] = n;
            break;
        }
        case PeftMode::Lora: {
            const std::size_t r = cfg.peft.lora.rank;
            std::size_t per_block = 0;
            if (cfg.peft.lora.target_qkv) per_block += r * (D + 3 * D);
            if (cfg.peft.lora.target_proj) per_block += r * (D + D);
            counts["lora"] = L * per_block;
            break;
        }
        case PeftMode::Adapter: {
            const std::size_t h = cfg.peft.adapter.hidden;
            counts["adapter"] = 2 * L * (D * h + h + h * D + D);
            break;
        }
        case PeftMode::Dri:
            counts["dri.oe"] = encoder_params(cfg.peft.dri.encoder, bb);
            counts["dri.modulators"] = modulator_params(cfg.peft.dri, bb);
            break;
    }
    return make_table(counts);
}

template <typename T, typename U>
std::size_t copy_params(ParameterStore<T>& dst, const ParameterStore<U>& src, const std::string& prefix) {
    std::size_t n = 0;
    for (const auto& p : src.params()) {
        if (p->name.rfind(prefix, 0) != 0) continue;
        Parameter<T>* d = dst.find(p->name);
        if (!d) throw DataError("copy_params: destination has no parameter " + p->name);
        if (d->tensor.shape != p->tensor.shape) {
            throw DimensionError("copy_params: " + p->name + " is " + shape_str(d->tensor.shape) + " but source is " +
                                 shape_str(p->tensor.shape));
        }
        std::transform(p->tensor.data.begin(), p->tensor.data.end(), d->tensor.data.begin(),
                       [](U v) { return static_cast<T>(v); });
        ++n;
    }
    return n;
}

template class ReidModel<float>;
template class ReidModel<double>;
template ParamTable apply_mode(ReidModel<float>&, const PeftConfig&);
template ParamTable apply_mode(ReidModel<double>&, const PeftConfig&);
template std::size_t copy_params(ParameterStore<float>&, const ParameterStore<float>&, const std::string&);
template std::size_t copy_params(ParameterStore<double>&, const ParameterStore<float>&, const std::string&);
template std::size_t copy_params(ParameterStore<float>&, const ParameterStore<double>&, const std::string&);
template std::size_t copy_params(ParameterStore<double>&, const ParameterStore<double>&, const std::string&);

}  // namespace dri
