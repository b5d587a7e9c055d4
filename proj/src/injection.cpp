#include "dri/injection.hpp"

#include <cmath>

namespace dri {

ViTConfig OffsetEncoderConfig::vit_config(const ViTConfig& backbone) const {
    ViTConfig c;
    c.depth = depth;
    c.dim = dim;
    c.heads = heads;
    c.mlp_ratio = mlp_ratio;
    c.patch = patch == 0 ? backbone.patch : patch;
    c.image_h = backbone.image_h;
    c.image_w = backbone.image_w;
    c.channels = backbone.channels;
    c.pos_mode = PosMode::Rope;
    c.extra_tokens = 0;
    c.ln_eps = backbone.ln_eps;
    return c;
}

namespace {

struct LocationName {
    InjectionLocation loc;
    const char* name;
};

constexpr LocationName kLocations[] = {
    {InjectionLocation::PostNorm, "post-norm"},
    {InjectionLocation::PreNorm, "pre-norm"},
    {InjectionLocation::ResidualOnly, "residual-only"},
    {InjectionLocation::ResidualPostNorm, "residual+post-norm"},
    {InjectionLocation::ResidualPreNorm, "residual+pre-norm"},
};

}  // namespace

InjectionPlan InjectionPlan::parse(const std::string& name) {
    const auto slash = name.find('/');
    if (slash == std::string::npos) throw ConfigError("injection plan '" + name + "' must look like target/location");
    const std::string tgt = name.substr(0, slash), loc = name.substr(slash + 1);
    InjectionPlan p;
    if (tgt == "attn") {
        p.target = InjectionTarget::AttnOnly;
    } else if (tgt == "mlp") {
        p.target = InjectionTarget::MlpOnly;
    } else if (tgt == "both") {
        p.target = InjectionTarget::Both;
    } else {
        throw ConfigError("unknown injection target '" + tgt + "' (attn, mlp, both)");
    }
    for (const auto& l : kLocations) {
        if (loc == l.name) {
            p.location = l.loc;
            return p;
        }
    }
    throw ConfigError("unknown injection location '" + loc + "'");
}

std::string InjectionPlan::name() const {
    std::string t = target == InjectionTarget::AttnOnly ? "attn" : target == InjectionTarget::MlpOnly ? "mlp" : "both";
    for (const auto& l : kLocations) {
        if (l.loc == location) return t + "/" + l.name;
    }
    return t;
}

bool InjectionPlan::has_site(Site s) const {
    if (target == InjectionTarget::Both) return true;
    return (s == Site::Attn) == (target == InjectionTarget::AttnOnly);
}

bool InjectionPlan::has_slot(Slot s) const {
    switch (location) {
        case InjectionLocation::PostNorm:
        case InjectionLocation::PreNorm:
            return s == Slot::Norm;
        case InjectionLocation::ResidualOnly:
            return s == Slot::Residual;
        default:
            return true;
    }
}

NormSlot InjectionPlan::norm_slot() const {
    return (location == InjectionLocation::PreNorm || location == InjectionLocation::ResidualPreNorm)
               ? NormSlot::PreNorm
               : NormSlot::PostNorm;
}

std::size_t InjectionPlan::sites() const {
    return target == InjectionTarget::Both ? 2 : 1;
}

std::size_t InjectionPlan::slots() const {
    return (has_slot(Slot::Norm) ? 1 : 0) + (has_slot(Slot::Residual) ? 1 : 0);
}

const std::vector<std::string>& injection_grid_names() {
    static const std::vector<std::string> names{
        "attn/post-norm",          "mlp/post-norm",          "both/post-norm",         "both/pre-norm",
        "both/residual-only",      "both/residual+pre-norm", "both/residual+post-norm",
    };
    return names;
}

ModulatorKind parse_modulator_kind(const std::string& s) {
    if (s == "linear") return ModulatorKind::Linear;
    if (s == "mlp") return ModulatorKind::Mlp;
    throw ConfigError("unknown modulator structure '" + s + "' (linear, mlp)");
}

ModulatorInit parse_modulator_init(const std::string& s) {
    if (s == "zero") return ModulatorInit::Zero;
    if (s == "random") return ModulatorInit::Random;
    throw ConfigError("unknown modulator init '" + s + "' (zero, random)");
}

std::string to_string(ModulatorKind k) {
    return k == ModulatorKind::Linear ? "linear" : "mlp";
}

std::string to_string(ModulatorInit i) {
    return i == ModulatorInit::Zero ? "zero" : "random";
}

template <typename T>
std::size_t Modulator<T>::param_count() const {
    return first.param_count() + (kind == ModulatorKind::Mlp ? second.param_count() : 0);
}

template <typename T>
Var<T> Modulator<T>::operator()(Tape<T>& tape, const Var<T>& f_d) const {
    if (kind == ModulatorKind::Linear) return first(tape, f_d);
    return second(tape, ops::gelu(first(tape, f_d)));
}

namespace {

// Default affine-layer init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weight and bias.
template <typename T>
void default_linear_init(Linear<T>& l, Rng& rng) {
    const T bound = T(1) / std::sqrt(static_cast<T>(l.in_features()));
    uniform(l.weight->tensor, -bound, bound, rng);
    if (l.bias) uniform(l.bias->tensor, -bound, bound, rng);
}

}  // namespace

template <typename T>
DomainInjector<T>::DomainInjector(const DriConfig& cfg, const ViTConfig& backbone, ParameterStore<T>& store, Rng& rng)
    : cfg_(cfg), backbone_depth_(backbone.depth), encoder_(cfg.encoder.vit_config(backbone), store, "dri.oe", rng) {
    if (cfg.encoder.depth < 1) throw ConfigError("offset encoder depth must be >= 1");
    const std::size_t D = backbone.dim;
    const std::size_t E = cfg.encoder.dim;
    const std::size_t hidden = cfg.modulator.mlp_hidden == 0 ? E : cfg.modulator.mlp_hidden;
    for (std::size_t l = 0; l < backbone.depth; ++l) {
        for (Site site : {Site::Attn, Site::Mlp}) {
            if (!cfg.plan.has_site(site)) continue;
            for (Slot slot : {Slot::Norm, Slot::Residual}) {
                if (!cfg.plan.has_slot(slot)) continue;
                std::string name = "dri.mod.block" + std::to_string(l) + (site == Site::Attn ? ".attn" : ".mlp");
                if (slot == Slot::Residual) name += ".residual";
                Modulator<T> m;
                m.layer = l;
                m.site = site;
                m.slot = slot;
                m.kind = cfg.modulator.kind;
                if (m.kind == ModulatorKind::Linear) {
                    m.first = Linear<T>::create(store, name, E, D);
                    if (cfg.modulator.init == ModulatorInit::Random) default_linear_init(m.first, rng);
                } else {
                    m.first = Linear<T>::create(store, name + ".fc1", E, hidden);
                    m.second = Linear<T>::create(store, name + ".fc2", hidden, D);
                    // Zero init keeps the hidden layer live and zeroes only the output layer.
                    default_linear_init(m.first, rng);
                    if (cfg.modulator.init == ModulatorInit::Random) default_linear_init(m.second, rng);
                }
                modulators_.push_back(m);
            }
        }
    }
}

template <typename T>
std::vector<Parameter<T>*> DomainInjector<T>::parameters() const {
    auto out = encoder_.parameters();
    for (const auto& m : modulators_) {
        out.push_back(m.first.weight);
        out.push_back(m.first.bias);
        if (m.kind == ModulatorKind::Mlp) {
            out.push_back(m.second.weight);
            out.push_back(m.second.bias);
        }
    }
    return out;
}

template <typename T>
Var<T> DomainInjector<T>::encode_domain(Tape<T>& tape, const Tensor<T>& images) const {
    return encoder_.forward(tape, images);
}

template <typename T>
const Modulator<T>* DomainInjector<T>::find(std::size_t layer, Site site, Slot slot) const {
    for (const auto& m : modulators_) {
        if (m.layer == layer && m.site == site && m.slot == slot) return &m;
    }
    return nullptr;
}

template <typename T>
Var<T> DomainInjector<T>::modulate(Tape<T>& tape, const Var<T>& f_d, std::size_t layer, Site site, Slot slot) const {
    const Modulator<T>* m = find(layer, site, slot);
    if (!m) {
        throw PlanError("plan " + cfg_.plan.name() + " has no " + (site == Site::Attn ? "attn" : "mlp") +
                        (slot == Slot::Residual ? " residual" : "") + " modulator for layer " + std::to_string(layer));
    }
    return (*m)(tape, f_d);
}

template <typename T>
std::vector<BlockDeviation<T>> DomainInjector<T>::deviations(Tape<T>& tape, const Var<T>& f_d) const {
    std::vector<BlockDeviation<T>> out(backbone_depth_);
    for (auto& d : out) d.slot = cfg_.plan.norm_slot();
    for (const auto& m : modulators_) {
        Var<T> delta = m(tape, f_d);
        auto& d = out[m.layer];
        if (m.slot == Slot::Norm) {
            (m.site == Site::Attn ? d.attn_delta : d.mlp_delta) = delta;
        } else {
            (m.site == Site::Attn ? d.attn_residual : d.mlp_residual) = delta;
        }
    }
    return out;
}

std::size_t ParamTable::total() const {
    std::size_t n = 0;
    for (const auto& i : items) n += i.count;
    return n;
}

std::size_t ParamTable::get(const std::string& component) const {
    for (const auto& i : items) {
        if (i.component == component) return i.count;
    }
    return 0;
}

std::size_t vit_block_params(std::size_t D, std::size_t r) {
    const std::size_t qkv = D * 3 * D + 3 * D;
    const std::size_t proj = D * D + D;
    const std::size_t fc1 = D * r * D + r * D;
    const std::size_t fc2 = r * D * D + D;
    const std::size_t norms = 2 * 2 * D;
    return qkv + proj + fc1 + fc2 + norms;
}

std::size_t encoder_params(const OffsetEncoderConfig& oe, const ViTConfig& backbone) {
    const ViTConfig c = oe.vit_config(backbone);
    const std::size_t E = oe.dim;
    const std::size_t patch_embed = c.patch_dim() * E + E;
    const std::size_t domain_token = E;
    const std::size_t final_norm = 2 * E;
    return patch_embed + oe.depth * vit_block_params(E, oe.mlp_ratio) + domain_token + final_norm;
}

std::size_t modulator_params(const DriConfig& cfg, const ViTConfig& backbone) {
    const std::size_t D = backbone.dim, E = cfg.encoder.dim;
    const std::size_t hidden = cfg.modulator.mlp_hidden == 0 ? E : cfg.modulator.mlp_hidden;
    const std::size_t each = cfg.modulator.kind == ModulatorKind::Linear ? E * D + D : (E * hidden + hidden) + (hidden * D + D);
    return cfg.plan.sites() * cfg.plan.slots() * backbone.depth * each;
}

template struct Modulator<float>;
template struct Modulator<double>;
template class DomainInjector<float>;
template class DomainInjector<double>;

}  // namespace dri
