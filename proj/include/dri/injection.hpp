#pragma once

#include <string>
#include <vector>

#include "dri/errors.hpp"
#include "dri/vit.hpp"

namespace dri {

struct OffsetEncoderConfig {
    std::size_t depth = 2;
    std::size_t dim = 64;
    std::size_t heads = 2;
    std::size_t mlp_ratio = 4;
    /// 0 means "same patch size as the backbone".
    std::size_t patch = 0;

    /// Encoder geometry for a given backbone: same image, rotary positions.
    ViTConfig vit_config(const ViTConfig& backbone) const;
};

enum class InjectionTarget { AttnOnly, MlpOnly, Both };
enum class InjectionLocation { PostNorm, PreNorm, ResidualOnly, ResidualPostNorm, ResidualPreNorm };
enum class Site { Attn, Mlp };
/// `Norm` deviations go next to LayerNorm (post or pre per the plan); `Residual`
/// deviations are added to the residual sum.
enum class Slot { Norm, Residual };

struct InjectionPlan {
    InjectionTarget target = InjectionTarget::Both;
    InjectionLocation location = InjectionLocation::PostNorm;

    /// Parses "both/post-norm", "attn/post-norm", "mlp/residual+pre-norm", ...
    static InjectionPlan parse(const std::string& name);
    std::string name() const;

    bool has_site(Site s) const;
    bool has_slot(Slot s) const;
    NormSlot norm_slot() const;
    std::size_t sites() const;
    std::size_t slots() const;
};

/// Row names of the insertion-position ablation, in table order.
const std::vector<std::string>& injection_grid_names();

enum class ModulatorKind { Linear, Mlp };
enum class ModulatorInit { Zero, Random };

ModulatorKind parse_modulator_kind(const std::string& s);
ModulatorInit parse_modulator_init(const std::string& s);
std::string to_string(ModulatorKind k);
std::string to_string(ModulatorInit i);

struct ModulatorConfig {
    ModulatorKind kind = ModulatorKind::Linear;
    ModulatorInit init = ModulatorInit::Zero;
    /// Hidden width of the MLP variant; 0 means the encoder width.
    std::size_t mlp_hidden = 0;
};

/// Per-(layer, site, slot) map from the domain representation f_d [B, D_oe]
/// to a feature deviation [B, D]. Linear: W f_d + b.
template <typename T>
struct Modulator {
    std::size_t layer = 0;
    Site site = Site::Attn;
    Slot slot = Slot::Norm;
    ModulatorKind kind = ModulatorKind::Linear;
    Linear<T> first;
    Linear<T> second;  // MLP variant only

    std::size_t param_count() const;
    Var<T> operator()(Tape<T>& tape, const Var<T>& f_d) const;
};

class PlanError : public ContractError {
public:
    using ContractError::ContractError;
};

struct DriConfig {
    OffsetEncoderConfig encoder;
    InjectionPlan plan;
    ModulatorConfig modulator;
};

/// Offset Encoder + Modulators + plan. Owns nothing; parameters live in the
/// model's store under "dri.oe.*" and "dri.mod.*".
template <typename T>
class DomainInjector {
public:
    DomainInjector(const DriConfig& cfg, const ViTConfig& backbone, ParameterStore<T>& store, Rng& rng);

    const DriConfig& config() const { return cfg_; }
    const VisionTransformer<T>& encoder() const { return encoder_; }
    const std::vector<Modulator<T>>& modulators() const { return modulators_; }
    std::vector<Parameter<T>*> parameters() const;

    /// f_d = Norm(z_L^0): the final-normed domain token, [B, D_oe].
    Var<T> encode_domain(Tape<T>& tape, const Tensor<T>& images) const;

    const Modulator<T>* find(std::size_t layer, Site site, Slot slot = Slot::Norm) const;
    /// Throws PlanError when the plan allocates no modulator for (layer, site, slot).
    Var<T> modulate(Tape<T>& tape, const Var<T>& f_d, std::size_t layer, Site site, Slot slot = Slot::Norm) const;

    /// One deviation set per backbone block, all derived from the same f_d.
    std::vector<BlockDeviation<T>> deviations(Tape<T>& tape, const Var<T>& f_d) const;

private:
    DriConfig cfg_;
    std::size_t backbone_depth_;
    VisionTransformer<T> encoder_;
    std::vector<Modulator<T>> modulators_;
};

/// One line of an itemized parameter table.
struct ParamItem {
    std::string component;
    std::size_t count = 0;
};

struct ParamTable {
    std::vector<ParamItem> items;
    std::size_t total() const;
    std::size_t get(const std::string& component) const;
};

/// Closed-form counts (no allocation) for the encoder pieces.
std::size_t vit_block_params(std::size_t dim, std::size_t mlp_ratio);
std::size_t encoder_params(const OffsetEncoderConfig& oe, const ViTConfig& backbone);
std::size_t modulator_params(const DriConfig& cfg, const ViTConfig& backbone);

}  // namespace dri
