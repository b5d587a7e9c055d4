#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "dri/injection.hpp"
#include "dri/reid.hpp"
#include "dri/vit.hpp"

namespace dri {

enum class PeftMode { Frozen, FullFt, Lora, Adapter, Dri };

PeftMode parse_peft_mode(const std::string& s);
std::string to_string(PeftMode m);

struct LoraConfig {
    std::size_t rank = 4;
    double alpha = 4.0;
    bool target_qkv = true;
    bool target_proj = true;
};

struct AdapterConfig {
    std::size_t hidden = 16;
};

/// Exactly one adaptation mode; the other blocks are ignored.
struct PeftConfig {
    PeftMode mode = PeftMode::Dri;
    LoraConfig lora;
    AdapterConfig adapter;
    DriConfig dri;
};

struct ModelConfig {
    ViTConfig backbone;
    PeftConfig peft;
    /// Ship-size token after CLS.
    bool sst = false;
    std::size_t num_ids = 32;
    std::uint64_t seed = 42;

    /// Backbone geometry with the extra token slot filled in when SST is on.
    ViTConfig effective_backbone() const;
};

/// Frozen-able ViT backbone plus whichever adaptation the config selects,
/// an optional ship-size token encoder and the BNNeck head.
///
/// Each component draws its initial weights from its own seeded stream, so the
/// backbone is identical across modes for the same seed.
template <typename T>
class ReidModel {
public:
    explicit ReidModel(const ModelConfig& cfg);
    ReidModel(const ReidModel&) = delete;
    ReidModel& operator=(const ReidModel&) = delete;

    const ModelConfig& config() const { return cfg_; }
    ParameterStore<T>& store() { return store_; }
    const ParameterStore<T>& store() const { return store_; }
    const VisionTransformer<T>& backbone() const { return *backbone_; }
    const DomainInjector<T>* injector() const { return injector_.get(); }
    const std::vector<LoraAdapter<T>>& lora() const { return lora_; }
    const std::vector<BottleneckAdapter<T>>& adapters() const { return adapters_; }
    BnNeckHead<T>& head() { return *head_; }
    const BnNeckHead<T>& head() const { return *head_; }
    const SstEncoder<T>* sst() const { return sst_.get(); }

    /// Global feature f_g [B, D]. `meta` rows (size, aspect) are required when SST is on.
    Var<T> embed(Tape<T>& tape, const Tensor<T>& images, const std::vector<std::array<T, 2>>* meta = nullptr) const;

    /// Same forward with every adaptation bypassed (the plain frozen backbone).
    Var<T> embed_frozen(Tape<T>& tape, const Tensor<T>& images,
                        const std::vector<std::array<T, 2>>* meta = nullptr) const;

    /// Trainable parameters grouped by component, from the live store.
    ParamTable trainable_table() const;

private:
    std::vector<BlockHooks<T>> hooks(Tape<T>& tape, const Tensor<T>& images) const;

    ModelConfig cfg_;
    ParameterStore<T> store_;
    std::unique_ptr<VisionTransformer<T>> backbone_;
    std::unique_ptr<DomainInjector<T>> injector_;
    std::vector<LoraAdapter<T>> lora_;
    std::vector<BottleneckAdapter<T>> adapters_;
    std::unique_ptr<SstEncoder<T>> sst_;
    std::unique_ptr<BnNeckHead<T>> head_;
};

/// Sets trainable flags for `cfg.mode` (head and SST always trainable) and
/// returns the itemized trainable table. Throws ConfigError if the model was
/// assembled for a different mode.
template <typename T>
ParamTable apply_mode(ReidModel<T>& model, const PeftConfig& cfg);

/// Closed-form trainable counts for a configuration; no weights are allocated.
ParamTable trainable_param_count(const ModelConfig& cfg);

/// Component label used in parameter tables for a parameter name.
std::string component_of(const std::string& param_name);

/// Copies every parameter whose name starts with `prefix` from src to dst
/// (names and shapes must match). Returns the number of tensors copied.
template <typename T, typename U>
std::size_t copy_params(ParameterStore<T>& dst, const ParameterStore<U>& src, const std::string& prefix);

}  // namespace dri
