#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dri/datasets.hpp"
#include "dri/model.hpp"

namespace dri {

/// Line-oriented `dotted.key=value` document. `#` starts a comment line;
/// blank lines are ignored. Key order is preserved.
struct KvDoc {
    std::vector<std::pair<std::string, std::string>> entries;

    const std::string* find(const std::string& key) const;
    void set(const std::string& key, std::string value);
    std::string text() const;
};

/// Throws ConfigError with the line number on malformed lines or duplicate keys.
KvDoc parse_kv(const std::string& text, const std::string& source = "<memory>");

struct DatasetSection {
    std::string root = "data";
    /// "hoss" (flip + crop + erase) or "cmship" (no augmentation).
    std::string profile = "cmship";
    SyntheticConfig synthetic;
};

struct PretrainSection {
    /// Same-modality full fine-tuning of the backbone before the main run.
    std::size_t epochs = 0;
    std::string modality = "opt";
    double lr = 0.01;
    /// Backbone cache file; reused when present, written otherwise. Empty = no cache.
    std::string cache;
};

struct TrainSection {
    double lr = 0.0015;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    std::size_t p = 8;
    std::size_t k = 4;
    std::size_t epochs = 20;
    /// 0 = one pass worth of batches over the train split.
    std::size_t iters_per_epoch = 0;
    double margin = kDefaultMargin;
    std::uint64_t seed = 42;
    double warmup_fraction = 0.05;
    /// Evaluate every n epochs (0 = only before and after training).
    std::size_t eval_every = 0;
    PretrainSection pretrain;
};

struct EvalSection {
    std::vector<std::string> protocols{"all", "opt->sar", "sar->opt"};
    std::size_t batch = 64;
};

struct RunConfig {
    DatasetSection dataset;
    ModelConfig model;
    TrainSection train;
    EvalSection eval;

    /// Cross-field checks (batch geometry, backbone shape, protocol names).
    void validate() const;
    KvDoc to_kv() const;
    std::string text() const { return to_kv().text(); }
};

/// Unknown keys are rejected. Missing keys keep their defaults.
RunConfig parse_run_config(const KvDoc& doc);
RunConfig parse_run_config_text(const std::string& text, const std::string& source = "<memory>");
RunConfig load_run_config(const std::string& path);

/// Every key the schema accepts, in canonical order.
std::vector<std::string> run_config_keys();

}  // namespace dri
