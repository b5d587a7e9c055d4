#pragma once

#include <array>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "dri/checkpoint.hpp"
#include "dri/config.hpp"
#include "dri/datasets.hpp"
#include "dri/evaluation.hpp"
#include "dri/model.hpp"

namespace dri {

/// A manifest loaded from `<root>/manifest.csv` with its images cached and
/// train identities mapped to contiguous class indices.
class Dataset {
public:
    Dataset(const std::string& root, const ViTConfig& backbone);

    const Manifest& manifest() const { return manifest_; }
    const std::vector<SampleRecord>& train() const { return train_; }
    const std::vector<SampleRecord>& query() const { return query_; }
    const std::vector<SampleRecord>& gallery() const { return gallery_; }
    std::size_t num_train_ids() const { return label_of_.size(); }
    std::int64_t label(std::int64_t id) const;
    std::vector<std::string> modalities() const;
    std::uint64_t manifest_checksum() const { return manifest_checksum_; }

    /// [C, H, W] at the backbone resolution.
    const Tensor<float>& image(const std::string& path) { return cache_.get(path); }

private:
    Manifest manifest_;
    std::vector<SampleRecord> train_, query_, gallery_;
    std::map<std::int64_t, std::int64_t> label_of_;
    ImageCache cache_;
    std::uint64_t manifest_checksum_ = 0;
};

/// SST input row: (size / image diagonal, aspect). DataError if the record lacks either.
std::array<float, 2> size_token_input(const SampleRecord& r, const ViTConfig& backbone);

struct EpochLog {
    std::size_t epoch = 0;
    double triplet = 0, id = 0, total = 0;  // means over the epoch's steps
    double lr = 0;                          // at the last step
};

struct ProtocolResult {
    std::string protocol;
    MetricsReport metrics;
};

struct RunReport {
    std::string label;
    std::string mode;
    std::string plan;  // injection plan and modulator design for dri runs
    std::string schedule;
    std::vector<EpochLog> epochs;
    std::vector<ProtocolResult> baseline;
    std::vector<std::pair<std::size_t, std::vector<ProtocolResult>>> periodic;
    std::vector<ProtocolResult> final_metrics;
    ParamTable params;
    double seconds = 0;
    std::uint64_t backbone_before = 0;
    std::uint64_t backbone_after = 0;
    std::size_t pretrain_epochs = 0;

    KvDoc to_kv() const;
    std::string text() const { return to_kv().text(); }
};

/// Mean mAP over protocols whose query and gallery modalities are both set and differ.
double cross_modal_map(const std::vector<ProtocolResult>& results);

/// Combined checksum of every parameter whose name starts with `prefix`.
std::uint64_t params_checksum(const ParameterStore<float>& store, const std::string& prefix);

/// Retrieval features f_g for `records`, in order, computed in batches.
EmbeddingSet embed_records(const ReidModel<float>& model, Dataset& data, const std::vector<SampleRecord>& records,
                           std::size_t batch);

std::vector<ProtocolResult> evaluate_model(const ReidModel<float>& model, Dataset& data,
                                           const std::vector<std::string>& protocols, std::size_t batch);

/// Same-modality full fine-tuning of a fresh backbone; returns the backbone
/// tensors. Reads/writes `cfg.train.pretrain.cache` when set.
Checkpoint pretrain_backbone(const RunConfig& cfg, Dataset& data, std::ostream* log = nullptr);

struct TrainResult {
    RunReport report;
    std::unique_ptr<ReidModel<float>> model;
};

/// Builds the model, loads `backbone` when given (otherwise pretrains per
/// config), evaluates at epoch 0, trains, evaluates again.
/// NumericError on a non-finite loss.
TrainResult train_run(const RunConfig& cfg, Dataset& data, const Checkpoint* backbone = nullptr,
                      std::ostream* log = nullptr);

}  // namespace dri
