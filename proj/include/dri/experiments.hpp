#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "dri/config.hpp"
#include "dri/train.hpp"

namespace dri {

struct GridVariant {
    std::string label;
    RunConfig cfg;
};

struct GridRow {
    std::string label;
    RunReport report;
    /// Live trainable enumeration agreed with the closed form.
    bool params_match = false;
};

/// injection-sites, oe-shape, modulator-design, peft-compare.
const std::vector<std::string>& grid_names();

/// Variants of `base` in table row order. ConfigError for an unknown grid.
std::vector<GridVariant> grid_variants(const std::string& grid, const RunConfig& base);

/// Runs every variant on one dataset with a shared pretrained backbone.
std::vector<GridRow> run_grid(const std::string& grid, const RunConfig& base, Dataset& data,
                              std::ostream* log = nullptr);

/// Plain-text comparison table: label, cross-modal mAP, R1/R5/R10 of each protocol, params.
std::string format_grid(const std::vector<GridRow>& rows);

/// One Table-I-style line per protocol: mAP, R1, R5, R10, trainable params.
std::string format_metrics(const std::string& label, const std::vector<ProtocolResult>& results,
                           std::size_t trainable);

}  // namespace dri
