#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dri/optim.hpp"
#include "dri/tensor.hpp"

namespace dri {

inline constexpr std::int64_t kDistractorId = -1;

struct SampleRecord {
    std::string path;  // relative to the dataset root
    std::int64_t id = 0;
    std::string modality;
    std::optional<double> size;
    std::optional<double> aspect;

    bool operator==(const SampleRecord&) const = default;
};

enum class Split { Train, Query, Gallery };

Split parse_split(const std::string& s);
std::string to_string(Split s);

struct ManifestEntry {
    SampleRecord record;
    Split split = Split::Train;

    bool operator==(const ManifestEntry&) const = default;
};

/// CSV schema: `path,id,modality,split,size,aspect` (size/aspect may be empty).
struct Manifest {
    std::vector<ManifestEntry> entries;

    std::vector<SampleRecord> records(Split s) const;
    /// id >= -1, non-empty modality, no distractors in train, every query id in the gallery.
    void validate() const;

    bool operator==(const Manifest&) const = default;
};

inline constexpr const char* kManifestHeader = "path,id,modality,split,size,aspect";

Manifest parse_manifest_text(const std::string& text, const std::string& source = "<memory>");
Manifest parse_manifest(const std::string& path);
std::string write_manifest_text(const Manifest& m);
void write_manifest(const std::string& path, const Manifest& m);

struct SyntheticConfig {
    /// Identities with images; the last `test_ids` of them form the test split.
    std::size_t num_ids = 40;
    std::size_t test_ids = 8;
    /// Gallery-only identities written with id -1.
    std::size_t distractor_ids = 4;
    std::size_t images_per_id_per_modality = 6;
    std::size_t height = 32;
    std::size_t width = 32;
    std::uint64_t seed = 42;
    std::vector<std::string> modalities{"opt", "sar"};
    /// Per-image pose jitter.
    double max_rotation_deg = 8.0;
    double max_scale_jitter = 0.08;
    double max_shift_px = 1.5;
    /// Looks of the multiplicative speckle (1 = Exp(1) noise).
    std::size_t speckle_looks = 1;
    /// Weight of the gradient-magnitude (edge) rendering in modality B.
    double edge_weight = 1.0;

    void validate() const;
};

struct SyntheticSummary {
    std::size_t images = 0;
    std::size_t train_rows = 0;
    std::size_t query_rows = 0;
    std::size_t gallery_rows = 0;
};

/// Writes `<root>/imgs/*.pgm` and `<root>/manifest.csv`. Deterministic in cfg.
SyntheticSummary generate_synthetic(const SyntheticConfig& cfg, const std::string& root);

/// Renders one image as 8-bit gray (exposed for tests).
std::vector<std::uint8_t> render_synthetic(const SyntheticConfig& cfg, std::int64_t identity, std::size_t modality,
                                           std::size_t index);

/// Bilinear resampling of [C, H, W] with half-pixel centers.
Tensor<float> resize_bilinear(const Tensor<float>& image, std::size_t height, std::size_t width);

/// Images of a dataset root, decoded once and shared by path. A nonzero
/// height/width resizes on load.
class ImageCache {
public:
    ImageCache(std::string root, std::size_t channels, std::size_t height = 0, std::size_t width = 0)
        : root_(std::move(root)), channels_(channels), height_(height), width_(width) {}
    const Tensor<float>& get(const std::string& rel_path);
    const std::string& root() const { return root_; }

private:
    std::string root_;
    std::size_t channels_;
    std::size_t height_, width_;
    std::map<std::string, Tensor<float>> cache_;
};

/// P identities x K samples. Identities are drawn uniformly without
/// replacement; samples within an identity alternate modalities and fall back
/// to sampling with replacement when an identity has fewer than K images.
std::vector<SampleRecord> pk_sample(const std::vector<SampleRecord>& train, std::size_t P, std::size_t K, Rng& rng);

struct AugmentFlags {
    bool flip = false;
    bool crop = false;
    bool erase = false;

    static AugmentFlags for_profile(const std::string& profile);
};

struct EraseBox {
    std::size_t y = 0, x = 0, h = 0, w = 0;
};

Tensor<float> hflip(const Tensor<float>& image);
/// Samples a box of area fraction [0.02, 0.4] and aspect [0.3, 3.3] that fits
/// inside H x W; nullopt if no attempt fits.
std::optional<EraseBox> sample_erase_box(std::size_t H, std::size_t W, Rng& rng);
/// flip p=0.5, pad-4 random crop, random erase p=0.5. Identity when all flags are off.
Tensor<float> augment(const Tensor<float>& image, Rng& rng, const AugmentFlags& flags);

}  // namespace dri
