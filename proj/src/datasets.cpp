#include "dri/datasets.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "dri/errors.hpp"
#include "dri/pnm.hpp"

namespace dri {

Split parse_split(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "query") return Split::Query;
    if (s == "gallery") return Split::Gallery;
    throw DataError("unknown split '" + s + "' (train, query, gallery)");
}

std::string to_string(Split s) {
    switch (s) {
        case Split::Train:
            return "train";
        case Split::Query:
            return "query";
        case Split::Gallery:
            return "gallery";
    }
    return "?";
}

std::vector<SampleRecord> Manifest::records(Split s) const {
    std::vector<SampleRecord> out;
    for (const auto& e : entries)
        if (e.split == s) out.push_back(e.record);
    return out;
}

void Manifest::validate() const {
    std::set<std::int64_t> gallery_ids;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto& r = entries[i].record;
        const std::string where = "manifest row " + std::to_string(i + 1) + " (" + r.path + ")";
        if (r.path.empty()) throw DataError(where + ": empty path");
        if (r.id < kDistractorId) throw DataError(where + ": id " + std::to_string(r.id) + " is below -1");
        if (r.modality.empty()) throw DataError(where + ": empty modality");
        if (entries[i].split == Split::Train && r.id == kDistractorId)
            throw DataError(where + ": distractor id -1 in the train split");
        if (entries[i].split == Split::Gallery) gallery_ids.insert(r.id);
    }
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto& e = entries[i];
        if (e.split == Split::Query && !gallery_ids.contains(e.record.id)) {
            throw DataError("manifest row " + std::to_string(i + 1) + " (" + e.record.path + "): query id " +
                            std::to_string(e.record.id) + " does not appear in the gallery");
        }
    }
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t comma = line.find(',', start);
        out.push_back(line.substr(start, comma - start));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

}  // namespace

Manifest parse_manifest_text(const std::string& text, const std::string& source) {
    static const char* columns[] = {"path", "id", "modality", "split", "size", "aspect"};
    Manifest m;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    bool header_seen = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!header_seen) {
            if (line != kManifestHeader) {
                throw ParseError(source + ":" + std::to_string(lineno) + ": expected header '" + kManifestHeader +
                                 "', got '" + line + "'");
            }
            header_seen = true;
            continue;
        }
        if (line.empty()) continue;
        const auto f = split_csv(line);
        auto fail = [&](std::size_t col, const std::string& msg) {
            return ParseError(source + ":" + std::to_string(lineno) + ": column " + std::to_string(col + 1) + " (" +
                              columns[col] + "): " + msg);
        };
        if (f.size() != 6) {
            throw ParseError(source + ":" + std::to_string(lineno) + ": expected 6 columns, found " +
                             std::to_string(f.size()));
        }
        ManifestEntry e;
        e.record.path = f[0];
        if (f[0].empty()) throw fail(0, "empty path");
        {
            std::int64_t id = 0;
            auto [p, ec] = std::from_chars(f[1].data(), f[1].data() + f[1].size(), id);
            if (ec != std::errc() || p != f[1].data() + f[1].size() || f[1].empty())
                throw fail(1, "'" + f[1] + "' is not an integer");
            e.record.id = id;
        }
        e.record.modality = f[2];
        try {
            e.split = parse_split(f[3]);
        } catch (const DataError& err) {
            throw fail(3, err.what());
        }
        for (std::size_t col : {std::size_t{4}, std::size_t{5}}) {
            if (f[col].empty()) continue;
            double v = 0;
            auto [p, ec] = std::from_chars(f[col].data(), f[col].data() + f[col].size(), v);
            if (ec != std::errc() || p != f[col].data() + f[col].size())
                throw fail(col, "'" + f[col] + "' is not a number");
            (col == 4 ? e.record.size : e.record.aspect) = v;
        }
        m.entries.push_back(std::move(e));
    }
    if (!header_seen) throw ParseError(source + ": empty manifest (missing header)");
    m.validate();
    return m;
}

Manifest parse_manifest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open manifest " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_manifest_text(ss.str(), path);
}

std::string write_manifest_text(const Manifest& m) {
    std::string out = std::string(kManifestHeader) + "\n";
    for (const auto& e : m.entries) {
        const auto& r = e.record;
        out += r.path + "," + std::to_string(r.id) + "," + r.modality + "," + to_string(e.split) + ",";
        if (r.size) out += format_double(*r.size);
        out += ",";
        if (r.aspect) out += format_double(*r.aspect);
        out += "\n";
    }
    return out;
}

void write_manifest(const std::string& path, const Manifest& m) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write manifest " + path);
    out << write_manifest_text(m);
    if (!out) throw DataError("write failed for " + path);
}

void SyntheticConfig::validate() const {
    if (num_ids < 2) throw ConfigError("synthetic num_ids must be >= 2 (got " + std::to_string(num_ids) + ")");
    if (test_ids < 1 || test_ids >= num_ids)
        throw ConfigError("synthetic test_ids must be in [1, num_ids) (got " + std::to_string(test_ids) + ")");
    if (images_per_id_per_modality < 1) throw ConfigError("synthetic images_per_id_per_modality must be >= 1");
    if (height < 8 || width < 8) throw ConfigError("synthetic images must be at least 8x8");
    if (modalities.empty()) throw ConfigError("synthetic modality list is empty");
    std::set<std::string> seen;
    for (const auto& m : modalities) {
        if (m.empty() || m.find(',') != std::string::npos) throw ConfigError("bad modality tag '" + m + "'");
        if (!seen.insert(m).second) throw ConfigError("duplicate modality '" + m + "'");
    }
    if (speckle_looks < 1) throw ConfigError("speckle_looks must be >= 1");
    if (max_scale_jitter < 0 || max_scale_jitter >= 0.5) throw ConfigError("max_scale_jitter must be in [0, 0.5)");
}

namespace {

struct Deck {
    double center, half_len, half_width, level;
};

struct ShipLatent {
    double length, width, heading, hull_level, bow;
    std::vector<Deck> decks;
    std::vector<double> stripes;
};

Rng seeded(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(c)};
    return Rng(seq);
}

double unif(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

ShipLatent make_latent(const SyntheticConfig& cfg, std::uint64_t identity) {
    Rng rng = seeded(cfg.seed, identity, 0x5a11, 0);
    const double extent = static_cast<double>(std::min(cfg.height, cfg.width));
    ShipLatent s;
    s.length = unif(rng, 0.45, 0.8) * extent;
    s.width = unif(rng, 0.14, 0.3) * s.length;
    s.heading = unif(rng, 0.0, std::numbers::pi);
    s.hull_level = unif(rng, 0.4, 0.75);
    s.bow = unif(rng, 0.1, 0.3);
    const int decks = std::uniform_int_distribution<int>(1, 3)(rng);
    for (int i = 0; i < decks; ++i) {
        s.decks.push_back({unif(rng, -0.35, 0.3) * s.length, unif(rng, 0.04, 0.12) * s.length,
                           unif(rng, 0.2, 0.45) * s.width, unif(rng, 0.85, 1.0)});
    }
    const int stripes = std::uniform_int_distribution<int>(0, 3)(rng);
    for (int i = 0; i < stripes; ++i) s.stripes.push_back(unif(rng, -0.45, 0.35) * s.length);
    return s;
}

double reflectivity(const ShipLatent& s, double u, double v) {
    const double half_len = s.length / 2;
    if (std::abs(u) > half_len) return 0.0;
    double half = s.width / 2;
    const double bow_start = half_len - s.bow * s.length;
    if (u > bow_start) half *= (half_len - u) / (half_len - bow_start);
    if (std::abs(v) > half) return 0.0;
    for (double st : s.stripes)
        if (std::abs(u - st) < 0.6) return 0.2;
    double level = s.hull_level;
    for (const auto& d : s.decks)
        if (std::abs(u - d.center) <= d.half_len && std::abs(v) <= d.half_width) level = std::max(level, d.level);
    return level;
}

std::vector<double> blur3(const std::vector<double>& img, std::size_t H, std::size_t W) {
    static constexpr double k[3] = {0.25, 0.5, 0.25};
    std::vector<double> tmp(img.size()), out(img.size());
    auto at = [](std::size_t i, int d, std::size_t n) {
        const long j = std::clamp(static_cast<long>(i) + d, 0L, static_cast<long>(n) - 1);
        return static_cast<std::size_t>(j);
    };
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            double acc = 0;
            for (int d = -1; d <= 1; ++d) acc += k[d + 1] * img[y * W + at(x, d, W)];
            tmp[y * W + x] = acc;
        }
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            double acc = 0;
            for (int d = -1; d <= 1; ++d) acc += k[d + 1] * tmp[at(y, d, H) * W + x];
            out[y * W + x] = acc;
        }
    return out;
}

struct Pose {
    double rotation, scale, cx, cy;
};

Pose draw_pose(const SyntheticConfig& cfg, const ShipLatent& ship, Rng& rng) {
    Pose p;
    p.rotation = ship.heading + unif(rng, -cfg.max_rotation_deg, cfg.max_rotation_deg) * std::numbers::pi / 180;
    p.scale = 1.0 + unif(rng, -cfg.max_scale_jitter, cfg.max_scale_jitter);
    p.cx = (static_cast<double>(cfg.width) - 1) / 2 + unif(rng, -cfg.max_shift_px, cfg.max_shift_px);
    p.cy = (static_cast<double>(cfg.height) - 1) / 2 + unif(rng, -cfg.max_shift_px, cfg.max_shift_px);
    return p;
}

Rng image_rng(const SyntheticConfig& cfg, std::int64_t identity, std::size_t modality, std::size_t index) {
    return seeded(cfg.seed, static_cast<std::uint64_t>(identity), modality + 1, index + 1);
}

std::uint8_t quantize(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

}  // namespace

std::vector<std::uint8_t> render_synthetic(const SyntheticConfig& cfg, std::int64_t identity, std::size_t modality,
                                           std::size_t index) {
    const ShipLatent ship = make_latent(cfg, static_cast<std::uint64_t>(identity));
    Rng rng = image_rng(cfg, identity, modality, index);
    const std::size_t H = cfg.height, W = cfg.width;
    const auto [rot, scale, cx, cy] = draw_pose(cfg, ship, rng);
    const double c = std::cos(rot), s = std::sin(rot);

    // 3x3 supersampled coverage of the ship's reflectivity
    std::vector<double> refl(H * W, 0.0);
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            double acc = 0;
            for (int sy = -1; sy <= 1; ++sy)
                for (int sx = -1; sx <= 1; ++sx) {
                    const double px = static_cast<double>(x) + sx / 3.0 - cx;
                    const double py = static_cast<double>(y) + sy / 3.0 - cy;
                    const double u = (c * px + s * py) / scale;
                    const double v = (-s * px + c * py) / scale;
                    acc += reflectivity(ship, u, v);
                }
            refl[y * W + x] = acc / 9.0;
        }
    refl = blur3(refl, H, W);

    std::vector<std::uint8_t> out(H * W);
    if (modality == 0) {
        const double fx = unif(rng, 0.02, 0.08), fy = unif(rng, 0.02, 0.08), phase = unif(rng, 0, 2 * std::numbers::pi);
        std::normal_distribution<double> grain(0.0, 0.015);
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                const double bg = 0.2 + 0.05 * std::sin(2 * std::numbers::pi * (fx * x + fy * y) + phase);
                out[y * W + x] = quantize(bg + 0.75 * refl[y * W + x] + grain(rng));
            }
        return out;
    }
    // edge-enhanced, speckled rendering
    std::gamma_distribution<double> speckle(static_cast<double>(cfg.speckle_looks), 1.0 / cfg.speckle_looks);
    auto R = [&](long yy, long xx) {
        yy = std::clamp(yy, 0L, static_cast<long>(H) - 1);
        xx = std::clamp(xx, 0L, static_cast<long>(W) - 1);
        return refl[static_cast<std::size_t>(yy) * W + static_cast<std::size_t>(xx)];
    };
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            const long yy = static_cast<long>(y), xx = static_cast<long>(x);
            const double gx = (R(yy - 1, xx + 1) + 2 * R(yy, xx + 1) + R(yy + 1, xx + 1)) -
                              (R(yy - 1, xx - 1) + 2 * R(yy, xx - 1) + R(yy + 1, xx - 1));
            const double gy = (R(yy + 1, xx - 1) + 2 * R(yy + 1, xx) + R(yy + 1, xx + 1)) -
                              (R(yy - 1, xx - 1) + 2 * R(yy - 1, xx) + R(yy - 1, xx + 1));
            const double edge = std::sqrt(gx * gx + gy * gy) / 4.0;
            const double r = refl[y * W + x];
            const double intensity = cfg.edge_weight * 1.2 * edge + 0.5 * r * r + 0.06;
            out[y * W + x] = quantize(intensity * speckle(rng));
        }
    return out;
}

SyntheticSummary generate_synthetic(const SyntheticConfig& cfg, const std::string& root) {
    cfg.validate();
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(fs::path(root) / "imgs", ec);
    if (ec) throw DataError("cannot create " + (fs::path(root) / "imgs").string() + ": " + ec.message());

    const std::size_t train_ids = cfg.num_ids - cfg.test_ids;
    Manifest m;
    SyntheticSummary sum;
    const std::size_t total_latents = cfg.num_ids + cfg.distractor_ids;
    for (std::size_t latent = 0; latent < total_latents; ++latent) {
        const bool distractor = latent >= cfg.num_ids;
        const std::int64_t label = distractor ? kDistractorId : static_cast<std::int64_t>(latent);
        const ShipLatent ship = make_latent(cfg, latent);
        for (std::size_t mod = 0; mod < cfg.modalities.size(); ++mod) {
            for (std::size_t k = 0; k < cfg.images_per_id_per_modality; ++k) {
                char name[96];
                std::snprintf(name, sizeof name, "imgs/%s%04zu_%s_%02zu.pgm", distractor ? "dis" : "id",
                              distractor ? latent - cfg.num_ids : latent, cfg.modalities[mod].c_str(), k);
                PnmImage img{cfg.width, cfg.height, 1, render_synthetic(cfg, static_cast<std::int64_t>(latent), mod, k)};
                write_pnm((fs::path(root) / name).string(), img);
                ++sum.images;
                // metadata follows the rendered pose, including the per-image scale jitter
                Rng rng = image_rng(cfg, static_cast<std::int64_t>(latent), mod, k);
                const double scale = draw_pose(cfg, ship, rng).scale;
                SampleRecord r{name, label, cfg.modalities[mod], ship.length * scale, ship.width / ship.length};
                if (distractor) {
                    m.entries.push_back({r, Split::Gallery});
                    ++sum.gallery_rows;
                } else if (latent < train_ids) {
                    m.entries.push_back({r, Split::Train});
                    ++sum.train_rows;
                } else {
                    m.entries.push_back({r, Split::Query});
                    m.entries.push_back({r, Split::Gallery});
                    ++sum.query_rows;
                    ++sum.gallery_rows;
                }
            }
        }
    }
    m.validate();
    write_manifest((fs::path(root) / "manifest.csv").string(), m);
    return sum;
}

const Tensor<float>& ImageCache::get(const std::string& rel_path) {
    auto it = cache_.find(rel_path);
    if (it != cache_.end()) return it->second;
    const std::string full = (std::filesystem::path(root_) / rel_path).string();
    Tensor<float> img = load_image(full, channels_);
    if (height_ && width_ && (img.dim(1) != height_ || img.dim(2) != width_))
        img = resize_bilinear(img, height_, width_);
    return cache_.emplace(rel_path, std::move(img)).first->second;
}

Tensor<float> resize_bilinear(const Tensor<float>& image, std::size_t height, std::size_t width) {
    if (image.rank() != 3) throw DimensionError("resize expects [C,H,W], got " + shape_str(image.shape));
    const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
    Tensor<float> out(Shape{C, height, width});
    const double sy = static_cast<double>(H) / static_cast<double>(height);
    const double sx = static_cast<double>(W) / static_cast<double>(width);
    for (std::size_t y = 0; y < height; ++y) {
        const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(H - 1));
        const auto y0 = static_cast<std::size_t>(fy);
        const std::size_t y1 = std::min(y0 + 1, H - 1);
        const double wy = fy - static_cast<double>(y0);
        for (std::size_t x = 0; x < width; ++x) {
            const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(W - 1));
            const auto x0 = static_cast<std::size_t>(fx);
            const std::size_t x1 = std::min(x0 + 1, W - 1);
            const double wx = fx - static_cast<double>(x0);
            for (std::size_t c = 0; c < C; ++c) {
                const float* src = image.data.data() + c * H * W;
                const double top = src[y0 * W + x0] * (1 - wx) + src[y0 * W + x1] * wx;
                const double bot = src[y1 * W + x0] * (1 - wx) + src[y1 * W + x1] * wx;
                out.data[(c * height + y) * width + x] = static_cast<float>(top * (1 - wy) + bot * wy);
            }
        }
    }
    return out;
}

std::vector<SampleRecord> pk_sample(const std::vector<SampleRecord>& train, std::size_t P, std::size_t K, Rng& rng) {
    if (P == 0 || K == 0) throw ConfigError("pk_sample: P and K must be positive");
    std::map<std::int64_t, std::map<std::string, std::vector<std::size_t>>> by_id;
    for (std::size_t i = 0; i < train.size(); ++i) {
        if (train[i].id == kDistractorId) throw DataError("pk_sample: distractor " + train[i].path + " in train set");
        by_id[train[i].id][train[i].modality].push_back(i);
    }
    if (by_id.size() < P) {
        throw DataError("pk_sample: need " + std::to_string(P) + " identities, train set has " +
                        std::to_string(by_id.size()));
    }
    std::vector<std::int64_t> ids;
    for (const auto& kv : by_id) ids.push_back(kv.first);
    // partial Fisher-Yates: the first P entries are a uniform draw without replacement
    for (std::size_t i = 0; i < P; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, ids.size() - 1);
        std::swap(ids[i], ids[pick(rng)]);
    }
    std::vector<SampleRecord> batch;
    batch.reserve(P * K);
    for (std::size_t p = 0; p < P; ++p) {
        auto groups = by_id[ids[p]];
        std::vector<std::vector<std::size_t>*> queues;
        std::size_t available = 0;
        for (auto& [mod, idx] : groups) {
            std::shuffle(idx.begin(), idx.end(), rng);
            queues.push_back(&idx);
            available += idx.size();
        }
        std::vector<std::size_t> drawn;
        std::size_t turn = 0;
        while (drawn.size() < std::min(K, available)) {
            auto* q = queues[turn++ % queues.size()];
            if (q->empty()) continue;
            drawn.push_back(q->back());
            q->pop_back();
        }
        // identity too small: top up with replacement from everything drawn
        std::vector<std::size_t> pool = drawn;
        while (drawn.size() < K) {
            std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
            drawn.push_back(pool[pick(rng)]);
        }
        for (std::size_t i : drawn) batch.push_back(train[i]);
    }
    return batch;
}

AugmentFlags AugmentFlags::for_profile(const std::string& profile) {
    if (profile == "hoss") return {true, true, true};
    if (profile == "cmship" || profile == "none") return {};
    throw ConfigError("unknown dataset profile '" + profile + "' (hoss, cmship, none)");
}

Tensor<float> hflip(const Tensor<float>& image) {
    if (image.rank() != 3) throw DimensionError("hflip expects [C,H,W], got " + shape_str(image.shape));
    Tensor<float> out = image;
    const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) out.data[(c * H + y) * W + x] = image.data[(c * H + y) * W + (W - 1 - x)];
    return out;
}

std::optional<EraseBox> sample_erase_box(std::size_t H, std::size_t W, Rng& rng) {
    const double area = static_cast<double>(H * W);
    for (int attempt = 0; attempt < 100; ++attempt) {
        const double target = unif(rng, 0.02, 0.4) * area;
        const double aspect = std::exp(unif(rng, std::log(0.3), std::log(3.3)));
        const auto h = static_cast<std::size_t>(std::lround(std::sqrt(target * aspect)));
        const auto w = static_cast<std::size_t>(std::lround(std::sqrt(target / aspect)));
        if (h == 0 || w == 0 || h >= H || w >= W) continue;
        const double frac = static_cast<double>(h * w) / area;
        if (frac < 0.02 || frac > 0.4) continue;
        EraseBox b;
        b.h = h;
        b.w = w;
        b.y = std::uniform_int_distribution<std::size_t>(0, H - h)(rng);
        b.x = std::uniform_int_distribution<std::size_t>(0, W - w)(rng);
        return b;
    }
    return std::nullopt;
}

Tensor<float> augment(const Tensor<float>& image, Rng& rng, const AugmentFlags& flags) {
    if (image.rank() != 3) throw DimensionError("augment expects [C,H,W], got " + shape_str(image.shape));
    Tensor<float> out = image;
    const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
    std::bernoulli_distribution coin(0.5);
    if (flags.flip && coin(rng)) out = hflip(out);
    if (flags.crop) {
        constexpr std::size_t pad = 4;
        const std::size_t oy = std::uniform_int_distribution<std::size_t>(0, 2 * pad)(rng);
        const std::size_t ox = std::uniform_int_distribution<std::size_t>(0, 2 * pad)(rng);
        Tensor<float> cropped(out.shape, 0.0f);
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t x = 0; x < W; ++x) {
                    const long sy = static_cast<long>(y + oy) - static_cast<long>(pad);
                    const long sx = static_cast<long>(x + ox) - static_cast<long>(pad);
                    if (sy < 0 || sx < 0 || sy >= static_cast<long>(H) || sx >= static_cast<long>(W)) continue;
                    cropped.data[(c * H + y) * W + x] =
                        out.data[(c * H + static_cast<std::size_t>(sy)) * W + static_cast<std::size_t>(sx)];
                }
        out = std::move(cropped);
    }
    if (flags.erase && coin(rng)) {
        if (auto box = sample_erase_box(H, W, rng)) {
            std::uniform_real_distribution<float> fill(0.0f, 1.0f);
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t y = box->y; y < box->y + box->h; ++y)
                    for (std::size_t x = box->x; x < box->x + box->w; ++x) out.data[(c * H + y) * W + x] = fill(rng);
        }
    }
    return out;
}

}  // namespace dri
