#pragma once

// Shared helpers for the unit and acceptance suites: random generators, a
// central-difference gradient checker and a loop-based ViT reference.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "dri/model.hpp"
#include "dri/ops.hpp"
#include "dri/tape.hpp"
#include "dri/tensor.hpp"

namespace dri::testing {

using Gen = std::mt19937_64;

template <typename T>
Tensor<T> random_tensor(Shape shape, Gen& g, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data) v = static_cast<T>(u(g));
    return t;
}

inline std::size_t pick(Gen& g, std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(g);
}

template <typename T>
bool bit_equal(const Tensor<T>& a, const Tensor<T>& b) {
    return a.shape == b.shape && std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(T)) == 0;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

/// ||a - n|| / max(||a||, ||n||), or the absolute gap when both are ~0.
inline double relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric) {
    double diff = 0, na = 0, nn = 0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
        na += analytic[i] * analytic[i];
        nn += numeric[i] * numeric[i];
    }
    const double scale = std::sqrt(std::max(na, nn));
    return scale < 1e-12 ? std::sqrt(diff) : std::sqrt(diff) / scale;
}

using ScalarFn = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

/// Worst relative error between tape gradients and central differences over
/// every input tensor of `fn`.
inline double gradient_error(const ScalarFn& fn, std::vector<Tensor<double>> inputs, double step = 1e-5) {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (const auto& t : inputs) vars.push_back(tape.input(t));
    Var<double> loss = fn(tape, vars);
    tape.backward(loss);

    auto eval = [&] {
        Tape<double> t2;
        std::vector<Var<double>> v2;
        for (const auto& t : inputs) v2.push_back(t2.input(t, false));
        return fn(t2, v2).value()[0];
    };
    double worst = 0;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        std::vector<double> numeric(inputs[k].size());
        for (std::size_t i = 0; i < inputs[k].size(); ++i) {
            const double keep = inputs[k].data[i];
            inputs[k].data[i] = keep + step;
            const double up = eval();
            inputs[k].data[i] = keep - step;
            const double down = eval();
            inputs[k].data[i] = keep;
            numeric[i] = (up - down) / (2 * step);
        }
        worst = std::max(worst, relative_error(vars[k].grad(), numeric));
    }
    return worst;
}

/// Same check for parameters of a store: `loss` builds a fresh forward each call.
inline double parameter_gradient_error(ParameterStore<double>& store, const std::vector<Parameter<double>*>& params,
                                       const std::function<double(Tape<double>&, bool backward)>& loss,
                                       double step = 1e-6) {
    store.zero_grad();
    {
        Tape<double> tape;
        loss(tape, true);
    }
    double worst = 0;
    for (Parameter<double>* p : params) {
        std::vector<double> numeric(p->tensor.size());
        for (std::size_t i = 0; i < p->tensor.size(); ++i) {
            const double keep = p->tensor.data[i];
            p->tensor.data[i] = keep + step;
            Tape<double> t1;
            const double up = loss(t1, false);
            p->tensor.data[i] = keep - step;
            Tape<double> t2;
            const double down = loss(t2, false);
            p->tensor.data[i] = keep;
            numeric[i] = (up - down) / (2 * step);
        }
        worst = std::max(worst, relative_error(p->tensor.grad, numeric));
    }
    return worst;
}

/// Plain-loop ViT forward over parameters read by name; no tape, no shared code
/// with the library beyond the parameter store.
class ReferenceViT {
public:
    ReferenceViT(const ParameterStore<double>& store, std::string prefix, const ViTConfig& cfg)
        : store_(store), prefix_(std::move(prefix)), cfg_(cfg) {}

    /// Per-block deviations (length D each, empty = none) added after norm1 / norm2.
    struct Deviation {
        std::vector<double> attn, mlp;
    };

    /// Final-normed first token of one image [C, H, W].
    std::vector<double> forward(const Tensor<double>& image, const std::vector<Deviation>& devs = {}) const {
        const std::size_t D = cfg_.dim, P = cfg_.patch, C = cfg_.channels;
        const std::size_t gh = cfg_.image_h / P, gw = cfg_.image_w / P, N = gh * gw;
        const std::size_t lead = 1 + cfg_.extra_tokens;
        std::vector<std::vector<double>> x;
        x.push_back(get("cls_token"));
        for (std::size_t py = 0; py < gh; ++py) {
            for (std::size_t px = 0; px < gw; ++px) {
                std::vector<double> row;
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t y = 0; y < P; ++y)
                        for (std::size_t xx = 0; xx < P; ++xx)
                            row.push_back(image.data[(c * cfg_.image_h + py * P + y) * cfg_.image_w + px * P + xx]);
                x.push_back(affine("patch_embed", row));
            }
        }
        std::vector<std::size_t> pos(x.size(), 0);
        if (cfg_.pos_mode == PosMode::LearnedAbsolute) {
            const auto pe = get("pos_embed");
            for (std::size_t i = 0; i < N; ++i)
                for (std::size_t d = 0; d < D; ++d) x[lead + i][d] += pe[i * D + d];
        } else {
            for (std::size_t i = 0; i < N; ++i) pos[lead + i] = i + 1;
        }
        for (std::size_t l = 0; l < cfg_.depth; ++l) {
            const std::string b = "block" + std::to_string(l) + ".";
            const Deviation* dev = devs.empty() ? nullptr : &devs[l];
            std::vector<std::vector<double>> h;
            for (const auto& t : x) h.push_back(plus(norm(b + "norm1", t), dev ? dev->attn : std::vector<double>{}));
            const auto a = attend(b, h, pos);
            for (std::size_t t = 0; t < x.size(); ++t)
                for (std::size_t d = 0; d < D; ++d) x[t][d] += a[t][d];
            for (auto& t : x) {
                auto n = plus(norm(b + "norm2", t), dev ? dev->mlp : std::vector<double>{});
                auto u = affine(b + "mlp.fc1", n);
                for (auto& v : u) v = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
                const auto m = affine(b + "mlp.fc2", u);
                for (std::size_t d = 0; d < D; ++d) t[d] += m[d];
            }
        }
        return norm("norm", x[0]);
    }

private:
    std::vector<double> get(const std::string& name) const {
        return store_.find(prefix_ + "." + name)->tensor.data;
    }

    std::vector<double> affine(const std::string& name, const std::vector<double>& in) const {
        const auto w = get(name + ".weight");
        const auto b = get(name + ".bias");
        std::vector<double> out(b);
        for (std::size_t o = 0; o < b.size(); ++o)
            for (std::size_t i = 0; i < in.size(); ++i) out[o] += w[o * in.size() + i] * in[i];
        return out;
    }

    static std::vector<double> plus(std::vector<double> a, const std::vector<double>& b) {
        for (std::size_t i = 0; i < b.size(); ++i) a[i] += b[i];
        return a;
    }

    std::vector<double> norm(const std::string& name, const std::vector<double>& v) const {
        const auto w = get(name + ".weight");
        const auto b = get(name + ".bias");
        double mu = 0, var = 0;
        for (double e : v) mu += e;
        mu /= static_cast<double>(v.size());
        for (double e : v) var += (e - mu) * (e - mu);
        var /= static_cast<double>(v.size());
        std::vector<double> out(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - mu) / std::sqrt(var + cfg_.ln_eps) * w[i] + b[i];
        return out;
    }

    static void rotate(std::vector<double>& r, std::size_t offset, std::size_t dh, std::size_t p) {
        for (std::size_t i = 0; i < dh; i += 2) {
            const double ang = static_cast<double>(p) * std::pow(10000.0, -static_cast<double>(i) / dh);
            const double a = r[offset + i], b = r[offset + i + 1];
            r[offset + i] = a * std::cos(ang) - b * std::sin(ang);
            r[offset + i + 1] = a * std::sin(ang) + b * std::cos(ang);
        }
    }

    std::vector<std::vector<double>> attend(const std::string& b, const std::vector<std::vector<double>>& h,
                                            const std::vector<std::size_t>& pos) const {
        const std::size_t D = cfg_.dim, H = cfg_.heads, dh = D / H, n = h.size();
        std::vector<std::vector<double>> q(n), k(n), v(n);
        for (std::size_t t = 0; t < n; ++t) {
            const auto qkv = affine(b + "attn.qkv", h[t]);
            q[t].assign(qkv.begin(), qkv.begin() + D);
            k[t].assign(qkv.begin() + D, qkv.begin() + 2 * D);
            v[t].assign(qkv.begin() + 2 * D, qkv.end());
            for (std::size_t hd = 0; hd < H; ++hd) {
                rotate(q[t], hd * dh, dh, pos[t]);
                rotate(k[t], hd * dh, dh, pos[t]);
            }
        }
        std::vector<std::vector<double>> mixed(n, std::vector<double>(D, 0.0));
        for (std::size_t hd = 0; hd < H; ++hd) {
            for (std::size_t i = 0; i < n; ++i) {
                std::vector<double> s(n);
                double mx = -1e300, z = 0;
                for (std::size_t j = 0; j < n; ++j) {
                    double dot = 0;
                    for (std::size_t d = 0; d < dh; ++d) dot += q[i][hd * dh + d] * k[j][hd * dh + d];
                    s[j] = dot / std::sqrt(static_cast<double>(dh));
                    mx = std::max(mx, s[j]);
                }
                for (auto& e : s) z += (e = std::exp(e - mx));
                for (std::size_t j = 0; j < n; ++j)
                    for (std::size_t d = 0; d < dh; ++d) mixed[i][hd * dh + d] += s[j] / z * v[j][hd * dh + d];
            }
        }
        for (auto& m : mixed) m = affine(b + "attn.proj", m);
        return mixed;
    }

    const ParameterStore<double>& store_;
    std::string prefix_;
    ViTConfig cfg_;
};

/// A scratch directory removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static std::uint64_t counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("dri_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }
    std::string str() const { return path_.string(); }

private:
    std::filesystem::path path_;
};

/// A small backbone for fast tests: 16x16 RGB, patch 4, depth 2, D 16.
inline ViTConfig tiny_backbone() {
    ViTConfig c;
    c.depth = 2;
    c.dim = 16;
    c.heads = 2;
    c.patch = 4;
    c.image_h = 16;
    c.image_w = 16;
    return c;
}

inline ModelConfig tiny_model(PeftMode mode) {
    ModelConfig m;
    m.backbone = tiny_backbone();
    m.peft.mode = mode;
    m.peft.dri.encoder.depth = 1;
    m.peft.dri.encoder.dim = 8;
    m.peft.lora.rank = 2;
    m.peft.lora.alpha = 2;
    m.peft.adapter.hidden = 4;
    m.num_ids = 4;
    return m;
}

}  // namespace dri::testing
