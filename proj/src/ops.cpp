#include "dri/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "dri/errors.hpp"

namespace dri::ops {
namespace {

void require(bool ok, const std::string& msg) {
    if (!ok) throw DimensionError(msg);
}

// C += A[M,K] * B[K,N], all row-major.
template <typename T>
void gemm(std::size_t M, std::size_t K, std::size_t N, const T* A, const T* B, T* C) {
    for (std::size_t i = 0; i < M; ++i) {
        T* __restrict c = C + i * N;
        const T* a = A + i * K;
        for (std::size_t k = 0; k < K; ++k) {
            const T av = a[k];
            const T* __restrict b = B + k * N;
            for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

template <typename T>
std::vector<T> transpose(const T* A, std::size_t M, std::size_t N) {
    std::vector<T> out(M * N);
    for (std::size_t i = 0; i < M; ++i)
        for (std::size_t j = 0; j < N; ++j) out[j * M + i] = A[i * N + j];
    return out;
}

template <typename T>
Tape<T>* tape_of(const Var<T>& v, const char* op) {
    if (!v.valid()) throw ContractError(std::string(op) + ": invalid variable");
    return v.tape();
}

template <typename T>
void same_tape(const Var<T>& a, const Var<T>& b, const char* op) {
    if (a.tape() != b.tape()) throw ContractError(std::string(op) + ": operands live on different tapes");
}

bool is_suffix(const Shape& full, const Shape& tail) {
    if (tail.size() > full.size()) return false;
    return std::equal(tail.rbegin(), tail.rend(), full.rbegin());
}

}  // namespace

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    Tape<T>* tape = tape_of(a, "matmul");
    same_tape(a, b, "matmul");
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    require(sa.size() == 2 && sb.size() == 2 && sa[1] == sb[0],
            "matmul: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
    const std::size_t m = sa[0], k = sa[1], n = sb[1];
    Tensor<T> out(Shape{m, n});
    gemm(m, k, n, a.value().data.data(), b.value().data.data(), out.data.data());
    const std::size_t ia = a.id(), ib = b.id();
    return tape->record(std::move(out), {ia, ib}, [=](Tape<T>& tp, std::size_t self) {
        const auto& g = tp.grad(self);
        const auto& A = tp.value(ia).data;
        const auto& B = tp.value(ib).data;
        if (tp.needs_grad(ia)) {
            auto bt = transpose(B.data(), k, n);
            gemm(m, n, k, g.data(), bt.data(), tp.grad(ia).data());
        }
        if (tp.needs_grad(ib)) {
            auto at = transpose(A.data(), m, k);
            gemm(k, m, n, at.data(), g.data(), tp.grad(ib).data());
        }
    });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
    Tape<T>* tape = tape_of(x, "linear");
    same_tape(x, weight, "linear");
    const Shape& sx = x.shape();
    const Shape& sw = weight.shape();
    require(sw.size() == 2 && !sx.empty() && sx.back() == sw[1],
            "linear: input " + shape_str(sx) + " incompatible with weight " + shape_str(sw));
    const bool has_bias = bias.valid();
    if (has_bias) {
        same_tape(x, bias, "linear");
        require(bias.shape() == Shape{sw[0]},
                "linear: bias " + shape_str(bias.shape()) + " does not match weight " + shape_str(sw));
    }
    const std::size_t in = sw[1], outd = sw[0];
    const std::size_t rows = x.numel() / in;
    Shape so = sx;
    so.back() = outd;
    Tensor<T> out(so);
    if (has_bias) {
        const auto& bv = bias.value().data;
        for (std::size_t r = 0; r < rows; ++r) std::copy(bv.begin(), bv.end(), out.data.begin() + r * outd);
    }
    auto wt = transpose(weight.value().data.data(), outd, in);
    gemm(rows, in, outd, x.value().data.data(), wt.data(), out.data.data());

    const std::size_t ix = x.id(), iw = weight.id();
    const std::size_t ib = has_bias ? bias.id() : 0;
    std::vector<std::size_t> inputs{ix, iw};
    if (has_bias) inputs.push_back(ib);
    return tape->record(std::move(out), std::move(inputs), [=](Tape<T>& tp, std::size_t self) {
        const auto& g = tp.grad(self);
        if (tp.needs_grad(ix)) {
            gemm(rows, outd, in, g.data(), tp.value(iw).data.data(), tp.grad(ix).data());
        }
        if (tp.needs_grad(iw)) {
            auto gt = transpose(g.data(), rows, outd);
            gemm(outd, rows, in, gt.data(), tp.value(ix).data.data(), tp.grad(iw).data());
        }
        if (has_bias && tp.needs_grad(ib)) {
            auto& gb = tp.grad(ib);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < outd; ++j) gb[j] += g[r * outd + j];
        }
    });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    Tape<T>* tape = tape_of(a, "add");
    same_tape(a, b, "add");
    require(is_suffix(a.shape(), b.shape()),
            "add: cannot broadcast " + shape_str(b.shape()) + " onto " + shape_str(a.shape()));
    Tensor<T> out = a.value();
    out.requires_grad = false;
    out.grad.clear();
    const auto& bv = b.value().data;
    const std::size_t inner = bv.size();
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += bv[i % inner];
    const std::size_t ia = a.id(), ib = b.id();
    return tape->record(std::move(out), {ia, ib}, [=](Tape<T>& tp, std::size_t self) {
        const auto& g = tp.grad(self);
        if (tp.needs_grad(ia)) {
            auto& ga = tp.grad(ia);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (tp.needs_grad(ib)) {
            auto& gb = tp.grad(ib);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i % inner] += g[i];
        }
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    Tape<T>* tape = tape_of(a, "mul");
    same_tape(a, b, "mul");
    require(a.shape() == b.shape(), "mul: shapes differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out(a.shape());
    const auto& av = a.value().data;
    const auto& bv = b.value().data;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = av[i] * bv[i];
    const std::size_t ia = a.id(), ib = b.id();
    return tape->record(std::move(out), {ia, ib}, [=](Tape<T>& tp, std::size_t self) {
        const auto& g = tp.grad(self);
        const auto& A = tp.value(ia).data;
        const auto& B = tp.value(ib).data;
        if (tp.needs_grad(ia)) {
            auto& ga = tp.grad(ia);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * B[i];
        }
        if (tp.needs_grad(ib)) {
            auto& gb = tp.grad(ib);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * A[i];
        }
    });
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
    Tape<T>* tape = tape_of(a, "scale");
    Tensor<T> out(a.shape());
    const auto& av = a.value().data;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = av[i] * factor;
    const std::size_t ia = a.id();
    return tape->record(std::move(out), {ia}, [=](Tape<T>& tp, std::size_t self) {
        const auto& g = tp.grad(self);
        auto& ga = tp.grad(ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
    });
}

template <typename T>
Var<T> add_per_sample(const Var<T>& x, const Var<T>& delta) {
    Tape<T>* tape = tape_of(x, "add_per_sample");
    same_tape(x, delta, "add_per_sample");
    const Shape& sx = x.shape();
    const Shape& sd = delta.shape();
    require(sx.size() == 3 && sd.size() == 2 && sd[0] == sx[0] && sd[1] == sx[2],
            "add_per_sample: delta " + shape_str(sd) + " does not match tokens " + shape_str(sx));
    const std::size_t B = sx[0], Tn = sx[1], D = sx[2];
    Tensor<T> out = x.value();
    out.requires_grad = false;
    out.grad.clear();
    const auto& dv = delta.value().data;
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < Tn; ++t)
            for (std::size_t d = 0; d < D; ++d) out.data[(b * Tn + t) * D + d] += dv[b * D + d];
    const std::size_t ix = x.id(), id = delta.id();
    return tape->record(std::move(out), {ix, id}, [=](Tape<T>& tp, std::size_t self) {
        const auto& g = tp.grad(self);
        if (tp.needs_grad(ix)) {
            auto& gx = tp.grad(ix);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
        if (tp.needs_grad(id)) {
            auto& gd = tp.grad(id);
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t t = 0; t < Tn; ++t)
                    for (std::size_t d = 0; d < D; ++d) gd[b * D + d] += g[(b * Tn + t) * D + d];
        }
    });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
    Tape<T>* tape = tape_of(a, "sum");
    T s = T(0);
    for (T v : a.value().data) s += v;
    Tensor<T> out(Shape{}, std::vector<T>{s});
    const std::size_t ia = a.id();
    return tape->record(std::move(out), {ia}, [=](Tape<T>& tp, std::size_t self) {
        const T g = tp.grad(self)[0];
        for (auto& v : tp.grad(ia)) v += g;
    });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
    return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
    Tape<T>* tape = tape_of(x, "layer_norm");
    same_tape(x, gamma, "layer_norm");
    same_tape(x, beta, "layer_norm");
    const Shape& sx = x.shape();
    require(!sx.empty(), "layer_norm: scalar input");
    const std::size_t D = sx.back();
    require(gamma.shape() == Shape{D} && beta.shape() == Shape{D},
            "layer_norm: gamma " + shape_str(gamma.shape()) + " / beta " + shape_str(beta.shape()) +
                " do not match input " + shape_str(sx));
    if (!(eps > T(0))) throw ContractError("layer_norm: eps must be positive");
    const std::size_t rows = x.numel() / D;
    const auto& xv = x.value().data;
    const auto& gv = gamma.value().data;
    const auto& bv = beta.value().data;
    Tensor<T> out(sx);
    std::vector<T> xhat(xv.size());
    std::vector<T> rstd(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = xv.data() + r * D;
        T mu = T(0);
        for (std::size_t d = 0; d < D; ++d) mu += row[d];
        mu /= static_cast<T>(D);
        T var = T(0);
        for (std::size_t d = 0; d < D; ++d) var += (row[d] - mu) * (row[d] - mu);
        var /= static_cast<T>(D);
        const T rs = T(1) / std::sqrt(var + eps);
        rstd[r] = rs;
        for (std::size_t d = 0; d < D; ++d) {
            const T h = (row[d] - mu) * rs;
            xhat[r * D + d] = h;
            out.data[r * D + d] = h * gv[d] + bv[d];
        }
    }
    const std::size_t ix = x.id(), ig = gamma.id(), ibt = beta.id();
    return tape->record(std::move(out), {ix, ig, ibt},
                        [=, xhat = std::move(xhat), rstd = std::move(rstd)](Tape<T>& tp, std::size_t self) {
                            const auto& g = tp.grad(self);
                            const auto& gam = tp.value(ig).data;
                            if (tp.needs_grad(ig)) {
                                auto& gg = tp.grad(ig);
                                for (std::size_t i = 0; i < g.size(); ++i) gg[i % D] += g[i] * xhat[i];
                            }
                            if (tp.needs_grad(ibt)) {
                                auto& gb = tp.grad(ibt);
                                for (std::size_t i = 0; i < g.size(); ++i) gb[i % D] += g[i];
                            }
                            if (tp.needs_grad(ix)) {
                                auto& gx = tp.grad(ix);
                                std::vector<T> dh(D);
                                for (std::size_t r = 0; r < rows; ++r) {
                                    T m1 = T(0), m2 = T(0);
                                    for (std::size_t d = 0; d < D; ++d) {
                                        dh[d] = g[r * D + d] * gam[d];
                                        m1 += dh[d];
                                        m2 += dh[d] * xhat[r * D + d];
                                    }
                                    m1 /= static_cast<T>(D);
                                    m2 /= static_cast<T>(D);
                                    for (std::size_t d = 0; d < D; ++d)
                                        gx[r * D + d] += rstd[r] * (dh[d] - m1 - xhat[r * D + d] * m2);
                                }
                            }
                        });
}

template <typename T>
Var<T> softmax(const Var<T>& x) {
    Tape<T>* tape = tape_of(x, "softmax");
    const Shape& sx = x.shape();
    require(!sx.empty() && sx.back() >= 1, "softmax: needs a non-empty last dimension");
    const std::size_t n = sx.back();
    const std::size_t rows = x.numel() / n;
    const auto& xv = x.value().data;
    Tensor<T> out(sx);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = xv.data() + r * n;
        T* o = out.data.data() + r * n;
        T mx = *std::max_element(in, in + n);
        T s = T(0);
        for (std::size_t i = 0; i < n; ++i) {
            o[i] = std::exp(in[i] - mx);
            s += o[i];
        }
        for (std::size_t i = 0; i < n; ++i) o[i] /= s;
    }
    const std::size_t ix = x.id();
    return tape->record(std::move(out), {ix}, [=](Tape<T>& tp, std::size_t self) {
        const auto& g = tp.grad(self);
        const auto& y = tp.value(self).data;
        auto& gx = tp.grad(ix);
        for (std::size_t r = 0; r < rows; ++r) {
            T dot = T(0);
            for (std::size_t i = 0; i < n; ++i) dot += g[r * n + i] * y[r * n + i];
            for (std::size_t i = 0; i < n; ++i) gx[r * n + i] += y[r * n + i] * (g[r * n + i] - dot);
        }
    });
}

template <typename T>
Var<T> gelu(const Var<T>& x) {
    Tape<T>* tape = tape_of(x, "gelu");
    const auto& xv = x.value().data;
    Tensor<T> out(x.shape());
    const T inv_sqrt2 = T(1) / std::sqrt(T(2));
    for (std::size_t i = 0; i < xv.size(); ++i) out.data[i] = T(0.5) * xv[i] * (T(1) + std::erf(xv[i] * inv_sqrt2));
    const std::size_t ix = x.id();
    return tape->record(std::move(out), {ix}, [=](Tape<T>& tp, std::size_t self) {
        const auto& g = tp.grad(self);
        const auto& in = tp.value(ix).data;
        auto& gx = tp.grad(ix);
        const T inv_sqrt_2pi = T(1) / std::sqrt(T(2) * T(3.14159265358979323846));
        for (std::size_t i = 0; i < g.size(); ++i) {
            const T v = in[i];
            const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
            const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
            gx[i] += g[i] * (cdf + v * pdf);
        }
    });
}

template <typename T>
Var<T> batch_norm_1d(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, const BatchNormState<T>& st) {
    Tape<T>* tape = tape_of(x, "batch_norm_1d");
    same_tape(x, gamma, "batch_norm_1d");
    const Shape& sx = x.shape();
    require(sx.size() == 2, "batch_norm_1d: expected [B, D], got " + shape_str(sx));
    const std::size_t B = sx[0], D = sx[1];
    require(gamma.shape() == Shape{D}, "batch_norm_1d: gamma " + shape_str(gamma.shape()) + " vs " + shape_str(sx));
    const bool has_beta = beta.valid();
    if (has_beta) require(beta.shape() == Shape{D}, "batch_norm_1d: beta shape mismatch");
    if (!st.running_mean || !st.running_var) throw ContractError("batch_norm_1d: missing running statistics");
    if (st.training && B < 2) {
        throw DataError("batch_norm_1d: degenerate batch of size " + std::to_string(B) + " in training mode");
    }
    const auto& xv = x.value().data;
    const auto& gv = gamma.value().data;
    std::vector<T> xhat(xv.size());
    std::vector<T> rstd(D);
    Tensor<T> out(sx);
    if (st.training) {
        for (std::size_t d = 0; d < D; ++d) {
            T mu = T(0);
            for (std::size_t b = 0; b < B; ++b) mu += xv[b * D + d];
            mu /= static_cast<T>(B);
            T var = T(0);
            for (std::size_t b = 0; b < B; ++b) var += (xv[b * D + d] - mu) * (xv[b * D + d] - mu);
            const T unbiased = var / static_cast<T>(B - 1);
            var /= static_cast<T>(B);
            rstd[d] = T(1) / std::sqrt(var + st.eps);
            for (std::size_t b = 0; b < B; ++b) xhat[b * D + d] = (xv[b * D + d] - mu) * rstd[d];
            auto& rm = st.running_mean->data[d];
            auto& rv = st.running_var->data[d];
            rm = (T(1) - st.momentum) * rm + st.momentum * mu;
            rv = (T(1) - st.momentum) * rv + st.momentum * unbiased;
        }
    } else {
        for (std::size_t d = 0; d < D; ++d) {
            rstd[d] = T(1) / std::sqrt(st.running_var->data[d] + st.eps);
            for (std::size_t b = 0; b < B; ++b)
                xhat[b * D + d] = (xv[b * D + d] - st.running_mean->data[d]) * rstd[d];
        }
    }
    for (std::size_t i = 0; i < xv.size(); ++i) {
        out.data[i] = xhat[i] * gv[i % D] + (has_beta ? beta.value().data[i % D] : T(0));
    }
    const std::size_t ix = x.id(), ig = gamma.id();
    const std::size_t ibt = has_beta ? beta.id() : 0;
    std::vector<std::size_t> inputs{ix, ig};
    if (has_beta) inputs.push_back(ibt);
    const bool training = st.training;
    return tape->record(
        std::move(out), std::move(inputs),
        [=, xhat = std::move(xhat), rstd = std::move(rstd)](Tape<T>& tp, std::size_t self) {
            const auto& g = tp.grad(self);
            const auto& gam = tp.value(ig).data;
            if (tp.needs_grad(ig)) {
                auto& gg = tp.grad(ig);
                for (std::size_t i = 0; i < g.size(); ++i) gg[i % D] += g[i] * xhat[i];
            }
            if (has_beta && tp.needs_grad(ibt)) {
                auto& gb = tp.grad(ibt);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i % D] += g[i];
            }
            if (!tp.needs_grad(ix)) return;
            auto& gx = tp.grad(ix);
            for (std::size_t d = 0; d < D; ++d) {
                if (!training) {
                    for (std::size_t b = 0; b < B; ++b) gx[b * D + d] += g[b * D + d] * gam[d] * rstd[d];
                    continue;
                }
                T m1 = T(0), m2 = T(0);
                for (std::size_t b = 0; b < B; ++b) {
                    const T dh = g[b * D + d] * gam[d];
                    m1 += dh;
                    m2 += dh * xhat[b * D + d];
                }
                m1 /= static_cast<T>(B);
                m2 /= static_cast<T>(B);
                for (std::size_t b = 0; b < B; ++b) {
                    const T dh = g[b * D + d] * gam[d];
                    gx[b * D + d] += rstd[d] * (dh - m1 - xhat[b * D + d] * m2);
                }
            }
        });
}

template <typename T>
void rope_rotate(T* row, std::size_t head_dim, std::size_t pos, bool inverse) {
    if (pos == 0) return;
    for (std::size_t i = 0; i + 1 < head_dim; i += 2) {
        const double freq = std::pow(kRopeBase, -static_cast<double>(i) / static_cast<double>(head_dim));
        double angle = static_cast<double>(pos) * freq;
        if (inverse) angle = -angle;
        const T c = static_cast<T>(std::cos(angle));
        const T s = static_cast<T>(std::sin(angle));
        const T a = row[i], b = row[i + 1];
        row[i] = a * c - b * s;
        row[i + 1] = a * s + b * c;
    }
}

template <typename T>
Tensor<T> rope(const Tensor<T>& x, const std::vector<std::size_t>& positions) {
    require(x.rank() == 2 && x.dim(0) == positions.size(),
            "rope: expected [N, head_dim] with N == positions, got " + shape_str(x.shape));
    require(x.dim(1) % 2 == 0, "rope: head dimension must be even");
    Tensor<T> out = x;
    for (std::size_t r = 0; r < positions.size(); ++r) rope_rotate(out.data.data() + r * x.dim(1), x.dim(1), positions[r]);
    return out;
}

template <typename T>
Var<T> attention(const Var<T>& qkv, std::size_t heads, const std::vector<std::size_t>& positions) {
    Tape<T>* tape = tape_of(qkv, "attention");
    const Shape& s = qkv.shape();
    require(s.size() == 3 && s[2] % 3 == 0, "attention: expected packed qkv [B, T, 3D], got " + shape_str(s));
    const std::size_t B = s[0], Tn = s[1], D = s[2] / 3;
    if (heads == 0 || D % heads != 0) {
        throw DimensionError("attention: width " + std::to_string(D) + " not divisible by " + std::to_string(heads) +
                             " heads");
    }
    const std::size_t dh = D / heads;
    const bool use_rope = !positions.empty();
    if (use_rope) {
        require(positions.size() == Tn, "attention: positions length " + std::to_string(positions.size()) +
                                            " != tokens " + std::to_string(Tn));
        require(dh % 2 == 0, "attention: rotary embedding needs an even head dimension");
    }
    const T sc = T(1) / std::sqrt(static_cast<T>(dh));
    const auto& in = qkv.value().data;

    // Gathers head h of sample b into contiguous [Tn, dh] blocks (q, k rotated).
    auto gather = [=](const std::vector<T>& src, std::size_t b, std::size_t h, std::vector<T>& q, std::vector<T>& k,
                      std::vector<T>& v) {
        for (std::size_t t = 0; t < Tn; ++t) {
            const T* row = src.data() + (b * Tn + t) * 3 * D + h * dh;
            std::copy(row, row + dh, q.begin() + t * dh);
            std::copy(row + D, row + D + dh, k.begin() + t * dh);
            std::copy(row + 2 * D, row + 2 * D + dh, v.begin() + t * dh);
            if (use_rope) {
                rope_rotate(q.data() + t * dh, dh, positions[t]);
                rope_rotate(k.data() + t * dh, dh, positions[t]);
            }
        }
    };

    Tensor<T> out(Shape{B, Tn, D});
    std::vector<T> probs(B * heads * Tn * Tn);
    std::vector<T> q(Tn * dh), k(Tn * dh), v(Tn * dh);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            gather(in, b, h, q, k, v);
            T* P = probs.data() + (b * heads + h) * Tn * Tn;
            for (std::size_t i = 0; i < Tn; ++i) {
                T mx = -std::numeric_limits<T>::infinity();
                for (std::size_t j = 0; j < Tn; ++j) {
                    T dot = T(0);
                    for (std::size_t d = 0; d < dh; ++d) dot += q[i * dh + d] * k[j * dh + d];
                    P[i * Tn + j] = dot * sc;
                    mx = std::max(mx, P[i * Tn + j]);
                }
                T z = T(0);
                for (std::size_t j = 0; j < Tn; ++j) {
                    P[i * Tn + j] = std::exp(P[i * Tn + j] - mx);
                    z += P[i * Tn + j];
                }
                for (std::size_t j = 0; j < Tn; ++j) P[i * Tn + j] /= z;
                T* o = out.data.data() + (b * Tn + i) * D + h * dh;
                for (std::size_t j = 0; j < Tn; ++j) {
                    const T p = P[i * Tn + j];
                    for (std::size_t d = 0; d < dh; ++d) o[d] += p * v[j * dh + d];
                }
            }
        }
    }

    const std::size_t iq = qkv.id();
    return tape->record(
        std::move(out), {iq}, [=, probs = std::move(probs)](Tape<T>& tp, std::size_t self) {
            const auto& g = tp.grad(self);
            const auto& src = tp.value(iq).data;
            auto& gq = tp.grad(iq);
            std::vector<T> q(Tn * dh), k(Tn * dh), v(Tn * dh);
            std::vector<T> dq(Tn * dh), dk(Tn * dh), dv(Tn * dh), dS(Tn * Tn);
            for (std::size_t b = 0; b < B; ++b) {
                for (std::size_t h = 0; h < heads; ++h) {
                    gather(src, b, h, q, k, v);
                    const T* P = probs.data() + (b * heads + h) * Tn * Tn;
                    std::fill(dq.begin(), dq.end(), T(0));
                    std::fill(dk.begin(), dk.end(), T(0));
                    std::fill(dv.begin(), dv.end(), T(0));
                    for (std::size_t i = 0; i < Tn; ++i) {
                        const T* dO = g.data() + (b * Tn + i) * D + h * dh;
                        T rowdot = T(0);
                        for (std::size_t j = 0; j < Tn; ++j) {
                            const T p = P[i * Tn + j];
                            T dp = T(0);
                            for (std::size_t d = 0; d < dh; ++d) {
                                dv[j * dh + d] += p * dO[d];
                                dp += dO[d] * v[j * dh + d];
                            }
                            dS[i * Tn + j] = dp;
                            rowdot += p * dp;
                        }
                        for (std::size_t j = 0; j < Tn; ++j) {
                            dS[i * Tn + j] = P[i * Tn + j] * (dS[i * Tn + j] - rowdot) * sc;
                        }
                    }
                    for (std::size_t i = 0; i < Tn; ++i) {
                        for (std::size_t j = 0; j < Tn; ++j) {
                            const T ds = dS[i * Tn + j];
                            for (std::size_t d = 0; d < dh; ++d) {
                                dq[i * dh + d] += ds * k[j * dh + d];
                                dk[j * dh + d] += ds * q[i * dh + d];
                            }
                        }
                    }
                    for (std::size_t t = 0; t < Tn; ++t) {
                        if (use_rope) {
                            rope_rotate(dq.data() + t * dh, dh, positions[t], true);
                            rope_rotate(dk.data() + t * dh, dh, positions[t], true);
                        }
                        T* row = gq.data() + (b * Tn + t) * 3 * D + h * dh;
                        for (std::size_t d = 0; d < dh; ++d) {
                            row[d] += dq[t * dh + d];
                            row[D + d] += dk[t * dh + d];
                            row[2 * D + d] += dv[t * dh + d];
                        }
                    }
                }
            }
        });
}

template <typename T>
Var<T> concat_tokens(const std::vector<Var<T>>& parts) {
    if (parts.empty()) throw ContractError("concat_tokens: no inputs");
    Tape<T>* tape = tape_of(parts[0], "concat_tokens");
    const Shape& s0 = parts[0].shape();
    require(s0.size() == 3, "concat_tokens: expected [B, t, D], got " + shape_str(s0));
    const std::size_t B = s0[0], D = s0[2];
    std::vector<std::size_t> lens, ids;
    std::size_t total = 0;
    for (const auto& p : parts) {
        same_tape(parts[0], p, "concat_tokens");
        const Shape& s = p.shape();
        require(s.size() == 3 && s[0] == B && s[2] == D,
                "concat_tokens: part " + shape_str(s) + " incompatible with " + shape_str(s0));
        lens.push_back(s[1]);
        ids.push_back(p.id());
        total += s[1];
    }
    Tensor<T> out(Shape{B, total, D});
    for (std::size_t b = 0; b < B; ++b) {
        std::size_t off = 0;
        for (std::size_t i = 0; i < parts.size(); ++i) {
            const auto& src = parts[i].value().data;
            std::copy(src.begin() + b * lens[i] * D, src.begin() + (b + 1) * lens[i] * D,
                      out.data.begin() + (b * total + off) * D);
            off += lens[i];
        }
    }
    return tape->record(std::move(out), ids, [=](Tape<T>& tp, std::size_t self) {
        const auto& g = tp.grad(self);
        for (std::size_t b = 0; b < B; ++b) {
            std::size_t off = 0;
            for (std::size_t i = 0; i < ids.size(); ++i) {
                if (tp.needs_grad(ids[i])) {
                    auto& gi = tp.grad(ids[i]);
                    for (std::size_t j = 0; j < lens[i] * D; ++j) gi[b * lens[i] * D + j] += g[(b * total + off) * D + j];
                }
                off += lens[i];
            }
        }
    });
}

template <typename T>
Var<T> broadcast_batch(const Var<T>& v, std::size_t batch) {
    Tape<T>* tape = tape_of(v, "broadcast_batch");
    const Shape& s = v.shape();
    require(s.size() == 1 || s.size() == 2, "broadcast_batch: expected [D] or [t, D], got " + shape_str(s));
    require(batch >= 1, "broadcast_batch: batch must be positive");
    const std::size_t t = s.size() == 1 ? 1 : s[0];
    const std::size_t D = s.back();
    const std::size_t n = t * D;
    Tensor<T> out(Shape{batch, t, D});
    const auto& src = v.value().data;
    for (std::size_t b = 0; b < batch; ++b) std::copy(src.begin(), src.end(), out.data.begin() + b * n);
    const std::size_t iv = v.id();
    return tape->record(std::move(out), {iv}, [=](Tape<T>& tp, std::size_t self) {
        const auto& g = tp.grad(self);
        auto& gv = tp.grad(iv);
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t j = 0; j < n; ++j) gv[j] += g[b * n + j];
    });
}

template <typename T>
Var<T> select_token(const Var<T>& x, std::size_t token) {
    Tape<T>* tape = tape_of(x, "select_token");
    const Shape& s = x.shape();
    require(s.size() == 3 && token < s[1], "select_token: token " + std::to_string(token) + " out of " + shape_str(s));
    const std::size_t B = s[0], Tn = s[1], D = s[2];
    Tensor<T> out(Shape{B, D});
    const auto& src = x.value().data;
    for (std::size_t b = 0; b < B; ++b)
        std::copy(src.begin() + (b * Tn + token) * D, src.begin() + (b * Tn + token + 1) * D, out.data.begin() + b * D);
    const std::size_t ix = x.id();
    return tape->record(std::move(out), {ix}, [=](Tape<T>& tp, std::size_t self) {
        const auto& g = tp.grad(self);
        auto& gx = tp.grad(ix);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t d = 0; d < D; ++d) gx[(b * Tn + token) * D + d] += g[b * D + d];
    });
}

template <typename T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<std::int64_t>& labels) {
    Tape<T>* tape = tape_of(logits, "cross_entropy");
    const Shape& s = logits.shape();
    require(s.size() == 2 && s[0] == labels.size(),
            "cross_entropy: logits " + shape_str(s) + " vs " + std::to_string(labels.size()) + " labels");
    const std::size_t B = s[0], C = s[1];
    for (auto l : labels) {
        if (l < 0 || static_cast<std::size_t>(l) >= C) {
            throw DataError("cross_entropy: label " + std::to_string(l) + " outside [0, " + std::to_string(C) + ")");
        }
    }
    const auto& z = logits.value().data;
    std::vector<T> prob(B * C);
    T total = T(0);
    for (std::size_t b = 0; b < B; ++b) {
        const T* row = z.data() + b * C;
        const T mx = *std::max_element(row, row + C);
        T s2 = T(0);
        for (std::size_t c = 0; c < C; ++c) {
            prob[b * C + c] = std::exp(row[c] - mx);
            s2 += prob[b * C + c];
        }
        for (std::size_t c = 0; c < C; ++c) prob[b * C + c] /= s2;
        const T lse = mx + std::log(s2);
        total += lse - row[labels[b]];
    }
    Tensor<T> out(Shape{}, std::vector<T>{total / static_cast<T>(B)});
    const std::size_t il = logits.id();
    return tape->record(std::move(out), {il}, [=, prob = std::move(prob)](Tape<T>& tp, std::size_t self) {
        const T g = tp.grad(self)[0] / static_cast<T>(B);
        auto& gl = tp.grad(il);
        for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t c = 0; c < C; ++c) {
                const T onehot = static_cast<std::int64_t>(c) == labels[b] ? T(1) : T(0);
                gl[b * C + c] += g * (prob[b * C + c] - onehot);
            }
        }
    });
}

template <typename T>
Var<T> triplet_batch_hard(const Var<T>& features, const std::vector<std::int64_t>& labels, T margin) {
    Tape<T>* tape = tape_of(features, "triplet_batch_hard");
    const Shape& s = features.shape();
    require(s.size() == 2 && s[0] == labels.size(),
            "triplet_batch_hard: features " + shape_str(s) + " vs " + std::to_string(labels.size()) + " labels");
    const std::size_t B = s[0], D = s[1];
    const auto& f = features.value().data;
    std::vector<T> dist(B * B, T(0));
    for (std::size_t i = 0; i < B; ++i) {
        for (std::size_t j = i + 1; j < B; ++j) {
            T acc = T(0);
            for (std::size_t d = 0; d < D; ++d) {
                const T diff = f[i * D + d] - f[j * D + d];
                acc += diff * diff;
            }
            dist[i * B + j] = dist[j * B + i] = std::sqrt(acc);
        }
    }
    struct Triple {
        std::size_t a, p, n;
    };
    std::vector<Triple> active;
    std::size_t anchors = 0;
    bool two_ids = false;
    T total = T(0);
    for (std::size_t a = 0; a < B; ++a) {
        std::size_t p = B, n = B;
        for (std::size_t j = 0; j < B; ++j) {
            if (j == a) continue;
            if (labels[j] == labels[a]) {
                if (p == B || dist[a * B + j] > dist[a * B + p]) p = j;
            } else {
                two_ids = true;
                if (n == B || dist[a * B + j] < dist[a * B + n]) n = j;
            }
        }
        if (p == B || n == B) continue;
        ++anchors;
        const T h = margin + dist[a * B + p] - dist[a * B + n];
        if (h > T(0)) {
            total += h;
            active.push_back({a, p, n});
        }
    }
    if (!two_ids || anchors == 0) {
        throw ContractError("triplet_batch_hard: batch needs at least two identities and one repeated identity");
    }
    Tensor<T> out(Shape{}, std::vector<T>{total / static_cast<T>(anchors)});
    const std::size_t ifeat = features.id();
    return tape->record(std::move(out), {ifeat},
                        [=, dist = std::move(dist), active = std::move(active)](Tape<T>& tp, std::size_t self) {
                            const T g = tp.grad(self)[0] / static_cast<T>(anchors);
                            const auto& fv = tp.value(ifeat).data;
                            auto& gf = tp.grad(ifeat);
                            for (const auto& tr : active) {
                                const T dap = dist[tr.a * B + tr.p];
                                const T dan = dist[tr.a * B + tr.n];
                                for (std::size_t d = 0; d < D; ++d) {
                                    if (dap > T(0)) {
                                        const T u = g * (fv[tr.a * D + d] - fv[tr.p * D + d]) / dap;
                                        gf[tr.a * D + d] += u;
                                        gf[tr.p * D + d] -= u;
                                    }
                                    if (dan > T(0)) {
                                        const T w = g * (fv[tr.a * D + d] - fv[tr.n * D + d]) / dan;
                                        gf[tr.a * D + d] -= w;
                                        gf[tr.n * D + d] += w;
                                    }
                                }
                            }
                        });
}

#define DRI_INSTANTIATE_OPS(T)                                                                               \
    template Var<T> matmul(const Var<T>&, const Var<T>&);                                                    \
    template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                                     \
    template Var<T> add(const Var<T>&, const Var<T>&);                                                       \
    template Var<T> mul(const Var<T>&, const Var<T>&);                                                       \
    template Var<T> scale(const Var<T>&, T);                                                                 \
    template Var<T> add_per_sample(const Var<T>&, const Var<T>&);                                            \
    template Var<T> sum(const Var<T>&);                                                                      \
    template Var<T> mean(const Var<T>&);                                                                     \
    template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, T);                              \
    template Var<T> softmax(const Var<T>&);                                                                  \
    template Var<T> gelu(const Var<T>&);                                                                     \
    template Var<T> batch_norm_1d(const Var<T>&, const Var<T>&, const Var<T>&, const BatchNormState<T>&);    \
    template Var<T> attention(const Var<T>&, std::size_t, const std::vector<std::size_t>&);                  \
    template Var<T> concat_tokens(const std::vector<Var<T>>&);                                               \
    template Var<T> broadcast_batch(const Var<T>&, std::size_t);                                             \
    template Var<T> select_token(const Var<T>&, std::size_t);                                                \
    template Var<T> cross_entropy(const Var<T>&, const std::vector<std::int64_t>&);                          \
    template Var<T> triplet_batch_hard(const Var<T>&, const std::vector<std::int64_t>&, T);                  \
    template void rope_rotate(T*, std::size_t, std::size_t, bool);                                           \
    template Tensor<T> rope(const Tensor<T>&, const std::vector<std::size_t>&);

DRI_INSTANTIATE_OPS(float)
DRI_INSTANTIATE_OPS(double)

#undef DRI_INSTANTIATE_OPS

}  // namespace dri::ops
