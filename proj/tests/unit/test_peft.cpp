#include <doctest.h>

#include "dri/errors.hpp"
#include "dri/layers.hpp"
#include "dri/model.hpp"
#include "support/testing.hpp"

using namespace dri;
using namespace dri::testing;

namespace {

/// Solves the square system M X = R (row-major, M is n x n, R is n x m) by
/// Gauss-Jordan elimination with partial pivoting.
std::vector<double> solve(std::vector<double> M, std::vector<double> R, std::size_t n, std::size_t m) {
    for (std::size_t c = 0; c < n; ++c) {
        std::size_t piv = c;
        for (std::size_t r = c + 1; r < n; ++r)
            if (std::abs(M[r * n + c]) > std::abs(M[piv * n + c])) piv = r;
        for (std::size_t j = 0; j < n; ++j) std::swap(M[c * n + j], M[piv * n + j]);
        for (std::size_t j = 0; j < m; ++j) std::swap(R[c * m + j], R[piv * m + j]);
        for (std::size_t r = 0; r < n; ++r) {
            if (r == c) continue;
            const double f = M[r * n + c] / M[c * n + c];
            for (std::size_t j = 0; j < n; ++j) M[r * n + j] -= f * M[c * n + j];
            for (std::size_t j = 0; j < m; ++j) R[r * m + j] -= f * R[c * m + j];
        }
    }
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < m; ++j) R[r * m + j] /= M[r * n + r];
    return R;
}

template <typename T>
struct LoraFixture {
    ParameterStore<T> store;
    Linear<T> base;
    LoraAdapter<T> ad;

    LoraFixture(std::size_t in, std::size_t out, std::size_t rank, T alpha, std::uint64_t seed) {
        Gen g(seed);
        base = Linear<T>::create(store, "base", in, out);
        base.weight->tensor.data = random_tensor<T>({out, in}, g).data;
        base.bias->tensor.data = random_tensor<T>({out}, g).data;
        Rng rng(seed);
        ad = LoraAdapter<T>::create(store, "lora", base, rank, alpha, rng);
    }
};

/// x W^T + b for a dense W [out, in].
template <typename T>
std::vector<T> dense(const Tensor<T>& W, const std::vector<T>& b, const std::vector<T>& x) {
    const std::size_t out = W.dim(0), in = W.dim(1);
    std::vector<T> y(b);
    for (std::size_t o = 0; o < out; ++o)
        for (std::size_t i = 0; i < in; ++i) y[o] += W.data[o * in + i] * x[i];
    return y;
}

}  // namespace

TEST_CASE("fresh lora is the base layer") {
    LoraFixture<float> f(6, 5, 2, 2.0f, 1);
    CHECK(std::all_of(f.ad.b->tensor.data.begin(), f.ad.b->tensor.data.end(), [](float v) { return v == 0; }));
    Gen g(2);
    const auto x = random_tensor<float>({3, 6}, g);
    Tape<float> t;
    const auto with = lora_forward(t, t.input(x), f.base, &f.ad).value();
    CHECK(bit_equal(with, f.base(t, t.input(x)).value()));
    CHECK(bit_equal(f.ad.merged(f.base.weight->tensor), f.base.weight->tensor));
    CHECK(f.ad.param_count() == 2 * (6 + 5));
}

TEST_CASE("lora hand product") {
    LoraFixture<double> f(4, 4, 1, 1.0, 3);
    std::fill(f.ad.a->tensor.data.begin(), f.ad.a->tensor.data.end(), 0.0);
    std::fill(f.ad.b->tensor.data.begin(), f.ad.b->tensor.data.end(), 0.0);
    f.ad.a->tensor.data[0] = 1.0;  // A = e1^T
    f.ad.b->tensor.data[1] = 1.0;  // B = e2
    std::fill(f.base.bias->tensor.data.begin(), f.base.bias->tensor.data.end(), 0.0);
    Tape<double> t;
    const auto h = lora_forward(t, t.input(Tensor<double>(Shape{1, 4}, {1, 0, 0, 0})), f.base, &f.ad).value().data;
    for (std::size_t o = 0; o < 4; ++o) {
        const double expect = f.base.weight->tensor.data[o * 4] + (o == 1 ? 1.0 : 0.0);
        CHECK(h[o] == doctest::Approx(expect).epsilon(1e-15));
    }
}

TEST_CASE("full-rank lora reaches any update by least squares") {
    const std::size_t d = 5, k = 5, r = 5;
    LoraFixture<double> f(k, d, r, 2.0, 4);
    Gen g(5);
    const auto target = random_tensor<double>({d, k}, g);
    // Fix A, solve B A = target / scaling, i.e. A^T B^T = target^T / scaling.
    const auto& A = f.ad.a->tensor.data;  // [r, k]
    std::vector<double> At(k * r), rhs(k * d);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < k; ++j) At[j * r + i] = A[i * k + j];
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < k; ++j) rhs[j * d + i] = target.data[i * k + j] / f.ad.scaling();
    const auto Bt = solve(At, rhs, k, d);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < r; ++j) f.ad.b->tensor.data[i * r + j] = Bt[j * d + i];
    const auto merged = f.ad.merged(f.base.weight->tensor);
    for (std::size_t i = 0; i < d * k; ++i) CHECK(std::abs(merged.data[i] - f.base.weight->tensor.data[i] - target.data[i]) <= 1e-9);
}

TEST_CASE("merged and two-path forwards agree") {
    auto run = [](auto zero, double tol) {
        using T = decltype(zero);
        LoraFixture<T> f(8, 8, 2, T(3), 6);
        Gen g(7);
        f.ad.b->tensor.data = random_tensor<T>({8, 2}, g).data;
        const auto merged = f.ad.merged(f.base.weight->tensor);
        double worst = 0;
        for (int i = 0; i < 100; ++i) {
            const auto x = random_tensor<T>({1, 8}, g);
            Tape<T> t;
            const auto two = lora_forward(t, t.input(x), f.base, &f.ad).value().data;
            const auto one = dense(merged, f.base.bias->tensor.data, x.data);
            for (std::size_t o = 0; o < 8; ++o) worst = std::max(worst, std::abs(double(two[o]) - double(one[o])));
        }
        CHECK(worst <= tol);
    };
    run(0.0f, 1e-5);
    run(0.0, 1e-10);
}

TEST_CASE("bottleneck adapter") {
    ParameterStore<double> s;
    Rng rng(8);
    auto ad = BottleneckAdapter<double>::create(s, "ad", 16, 4, rng);
    Gen g(9);
    const auto x = random_tensor<double>({3, 16}, g);
    Tape<double> t;
    CHECK(bit_equal(ad(t, t.input(x)).value(), x));

    ParameterStore<float> big;
    Rng rng2(1);
    CHECK(BottleneckAdapter<float>::create(big, "ad", 384, 128, rng2).param_count() == 98'816);

    ad.up.weight->tensor.data = random_tensor<double>(ad.up.weight->tensor.shape, g).data;
    Tensor<double> x2 = x;
    for (auto& v : x2.data) v *= 2;
    const auto y1 = ad(t, t.input(x)).value().data;
    const auto y2 = ad(t, t.input(x2)).value().data;
    // adapter(2x) - adapter(x) vs adapter(x): equal only if the path were linear and bias-free.
    double gap = 0;
    for (std::size_t i = 0; i < y1.size(); ++i) gap = std::max(gap, std::abs((y2[i] - y1[i]) - y1[i]));
    CHECK(gap > 1e-6);
}

TEST_CASE("mode switching sets the trainable set") {
    const ModelConfig lora_cfg = [] {
        ModelConfig c = tiny_model(PeftMode::Lora);
        c.peft.lora.rank = 4;
        c.peft.lora.alpha = 4;
        return c;
    }();
    ReidModel<float> lora(lora_cfg);
    const std::size_t D = lora_cfg.backbone.dim, L = lora_cfg.backbone.depth;
    const std::size_t head = D * lora_cfg.num_ids + D;
    CHECK(lora.trainable_table().total() == L * (4 * (D + 3 * D) + 4 * (D + D)) + head);
    std::size_t enumerated = 0;
    for (const auto& ad : lora.lora()) enumerated += ad.rank * (ad.a->tensor.dim(1) + ad.b->tensor.dim(0));
    CHECK(enumerated + head == lora.trainable_table().total());

    PeftConfig frozen = lora_cfg.peft;
    frozen.mode = PeftMode::Frozen;
    CHECK(apply_mode(lora, frozen).total() == head);

    PeftConfig full = lora_cfg.peft;
    full.mode = PeftMode::FullFt;
    apply_mode(lora, full);
    std::size_t backbone = 0, all = 0;
    for (const auto& p : lora.store().params()) {
        all += p->tensor.size();
        if (p->name.rfind("backbone.", 0) == 0) backbone += p->tensor.size();
    }
    CHECK(lora.trainable_table().get("backbone") == backbone);

    ReidModel<float> ft(tiny_model(PeftMode::FullFt));
    std::size_t ft_all = 0;
    for (const auto& p : ft.store().params()) ft_all += p->tensor.size();
    CHECK(ft.trainable_table().total() == ft_all);

    PeftConfig dri = lora_cfg.peft;
    dri.mode = PeftMode::Dri;
    CHECK_THROWS_AS(apply_mode(lora, dri), ConfigError);
    CHECK_THROWS_AS(parse_peft_mode("prompt"), ConfigError);
}

TEST_CASE("gradients stay inside each mode's trainable set") {
    Gen g(10);
    const auto images = random_tensor<float>({4, 3, 16, 16}, g, 0, 1);
    const std::vector<std::int64_t> labels{0, 0, 1, 1};
    for (PeftMode mode : {PeftMode::Frozen, PeftMode::FullFt, PeftMode::Lora, PeftMode::Adapter, PeftMode::Dri}) {
        CAPTURE(to_string(mode));
        ReidModel<float> m(tiny_model(mode));
        Tape<float> t;
        t.backward(total_loss<float>(m.head().forward(t, m.embed(t, images), true), labels, 0.3f).total);
        for (const auto& p : m.store().params()) {
            CAPTURE(p->name);
            if (!p->trainable) CHECK_FALSE(p->tensor.has_grad());
        }
        CHECK(m.store().find("head.classifier.weight")->tensor.has_grad());
    }
}
