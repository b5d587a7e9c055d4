#include <doctest.h>

#include <cmath>
#include <numbers>

#include "dri/errors.hpp"
#include "dri/ops.hpp"
#include "dri/optim.hpp"
#include "support/op_checks.hpp"
#include "support/testing.hpp"

using namespace dri;
using namespace dri::testing;

namespace {

constexpr int kTrials = 20;
constexpr double kOpTolerance = 1e-6;

}  // namespace

TEST_CASE("tensor shape and gradient buffer contracts") {
    Tensor<float> t(Shape{2, 3}, 1.5f);
    CHECK(t.size() == numel(t.shape));
    CHECK_THROWS_AS(Tensor<float>(Shape{2, 2}, std::vector<float>{1, 2, 3}), DimensionError);

    t.accumulate_grad(std::vector<float>(6, 1.0f));
    CHECK_FALSE(t.has_grad());
    t.requires_grad = true;
    t.accumulate_grad(std::vector<float>(6, 1.0f));
    t.accumulate_grad(std::vector<float>(6, 2.0f));
    REQUIRE(t.grad.size() == t.data.size());
    CHECK(t.grad[4] == 3.0f);
}

TEST_CASE("parameter names are unique within a store") {
    ParameterStore<float> s;
    s.create("a.weight", Shape{2});
    CHECK_THROWS(s.create("a.weight", Shape{3}));
    CHECK(s.find("a.weight") != nullptr);
    CHECK(s.find("missing") == nullptr);
}

TEST_CASE("backward of simple sums") {
    Tape<double> tape;
    auto x = tape.input(Tensor<double>(Shape{3}, {1, 2, 3}));
    tape.backward(ops::sum(x));
    CHECK(x.grad() == std::vector<double>{1, 1, 1});

    Tape<double> t2;
    auto y = t2.input(Tensor<double>(Shape{3}, {1, 2, 3}));
    t2.backward(ops::sum(ops::mul(y, y)));
    CHECK(y.grad() == std::vector<double>{2, 4, 6});
}

TEST_CASE("tape records nodes after their inputs") {
    Tape<double> tape;
    auto a = tape.input(Tensor<double>(Shape{2}, {1, 2}));
    auto b = ops::scale(a, 2.0);
    auto c = ops::add(a, b);
    CHECK(a.id() < b.id());
    CHECK(b.id() < c.id());
    tape.backward(ops::sum(c));
    // c = 3a, visited once per node
    CHECK(a.grad() == std::vector<double>{3, 3});
}

TEST_CASE("matmul examples") {
    Tape<double> tape;
    auto eye = tape.input(Tensor<double>(Shape{2, 2}, {1, 0, 0, 1}));
    auto b = tape.input(Tensor<double>(Shape{2, 2}, {5, 6, 7, 8}));
    CHECK(ops::matmul(eye, b).value().data == std::vector<double>{5, 6, 7, 8});

    Tape<double> t2;
    auto a2 = t2.input(Tensor<double>(Shape{2, 2}, {1, 2, 3, 4}));
    auto i2 = t2.input(Tensor<double>(Shape{2, 2}, {1, 0, 0, 1}));
    t2.backward(ops::sum(ops::matmul(a2, i2)));
    CHECK(a2.grad() == std::vector<double>{1, 1, 1, 1});

    Tape<double> t3;
    auto bad = t3.input(Tensor<double>(Shape{2, 3}));
    CHECK_THROWS_AS(ops::matmul(bad, bad), DimensionError);
}

TEST_CASE("layer_norm examples") {
    Tape<double> tape;
    auto gamma = tape.constant(Tensor<double>(Shape{2}, {1, 1}));
    auto beta = tape.constant(Tensor<double>(Shape{2}, {0, 0}));
    auto x = tape.input(Tensor<double>(Shape{2}, {1, 3}));
    auto y = ops::layer_norm(x, gamma, beta, 1e-12);
    CHECK(y.value()[0] == doctest::Approx(-1.0).epsilon(1e-9));
    CHECK(y.value()[1] == doctest::Approx(1.0).epsilon(1e-9));

    auto g4 = tape.constant(Tensor<double>(Shape{4}, 1.0));
    auto b4 = tape.constant(Tensor<double>(Shape{4}, 0.0));
    auto flat = ops::layer_norm(tape.input(Tensor<double>(Shape{4}, 2.5)), g4, b4, 1e-6);
    for (double v : flat.value().data) CHECK(v == 0.0);
}

TEST_CASE("softmax examples") {
    Tape<double> tape;
    auto u = ops::softmax(tape.input(Tensor<double>(Shape{4}, 0.7)));
    for (double v : u.value().data) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));

    auto p = ops::softmax(tape.input(Tensor<double>(Shape{2}, {0.0, std::log(3.0)})));
    CHECK(p.value()[0] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(p.value()[1] == doctest::Approx(0.75).epsilon(1e-12));

    // Integer shifts keep the max-subtracted logits bit-identical.
    Tensor<double> x(Shape{3}, {0.5, -1.25, 2.0});
    Tensor<double> shifted = x;
    for (auto& v : shifted.data) v += 8.0;
    const auto base = ops::softmax(tape.input(x)).value();
    CHECK(bit_equal(base, ops::softmax(tape.input(shifted)).value()));
}

TEST_CASE("gelu examples") {
    Tape<double> tape;
    auto y = ops::gelu(tape.input(Tensor<double>(Shape{3}, {0.0, 10.0, 1.0})));
    CHECK(y.value()[0] == 0.0);
    CHECK(std::abs(y.value()[1] - 10.0) <= 1e-6);
    // 0.5 * (1 + erf(1 / sqrt 2))
    CHECK(y.value()[2] == doctest::Approx(0.841345).epsilon(1e-6));
}

TEST_CASE("batch_norm_1d statistics") {
    Tensor<double> rm(Shape{4}, 0.0), rv(Shape{4}, 1.0);
    ops::BatchNormState<double> st{&rm, &rv, 0.1, 1e-5, true};
    Gen g(7);
    Tape<double> tape;
    auto gamma = tape.constant(Tensor<double>(Shape{4}, 1.0));
    auto y = ops::batch_norm_1d(tape.input(random_tensor<double>(Shape{8, 4}, g, -3, 5)), gamma, Var<double>{}, st);
    for (std::size_t d = 0; d < 4; ++d) {
        double mu = 0, var = 0;
        for (std::size_t b = 0; b < 8; ++b) mu += y.value()[b * 4 + d];
        mu /= 8;
        for (std::size_t b = 0; b < 8; ++b) var += std::pow(y.value()[b * 4 + d] - mu, 2);
        var /= 8;
        CHECK(std::abs(mu) <= 1e-6);
        CHECK(std::abs(var - 1.0) <= 1e-4);
    }

    Tensor<double> zm(Shape{2}, 0.0), ov(Shape{2}, 1.0);
    ops::BatchNormState<double> ev{&zm, &ov, 0.1, 0.0, false};
    Tensor<double> in(Shape{3, 2}, {1, -2, 3, 0.5, -7, 4});
    auto id = ops::batch_norm_1d(tape.input(in), tape.constant(Tensor<double>(Shape{2}, 1.0)), Var<double>{}, ev);
    CHECK(id.value().data == in.data);

    Tensor<double> std_cols(Shape{2, 2}, {1, -1, -1, 1});
    ops::BatchNormState<double> tr{&zm, &ov, 0.1, 0.0, true};
    auto same = ops::batch_norm_1d(tape.input(std_cols), tape.constant(Tensor<double>(Shape{2}, 1.0)), Var<double>{}, tr);
    CHECK(same.value().data == std_cols.data);
}

TEST_CASE("every primitive matches central differences") {
    Gen g(2024);
    for (int trial = 0; trial < kTrials; ++trial) {
        for (const auto& [op, err] : primitive_gradient_errors(g, trial)) {
            CAPTURE(op);
            CAPTURE(trial);
            CHECK(err <= kOpTolerance);
        }
    }
}

TEST_CASE("backward through a composite of many primitives") {
    Gen g(99);
    const auto fn = [](Tape<double>& t, const std::vector<Var<double>>& v) {
        auto h = ops::linear(v[0], v[1], v[2]);
        auto n = ops::layer_norm(h, v[3], v[4], 1e-6);
        auto a = ops::gelu(n);
        auto s = ops::softmax(ops::scale(a, 2.0));
        auto m = ops::mul(s, ops::add(a, v[0]));
        return ops::mean(ops::add(m, t.constant(Tensor<double>(Shape{4}, 0.5))));
    };
    CHECK(gradient_error(fn, {random_tensor<double>({3, 4}, g), random_tensor<double>({4, 4}, g),
                              random_tensor<double>({4}, g), random_tensor<double>({4}, g),
                              random_tensor<double>({4}, g)}) <= kOpTolerance);
}

TEST_CASE("sgd examples") {
    ParameterStore<double> s;
    auto& w = s.create("w", Shape{1});
    w.tensor.data[0] = 1.0;
    Sgd<double> plain(0.1, 0.0, 0.0);
    w.tensor.grad = {2.0};
    plain.step(s);
    CHECK(w.tensor.data[0] == doctest::Approx(0.8).epsilon(1e-15));

    ParameterStore<double> s2;
    auto& v = s2.create("v", Shape{1});
    Sgd<double> mom(1.0, 0.9, 0.0);
    for (int i = 0; i < 2; ++i) {
        v.tensor.grad = {1.0};
        mom.step(s2);
    }
    CHECK(v.tensor.data[0] == doctest::Approx(-2.9).epsilon(1e-15));
}

TEST_CASE("frozen parameters never move under sgd") {
    Gen g(5);
    ParameterStore<float> s;
    auto& frozen = s.create("frozen", Shape{16}, false);
    auto& live = s.create("live", Shape{16});
    frozen.tensor = random_tensor<float>({16}, g);
    live.tensor.data = random_tensor<float>({16}, g).data;
    const auto before = frozen.tensor.data;
    const auto live_before = live.tensor.data;
    Sgd<float> opt(0.5f, 0.9f, 1e-2f);
    for (int i = 0; i < 10; ++i) {
        live.tensor.grad.assign(16, 1.0f);
        opt.step(s);
    }
    CHECK(std::memcmp(before.data(), frozen.tensor.data.data(), before.size() * sizeof(float)) == 0);
    CHECK(live.tensor.data != live_before);
    CHECK(opt.velocity().count(&frozen) == 0);
}

TEST_CASE("forward passes are deterministic") {
    Gen g1(11), g2(11);
    auto a = random_tensor<double>({2, 5, 24}, g1);
    auto b = random_tensor<double>({2, 5, 24}, g2);
    Tape<double> t1, t2;
    auto pos = token_positions(1, 4);
    CHECK(bit_equal(ops::attention(t1.input(a), 2, pos).value(), ops::attention(t2.input(b), 2, pos).value()));
}
