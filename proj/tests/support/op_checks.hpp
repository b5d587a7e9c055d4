#pragma once

#include <string>
#include <utility>
#include <vector>

#include "dri/ops.hpp"
#include "support/testing.hpp"

namespace dri::testing {

/// sum(y * w) for a fixed random weight, turning any output into a scalar.
inline Var<double> contract(Tape<double>& tape, const Var<double>& y, std::uint64_t seed) {
    Gen g(seed);
    return ops::sum(ops::mul(y, tape.constant(random_tensor<double>(y.shape(), g))));
}

/// One randomized finite-difference check per primitive, as (op, relative error).
inline std::vector<std::pair<std::string, double>> primitive_gradient_errors(Gen& g, int trial) {
    std::vector<std::pair<std::string, double>> out;
    auto record = [&](const char* name, double err) { out.emplace_back(name, err); };
    const std::size_t m = pick(g, 1, 4), k = pick(g, 1, 5), n = pick(g, 1, 4);
    const auto seed = g();

    record("matmul", gradient_error([&](auto& t, const auto& v) { return contract(t, ops::matmul(v[0], v[1]), seed); },
                                    {random_tensor<double>({m, k}, g), random_tensor<double>({k, n}, g)}));
    record("linear",
           gradient_error(
               [&](auto& t, const auto& v) { return contract(t, ops::linear(v[0], v[1], v[2]), seed); },
               {random_tensor<double>({2, m, k}, g), random_tensor<double>({n, k}, g), random_tensor<double>({n}, g)}));
    record("add", gradient_error([&](auto& t, const auto& v) { return contract(t, ops::add(v[0], v[1]), seed); },
                                 {random_tensor<double>({m, n}, g), random_tensor<double>({n}, g)}));
    record("mul", gradient_error([&](auto& t, const auto& v) { return contract(t, ops::mul(v[0], v[1]), seed); },
                                 {random_tensor<double>({m, n}, g), random_tensor<double>({m, n}, g)}));
    record("scale", gradient_error([&](auto& t, const auto& v) { return contract(t, ops::scale(v[0], -1.7), seed); },
                                   {random_tensor<double>({m, n}, g)}));
    record("add_per_sample",
           gradient_error([&](auto& t, const auto& v) { return contract(t, ops::add_per_sample(v[0], v[1]), seed); },
                          {random_tensor<double>({2, m, n}, g), random_tensor<double>({2, n}, g)}));
    record("mean",
           gradient_error([&](auto&, const auto& v) { return ops::mean(v[0]); }, {random_tensor<double>({m, n}, g)}));
    record("layer_norm",
           gradient_error(
               [&](auto& t, const auto& v) { return contract(t, ops::layer_norm(v[0], v[1], v[2], 1e-6), seed); },
               {random_tensor<double>({4, 8}, g), random_tensor<double>({8}, g), random_tensor<double>({8}, g)}));
    record("softmax", gradient_error([&](auto& t, const auto& v) { return contract(t, ops::softmax(v[0]), seed); },
                                     {random_tensor<double>({m, n + 1}, g, -3, 3)}));
    record("gelu", gradient_error([&](auto& t, const auto& v) { return contract(t, ops::gelu(v[0]), seed); },
                                  {random_tensor<double>({m, n}, g, -3, 3)}));

    Tensor<double> rm(Shape{3}, 0.0), rv(Shape{3}, 1.0);
    ops::BatchNormState<double> st{&rm, &rv, 0.1, 1e-5, true};
    record("batch_norm_1d",
           gradient_error(
               [&](auto& t, const auto& v) { return contract(t, ops::batch_norm_1d(v[0], v[1], v[2], st), seed); },
               {random_tensor<double>({m + 2, 3}, g), random_tensor<double>({3}, g, 0.5, 1.5),
                random_tensor<double>({3}, g)}));

    const std::size_t T = pick(g, 1, 5);
    const bool rope = trial % 2 == 0;
    std::vector<std::size_t> pos;
    if (rope) pos = token_positions(1, T - 1);
    record("attention",
           gradient_error([&](auto& t, const auto& v) { return contract(t, ops::attention(v[0], 2, pos), seed); },
                          {random_tensor<double>({2, T, 12}, g)}));

    record("concat_tokens",
           gradient_error(
               [&](auto& t, const auto& v) { return contract(t, ops::concat_tokens<double>({v[0], v[1]}), seed); },
               {random_tensor<double>({2, 1, n}, g), random_tensor<double>({2, m, n}, g)}));
    record("broadcast_batch",
           gradient_error([&](auto& t, const auto& v) { return contract(t, ops::broadcast_batch(v[0], 3), seed); },
                          {random_tensor<double>({m, n}, g)}));
    record("select_token",
           gradient_error([&](auto& t, const auto& v) { return contract(t, ops::select_token(v[0], m - 1), seed); },
                          {random_tensor<double>({2, m, n}, g)}));

    std::vector<std::int64_t> labels;
    for (std::size_t i = 0; i < 6; ++i) labels.push_back(static_cast<std::int64_t>(pick(g, 0, 3)));
    record("cross_entropy", gradient_error([&](auto&, const auto& v) { return ops::cross_entropy(v[0], labels); },
                                           {random_tensor<double>({6, 4}, g, -2, 2)}));
    const std::vector<std::int64_t> pk{0, 0, 1, 1, 2, 2};
    record("triplet_batch_hard",
           gradient_error([&](auto&, const auto& v) { return ops::triplet_batch_hard(v[0], pk, 0.3); },
                          {random_tensor<double>({6, 5}, g)}));
    return out;
}

}  // namespace dri::testing
