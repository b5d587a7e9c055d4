#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "dri/layers.hpp"

namespace dri {

/// BNNeck: the triplet branch sees the raw global feature, the identity
/// classifier sees its batch-normalized version. BN shift is fixed at zero and
/// the classifier has no bias.
template <typename T>
class BnNeckHead {
public:
    BnNeckHead(std::size_t dim, std::size_t num_ids, ParameterStore<T>& store, Rng& rng);

    struct Output {
        Var<T> f_t;     // = f_g
        Var<T> f_i;     // BN(f_g)
        Var<T> logits;  // [B, num_ids]
    };

    /// Eval mode uses running statistics and requires at least one training batch to have been seen.
    Output forward(Tape<T>& tape, const Var<T>& f_g, bool training) const;

    std::size_t dim() const { return gamma_->tensor.size(); }
    std::size_t num_ids() const { return classifier_->tensor.dim(0); }
    bool fitted() const { return batches_seen_->data[0] > T(0); }

    Parameter<T>& gamma() { return *gamma_; }
    Parameter<T>& classifier() { return *classifier_; }
    std::vector<Parameter<T>*> parameters() const { return {gamma_, classifier_}; }
    std::size_t param_count() const { return gamma_->tensor.size() + classifier_->tensor.size(); }

private:
    Parameter<T>* gamma_;
    Parameter<T>* classifier_;
    Tensor<T>* running_mean_;
    Tensor<T>* running_var_;
    Tensor<T>* batches_seen_;
};

/// Linear map (size, aspect) -> one D-wide token placed after CLS.
template <typename T>
class SstEncoder {
public:
    SstEncoder(std::size_t dim, ParameterStore<T>& store, Rng& rng);

    /// meta holds B rows of (size, aspect); returns [B, 1, D].
    Var<T> forward(Tape<T>& tape, const std::vector<std::array<T, 2>>& meta) const;
    std::vector<Parameter<T>*> parameters() const { return {proj_.weight, proj_.bias}; }
    std::size_t param_count() const { return proj_.param_count(); }

private:
    Linear<T> proj_;
};

template <typename T>
struct LossReport {
    Var<T> triplet;
    Var<T> id;
    Var<T> total;

    T triplet_value() const { return triplet.value()[0]; }
    T id_value() const { return id.value()[0]; }
    T total_value() const { return total.value()[0]; }
};

inline constexpr double kDefaultMargin = 0.3;

/// total = triplet(f_t) + cross_entropy(logits), unweighted.
template <typename T>
LossReport<T> total_loss(const typename BnNeckHead<T>::Output& head, const std::vector<std::int64_t>& labels,
                         T margin);

}  // namespace dri
