#include "dri/reid.hpp"

#include <cmath>

#include "dri/errors.hpp"

namespace dri {

template <typename T>
BnNeckHead<T>::BnNeckHead(std::size_t dim, std::size_t num_ids, ParameterStore<T>& store, Rng& rng) {
    if (num_ids == 0) throw ConfigError("head: num_ids must be positive");
    gamma_ = &store.create("head.bn.weight", Shape{dim});
    std::fill(gamma_->tensor.data.begin(), gamma_->tensor.data.end(), T(1));
    classifier_ = &store.create("head.classifier.weight", Shape{num_ids, dim});
    normal(classifier_->tensor, T(0.001), rng);
    running_mean_ = &store.create_buffer("head.bn.running_mean", Shape{dim}, T(0));
    running_var_ = &store.create_buffer("head.bn.running_var", Shape{dim}, T(1));
    batches_seen_ = &store.create_buffer("head.bn.batches_seen", Shape{1}, T(0));
}

template <typename T>
typename BnNeckHead<T>::Output BnNeckHead<T>::forward(Tape<T>& tape, const Var<T>& f_g, bool training) const {
    if (!training && !fitted()) {
        throw StateError("BNNeck head evaluated before any training batch fitted its running statistics");
    }
    ops::BatchNormState<T> st;
    st.running_mean = running_mean_;
    st.running_var = running_var_;
    st.training = training;
    Output out;
    out.f_t = f_g;
    out.f_i = ops::batch_norm_1d(f_g, tape.param(*gamma_), Var<T>{}, st);
    out.logits = ops::linear(out.f_i, tape.param(*classifier_), Var<T>{});
    if (training) batches_seen_->data[0] += T(1);
    return out;
}

template <typename T>
SstEncoder<T>::SstEncoder(std::size_t dim, ParameterStore<T>& store, Rng& rng) {
    proj_ = Linear<T>::create(store, "sst.proj", 2, dim);
    const T bound = T(1) / std::sqrt(T(2));
    uniform(proj_.weight->tensor, -bound, bound, rng);
    uniform(proj_.bias->tensor, -bound, bound, rng);
}

template <typename T>
Var<T> SstEncoder<T>::forward(Tape<T>& tape, const std::vector<std::array<T, 2>>& meta) const {
    if (meta.empty()) throw DataError("ship-size token requested without size metadata");
    Tensor<T> in(Shape{meta.size(), 1, 2});
    for (std::size_t b = 0; b < meta.size(); ++b) {
        in.data[2 * b] = meta[b][0];
        in.data[2 * b + 1] = meta[b][1];
    }
    return proj_(tape, tape.constant(std::move(in)));
}

template <typename T>
LossReport<T> total_loss(const typename BnNeckHead<T>::Output& head, const std::vector<std::int64_t>& labels,
                         T margin) {
    LossReport<T> r;
    r.triplet = ops::triplet_batch_hard(head.f_t, labels, margin);
    r.id = ops::cross_entropy(head.logits, labels);
    r.total = ops::add(r.triplet, r.id);
    return r;
}

template class BnNeckHead<float>;
template class BnNeckHead<double>;
template class SstEncoder<float>;
template class SstEncoder<double>;
template LossReport<float> total_loss<float>(const BnNeckHead<float>::Output&, const std::vector<std::int64_t>&,
                                             float);
template LossReport<double> total_loss<double>(const BnNeckHead<double>::Output&, const std::vector<std::int64_t>&,
                                               double);

}  // namespace dri
