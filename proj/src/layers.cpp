#include "dri/layers.hpp"

#include "dri/errors.hpp"

namespace dri {

template <typename T>
Linear<T> Linear<T>::create(ParameterStore<T>& store, const std::string& prefix, std::size_t in, std::size_t out,
                            bool with_bias) {
    Linear<T> l;
    l.weight = &store.create(prefix + ".weight", Shape{out, in});
    if (with_bias) l.bias = &store.create(prefix + ".bias", Shape{out});
    return l;
}

template <typename T>
Var<T> Linear<T>::operator()(Tape<T>& tape, const Var<T>& x) const {
    Var<T> w = tape.param(*weight);
    Var<T> b = bias ? tape.param(*bias) : Var<T>{};
    return ops::linear(x, w, b);
}

template <typename T>
LoraAdapter<T> LoraAdapter<T>::create(ParameterStore<T>& store, const std::string& prefix, const Linear<T>& base,
                                      std::size_t rank, T alpha, Rng& rng) {
    const std::size_t k = base.in_features(), d = base.out_features();
    if (rank == 0 || rank > std::min(d, k)) {
        throw ConfigError("LoRA rank " + std::to_string(rank) + " must be in [1, min(" + std::to_string(d) + ", " +
                          std::to_string(k) + ")]");
    }
    LoraAdapter<T> ad;
    ad.rank = rank;
    ad.alpha = alpha;
    ad.target = base.weight->name;
    ad.a = &store.create(prefix + ".lora_a", Shape{rank, k});
    ad.b = &store.create(prefix + ".lora_b", Shape{d, rank});
    trunc_normal(ad.a->tensor, T(0.02), rng);
    return ad;
}

template <typename T>
Var<T> LoraAdapter<T>::delta(Tape<T>& tape, const Var<T>& x) const {
    if (a->tensor.dim(0) != rank || b->tensor.dim(1) != rank) {
        throw ConfigError("LoRA rank inconsistency on " + target + ": A " + shape_str(a->tensor.shape) + ", B " +
                          shape_str(b->tensor.shape) + ", rank " + std::to_string(rank));
    }
    Var<T> low = ops::linear(x, tape.param(*a), Var<T>{});
    Var<T> up = ops::linear(low, tape.param(*b), Var<T>{});
    return ops::scale(up, scaling());
}

template <typename T>
Tensor<T> LoraAdapter<T>::merged(const Tensor<T>& w0) const {
    const std::size_t d = b->tensor.dim(0), k = a->tensor.dim(1);
    if (w0.shape != Shape{d, k}) {
        throw DimensionError("lora merge: base " + shape_str(w0.shape) + " vs adapter " + shape_str(Shape{d, k}));
    }
    Tensor<T> w = w0;
    w.requires_grad = false;
    w.grad.clear();
    const T s = scaling();
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t r = 0; r < rank; ++r) {
            const T bv = b->tensor.data[i * rank + r] * s;
            for (std::size_t j = 0; j < k; ++j) w.data[i * k + j] += bv * a->tensor.data[r * k + j];
        }
    }
    return w;
}

template <typename T>
Var<T> lora_forward(Tape<T>& tape, const Var<T>& x, const Linear<T>& base, const LoraAdapter<T>* adapter) {
    Var<T> h = base(tape, x);
    if (!adapter) return h;
    return ops::add(h, adapter->delta(tape, x));
}

template <typename T>
BottleneckAdapter<T> BottleneckAdapter<T>::create(ParameterStore<T>& store, const std::string& prefix,
                                                  std::size_t dim, std::size_t hidden, Rng& rng) {
    BottleneckAdapter<T> ad;
    ad.down = Linear<T>::create(store, prefix + ".down", dim, hidden);
    ad.up = Linear<T>::create(store, prefix + ".up", hidden, dim);
    trunc_normal(ad.down.weight->tensor, T(0.02), rng);
    return ad;
}

template <typename T>
Var<T> BottleneckAdapter<T>::operator()(Tape<T>& tape, const Var<T>& x) const {
    Var<T> h = ops::gelu(down(tape, x));
    return ops::add(x, up(tape, h));
}

template struct Linear<float>;
template struct Linear<double>;
template struct LoraAdapter<float>;
template struct LoraAdapter<double>;
template struct BottleneckAdapter<float>;
template struct BottleneckAdapter<double>;
template Var<float> lora_forward(Tape<float>&, const Var<float>&, const Linear<float>&, const LoraAdapter<float>*);
template Var<double> lora_forward(Tape<double>&, const Var<double>&, const Linear<double>&,
                                  const LoraAdapter<double>*);

}  // namespace dri
