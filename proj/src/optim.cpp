#include "dri/optim.hpp"

#include <cstring>

namespace dri {

template <typename T>
void Sgd<T>::step(ParameterStore<T>& store) {
    for (const auto& p : store.params()) {
        if (!p->trainable) continue;
        auto& w = p->tensor.data;
        const auto& g = p->tensor.grad;
        if (g.empty()) continue;
        auto& v = velocity_[p.get()];
        if (v.empty()) v.assign(w.size(), T(0));
        for (std::size_t i = 0; i < w.size(); ++i) {
            v[i] = momentum * v[i] + g[i] + weight_decay * w[i];
            w[i] -= learning_rate * v[i];
        }
    }
}

template <typename T>
void trunc_normal(Tensor<T>& t, T std, Rng& rng) {
    std::normal_distribution<double> dist(0.0, 1.0);
    for (auto& v : t.data) {
        double x;
        do {
            x = dist(rng);
        } while (x < -2.0 || x > 2.0);
        v = static_cast<T>(x) * std;
    }
}

template <typename T>
void uniform(Tensor<T>& t, T lo, T hi, Rng& rng) {
    std::uniform_real_distribution<double> dist(lo, hi);
    for (auto& v : t.data) v = static_cast<T>(dist(rng));
}

template <typename T>
void normal(Tensor<T>& t, T std, Rng& rng) {
    std::normal_distribution<double> dist(0.0, 1.0);
    for (auto& v : t.data) v = static_cast<T>(dist(rng)) * std;
}

template <typename T>
std::uint64_t checksum(const Tensor<T>& t) {
    std::uint64_t h = 1469598103934665603ULL;
    const auto* bytes = reinterpret_cast<const unsigned char*>(t.data.data());
    for (std::size_t i = 0; i < t.data.size() * sizeof(T); ++i) {
        h ^= bytes[i];
        h *= 1099511628211ULL;
    }
    return h;
}

template class Sgd<float>;
template class Sgd<double>;
template void trunc_normal(Tensor<float>&, float, Rng&);
template void trunc_normal(Tensor<double>&, double, Rng&);
template void uniform(Tensor<float>&, float, float, Rng&);
template void uniform(Tensor<double>&, double, double, Rng&);
template void normal(Tensor<float>&, float, Rng&);
template void normal(Tensor<double>&, double, Rng&);
template std::uint64_t checksum(const Tensor<float>&);
template std::uint64_t checksum(const Tensor<double>&);

}  // namespace dri
