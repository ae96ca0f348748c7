#ifndef NCA_OPTIMIZER_HPP
#define NCA_OPTIMIZER_HPP

#include <vector>

#include "nca/tensor.hpp"

namespace nca {

/// Adam with bias correction; moment math runs in double, storage in S.
template <typename S>
struct AdamStateT {
    std::vector<TensorT<S>> m, v;
    int64_t t = 0;

    static AdamStateT init(const std::vector<TensorT<S>*>& params) {
        AdamStateT st;
        st.m.reserve(params.size());
        st.v.reserve(params.size());
        for (const auto* p : params) {
            st.m.emplace_back(p->shape);
            st.v.emplace_back(p->shape);
        }
        return st;
    }
};

using AdamState = AdamStateT<float>;

template <typename S>
void adam_step(const std::vector<TensorT<S>*>& params, const std::vector<TensorT<S>>& grads,
               AdamStateT<S>& st, S lr, S beta1, S beta2, S eps) {
    if (params.size() != grads.size() || params.size() != st.m.size())
        throw shape_error("adam_step: " + std::to_string(params.size()) + " params vs " +
                          std::to_string(grads.size()) + " grads vs " + std::to_string(st.m.size()) +
                          " state slots");
    st.t += 1;
    const double b1 = static_cast<double>(beta1), b2 = static_cast<double>(beta2);
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.t));
    for (size_t k = 0; k < params.size(); ++k) {
        auto& p = *params[k];
        const auto& g = grads[k];
        check_same_shape("adam_step", p.shape, g.shape);
        auto& m = st.m[k];
        auto& v = st.v[k];
        const int64_t len = p.size();
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < len; ++i) {
            const double gi = static_cast<double>(g.data[static_cast<size_t>(i)]);
            const double mi = b1 * static_cast<double>(m.data[static_cast<size_t>(i)]) + (1.0 - b1) * gi;
            const double vi = b2 * static_cast<double>(v.data[static_cast<size_t>(i)]) + (1.0 - b2) * gi * gi;
            m.data[static_cast<size_t>(i)] = static_cast<S>(mi);
            v.data[static_cast<size_t>(i)] = static_cast<S>(vi);
            const double mh = mi / c1;
            const double vh = vi / c2;
            p.data[static_cast<size_t>(i)] =
                static_cast<S>(static_cast<double>(p.data[static_cast<size_t>(i)]) - static_cast<double>(lr) * mh / (std::sqrt(vh) + static_cast<double>(eps)));
        }
    }
}

}  // namespace nca

#endif
