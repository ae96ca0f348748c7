#ifndef NCA_TESTS_GRADCHECK_HPP
#define NCA_TESTS_GRADCHECK_HPP

// Central finite-difference oracle for gradient checks. Runs in double; the
// loss callback must be a pure function of the tensor values (fixed seeds).

#include <cmath>
#include <functional>

#include "nca/tensor.hpp"

namespace gradcheck {

inline double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1.0});
}

/// d loss / d x[i] via central differences.
template <typename LossFn>
nca::TensorT<double> fd_grad(nca::TensorT<double>& x, LossFn loss, double h = 1e-6) {
    nca::TensorT<double> g(x.shape);
    for (size_t i = 0; i < x.data.size(); ++i) {
        const double orig = x.data[i];
        const double step = h * std::max(1.0, std::abs(orig));
        x.data[i] = orig + step;
        const double lp = loss();
        x.data[i] = orig - step;
        const double lm = loss();
        x.data[i] = orig;
        g.data[i] = (lp - lm) / (2.0 * step);
    }
    return g;
}

/// Max relative error between an autodiff gradient and its FD oracle.
template <typename LossFn>
double max_rel_err(nca::TensorT<double>& x, const nca::TensorT<double>& autodiff_grad, LossFn loss,
                   double h = 1e-6) {
    auto fd = fd_grad(x, loss, h);
    double worst = 0;
    for (size_t i = 0; i < fd.data.size(); ++i)
        worst = std::max(worst, rel_err(autodiff_grad.data[i], fd.data[i]));
    return worst;
}

}  // namespace gradcheck

#endif
