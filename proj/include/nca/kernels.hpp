#ifndef NCA_KERNELS_HPP
#define NCA_KERNELS_HPP

// OpenMP-parallel compute kernels. Every kernel is deterministic for any
// thread count: parallel loops own disjoint output slices, and reductions
// accumulate into fixed-size blocks merged in a fixed order. Serial oracles
// for these live in reference.hpp; tools/bench.cpp compares the two.

#include "nca/tensor.hpp"

namespace nca::kernels {

// 3x3 convolution, stride 1, reflect padding (no zero-boundary artifacts).
template <typename S>
void conv3x3_forward(const TensorT<S>& in, const TensorT<S>& w, const TensorT<S>& b,
                     TensorT<S>& out);

template <typename S>
void conv3x3_backward(const TensorT<S>& in, const TensorT<S>& w, const TensorT<S>& gout,
                      TensorT<S>& gin, TensorT<S>& gw, TensorT<S>& gb);

// Per-pixel affine map; bias may be empty.
template <typename S>
void dense1x1_forward(const TensorT<S>& in, const TensorT<S>& w, const TensorT<S>& b,
                      TensorT<S>& out);

template <typename S>
void dense1x1_backward(const TensorT<S>& in, const TensorT<S>& w, const TensorT<S>& gout,
                       TensorT<S>& gin, TensorT<S>& gw, TensorT<S>& gb);

// Batch normalization over (n,h,w) per channel, population variance.
template <typename S>
void bn_forward_train(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta,
                      S eps, TensorT<S>& out, std::vector<S>& mean, std::vector<S>& inv_std);

template <typename S>
void bn_forward_eval(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta,
                     const TensorT<S>& running_mean, const TensorT<S>& running_var, S eps,
                     TensorT<S>& out);

template <typename S>
void bn_backward_train(const TensorT<S>& x, const TensorT<S>& gamma, const std::vector<S>& mean,
                       const std::vector<S>& inv_std, const TensorT<S>& gout, TensorT<S>& gx,
                       TensorT<S>& ggamma, TensorT<S>& gbeta);

template <typename S>
void bn_backward_eval(const TensorT<S>& x, const TensorT<S>& gamma,
                      const TensorT<S>& running_mean, const TensorT<S>& running_var, S eps,
                      const TensorT<S>& gout, TensorT<S>& gx, TensorT<S>& ggamma,
                      TensorT<S>& gbeta);

// Bilinear resize, align_corners=false, edge-clamped.
template <typename S>
void bilinear_forward(const TensorT<S>& in, TensorT<S>& out);

template <typename S>
void bilinear_backward(const TensorT<S>& gout, TensorT<S>& gin);

template <typename S>
void nearest_forward(const TensorT<S>& in, TensorT<S>& out);

// Deterministic blocked reduction (fixed block size, blocks merged in order).
template <typename S>
double sum_all(const TensorT<S>& t);

// Sum gradient `g` down to `shape`, which must match g's shape except on
// broadcast dims (value 1). Used by the elementwise backward passes.
template <typename S>
TensorT<S> reduce_to(const TensorT<S>& g, const Shape4& shape);

}  // namespace nca::kernels

#endif
