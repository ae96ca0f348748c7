#ifndef NCA_REFERENCE_HPP
#define NCA_REFERENCE_HPP

// Serial reference implementations. Deliberately naive (direct summation,
// double accumulators, no blocking, no OpenMP) — these are the oracles the
// fast kernels are tested against and the baseline the benchmark compares to.

#include <cstdint>
#include <vector>

#include "nca/tensor.hpp"

namespace nca::ref {

inline int64_t reflect_index(int64_t i, int64_t n) {
    if (n == 1) return 0;
    if (i < 0) return -i;
    if (i >= n) return 2 * n - 2 - i;
    return i;
}

/// Direct triple-loop 3x3 convolution, reflect padding, stride 1.
template <typename S>
TensorT<S> conv2d_3x3(const TensorT<S>& in, const TensorT<S>& w, const TensorT<S>& b) {
    const auto& s = in.shape;
    TensorT<S> out({s.n, w.shape.n, s.h, s.w});
    for (int64_t n = 0; n < s.n; ++n)
        for (int64_t co = 0; co < w.shape.n; ++co)
            for (int64_t y = 0; y < s.h; ++y)
                for (int64_t x = 0; x < s.w; ++x) {
                    double acc = static_cast<double>(b.data[static_cast<size_t>(co)]);
                    for (int64_t ci = 0; ci < s.c; ++ci)
                        for (int64_t ky = 0; ky < 3; ++ky)
                            for (int64_t kx = 0; kx < 3; ++kx) {
                                int64_t sy = reflect_index(y + ky - 1, s.h);
                                int64_t sx = reflect_index(x + kx - 1, s.w);
                                acc += static_cast<double>(in.at(n, ci, sy, sx)) *
                                       static_cast<double>(w.at(co, ci, ky, kx));
                            }
                    out.at(n, co, y, x) = static_cast<S>(acc);
                }
    return out;
}

/// Per-pixel affine map (1x1 convolution). Empty bias = no bias.
template <typename S>
TensorT<S> dense_1x1(const TensorT<S>& in, const TensorT<S>& w, const TensorT<S>& b) {
    const auto& s = in.shape;
    const int64_t cout = w.shape.n;
    TensorT<S> out({s.n, cout, s.h, s.w});
    for (int64_t n = 0; n < s.n; ++n)
        for (int64_t co = 0; co < cout; ++co)
            for (int64_t y = 0; y < s.h; ++y)
                for (int64_t x = 0; x < s.w; ++x) {
                    double acc = b.empty() ? 0.0 : static_cast<double>(b.data[static_cast<size_t>(co)]);
                    for (int64_t ci = 0; ci < s.c; ++ci)
                        acc += static_cast<double>(w.at(co, ci, 0, 0)) *
                               static_cast<double>(in.at(n, ci, y, x));
                    out.at(n, co, y, x) = static_cast<S>(acc);
                }
    return out;
}

/// Bilinear resize, align_corners=false, edge-clamped sampling.
template <typename S>
TensorT<S> resample_bilinear(const TensorT<S>& in, int64_t oh, int64_t ow) {
    const auto& s = in.shape;
    TensorT<S> out({s.n, s.c, oh, ow});
    const double sy = static_cast<double>(s.h) / static_cast<double>(oh);
    const double sx = static_cast<double>(s.w) / static_cast<double>(ow);
    for (int64_t n = 0; n < s.n; ++n)
        for (int64_t c = 0; c < s.c; ++c)
            for (int64_t y = 0; y < oh; ++y)
                for (int64_t x = 0; x < ow; ++x) {
                    double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
                    double fx = (static_cast<double>(x) + 0.5) * sx - 0.5;
                    int64_t y0 = static_cast<int64_t>(std::floor(fy));
                    int64_t x0 = static_cast<int64_t>(std::floor(fx));
                    double wy = fy - static_cast<double>(y0);
                    double wx = fx - static_cast<double>(x0);
                    auto cl = [](int64_t v, int64_t n_) { return v < 0 ? 0 : (v >= n_ ? n_ - 1 : v); };
                    int64_t y0c = cl(y0, s.h), y1c = cl(y0 + 1, s.h);
                    int64_t x0c = cl(x0, s.w), x1c = cl(x0 + 1, s.w);
                    double v = (1 - wy) * ((1 - wx) * in.at(n, c, y0c, x0c) + wx * in.at(n, c, y0c, x1c)) +
                               wy * ((1 - wx) * in.at(n, c, y1c, x0c) + wx * in.at(n, c, y1c, x1c));
                    out.at(n, c, y, x) = static_cast<S>(v);
                }
    return out;
}

template <typename S>
TensorT<S> resample_nearest(const TensorT<S>& in, int64_t oh, int64_t ow) {
    const auto& s = in.shape;
    TensorT<S> out({s.n, s.c, oh, ow});
    for (int64_t n = 0; n < s.n; ++n)
        for (int64_t c = 0; c < s.c; ++c)
            for (int64_t y = 0; y < oh; ++y)
                for (int64_t x = 0; x < ow; ++x) {
                    int64_t sy0 = std::min<int64_t>(s.h - 1, (y * s.h) / oh);
                    int64_t sx0 = std::min<int64_t>(s.w - 1, (x * s.w) / ow);
                    out.at(n, c, y, x) = in.at(n, c, sy0, sx0);
                }
    return out;
}

template <typename S>
double sum_all(const TensorT<S>& t) {
    double acc = 0.0;
    for (S v : t.data) acc += static_cast<double>(v);
    return acc;
}

/// One Adam update on scalars; the trajectory oracle for the optimizer tests.
struct AdamScalar {
    double m = 0, v = 0;
    int64_t t = 0;
    double step(double& p, double g, double lr, double b1, double b2, double eps) {
        ++t;
        m = b1 * m + (1 - b1) * g;
        v = b2 * v + (1 - b2) * g * g;
        double mh = m / (1 - std::pow(b1, static_cast<double>(t)));
        double vh = v / (1 - std::pow(b2, static_cast<double>(t)));
        p -= lr * mh / (std::sqrt(vh) + eps);
        return p;
    }
};

/// Store-then-aggregate ensemble statistics (population std).
template <typename S>
void ensemble_stats(const std::vector<TensorT<S>>& runs, TensorT<S>& mean, TensorT<S>& sd) {
    const auto shape = runs.at(0).shape;
    mean = TensorT<S>(shape);
    sd = TensorT<S>(shape);
    const double n = static_cast<double>(runs.size());
    for (size_t i = 0; i < mean.data.size(); ++i) {
        double m = 0;
        for (const auto& r : runs) m += static_cast<double>(r.data[i]);
        m /= n;
        double var = 0;
        for (const auto& r : runs) {
            double d = static_cast<double>(r.data[i]) - m;
            var += d * d;
        }
        var /= n;
        mean.data[i] = static_cast<S>(m);
        sd.data[i] = static_cast<S>(std::sqrt(var));
    }
}

}  // namespace nca::ref

#endif
