#include "nca/kernels.hpp"

#include <algorithm>
#include <cstring>

namespace nca::kernels {
namespace {

constexpr int64_t kReduceBlock = 8192;

template <typename S>
constexpr int lane_count() {
    return sizeof(S) == 4 ? 16 : 8;
}

inline int64_t reflect1(int64_t i, int64_t n) {
    if (n == 1) return 0;
    if (i < 0) return -i;
    if (i >= n) return 2 * n - 2 - i;
    return i;
}

// y += a*x, unit stride; vectorizes without reassociation.
template <typename S>
inline void axpy(S a, const S* x, S* y, int64_t len) {
    for (int64_t i = 0; i < len; ++i) y[i] += a * x[i];
}

// Lane-array dot product: fixed combine order, independent of thread count.
template <typename S>
inline S dot_lanes(const S* a, const S* b, int64_t len) {
    constexpr int L = lane_count<S>();
    S lanes[L] = {};
    int64_t x = 0;
    for (; x + L <= len; x += L)
        for (int j = 0; j < L; ++j) lanes[j] += a[x + j] * b[x + j];
    S tot = 0;
    for (; x < len; ++x) tot += a[x] * b[x];
    for (int j = 0; j < L; ++j) tot += lanes[j];
    return tot;
}

// Three shifted dot products in one pass (the 3 kernel taps of one row).
template <typename S>
inline void dot3_lanes(const S* g, const S* p, int64_t len, S out[3]) {
    constexpr int L = lane_count<S>();
    S l0[L] = {}, l1[L] = {}, l2[L] = {};
    int64_t x = 0;
    for (; x + L <= len; x += L)
        for (int j = 0; j < L; ++j) {
            S gv = g[x + j];
            l0[j] += gv * p[x + j];
            l1[j] += gv * p[x + j + 1];
            l2[j] += gv * p[x + j + 2];
        }
    S t0 = 0, t1 = 0, t2 = 0;
    for (; x < len; ++x) {
        S gv = g[x];
        t0 += gv * p[x];
        t1 += gv * p[x + 1];
        t2 += gv * p[x + 2];
    }
    for (int j = 0; j < L; ++j) {
        t0 += l0[j];
        t1 += l1[j];
        t2 += l2[j];
    }
    out[0] = t0;
    out[1] = t1;
    out[2] = t2;
}

// Reflect-padded copy, 1 px ring: (n,c,h,w) -> (n,c,h+2,w+2).
template <typename S>
std::vector<S> pad_reflect1(const TensorT<S>& in) {
    const auto& s = in.shape;
    const int64_t PH = s.h + 2, PW = s.w + 2;
    std::vector<S> pad(static_cast<size_t>(s.n * s.c * PH * PW));
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t n = 0; n < s.n; ++n)
        for (int64_t c = 0; c < s.c; ++c) {
            const S* src = in.data.data() + (n * s.c + c) * s.h * s.w;
            S* dst = pad.data() + (n * s.c + c) * PH * PW;
            for (int64_t y = -1; y <= s.h; ++y) {
                const S* srow = src + reflect1(y, s.h) * s.w;
                S* drow = dst + (y + 1) * PW;
                drow[0] = srow[reflect1(-1, s.w)];
                std::memcpy(drow + 1, srow, static_cast<size_t>(s.w) * sizeof(S));
                drow[PW - 1] = srow[reflect1(s.w, s.w)];
            }
        }
    return pad;
}

}  // namespace

template <typename S>
void conv3x3_forward(const TensorT<S>& in, const TensorT<S>& w, const TensorT<S>& b,
                     TensorT<S>& out) {
    const auto& s = in.shape;
    const int64_t N = s.n, CI = s.c, H = s.h, W = s.w, CO = w.shape.n;
    const int64_t PH = H + 2, PW = W + 2;
    auto pad = pad_reflect1(in);
    out = TensorT<S>({N, CO, H, W});
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t n = 0; n < N; ++n)
        for (int64_t co = 0; co < CO; ++co) {
            const S* wbase = w.data.data() + co * CI * 9;
            const S bias = b.data[static_cast<size_t>(co)];
            S* op = out.data.data() + (n * CO + co) * H * W;
            for (int64_t y = 0; y < H; ++y) {
                S* orow = op + y * W;
                std::fill(orow, orow + W, bias);
                for (int64_t ci = 0; ci < CI; ++ci) {
                    const S* prow = pad.data() + ((n * CI + ci) * PH + y) * PW;
                    const S* wk = wbase + ci * 9;
                    for (int64_t ky = 0; ky < 3; ++ky) {
                        const S* pr = prow + ky * PW;
                        const S w0 = wk[ky * 3], w1 = wk[ky * 3 + 1], w2 = wk[ky * 3 + 2];
                        for (int64_t x = 0; x < W; ++x)
                            orow[x] += w0 * pr[x] + w1 * pr[x + 1] + w2 * pr[x + 2];
                    }
                }
            }
        }
}

template <typename S>
void conv3x3_backward(const TensorT<S>& in, const TensorT<S>& w, const TensorT<S>& gout,
                      TensorT<S>& gin, TensorT<S>& gw, TensorT<S>& gb) {
    const auto& s = in.shape;
    const int64_t N = s.n, CI = s.c, H = s.h, W = s.w, CO = w.shape.n;
    const int64_t PH = H + 2, PW = W + 2;
    auto pad = pad_reflect1(in);

    gb = TensorT<S>({1, CO, 1, 1});
#pragma omp parallel for schedule(static)
    for (int64_t co = 0; co < CO; ++co) {
        double acc = 0;
        for (int64_t n = 0; n < N; ++n) {
            const S* g = gout.data.data() + (n * CO + co) * H * W;
            for (int64_t i = 0; i < H * W; ++i) acc += static_cast<double>(g[i]);
        }
        gb.data[static_cast<size_t>(co)] = static_cast<S>(acc);
    }

    gw = TensorT<S>({CO, CI, 3, 3});
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t co = 0; co < CO; ++co)
        for (int64_t ci = 0; ci < CI; ++ci) {
            double acc[9] = {};
            for (int64_t n = 0; n < N; ++n)
                for (int64_t y = 0; y < H; ++y) {
                    const S* g = gout.data.data() + ((n * CO + co) * H + y) * W;
                    for (int64_t ky = 0; ky < 3; ++ky) {
                        const S* pr = pad.data() + ((n * CI + ci) * PH + y + ky) * PW;
                        S taps[3];
                        dot3_lanes(g, pr, W, taps);
                        acc[ky * 3] += static_cast<double>(taps[0]);
                        acc[ky * 3 + 1] += static_cast<double>(taps[1]);
                        acc[ky * 3 + 2] += static_cast<double>(taps[2]);
                    }
                }
            for (int k = 0; k < 9; ++k)
                gw.data[static_cast<size_t>((co * CI + ci) * 9 + k)] = static_cast<S>(acc[k]);
        }

    // gin: full correlation of gout (zero ring of 2) with the kernel, then the
    // reflect padding folded back onto interior cells.
    const int64_t GH = H + 4, GW2 = W + 4;
    std::vector<S> goutp(static_cast<size_t>(N * CO * GH * GW2), S(0));
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t n = 0; n < N; ++n)
        for (int64_t co = 0; co < CO; ++co) {
            S* dst = goutp.data() + (n * CO + co) * GH * GW2;
            const S* src = gout.data.data() + (n * CO + co) * H * W;
            for (int64_t y = 0; y < H; ++y)
                std::memcpy(dst + (y + 2) * GW2 + 2, src + y * W, static_cast<size_t>(W) * sizeof(S));
        }

    gin = TensorT<S>({N, CI, H, W});
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t n = 0; n < N; ++n)
        for (int64_t ci = 0; ci < CI; ++ci) {
            std::vector<S> dpad(static_cast<size_t>(PH * PW), S(0));
            for (int64_t co = 0; co < CO; ++co) {
                const S* wk = w.data.data() + (co * CI + ci) * 9;
                const S* gp = goutp.data() + (n * CO + co) * GH * GW2;
                for (int64_t u = 0; u < PH; ++u) {
                    S* drow = dpad.data() + u * PW;
                    for (int64_t ky = 0; ky < 3; ++ky) {
                        const S* gr = gp + (u + 2 - ky) * GW2;
                        const S w0 = wk[ky * 3], w1 = wk[ky * 3 + 1], w2 = wk[ky * 3 + 2];
                        for (int64_t v = 0; v < PW; ++v)
                            drow[v] += w0 * gr[v + 2] + w1 * gr[v + 1] + w2 * gr[v];
                    }
                }
            }
            S* gi = gin.data.data() + (n * CI + ci) * H * W;
            for (int64_t u = 0; u < PH; ++u)
                for (int64_t v = 0; v < PW; ++v)
                    gi[reflect1(u - 1, H) * W + reflect1(v - 1, W)] += dpad[static_cast<size_t>(u * PW + v)];
        }
}

template <typename S>
void dense1x1_forward(const TensorT<S>& in, const TensorT<S>& w, const TensorT<S>& b,
                      TensorT<S>& out) {
    const auto& s = in.shape;
    const int64_t N = s.n, CI = s.c, P = s.h * s.w, CO = w.shape.n;
    out = TensorT<S>({N, CO, s.h, s.w});
    constexpr int64_t BCO = 8, BP = 512;
    const int64_t ncb = (CO + BCO - 1) / BCO;
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t n = 0; n < N; ++n)
        for (int64_t cb = 0; cb < ncb; ++cb) {
            const int64_t co0 = cb * BCO, co1 = std::min(CO, co0 + BCO);
            S acc[BCO][BP];
            for (int64_t p0 = 0; p0 < P; p0 += BP) {
                const int64_t len = std::min(BP, P - p0);
                for (int64_t j = 0; j < co1 - co0; ++j) {
                    const S bias = b.empty() ? S(0) : b.data[static_cast<size_t>(co0 + j)];
                    std::fill(acc[j], acc[j] + len, bias);
                }
                for (int64_t ci = 0; ci < CI; ++ci) {
                    const S* inr = in.data.data() + (n * CI + ci) * P + p0;
                    for (int64_t j = 0; j < co1 - co0; ++j)
                        axpy(w.data[static_cast<size_t>((co0 + j) * CI + ci)], inr, acc[j], len);
                }
                for (int64_t j = 0; j < co1 - co0; ++j)
                    std::memcpy(out.data.data() + (n * CO + co0 + j) * P + p0, acc[j],
                                static_cast<size_t>(len) * sizeof(S));
            }
        }
}

template <typename S>
void dense1x1_backward(const TensorT<S>& in, const TensorT<S>& w, const TensorT<S>& gout,
                       TensorT<S>& gin, TensorT<S>& gw, TensorT<S>& gb) {
    const auto& s = in.shape;
    const int64_t N = s.n, CI = s.c, P = s.h * s.w, CO = w.shape.n;

    // gin = W^T applied per pixel.
    gin = TensorT<S>({N, CI, s.h, s.w});
    constexpr int64_t BCI = 8, BP = 512;
    const int64_t ncib = (CI + BCI - 1) / BCI;
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t n = 0; n < N; ++n)
        for (int64_t cb = 0; cb < ncib; ++cb) {
            const int64_t ci0 = cb * BCI, ci1 = std::min(CI, ci0 + BCI);
            S acc[BCI][BP];
            for (int64_t p0 = 0; p0 < P; p0 += BP) {
                const int64_t len = std::min(BP, P - p0);
                for (int64_t j = 0; j < ci1 - ci0; ++j) std::fill(acc[j], acc[j] + len, S(0));
                for (int64_t co = 0; co < CO; ++co) {
                    const S* gr = gout.data.data() + (n * CO + co) * P + p0;
                    for (int64_t j = 0; j < ci1 - ci0; ++j)
                        axpy(w.data[static_cast<size_t>(co * CI + ci0 + j)], gr, acc[j], len);
                }
                for (int64_t j = 0; j < ci1 - ci0; ++j)
                    std::memcpy(gin.data.data() + (n * CI + ci0 + j) * P + p0, acc[j],
                                static_cast<size_t>(len) * sizeof(S));
            }
        }

    // gw via fixed pixel blocks: block partials merged in block order.
    constexpr int64_t GB = 2048;
    const int64_t npb = (P + GB - 1) / GB;
    const int64_t nblocks = N * npb;
    std::vector<S> partial(static_cast<size_t>(nblocks * CO * CI));
#pragma omp parallel for schedule(static)
    for (int64_t blk = 0; blk < nblocks; ++blk) {
        const int64_t n = blk / npb, pb = blk % npb;
        const int64_t p0 = pb * GB, len = std::min(GB, P - p0);
        S* part = partial.data() + blk * CO * CI;
        for (int64_t co = 0; co < CO; ++co) {
            const S* gr = gout.data.data() + (n * CO + co) * P + p0;
            for (int64_t ci = 0; ci < CI; ++ci)
                part[co * CI + ci] = dot_lanes(gr, in.data.data() + (n * CI + ci) * P + p0, len);
        }
    }
    gw = TensorT<S>({CO, CI, 1, 1});
#pragma omp parallel for schedule(static)
    for (int64_t k = 0; k < CO * CI; ++k) {
        double acc = 0;
        for (int64_t blk = 0; blk < nblocks; ++blk)
            acc += static_cast<double>(partial[static_cast<size_t>(blk * CO * CI + k)]);
        gw.data[static_cast<size_t>(k)] = static_cast<S>(acc);
    }

    if (!gb.empty()) {
#pragma omp parallel for schedule(static)
        for (int64_t co = 0; co < CO; ++co) {
            double acc = 0;
            for (int64_t n = 0; n < N; ++n) {
                const S* g = gout.data.data() + (n * CO + co) * P;
                for (int64_t p = 0; p < P; ++p) acc += static_cast<double>(g[p]);
            }
            gb.data[static_cast<size_t>(co)] = static_cast<S>(acc);
        }
    }
}

template <typename S>
void bn_forward_train(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta,
                      S eps, TensorT<S>& out, std::vector<S>& mean, std::vector<S>& inv_std) {
    const auto& s = x.shape;
    const int64_t C = s.c, HW = s.h * s.w, M = s.n * HW;
    out = TensorT<S>(s);
    mean.assign(static_cast<size_t>(C), S(0));
    inv_std.assign(static_cast<size_t>(C), S(0));
#pragma omp parallel for schedule(static)
    for (int64_t c = 0; c < C; ++c) {
        double sum = 0, sumsq = 0;
        for (int64_t n = 0; n < s.n; ++n) {
            const S* row = x.data.data() + (n * C + c) * HW;
            for (int64_t i = 0; i < HW; ++i) {
                const double v = static_cast<double>(row[i]);
                sum += v;
                sumsq += v * v;
            }
        }
        const double mu = sum / static_cast<double>(M);
        const double var = std::max(0.0, sumsq / static_cast<double>(M) - mu * mu);
        const double istd = 1.0 / std::sqrt(var + static_cast<double>(eps));
        mean[static_cast<size_t>(c)] = static_cast<S>(mu);
        inv_std[static_cast<size_t>(c)] = static_cast<S>(istd);
        const S a = gamma.data[static_cast<size_t>(c)] * static_cast<S>(istd);
        const S b = beta.data[static_cast<size_t>(c)] - a * static_cast<S>(mu);
        for (int64_t n = 0; n < s.n; ++n) {
            const S* row = x.data.data() + (n * C + c) * HW;
            S* orow = out.data.data() + (n * C + c) * HW;
            for (int64_t i = 0; i < HW; ++i) orow[i] = a * row[i] + b;
        }
    }
}

template <typename S>
void bn_forward_eval(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta,
                     const TensorT<S>& running_mean, const TensorT<S>& running_var, S eps,
                     TensorT<S>& out) {
    const auto& s = x.shape;
    const int64_t C = s.c, HW = s.h * s.w;
    out = TensorT<S>(s);
#pragma omp parallel for schedule(static)
    for (int64_t c = 0; c < C; ++c) {
        const S istd = S(1) / std::sqrt(running_var.data[static_cast<size_t>(c)] + eps);
        const S a = gamma.data[static_cast<size_t>(c)] * istd;
        const S b = beta.data[static_cast<size_t>(c)] - a * running_mean.data[static_cast<size_t>(c)];
        for (int64_t n = 0; n < s.n; ++n) {
            const S* row = x.data.data() + (n * C + c) * HW;
            S* orow = out.data.data() + (n * C + c) * HW;
            for (int64_t i = 0; i < HW; ++i) orow[i] = a * row[i] + b;
        }
    }
}

template <typename S>
void bn_backward_train(const TensorT<S>& x, const TensorT<S>& gamma, const std::vector<S>& mean,
                       const std::vector<S>& inv_std, const TensorT<S>& gout, TensorT<S>& gx,
                       TensorT<S>& ggamma, TensorT<S>& gbeta) {
    const auto& s = x.shape;
    const int64_t C = s.c, HW = s.h * s.w, M = s.n * HW;
    gx = TensorT<S>(s);
    ggamma = TensorT<S>({1, C, 1, 1});
    gbeta = TensorT<S>({1, C, 1, 1});
#pragma omp parallel for schedule(static)
    for (int64_t c = 0; c < C; ++c) {
        const S mu = mean[static_cast<size_t>(c)];
        const S istd = inv_std[static_cast<size_t>(c)];
        double sg = 0, sgx = 0;
        for (int64_t n = 0; n < s.n; ++n) {
            const S* xr = x.data.data() + (n * C + c) * HW;
            const S* gr = gout.data.data() + (n * C + c) * HW;
            for (int64_t i = 0; i < HW; ++i) {
                const double xh = static_cast<double>((xr[i] - mu) * istd);
                sg += static_cast<double>(gr[i]);
                sgx += static_cast<double>(gr[i]) * xh;
            }
        }
        gbeta.data[static_cast<size_t>(c)] = static_cast<S>(sg);
        ggamma.data[static_cast<size_t>(c)] = static_cast<S>(sgx);
        const S k = gamma.data[static_cast<size_t>(c)] * istd;
        const S mg = static_cast<S>(sg / static_cast<double>(M));
        const S mgx = static_cast<S>(sgx / static_cast<double>(M));
        for (int64_t n = 0; n < s.n; ++n) {
            const S* xr = x.data.data() + (n * C + c) * HW;
            const S* gr = gout.data.data() + (n * C + c) * HW;
            S* dr = gx.data.data() + (n * C + c) * HW;
            for (int64_t i = 0; i < HW; ++i) {
                const S xh = (xr[i] - mu) * istd;
                dr[i] = k * (gr[i] - mg - xh * mgx);
            }
        }
    }
}

template <typename S>
void bn_backward_eval(const TensorT<S>& x, const TensorT<S>& gamma,
                      const TensorT<S>& running_mean, const TensorT<S>& running_var, S eps,
                      const TensorT<S>& gout, TensorT<S>& gx, TensorT<S>& ggamma,
                      TensorT<S>& gbeta) {
    const auto& s = x.shape;
    const int64_t C = s.c, HW = s.h * s.w;
    gx = TensorT<S>(s);
    ggamma = TensorT<S>({1, C, 1, 1});
    gbeta = TensorT<S>({1, C, 1, 1});
#pragma omp parallel for schedule(static)
    for (int64_t c = 0; c < C; ++c) {
        const S istd = S(1) / std::sqrt(running_var.data[static_cast<size_t>(c)] + eps);
        const S mu = running_mean.data[static_cast<size_t>(c)];
        const S k = gamma.data[static_cast<size_t>(c)] * istd;
        double sg = 0, sgx = 0;
        for (int64_t n = 0; n < s.n; ++n) {
            const S* xr = x.data.data() + (n * C + c) * HW;
            const S* gr = gout.data.data() + (n * C + c) * HW;
            S* dr = gx.data.data() + (n * C + c) * HW;
            for (int64_t i = 0; i < HW; ++i) {
                sg += static_cast<double>(gr[i]);
                sgx += static_cast<double>(gr[i]) * static_cast<double>((xr[i] - mu) * istd);
                dr[i] = k * gr[i];
            }
        }
        gbeta.data[static_cast<size_t>(c)] = static_cast<S>(sg);
        ggamma.data[static_cast<size_t>(c)] = static_cast<S>(sgx);
    }
}

template <typename S>
void bilinear_forward(const TensorT<S>& in, TensorT<S>& out) {
    const auto& s = in.shape;
    const int64_t OH = out.shape.h, OW = out.shape.w;
    const double fy = static_cast<double>(s.h) / static_cast<double>(OH);
    const double fx = static_cast<double>(s.w) / static_cast<double>(OW);
    std::vector<int64_t> x0(static_cast<size_t>(OW)), x1(static_cast<size_t>(OW));
    std::vector<S> wx(static_cast<size_t>(OW));
    for (int64_t x = 0; x < OW; ++x) {
        double sx = (static_cast<double>(x) + 0.5) * fx - 0.5;
        int64_t i = static_cast<int64_t>(std::floor(sx));
        wx[static_cast<size_t>(x)] = static_cast<S>(sx - static_cast<double>(i));
        x0[static_cast<size_t>(x)] = std::clamp<int64_t>(i, 0, s.w - 1);
        x1[static_cast<size_t>(x)] = std::clamp<int64_t>(i + 1, 0, s.w - 1);
    }
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t n = 0; n < s.n; ++n)
        for (int64_t c = 0; c < s.c; ++c) {
            const S* src = in.data.data() + (n * s.c + c) * s.h * s.w;
            S* dst = out.data.data() + (n * s.c + c) * OH * OW;
            for (int64_t y = 0; y < OH; ++y) {
                double sy = (static_cast<double>(y) + 0.5) * fy - 0.5;
                int64_t j = static_cast<int64_t>(std::floor(sy));
                const S dy = static_cast<S>(sy - static_cast<double>(j));
                const S* r0 = src + std::clamp<int64_t>(j, 0, s.h - 1) * s.w;
                const S* r1 = src + std::clamp<int64_t>(j + 1, 0, s.h - 1) * s.w;
                S* orow = dst + y * OW;
                for (int64_t x = 0; x < OW; ++x) {
                    const S dx = wx[static_cast<size_t>(x)];
                    const S a = r0[x0[static_cast<size_t>(x)]] * (S(1) - dx) + r0[x1[static_cast<size_t>(x)]] * dx;
                    const S b = r1[x0[static_cast<size_t>(x)]] * (S(1) - dx) + r1[x1[static_cast<size_t>(x)]] * dx;
                    orow[x] = a * (S(1) - dy) + b * dy;
                }
            }
        }
}

template <typename S>
void bilinear_backward(const TensorT<S>& gout, TensorT<S>& gin) {
    const auto& go = gout.shape;
    const auto& gi = gin.shape;
    const double fy = static_cast<double>(gi.h) / static_cast<double>(go.h);
    const double fx = static_cast<double>(gi.w) / static_cast<double>(go.w);
    std::fill(gin.data.begin(), gin.data.end(), S(0));
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t n = 0; n < go.n; ++n)
        for (int64_t c = 0; c < go.c; ++c) {
            const S* g = gout.data.data() + (n * go.c + c) * go.h * go.w;
            S* d = gin.data.data() + (n * go.c + c) * gi.h * gi.w;
            for (int64_t y = 0; y < go.h; ++y) {
                double sy = (static_cast<double>(y) + 0.5) * fy - 0.5;
                int64_t j = static_cast<int64_t>(std::floor(sy));
                const S dy = static_cast<S>(sy - static_cast<double>(j));
                const int64_t y0 = std::clamp<int64_t>(j, 0, gi.h - 1);
                const int64_t y1 = std::clamp<int64_t>(j + 1, 0, gi.h - 1);
                for (int64_t x = 0; x < go.w; ++x) {
                    double sx = (static_cast<double>(x) + 0.5) * fx - 0.5;
                    int64_t i = static_cast<int64_t>(std::floor(sx));
                    const S dx = static_cast<S>(sx - static_cast<double>(i));
                    const int64_t xx0 = std::clamp<int64_t>(i, 0, gi.w - 1);
                    const int64_t xx1 = std::clamp<int64_t>(i + 1, 0, gi.w - 1);
                    const S gv = g[y * go.w + x];
                    d[y0 * gi.w + xx0] += gv * (S(1) - dy) * (S(1) - dx);
                    d[y0 * gi.w + xx1] += gv * (S(1) - dy) * dx;
                    d[y1 * gi.w + xx0] += gv * dy * (S(1) - dx);
                    d[y1 * gi.w + xx1] += gv * dy * dx;
                }
            }
        }
}

template <typename S>
void nearest_forward(const TensorT<S>& in, TensorT<S>& out) {
    const auto& s = in.shape;
    const int64_t OH = out.shape.h, OW = out.shape.w;
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t n = 0; n < s.n; ++n)
        for (int64_t c = 0; c < s.c; ++c) {
            const S* src = in.data.data() + (n * s.c + c) * s.h * s.w;
            S* dst = out.data.data() + (n * s.c + c) * OH * OW;
            for (int64_t y = 0; y < OH; ++y) {
                const int64_t sy = std::min(s.h - 1, (y * s.h) / OH);
                for (int64_t x = 0; x < OW; ++x)
                    dst[y * OW + x] = src[sy * s.w + std::min(s.w - 1, (x * s.w) / OW)];
            }
        }
}

template <typename S>
double sum_all(const TensorT<S>& t) {
    const int64_t len = t.size();
    const int64_t nb = (len + kReduceBlock - 1) / kReduceBlock;
    std::vector<double> partial(static_cast<size_t>(std::max<int64_t>(nb, 1)), 0.0);
#pragma omp parallel for schedule(static)
    for (int64_t b = 0; b < nb; ++b) {
        const int64_t i0 = b * kReduceBlock, i1 = std::min(len, i0 + kReduceBlock);
        double lanes[8] = {};
        int64_t i = i0;
        for (; i + 8 <= i1; i += 8)
            for (int j = 0; j < 8; ++j) lanes[j] += static_cast<double>(t.data[static_cast<size_t>(i + j)]);
        double acc = 0;
        for (; i < i1; ++i) acc += static_cast<double>(t.data[static_cast<size_t>(i)]);
        for (int j = 0; j < 8; ++j) acc += lanes[j];
        partial[static_cast<size_t>(b)] = acc;
    }
    double total = 0;
    for (int64_t b = 0; b < nb; ++b) total += partial[static_cast<size_t>(b)];
    return total;
}

template <typename S>
TensorT<S> reduce_to(const TensorT<S>& g, const Shape4& shape) {
    if (g.shape == shape) return g;
    TensorT<S> out(shape);
    if (shape.numel() == 1) {
        out.data[0] = static_cast<S>(sum_all(g));
        return out;
    }
    if (shape.n == 1 && shape.c == g.shape.c && shape.h == 1 && shape.w == 1) {
        const int64_t C = g.shape.c, HW = g.shape.h * g.shape.w;
#pragma omp parallel for schedule(static)
        for (int64_t c = 0; c < C; ++c) {
            double acc = 0;
            for (int64_t n = 0; n < g.shape.n; ++n) {
                const S* row = g.data.data() + (n * C + c) * HW;
                for (int64_t i = 0; i < HW; ++i) acc += static_cast<double>(row[i]);
            }
            out.data[static_cast<size_t>(c)] = static_cast<S>(acc);
        }
        return out;
    }
    if (shape.n == g.shape.n && shape.c == 1 && shape.h == g.shape.h && shape.w == g.shape.w) {
        const int64_t C = g.shape.c, HW = g.shape.h * g.shape.w;
#pragma omp parallel for schedule(static)
        for (int64_t n = 0; n < g.shape.n; ++n) {
            S* orow = out.data.data() + n * HW;
            std::fill(orow, orow + HW, S(0));
            for (int64_t c = 0; c < C; ++c) {
                const S* row = g.data.data() + (n * C + c) * HW;
                for (int64_t i = 0; i < HW; ++i) orow[i] += row[i];
            }
        }
        return out;
    }
    // generic fallback: fixed scan order
    for (int64_t n = 0; n < g.shape.n; ++n)
        for (int64_t c = 0; c < g.shape.c; ++c)
            for (int64_t y = 0; y < g.shape.h; ++y)
                for (int64_t x = 0; x < g.shape.w; ++x)
                    out.at(shape.n == 1 ? 0 : n, shape.c == 1 ? 0 : c, shape.h == 1 ? 0 : y,
                           shape.w == 1 ? 0 : x) += g.at(n, c, y, x);
    return out;
}

#define NCA_INSTANTIATE(S)                                                                         \
    template void conv3x3_forward<S>(const TensorT<S>&, const TensorT<S>&, const TensorT<S>&,     \
                                     TensorT<S>&);                                                 \
    template void conv3x3_backward<S>(const TensorT<S>&, const TensorT<S>&, const TensorT<S>&,    \
                                      TensorT<S>&, TensorT<S>&, TensorT<S>&);                      \
    template void dense1x1_forward<S>(const TensorT<S>&, const TensorT<S>&, const TensorT<S>&,    \
                                      TensorT<S>&);                                                \
    template void dense1x1_backward<S>(const TensorT<S>&, const TensorT<S>&, const TensorT<S>&,   \
                                       TensorT<S>&, TensorT<S>&, TensorT<S>&);                     \
    template void bn_forward_train<S>(const TensorT<S>&, const TensorT<S>&, const TensorT<S>&, S, \
                                      TensorT<S>&, std::vector<S>&, std::vector<S>&);              \
    template void bn_forward_eval<S>(const TensorT<S>&, const TensorT<S>&, const TensorT<S>&,     \
                                     const TensorT<S>&, const TensorT<S>&, S, TensorT<S>&);        \
    template void bn_backward_train<S>(const TensorT<S>&, const TensorT<S>&,                      \
                                       const std::vector<S>&, const std::vector<S>&,               \
                                       const TensorT<S>&, TensorT<S>&, TensorT<S>&, TensorT<S>&);  \
    template void bn_backward_eval<S>(const TensorT<S>&, const TensorT<S>&, const TensorT<S>&,    \
                                      const TensorT<S>&, S, const TensorT<S>&, TensorT<S>&,        \
                                      TensorT<S>&, TensorT<S>&);                                   \
    template void bilinear_forward<S>(const TensorT<S>&, TensorT<S>&);                             \
    template void bilinear_backward<S>(const TensorT<S>&, TensorT<S>&);                            \
    template void nearest_forward<S>(const TensorT<S>&, TensorT<S>&);                              \
    template double sum_all<S>(const TensorT<S>&);                                                 \
    template TensorT<S> reduce_to<S>(const TensorT<S>&, const Shape4&);

NCA_INSTANTIATE(float)
NCA_INSTANTIATE(double)

}  // namespace nca::kernels
