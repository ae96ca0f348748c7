#ifndef NCA_AUTODIFF_HPP
#define NCA_AUTODIFF_HPP

// Reverse-mode autodiff on a single-owner tape. Ops record themselves when
// (a) a tape is passed and (b) at least one input lives on that tape; pass
// tape=nullptr for plain inference. backward() may run once per tape.

#include <atomic>
#include <functional>
#include <memory>
#include <unordered_map>
#include <vector>

#include "nca/kernels.hpp"
#include "nca/tensor.hpp"

namespace nca {

enum class Mode { Train, Eval };

template <typename S>
class TapeT {
  public:
    TapeT() : id_(next_id_.fetch_add(1) + 1) {}
    TapeT(const TapeT&) = delete;
    TapeT& operator=(const TapeT&) = delete;

    uint32_t id() const { return id_; }

    /// Register a leaf (parameter). Idempotent per tape.
    int watch(TensorT<S>& t) {
        if (t.node >= 0 && t.tape_id == id_) return t.node;
        auto it = watched_.find(&t);
        if (it != watched_.end()) {
            t.node = it->second;
            t.tape_id = id_;
            return t.node;
        }
        t.node = new_node(t.shape, nullptr);
        t.tape_id = id_;
        watched_.emplace(&t, t.node);
        return t.node;
    }

    bool owns(const TensorT<S>& t) const { return t.node >= 0 && t.tape_id == id_; }

    int new_node(Shape4 shape, std::function<void(TapeT&, const TensorT<S>&)> back) {
        nodes_.push_back(Node{shape, std::move(back)});
        saved_.emplace_back(nullptr);
        return static_cast<int>(nodes_.size()) - 1;
    }

    /// Snapshot a tensor's value for a backward closure. Values of tensors
    /// recorded on this tape are stored once and shared.
    std::shared_ptr<const TensorT<S>> save_value(const TensorT<S>& t) {
        if (owns(t)) {
            auto& slot = saved_[static_cast<size_t>(t.node)];
            if (!slot) slot = std::make_shared<const TensorT<S>>(t);
            return slot;
        }
        return std::make_shared<const TensorT<S>>(t);
    }

    void accumulate(int id, TensorT<S>&& g) {
        auto& slot = grads_[static_cast<size_t>(id)];
        if (slot.empty()) {
            slot = std::move(g);
            return;
        }
        check_same_shape("tape accumulate", slot.shape, g.shape);
        const int64_t len = slot.size();
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < len; ++i) slot.data[static_cast<size_t>(i)] += g.data[static_cast<size_t>(i)];
    }

    /// Reverse sweep from a scalar loss. A second call on the same tape is
    /// rejected (pinned behavior; rebuild the graph to differentiate again).
    void backward(const TensorT<S>& loss) {
        if (consumed_) throw numeric_error("tape: backward() already ran on this tape");
        if (!owns(loss)) throw numeric_error("backward: loss was not recorded on an active tape");
        if (loss.size() != 1) throw shape_error("backward: loss must be scalar, got " + loss.shape.str());
        consumed_ = true;
        grads_.assign(nodes_.size(), TensorT<S>{});
        grads_[static_cast<size_t>(loss.node)] = TensorT<S>::scalar(S(1));
        for (int i = loss.node; i >= 0; --i) {
            auto& node = nodes_[static_cast<size_t>(i)];
            if (grads_[static_cast<size_t>(i)].empty()) continue;
            if (node.back) {
                node.back(*this, grads_[static_cast<size_t>(i)]);
                grads_[static_cast<size_t>(i)] = TensorT<S>{};  // free as the sweep proceeds
            }
        }
    }

    bool backward_done() const { return consumed_; }

    /// Gradient of a watched leaf; zero if the loss did not reach it.
    TensorT<S> grad(const TensorT<S>& t) const {
        if (!owns(t)) throw numeric_error("grad: tensor is not on this tape");
        if (!consumed_) throw numeric_error("grad: backward() has not run");
        const auto& g = grads_[static_cast<size_t>(t.node)];
        if (g.empty()) return TensorT<S>::zeros(t.shape);
        return g;
    }

    size_t node_count() const { return nodes_.size(); }

  private:
    struct Node {
        Shape4 shape;
        std::function<void(TapeT&, const TensorT<S>&)> back;  // null for leaves
    };

    inline static std::atomic<uint32_t> next_id_{0};
    uint32_t id_;
    std::vector<Node> nodes_;
    std::vector<std::shared_ptr<const TensorT<S>>> saved_;
    std::vector<TensorT<S>> grads_;
    std::unordered_map<const void*, int> watched_;
    bool consumed_ = false;
};

using Tape = TapeT<float>;

namespace detail {

template <typename S>
bool taped(const TapeT<S>* tape, const TensorT<S>& t) {
    return tape && t.node >= 0 && t.tape_id == tape->id();
}

template <typename S>
int in_id(const TapeT<S>* tape, const TensorT<S>& t) {
    return taped(tape, t) ? t.node : -1;
}

template <typename S, typename F>
TensorT<S> map(const TensorT<S>& x, F f) {
    TensorT<S> out(x.shape);
    const int64_t len = x.size();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < len; ++i) out.data[static_cast<size_t>(i)] = f(x.data[static_cast<size_t>(i)]);
    return out;
}

enum class Bcast { Same, Scalar, PerChannel, PerPixel };

inline Bcast classify(const char* op, const Shape4& a, const Shape4& b) {
    if (a == b) return Bcast::Same;
    if (b.n == 1 && b.c == 1 && b.h == 1 && b.w == 1) return Bcast::Scalar;
    if (b.n == 1 && b.c == a.c && b.h == 1 && b.w == 1) return Bcast::PerChannel;
    if (b.n == a.n && b.c == 1 && b.h == a.h && b.w == a.w) return Bcast::PerPixel;
    throw shape_error(std::string(op) + ": cannot broadcast " + b.str() + " onto " + a.str() +
                      " (only equal shapes, scalars, per-channel (1,c,1,1) and per-pixel (n,1,h,w))");
}

template <typename S, typename F>
TensorT<S> zip(const TensorT<S>& a, const TensorT<S>& b, Bcast k, F f) {
    TensorT<S> out(a.shape);
    const int64_t len = a.size();
    const int64_t HW = a.shape.h * a.shape.w, C = a.shape.c;
    switch (k) {
        case Bcast::Same: {
#pragma omp parallel for schedule(static)
            for (int64_t i = 0; i < len; ++i)
                out.data[static_cast<size_t>(i)] = f(a.data[static_cast<size_t>(i)], b.data[static_cast<size_t>(i)]);
            break;
        }
        case Bcast::Scalar: {
            const S bv = b.data[0];
#pragma omp parallel for schedule(static)
            for (int64_t i = 0; i < len; ++i) out.data[static_cast<size_t>(i)] = f(a.data[static_cast<size_t>(i)], bv);
            break;
        }
        case Bcast::PerChannel: {
#pragma omp parallel for collapse(2) schedule(static)
            for (int64_t n = 0; n < a.shape.n; ++n)
                for (int64_t c = 0; c < C; ++c) {
                    const S bv = b.data[static_cast<size_t>(c)];
                    const S* ar = a.data.data() + (n * C + c) * HW;
                    S* orow = out.data.data() + (n * C + c) * HW;
                    for (int64_t i = 0; i < HW; ++i) orow[i] = f(ar[i], bv);
                }
            break;
        }
        case Bcast::PerPixel: {
#pragma omp parallel for collapse(2) schedule(static)
            for (int64_t n = 0; n < a.shape.n; ++n)
                for (int64_t c = 0; c < C; ++c) {
                    const S* ar = a.data.data() + (n * C + c) * HW;
                    const S* br = b.data.data() + n * HW;
                    S* orow = out.data.data() + (n * C + c) * HW;
                    for (int64_t i = 0; i < HW; ++i) orow[i] = f(ar[i], br[i]);
                }
            break;
        }
    }
    return out;
}

/// Broadcast g up to shape `to`; g's dims must equal to's or be 1.
template <typename S>
TensorT<S> bcast_to(const TensorT<S>& g, const Shape4& to) {
    if (g.shape == to) return g;
    const auto& gs = g.shape;
    TensorT<S> out(to);
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t n = 0; n < to.n; ++n)
        for (int64_t c = 0; c < to.c; ++c)
            for (int64_t y = 0; y < to.h; ++y)
                for (int64_t x = 0; x < to.w; ++x)
                    out.at(n, c, y, x) = g.at(gs.n == 1 ? 0 : n, gs.c == 1 ? 0 : c,
                                              gs.h == 1 ? 0 : y, gs.w == 1 ? 0 : x);
    return out;
}

}  // namespace detail

// ---- elementwise ops -------------------------------------------------------

template <typename S>
TensorT<S> add(TapeT<S>* tape, const TensorT<S>& a, const TensorT<S>& b) {
    auto k = detail::classify("add", a.shape, b.shape);
    TensorT<S> out = detail::zip(a, b, k, [](S x, S y) { return x + y; });
    const int ia = detail::in_id(tape, a), ib = detail::in_id(tape, b);
    if (tape && (ia >= 0 || ib >= 0)) {
        const Shape4 bs = b.shape;
        out.node = tape->new_node(out.shape, [=](TapeT<S>& t, const TensorT<S>& g) {
            if (ia >= 0) t.accumulate(ia, TensorT<S>(g));
            if (ib >= 0) t.accumulate(ib, kernels::reduce_to(g, bs));
        });
        out.tape_id = tape->id();
    }
    return out;
}

template <typename S>
TensorT<S> sub(TapeT<S>* tape, const TensorT<S>& a, const TensorT<S>& b) {
    auto k = detail::classify("sub", a.shape, b.shape);
    TensorT<S> out = detail::zip(a, b, k, [](S x, S y) { return x - y; });
    const int ia = detail::in_id(tape, a), ib = detail::in_id(tape, b);
    if (tape && (ia >= 0 || ib >= 0)) {
        const Shape4 bs = b.shape;
        out.node = tape->new_node(out.shape, [=](TapeT<S>& t, const TensorT<S>& g) {
            if (ia >= 0) t.accumulate(ia, TensorT<S>(g));
            if (ib >= 0) {
                TensorT<S> gb = kernels::reduce_to(g, bs);
                for (auto& v : gb.data) v = -v;
                t.accumulate(ib, std::move(gb));
            }
        });
        out.tape_id = tape->id();
    }
    return out;
}

template <typename S>
TensorT<S> mul(TapeT<S>* tape, const TensorT<S>& a, const TensorT<S>& b) {
    auto k = detail::classify("mul", a.shape, b.shape);
    TensorT<S> out = detail::zip(a, b, k, [](S x, S y) { return x * y; });
    const int ia = detail::in_id(tape, a), ib = detail::in_id(tape, b);
    if (tape && (ia >= 0 || ib >= 0)) {
        auto sa = tape->save_value(a);
        auto sb = tape->save_value(b);
        out.node = tape->new_node(out.shape, [=](TapeT<S>& t, const TensorT<S>& g) {
            if (ia >= 0)
                t.accumulate(ia, detail::zip(g, *sb, k, [](S gv, S bv) { return gv * bv; }));
            if (ib >= 0) {
                auto ga = detail::zip(g, *sa, detail::Bcast::Same, [](S gv, S av) { return gv * av; });
                t.accumulate(ib, kernels::reduce_to(ga, sb->shape));
            }
        });
        out.tape_id = tape->id();
    }
    return out;
}

template <typename S>
TensorT<S> div(TapeT<S>* tape, const TensorT<S>& a, const TensorT<S>& b) {
    auto k = detail::classify("div", a.shape, b.shape);
    TensorT<S> out = detail::zip(a, b, k, [](S x, S y) { return x / y; });
    const int ia = detail::in_id(tape, a), ib = detail::in_id(tape, b);
    if (tape && (ia >= 0 || ib >= 0)) {
        auto sb = tape->save_value(b);
        auto so = tape->save_value(out);  // out/b = a/b^2
        out.node = tape->new_node(out.shape, [=](TapeT<S>& t, const TensorT<S>& g) {
            if (ia >= 0)
                t.accumulate(ia, detail::zip(g, *sb, k, [](S gv, S bv) { return gv / bv; }));
            if (ib >= 0) {
                auto tmp = detail::zip(g, *so, detail::Bcast::Same, [](S gv, S ov) { return -gv * ov; });
                tmp = detail::zip(tmp, *sb, k, [](S x, S bv) { return x / bv; });
                t.accumulate(ib, kernels::reduce_to(tmp, sb->shape));
            }
        });
        out.tape_id = tape->id();
    }
    return out;
}

template <typename S>
TensorT<S> relu(TapeT<S>* tape, const TensorT<S>& x) {
    TensorT<S> out = detail::map(x, [](S v) { return v > S(0) ? v : S(0); });
    if (detail::taped(tape, x)) {
        const int ix = x.node;
        auto sx = tape->save_value(x);
        out.node = tape->new_node(out.shape, [=](TapeT<S>& t, const TensorT<S>& g) {
            TensorT<S> gx(sx->shape);
            const int64_t len = gx.size();
#pragma omp parallel for schedule(static)
            for (int64_t i = 0; i < len; ++i)
                gx.data[static_cast<size_t>(i)] =
                    sx->data[static_cast<size_t>(i)] > S(0) ? g.data[static_cast<size_t>(i)] : S(0);
            t.accumulate(ix, std::move(gx));
        });
        out.tape_id = tape->id();
    }
    return out;
}

template <typename S>
TensorT<S> sigmoid(TapeT<S>* tape, const TensorT<S>& x) {
    TensorT<S> out = detail::map(x, [](S v) { return S(1) / (S(1) + std::exp(-v)); });
    if (detail::taped(tape, x)) {
        const int ix = x.node;
        auto so = tape->save_value(out);
        out.node = tape->new_node(out.shape, [=](TapeT<S>& t, const TensorT<S>& g) {
            TensorT<S> gx = detail::zip(g, *so, detail::Bcast::Same,
                                        [](S gv, S y) { return gv * y * (S(1) - y); });
            t.accumulate(ix, std::move(gx));
        });
        out.tape_id = tape->id();
    }
    return out;
}

/// |x|; subgradient at 0 is 0 (pinned).
template <typename S>
TensorT<S> abs_val(TapeT<S>* tape, const TensorT<S>& x) {
    TensorT<S> out = detail::map(x, [](S v) { return v < S(0) ? -v : v; });
    if (detail::taped(tape, x)) {
        const int ix = x.node;
        auto sx = tape->save_value(x);
        out.node = tape->new_node(out.shape, [=](TapeT<S>& t, const TensorT<S>& g) {
            TensorT<S> gx = detail::zip(g, *sx, detail::Bcast::Same, [](S gv, S v) {
                return v > S(0) ? gv : (v < S(0) ? -gv : S(0));
            });
            t.accumulate(ix, std::move(gx));
        });
        out.tape_id = tape->id();
    }
    return out;
}

template <typename S>
TensorT<S> log_val(TapeT<S>* tape, const TensorT<S>& x) {
    TensorT<S> out = detail::map(x, [](S v) { return std::log(v); });
    if (detail::taped(tape, x)) {
        const int ix = x.node;
        auto sx = tape->save_value(x);
        out.node = tape->new_node(out.shape, [=](TapeT<S>& t, const TensorT<S>& g) {
            t.accumulate(ix, detail::zip(g, *sx, detail::Bcast::Same, [](S gv, S v) { return gv / v; }));
        });
        out.tape_id = tape->id();
    }
    return out;
}

/// x^p for constant p >= 0, with 0^0 = 1.
template <typename S>
TensorT<S> pow_scalar(TapeT<S>* tape, const TensorT<S>& x, S p) {
    TensorT<S> out = detail::map(x, [p](S v) { return std::pow(v, p); });
    if (detail::taped(tape, x)) {
        const int ix = x.node;
        auto sx = tape->save_value(x);
        out.node = tape->new_node(out.shape, [=](TapeT<S>& t, const TensorT<S>& g) {
            if (p == S(0)) {
                t.accumulate(ix, TensorT<S>::zeros(sx->shape));
                return;
            }
            t.accumulate(ix, detail::zip(g, *sx, detail::Bcast::Same, [p](S gv, S v) {
                              return gv * p * std::pow(v, p - S(1));
                          }));
        });
        out.tape_id = tape->id();
    }
    return out;
}

/// a*x + b with scalar constants.
template <typename S>
TensorT<S> affine(TapeT<S>* tape, const TensorT<S>& x, S a, S b) {
    TensorT<S> out = detail::map(x, [a, b](S v) { return a * v + b; });
    if (detail::taped(tape, x)) {
        const int ix = x.node;
        out.node = tape->new_node(out.shape, [=](TapeT<S>& t, const TensorT<S>& g) {
            t.accumulate(ix, detail::map(g, [a](S gv) { return a * gv; }));
        });
        out.tape_id = tape->id();
    }
    return out;
}

template <typename S>
TensorT<S> scalar_mul(TapeT<S>* tape, const TensorT<S>& x, S s) {
    return affine(tape, x, s, S(0));
}

/// Gradient passes only strictly inside (lo, hi).
template <typename S>
TensorT<S> clamp(TapeT<S>* tape, const TensorT<S>& x, S lo, S hi) {
    TensorT<S> out = detail::map(x, [lo, hi](S v) { return v < lo ? lo : (v > hi ? hi : v); });
    if (detail::taped(tape, x)) {
        const int ix = x.node;
        auto sx = tape->save_value(x);
        out.node = tape->new_node(out.shape, [=](TapeT<S>& t, const TensorT<S>& g) {
            t.accumulate(ix, detail::zip(g, *sx, detail::Bcast::Same, [lo, hi](S gv, S v) {
                              return (v > lo && v < hi) ? gv : S(0);
                          }));
        });
        out.tape_id = tape->id();
    }
    return out;
}

// ---- reductions ------------------------------------------------------------

template <typename S>
TensorT<S> sum(TapeT<S>* tape, const TensorT<S>& x) {
    TensorT<S> out = TensorT<S>::scalar(static_cast<S>(kernels::sum_all(x)));
    if (detail::taped(tape, x)) {
        const int ix = x.node;
        const Shape4 xs = x.shape;
        out.node = tape->new_node(out.shape, [=](TapeT<S>& t, const TensorT<S>& g) {
            t.accumulate(ix, TensorT<S>::full(xs, g.data[0]));
        });
        out.tape_id = tape->id();
    }
    return out;
}

template <typename S>
TensorT<S> mean(TapeT<S>* tape, const TensorT<S>& x) {
    const S inv = S(1) / static_cast<S>(x.size());
    TensorT<S> out = TensorT<S>::scalar(static_cast<S>(kernels::sum_all(x)) * inv);
    if (detail::taped(tape, x)) {
        const int ix = x.node;
        const Shape4 xs = x.shape;
        out.node = tape->new_node(out.shape, [=](TapeT<S>& t, const TensorT<S>& g) {
            t.accumulate(ix, TensorT<S>::full(xs, g.data[0] * inv));
        });
        out.tape_id = tape->id();
    }
    return out;
}

/// Sum over the axes flagged true; reduced dims become 1.
template <typename S>
TensorT<S> sum_axes(TapeT<S>* tape, const TensorT<S>& x, bool rn, bool rc, bool rh, bool rw) {
    Shape4 os{rn ? 1 : x.shape.n, rc ? 1 : x.shape.c, rh ? 1 : x.shape.h, rw ? 1 : x.shape.w};
    TensorT<S> out = kernels::reduce_to(x, os);
    if (detail::taped(tape, x)) {
        const int ix = x.node;
        const Shape4 xs = x.shape;
        out.node = tape->new_node(out.shape, [=](TapeT<S>& t, const TensorT<S>& g) {
            t.accumulate(ix, detail::bcast_to(g, xs));
        });
        out.tape_id = tape->id();
    }
    return out;
}

template <typename S>
TensorT<S> mean_axes(TapeT<S>* tape, const TensorT<S>& x, bool rn, bool rc, bool rh, bool rw) {
    TensorT<S> s = sum_axes(tape, x, rn, rc, rh, rw);
    const S cnt = static_cast<S>(x.size() / s.size());
    return scalar_mul(tape, s, S(1) / cnt);
}

// ---- structured ops --------------------------------------------------------

template <typename S>
TensorT<S> conv2d_3x3(TapeT<S>* tape, const TensorT<S>& in, const TensorT<S>& w,
                      const TensorT<S>& b) {
    if (w.shape.h != 3 || w.shape.w != 3)
        throw shape_error("conv2d_3x3: kernel spatial dims must be 3x3, got " + w.shape.str());
    if (in.shape.c != w.shape.c)
        throw shape_error("conv2d_3x3: input channels (" + std::to_string(in.shape.c) +
                          ") != weight input channels (" + std::to_string(w.shape.c) + ")");
    if (b.shape.numel() != w.shape.n)
        throw shape_error("conv2d_3x3: bias has " + std::to_string(b.shape.numel()) +
                          " entries, expected " + std::to_string(w.shape.n) + " (dim cout)");
    if (in.shape.h < 1 || in.shape.w < 1)
        throw shape_error("conv2d_3x3: empty spatial dims " + in.shape.str());
    TensorT<S> out;
    kernels::conv3x3_forward(in, w, b, out);
    const int ii = detail::in_id(tape, in), iw = detail::in_id(tape, w), ib = detail::in_id(tape, b);
    if (tape && (ii >= 0 || iw >= 0 || ib >= 0)) {
        auto sin = tape->save_value(in);
        auto sw = tape->save_value(w);
        out.node = tape->new_node(out.shape, [=](TapeT<S>& t, const TensorT<S>& g) {
            TensorT<S> gi, gw, gb;
            kernels::conv3x3_backward(*sin, *sw, g, gi, gw, gb);
            if (ii >= 0) t.accumulate(ii, std::move(gi));
            if (iw >= 0) t.accumulate(iw, std::move(gw));
            if (ib >= 0) t.accumulate(ib, std::move(gb));
        });
        out.tape_id = tape->id();
    }
    return out;
}

/// Per-pixel dense layer; pass an empty tensor for no bias.
template <typename S>
TensorT<S> dense_1x1(TapeT<S>* tape, const TensorT<S>& in, const TensorT<S>& w,
                     const TensorT<S>& b) {
    if (in.shape.c != w.shape.c)
        throw shape_error("dense_1x1: input channels (" + std::to_string(in.shape.c) +
                          ") != weight input channels (" + std::to_string(w.shape.c) + ")");
    if (!b.empty() && b.shape.numel() != w.shape.n)
        throw shape_error("dense_1x1: bias has " + std::to_string(b.shape.numel()) +
                          " entries, expected " + std::to_string(w.shape.n) + " (dim cout)");
    TensorT<S> out;
    kernels::dense1x1_forward(in, w, b, out);
    const int ii = detail::in_id(tape, in), iw = detail::in_id(tape, w), ib = detail::in_id(tape, b);
    if (tape && (ii >= 0 || iw >= 0 || ib >= 0)) {
        auto sin = tape->save_value(in);
        auto sw = tape->save_value(w);
        const bool has_bias = !b.empty();
        out.node = tape->new_node(out.shape, [=](TapeT<S>& t, const TensorT<S>& g) {
            TensorT<S> gi, gw, gb;
            if (has_bias) gb = TensorT<S>({1, sw->shape.n, 1, 1});
            kernels::dense1x1_backward(*sin, *sw, g, gi, gw, gb);
            if (ii >= 0) t.accumulate(ii, std::move(gi));
            if (iw >= 0) t.accumulate(iw, std::move(gw));
            if (ib >= 0 && has_bias) t.accumulate(ib, std::move(gb));
        });
        out.tape_id = tape->id();
    }
    return out;
}

/// Batch norm over (n,h,w) per channel. Train mode normalizes with batch
/// statistics and updates the running buffers in place (population variance,
/// new = (1-momentum)*old + momentum*batch); Eval mode uses the running
/// buffers. Differentiable w.r.t. x, gamma, beta in both modes.
template <typename S>
TensorT<S> batch_norm(TapeT<S>* tape, const TensorT<S>& x, const TensorT<S>& gamma,
                      const TensorT<S>& beta, TensorT<S>& running_mean, TensorT<S>& running_var,
                      Mode mode, S momentum, S eps) {
    if (gamma.shape.numel() != x.shape.c || beta.shape.numel() != x.shape.c)
        throw shape_error("batch_norm: affine params have " + std::to_string(gamma.shape.numel()) +
                          " entries, expected " + std::to_string(x.shape.c) + " (dim c)");
    if (eps <= S(0)) throw shape_error("batch_norm: eps must be positive");
    const int ix = detail::in_id(tape, x), ig = detail::in_id(tape, gamma), ib = detail::in_id(tape, beta);
    TensorT<S> out;
    if (mode == Mode::Train) {
        if (x.shape.n < 1 || x.shape.numel() == 0)
            throw shape_error("batch_norm: zero-size batch in Train mode, shape " + x.shape.str());
        std::vector<S> mean, inv_std;
        kernels::bn_forward_train(x, gamma, beta, eps, out, mean, inv_std);
        for (int64_t c = 0; c < x.shape.c; ++c) {
            const S var = S(1) / (inv_std[static_cast<size_t>(c)] * inv_std[static_cast<size_t>(c)]) - eps;
            running_mean.data[static_cast<size_t>(c)] =
                (S(1) - momentum) * running_mean.data[static_cast<size_t>(c)] + momentum * mean[static_cast<size_t>(c)];
            running_var.data[static_cast<size_t>(c)] =
                (S(1) - momentum) * running_var.data[static_cast<size_t>(c)] + momentum * var;
        }
        if (tape && (ix >= 0 || ig >= 0 || ib >= 0)) {
            auto sx = tape->save_value(x);
            auto sg = tape->save_value(gamma);
            out.node = tape->new_node(out.shape, [=](TapeT<S>& t, const TensorT<S>& g) {
                TensorT<S> gx, ggamma, gbeta;
                kernels::bn_backward_train(*sx, *sg, mean, inv_std, g, gx, ggamma, gbeta);
                if (ix >= 0) t.accumulate(ix, std::move(gx));
                if (ig >= 0) t.accumulate(ig, std::move(ggamma));
                if (ib >= 0) t.accumulate(ib, std::move(gbeta));
            });
            out.tape_id = tape->id();
        }
    } else {
        kernels::bn_forward_eval(x, gamma, beta, running_mean, running_var, eps, out);
        if (tape && (ix >= 0 || ig >= 0 || ib >= 0)) {
            auto sx = tape->save_value(x);
            auto sg = tape->save_value(gamma);
            auto srm = std::make_shared<const TensorT<S>>(running_mean);
            auto srv = std::make_shared<const TensorT<S>>(running_var);
            out.node = tape->new_node(out.shape, [=](TapeT<S>& t, const TensorT<S>& g) {
                TensorT<S> gx, ggamma, gbeta;
                kernels::bn_backward_eval(*sx, *sg, *srm, *srv, eps, g, gx, ggamma, gbeta);
                if (ix >= 0) t.accumulate(ix, std::move(gx));
                if (ig >= 0) t.accumulate(ig, std::move(ggamma));
                if (ib >= 0) t.accumulate(ib, std::move(gbeta));
            });
            out.tape_id = tape->id();
        }
    }
    return out;
}

enum class Resample { Nearest, Bilinear };

/// Bilinear is differentiable (align_corners=false); Nearest is a
/// non-differentiable passthrough for masks.
template <typename S>
TensorT<S> resample(TapeT<S>* tape, const TensorT<S>& in, int64_t out_h, int64_t out_w,
                    Resample mode) {
    if (out_h < 1 || out_w < 1)
        throw shape_error("resample: output size must be >= 1, got (" + std::to_string(out_h) +
                          "," + std::to_string(out_w) + ")");
    TensorT<S> out({in.shape.n, in.shape.c, out_h, out_w});
    if (mode == Resample::Nearest) {
        kernels::nearest_forward(in, out);
        return out;
    }
    kernels::bilinear_forward(in, out);
    if (detail::taped(tape, in)) {
        const int ii = in.node;
        const Shape4 is = in.shape;
        out.node = tape->new_node(out.shape, [=](TapeT<S>& t, const TensorT<S>& g) {
            TensorT<S> gi(is);
            kernels::bilinear_backward(g, gi);
            t.accumulate(ii, std::move(gi));
        });
        out.tape_id = tape->id();
    }
    return out;
}

template <typename S>
TensorT<S> concat_channels(TapeT<S>* tape, const std::vector<const TensorT<S>*>& parts) {
    if (parts.empty()) throw shape_error("concat_channels: no inputs");
    const Shape4 s0 = parts[0]->shape;
    int64_t ctot = 0;
    for (const auto* p : parts) {
        if (p->shape.n != s0.n || p->shape.h != s0.h || p->shape.w != s0.w)
            throw shape_error("concat_channels: spatial/batch mismatch " + p->shape.str() + " vs " + s0.str());
        ctot += p->shape.c;
    }
    TensorT<S> out({s0.n, ctot, s0.h, s0.w});
    const int64_t HW = s0.h * s0.w;
    int64_t coff = 0;
    std::vector<int> ids;
    std::vector<int64_t> offs, widths;
    for (const auto* p : parts) {
        const int64_t pc = p->shape.c;
#pragma omp parallel for collapse(2) schedule(static)
        for (int64_t n = 0; n < s0.n; ++n)
            for (int64_t c = 0; c < pc; ++c)
                std::copy_n(p->data.data() + (n * pc + c) * HW, HW,
                            out.data.data() + ((n * ctot + coff + c) * HW));
        ids.push_back(detail::in_id(tape, *p));
        offs.push_back(coff);
        widths.push_back(pc);
        coff += pc;
    }
    bool any = false;
    for (int id : ids) any = any || id >= 0;
    if (tape && any) {
        out.node = tape->new_node(out.shape, [=](TapeT<S>& t, const TensorT<S>& g) {
            for (size_t k = 0; k < ids.size(); ++k) {
                if (ids[k] < 0) continue;
                TensorT<S> gp({s0.n, widths[k], s0.h, s0.w});
#pragma omp parallel for collapse(2) schedule(static)
                for (int64_t n = 0; n < s0.n; ++n)
                    for (int64_t c = 0; c < widths[k]; ++c)
                        std::copy_n(g.data.data() + ((n * ctot + offs[k] + c) * HW), HW,
                                    gp.data.data() + (n * widths[k] + c) * HW);
                t.accumulate(ids[k], std::move(gp));
            }
        });
        out.tape_id = tape->id();
    }
    return out;
}

template <typename S>
TensorT<S> slice_channels(TapeT<S>* tape, const TensorT<S>& x, int64_t c0, int64_t c1) {
    if (c0 < 0 || c1 > x.shape.c || c0 >= c1)
        throw shape_error("slice_channels: range [" + std::to_string(c0) + "," + std::to_string(c1) +
                          ") out of bounds for c=" + std::to_string(x.shape.c));
    const int64_t HW = x.shape.h * x.shape.w, C = x.shape.c, NC = c1 - c0;
    TensorT<S> out({x.shape.n, NC, x.shape.h, x.shape.w});
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t n = 0; n < x.shape.n; ++n)
        for (int64_t c = 0; c < NC; ++c)
            std::copy_n(x.data.data() + (n * C + c0 + c) * HW, HW, out.data.data() + (n * NC + c) * HW);
    if (detail::taped(tape, x)) {
        const int ix = x.node;
        const Shape4 xs = x.shape;
        out.node = tape->new_node(out.shape, [=](TapeT<S>& t, const TensorT<S>& g) {
            TensorT<S> gx = TensorT<S>::zeros(xs);
#pragma omp parallel for collapse(2) schedule(static)
            for (int64_t n = 0; n < xs.n; ++n)
                for (int64_t c = 0; c < NC; ++c)
                    std::copy_n(g.data.data() + (n * NC + c) * HW, HW,
                                gx.data.data() + (n * xs.c + c0 + c) * HW);
            t.accumulate(ix, std::move(gx));
        });
        out.tape_id = tape->id();
    }
    return out;
}

template <typename S>
TensorT<S> crop(TapeT<S>* tape, const TensorT<S>& x, int64_t y0, int64_t x0, int64_t ch, int64_t cw) {
    if (y0 < 0 || x0 < 0 || y0 + ch > x.shape.h || x0 + cw > x.shape.w)
        throw shape_error("crop: window (" + std::to_string(y0) + "," + std::to_string(x0) + ")+(" +
                          std::to_string(ch) + "," + std::to_string(cw) + ") exceeds " + x.shape.str());
    TensorT<S> out({x.shape.n, x.shape.c, ch, cw});
    const int64_t C = x.shape.c;
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t n = 0; n < x.shape.n; ++n)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t y = 0; y < ch; ++y)
                std::copy_n(x.data.data() + ((n * C + c) * x.shape.h + y0 + y) * x.shape.w + x0, cw,
                            out.data.data() + ((n * C + c) * ch + y) * cw);
    if (detail::taped(tape, x)) {
        const int ix = x.node;
        const Shape4 xs = x.shape;
        out.node = tape->new_node(out.shape, [=](TapeT<S>& t, const TensorT<S>& g) {
            TensorT<S> gx = TensorT<S>::zeros(xs);
#pragma omp parallel for collapse(2) schedule(static)
            for (int64_t n = 0; n < xs.n; ++n)
                for (int64_t c = 0; c < xs.c; ++c)
                    for (int64_t y = 0; y < ch; ++y)
                        std::copy_n(g.data.data() + ((n * xs.c + c) * ch + y) * cw, cw,
                                    gx.data.data() + ((n * xs.c + c) * xs.h + y0 + y) * xs.w + x0);
            t.accumulate(ix, std::move(gx));
        });
        out.tape_id = tape->id();
    }
    return out;
}

/// Overwrite channels [c0, c0+src.c) of x with (constant) src; gradient for
/// the pinned channels is dropped.
template <typename S>
TensorT<S> pin_channels(TapeT<S>* tape, const TensorT<S>& x, const TensorT<S>& src, int64_t c0) {
    if (src.shape.n != x.shape.n || src.shape.h != x.shape.h || src.shape.w != x.shape.w)
        throw shape_error("pin_channels: src " + src.shape.str() + " does not match " + x.shape.str());
    if (c0 < 0 || c0 + src.shape.c > x.shape.c)
        throw shape_error("pin_channels: channel range out of bounds (dim c)");
    TensorT<S> out = x;
    out.node = -1;
    out.tape_id = 0;
    const int64_t HW = x.shape.h * x.shape.w, C = x.shape.c, SC = src.shape.c;
#pragma omp parallel for collapse(2) schedule(static)
    for (int64_t n = 0; n < x.shape.n; ++n)
        for (int64_t c = 0; c < SC; ++c)
            std::copy_n(src.data.data() + (n * SC + c) * HW, HW, out.data.data() + (n * C + c0 + c) * HW);
    if (detail::taped(tape, x)) {
        const int ix = x.node;
        const Shape4 xs = x.shape;
        out.node = tape->new_node(out.shape, [=](TapeT<S>& t, const TensorT<S>& g) {
            TensorT<S> gx = g;
            gx.node = -1;
            gx.tape_id = 0;
#pragma omp parallel for collapse(2) schedule(static)
            for (int64_t n = 0; n < xs.n; ++n)
                for (int64_t c = 0; c < SC; ++c)
                    std::fill_n(gx.data.data() + (n * xs.c + c0 + c) * HW, HW, S(0));
            t.accumulate(ix, std::move(gx));
        });
        out.tape_id = tape->id();
    }
    return out;
}

}  // namespace nca

#endif
