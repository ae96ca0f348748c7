#ifndef NCA_LOSSES_HPP
#define NCA_LOSSES_HPP

#include "nca/autodiff.hpp"

namespace nca {

struct LossConfig {
    float focal_gamma = 2.0f;
    float focal_alpha = 1.0f;
    float smooth_eps = 1e-6f;
    float vwsl_gamma = 1e3f;
    bool weight_clamp = true;

    void validate() const {
        if (focal_gamma < 0) throw config_error("loss: focal_gamma must be >= 0");
        if (smooth_eps <= 0) throw config_error("loss: smooth_eps must be > 0");
        if (vwsl_gamma < 0) throw config_error("loss: vwsl_gamma must be >= 0");
    }
};

/// Weighted soft Dice coefficient over the whole batch:
///   (2 sum(w p t) + eps) / (sum(w p) + sum(w t) + eps).
/// Empty `weights` means w == 1. Returns the coefficient, not the loss.
template <typename S>
TensorT<S> soft_dice(TapeT<S>* tape, const TensorT<S>& pred, const TensorT<S>& target,
                     const TensorT<S>& weights, S eps) {
    check_same_shape("soft_dice(pred,target)", pred.shape, target.shape);
    if (!weights.empty()) check_same_shape("soft_dice(pred,weights)", pred.shape, weights.shape);
    TensorT<S> wp = weights.empty() ? pred : mul(tape, pred, weights);
    TensorT<S> wpt = mul(tape, wp, target);
    TensorT<S> num = affine(tape, sum(tape, wpt), S(2), eps);
    double swt = 0;
    if (weights.empty()) {
        swt = kernels::sum_all(target);
    } else {
        for (size_t i = 0; i < target.data.size(); ++i)
            swt += static_cast<double>(weights.data[i]) * static_cast<double>(target.data[i]);
    }
    TensorT<S> den = affine(tape, sum(tape, wp), S(1), static_cast<S>(swt) + eps);
    return div(tape, num, den);
}

/// Focal loss with optional per-pixel weights:
///   FL = -alpha * (1 - p_t)^gamma * log(p_t),  p_t clamped via p in [1e-7, 1-1e-7];
/// returns sum(w FL)/sum(w), or the plain mean when w is empty or sums to 0.
template <typename S>
TensorT<S> focal_loss(TapeT<S>* tape, const TensorT<S>& pred, const TensorT<S>& target,
                      const TensorT<S>& weights, S alpha, S gamma) {
    check_same_shape("focal_loss(pred,target)", pred.shape, target.shape);
    if (!weights.empty()) check_same_shape("focal_loss(pred,weights)", pred.shape, weights.shape);
    auto pc = clamp(tape, pred, S(1e-7), S(1) - S(1e-7));
    // p_t = p*t + (1-p)*(1-t) = p*(2t-1) + (1-t), with t constant
    TensorT<S> t21(target.shape), omt(target.shape);
    for (size_t i = 0; i < target.data.size(); ++i) {
        t21.data[i] = S(2) * target.data[i] - S(1);
        omt.data[i] = S(1) - target.data[i];
    }
    auto pt = add(tape, mul(tape, pc, t21), omt);
    auto fl = scalar_mul(tape, mul(tape, pow_scalar(tape, affine(tape, pt, S(-1), S(1)), gamma),
                                   log_val(tape, pt)),
                         -alpha);
    if (weights.empty()) return mean(tape, fl);
    const double sw = kernels::sum_all(weights);
    if (sw == 0.0) return mean(tape, fl);
    return scalar_mul(tape, sum(tape, mul(tape, fl, weights)), S(1.0 / sw));
}

/// Mean absolute difference of two (sigmoid) outputs of one level.
template <typename S>
TensorT<S> consistency_l1(TapeT<S>* tape, const TensorT<S>& o1, const TensorT<S>& o2) {
    check_same_shape("consistency_l1", o1.shape, o2.shape);
    return mean(tape, abs_val(tape, sub(tape, o1, o2)));
}

/// Supervised pretraining loss: sum over levels of (1 - DSC) + FocalLoss,
/// unweighted. Inputs are raw logits; targets are binary masks per level.
template <typename S>
TensorT<S> supervised_loss(TapeT<S>* tape, const TensorT<S>& logits_l1, const TensorT<S>& logits_l2,
                           const TensorT<S>& target_l1, const TensorT<S>& target_l2,
                           const LossConfig& cfg) {
    TensorT<S> total;
    const TensorT<S> no_w;
    const std::pair<const TensorT<S>*, const TensorT<S>*> levels[2] = {{&logits_l1, &target_l1},
                                                                       {&logits_l2, &target_l2}};
    for (int k = 0; k < 2; ++k) {
        auto p = sigmoid(tape, *levels[k].first);
        auto dsc = soft_dice(tape, p, *levels[k].second, no_w, S(cfg.smooth_eps));
        auto term = add(tape, affine(tape, dsc, S(-1), S(1)),
                        focal_loss(tape, p, *levels[k].second, no_w, S(cfg.focal_alpha), S(cfg.focal_gamma)));
        total = k == 0 ? term : add(tape, total, term);
    }
    return total;
}

/// Variance-weighted segmentation loss, summed over both levels:
///   w-weighted [(1 - DSC) + FocalLoss] of o1 against the surrogate target,
///   plus vwsl_gamma * L1(o1, o2) on the sigmoid outputs.
/// Weights are required; they are what makes this loss meaningful.
template <typename S>
TensorT<S> vwsl(TapeT<S>* tape, const TensorT<S>& o1_l1, const TensorT<S>& o2_l1,
                const TensorT<S>& o1_l2, const TensorT<S>& o2_l2, const TensorT<S>& target_l1,
                const TensorT<S>& weights_l1, const TensorT<S>& target_l2,
                const TensorT<S>& weights_l2, const LossConfig& cfg) {
    if (weights_l1.empty() || weights_l2.empty())
        throw config_error("vwsl: variance weights are required (use supervised_loss otherwise)");
    TensorT<S> total;
    struct Level {
        const TensorT<S>*o1, *o2, *tgt, *w;
    };
    const Level levels[2] = {{&o1_l1, &o2_l1, &target_l1, &weights_l1},
                             {&o1_l2, &o2_l2, &target_l2, &weights_l2}};
    for (int k = 0; k < 2; ++k) {
        auto p1 = sigmoid(tape, *levels[k].o1);
        auto p2 = sigmoid(tape, *levels[k].o2);
        auto dsc = soft_dice(tape, p1, *levels[k].tgt, *levels[k].w, S(cfg.smooth_eps));
        auto seg = add(tape, affine(tape, dsc, S(-1), S(1)),
                       focal_loss(tape, p1, *levels[k].tgt, *levels[k].w, S(cfg.focal_alpha),
                                  S(cfg.focal_gamma)));
        auto lvl = add(tape, seg, scalar_mul(tape, consistency_l1(tape, p1, p2), S(cfg.vwsl_gamma)));
        total = k == 0 ? lvl : add(tape, total, lvl);
    }
    return total;
}

}  // namespace nca

#endif
