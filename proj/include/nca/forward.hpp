#ifndef NCA_FORWARD_HPP
#define NCA_FORWARD_HPP

#include "nca/autodiff.hpp"
#include "nca/model.hpp"
#include "nca/rng.hpp"

namespace nca {

/// Bernoulli(fire_rate) mask of shape (n,1,h,w), drawn row-major.
template <typename S>
TensorT<S> make_fire_mask(int64_t n, int64_t h, int64_t w, float fire_rate, Rng rng) {
    TensorT<S> m({n, 1, h, w});
    for (auto& v : m.data) v = rng.bernoulli(fire_rate) ? S(1) : S(0);
    return m;
}

/// 1 where v >= thr (ties go to foreground), constant output.
template <typename S>
TensorT<S> binarize(const TensorT<S>& t, S thr) {
    TensorT<S> out(t.shape);
    for (size_t i = 0; i < t.data.size(); ++i) out.data[i] = t.data[i] >= thr ? S(1) : S(0);
    return out;
}

/// One stochastic NCA update. All cells compute a state delta; a per-pixel
/// fire mask (shared across channels) gates which cells apply it; the image
/// channels are re-pinned to their pre-step values afterwards.
template <typename S>
TensorT<S> cell_step(TapeT<S>* tape, const TensorT<S>& state, CellParamsT<S>& cell,
                     const MedNcaConfig& cfg, float fire_rate, Rng rng, Mode mode) {
    if (!(fire_rate > 0.0f && fire_rate <= 1.0f))
        throw config_error("cell_step: fire_rate must be in (0,1], got " + std::to_string(fire_rate));
    if (state.shape.c != cfg.channels)
        throw shape_error("cell_step: state has " + std::to_string(state.shape.c) +
                          " channels, config says " + std::to_string(cfg.channels));
    auto p1 = conv2d_3x3(tape, state, cell.perceive1_w, cell.perceive1_b);
    auto p2 = conv2d_3x3(tape, state, cell.perceive2_w, cell.perceive2_b);
    auto z = concat_channels<S>(tape, {&state, &p1, &p2});
    auto h = dense_1x1(tape, z, cell.fc0_w, cell.fc0_b);
    h = batch_norm(tape, h, cell.bn_gamma, cell.bn_beta, cell.bn_running_mean,
                   cell.bn_running_var, mode, S(kBnMomentum), S(kBnEps));
    h = relu(tape, h);
    auto delta = dense_1x1(tape, h, cell.fc1_w, TensorT<S>{});
    auto fire = make_fire_mask<S>(state.shape.n, state.shape.h, state.shape.w, fire_rate, rng);
    auto next = add(tape, state, mul(tape, delta, fire));
    auto image = slice_channels<S>(nullptr, state, 0, cfg.input_channels);
    return pin_channels(tape, next, image, 0);
}

/// `steps` sequential cell updates with per-step derived rng streams.
template <typename S>
TensorT<S> rollout(TapeT<S>* tape, TensorT<S> state, CellParamsT<S>& cell, const MedNcaConfig& cfg,
                   int steps, float fire_rate, const Rng& rng, Mode mode) {
    for (int k = 0; k < steps; ++k)
        state = cell_step(tape, state, cell, cfg, fire_rate, rng.derive(static_cast<uint64_t>(k)), mode);
    return state;
}

template <typename S>
struct ForwardOut {
    TensorT<S> logits_l1;  // (n, out_c, h/s, w/s)
    TensorT<S> logits_l2;  // (n, out_c, h, w)
};

namespace detail {

template <typename S>
TensorT<S> seed_state(const TensorT<S>& image, int channels) {
    const auto& s = image.shape;
    TensorT<S> state({s.n, channels, s.h, s.w});
    const int64_t HW = s.h * s.w;
    for (int64_t n = 0; n < s.n; ++n)
        for (int64_t c = 0; c < s.c; ++c)
            std::copy_n(image.data.data() + (n * s.c + c) * HW, HW,
                        state.data.data() + (n * channels + c) * HW);
    return state;
}

}  // namespace detail

/// Two-level inference: low-res rollout for global context, bilinear handoff
/// of the full state, full-res rollout. Logits stay raw in the state; sigmoid
/// is applied by losses/metrics only.
template <typename S>
ForwardOut<S> forward(TapeT<S>* tape, MedNcaModelT<S>& model, const TensorT<S>& image,
                      const Rng& rng, Mode mode) {
    const auto& cfg = model.config;
    const auto& s = image.shape;
    if (s.c != cfg.input_channels)
        throw shape_error("forward: image has " + std::to_string(s.c) + " channels, expected " +
                          std::to_string(cfg.input_channels));
    if (s.h % cfg.scale_factor != 0 || s.w % cfg.scale_factor != 0)
        throw shape_error("forward: image size (" + std::to_string(s.h) + "," + std::to_string(s.w) +
                          ") not divisible by scale_factor " + std::to_string(cfg.scale_factor));
    const int64_t lh = s.h / cfg.scale_factor, lw = s.w / cfg.scale_factor;

    auto low = resample(static_cast<TapeT<S>*>(nullptr), image, lh, lw, Resample::Bilinear);
    auto state1 = detail::seed_state(low, cfg.channels);
    state1 = rollout(tape, std::move(state1), model.level1, cfg, cfg.steps_level1, cfg.fire_rate,
                     rng.derive(1), mode);
    ForwardOut<S> out;
    out.logits_l1 = slice_channels(tape, state1, cfg.input_channels,
                                   cfg.input_channels + cfg.output_channels);

    auto up = resample(tape, state1, s.h, s.w, Resample::Bilinear);
    auto state2 = pin_channels(tape, up, image, 0);
    state2 = rollout(tape, std::move(state2), model.level2, cfg, cfg.steps_level2, cfg.fire_rate,
                     rng.derive(2), mode);
    out.logits_l2 = slice_channels(tape, state2, cfg.input_channels,
                                   cfg.input_channels + cfg.output_channels);
    return out;
}

template <typename S>
struct PatchForwardOut {
    TensorT<S> logits_l1, target_l1;  // low-res pair
    TensorT<S> logits_l2, target_l2;  // random full-res patch pair
    int64_t off_y = 0, off_x = 0;
};

/// Memory-saving training forward: level 2 rolls out on a random square crop
/// of the upsampled state; the mask is cropped at the same offset. The target
/// for level 1 is the bilinearly downscaled mask re-binarized at 0.5.
template <typename S>
PatchForwardOut<S> forward_training_patch(TapeT<S>* tape, MedNcaModelT<S>& model,
                                          const TensorT<S>& image, const TensorT<S>& mask_full,
                                          const Rng& rng, int64_t patch_size, Mode mode) {
    const auto& cfg = model.config;
    const auto& s = image.shape;
    check_same_shape("forward_training_patch(image,mask)",
                     {s.n, cfg.output_channels, s.h, s.w}, mask_full.shape);
    if (patch_size < 1 || patch_size > s.h || patch_size > s.w)
        throw shape_error("forward_training_patch: patch_size " + std::to_string(patch_size) +
                          " out of range for image " + s.str());
    if (s.h % cfg.scale_factor != 0 || s.w % cfg.scale_factor != 0)
        throw shape_error("forward_training_patch: image not divisible by scale_factor");
    const int64_t lh = s.h / cfg.scale_factor, lw = s.w / cfg.scale_factor;

    auto low = resample(static_cast<TapeT<S>*>(nullptr), image, lh, lw, Resample::Bilinear);
    auto state1 = detail::seed_state(low, cfg.channels);
    state1 = rollout(tape, std::move(state1), model.level1, cfg, cfg.steps_level1, cfg.fire_rate,
                     rng.derive(1), mode);

    PatchForwardOut<S> out;
    out.logits_l1 = slice_channels(tape, state1, cfg.input_channels,
                                   cfg.input_channels + cfg.output_channels);
    out.target_l1 = binarize(
        resample(static_cast<TapeT<S>*>(nullptr), mask_full, lh, lw, Resample::Bilinear), S(0.5));

    auto up = resample(tape, state1, s.h, s.w, Resample::Bilinear);
    auto state2 = pin_channels(tape, up, image, 0);

    Rng off_rng = rng.derive(0);
    out.off_y = off_rng.uniform_int(0, s.h - patch_size);
    out.off_x = off_rng.uniform_int(0, s.w - patch_size);
    if (patch_size < s.h || patch_size < s.w)
        state2 = crop(tape, state2, out.off_y, out.off_x, patch_size, patch_size);
    state2 = rollout(tape, std::move(state2), model.level2, cfg, cfg.steps_level2, cfg.fire_rate,
                     rng.derive(2), mode);
    out.logits_l2 = slice_channels(tape, state2, cfg.input_channels,
                                   cfg.input_channels + cfg.output_channels);
    out.target_l2 = crop(static_cast<TapeT<S>*>(nullptr), mask_full, out.off_y, out.off_x,
                         patch_size, patch_size);
    return out;
}

}  // namespace nca

#endif
