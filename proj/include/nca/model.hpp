#ifndef NCA_MODEL_HPP
#define NCA_MODEL_HPP

#include <cstdint>
#include <string>

#include "nca/tensor.hpp"

namespace nca {

// Two-level NCA segmentation model. Per level the cell rule is
//   delta = fc1(relu(bn(fc0(concat(state, perceive1(state), perceive2(state))))))
// with C state channels, two learned 3x3 perception convs, a hidden layer of
// width `hidden`, and a bias-free output projection back to C channels.
struct MedNcaConfig {
    int channels = 16;       // state channels per cell (C)
    int hidden = 128;        // update-rule hidden width
    int scale_factor = 4;    // level-1 runs at (h/s, w/s)
    int steps_level1 = 32;
    int steps_level2 = 16;
    float fire_rate = 0.5f;  // per-cell update probability
    int input_channels = 1;
    int output_channels = 1;

    void validate() const {
        if (channels < 1 || hidden < 1 || scale_factor < 1)
            throw config_error("config: channels/hidden/scale_factor must be >= 1");
        if (steps_level1 < 0 || steps_level2 < 0)
            throw config_error("config: step counts must be >= 0");
        if (!(fire_rate > 0.0f && fire_rate <= 1.0f))
            throw config_error("config: fire_rate must be in (0,1], got " + std::to_string(fire_rate));
        if (input_channels < 1 || output_channels < 1)
            throw config_error("config: input/output channels must be >= 1");
        if (input_channels + output_channels > channels)
            throw config_error("config: input_channels + output_channels (" +
                               std::to_string(input_channels + output_channels) +
                               ") exceeds state channels (" + std::to_string(channels) + ")");
    }
};

inline constexpr float kBnMomentum = 0.1f;
inline constexpr float kBnEps = 1e-5f;

template <typename S>
struct CellParamsT {
    TensorT<S> perceive1_w, perceive1_b;
    TensorT<S> perceive2_w, perceive2_b;
    TensorT<S> fc0_w, fc0_b;
    TensorT<S> bn_gamma, bn_beta;
    TensorT<S> bn_running_mean, bn_running_var;  // state, not trainable
    TensorT<S> fc1_w;                            // bias-free output projection

    static CellParamsT sized(const MedNcaConfig& cfg) {
        const int64_t c = cfg.channels, h = cfg.hidden;
        CellParamsT p;
        p.perceive1_w = TensorT<S>({c, c, 3, 3});
        p.perceive1_b = TensorT<S>({1, c, 1, 1});
        p.perceive2_w = TensorT<S>({c, c, 3, 3});
        p.perceive2_b = TensorT<S>({1, c, 1, 1});
        p.fc0_w = TensorT<S>({h, 3 * c, 1, 1});
        p.fc0_b = TensorT<S>({1, h, 1, 1});
        p.bn_gamma = TensorT<S>::full({1, h, 1, 1}, S(1));
        p.bn_beta = TensorT<S>({1, h, 1, 1});
        p.bn_running_mean = TensorT<S>({1, h, 1, 1});
        p.bn_running_var = TensorT<S>::full({1, h, 1, 1}, S(1));
        p.fc1_w = TensorT<S>({c, h, 1, 1});
        return p;
    }

    /// Trainable tensors, declared order.
    template <typename F>
    void for_each_param(F f) {
        f("perceive1_w", perceive1_w);
        f("perceive1_b", perceive1_b);
        f("perceive2_w", perceive2_w);
        f("perceive2_b", perceive2_b);
        f("fc0_w", fc0_w);
        f("fc0_b", fc0_b);
        f("bn_gamma", bn_gamma);
        f("bn_beta", bn_beta);
        f("fc1_w", fc1_w);
    }

    /// All serialized tensors (parameters + BN running stats), declared order.
    template <typename F>
    void for_each_tensor(F f) {
        f("perceive1_w", perceive1_w);
        f("perceive1_b", perceive1_b);
        f("perceive2_w", perceive2_w);
        f("perceive2_b", perceive2_b);
        f("fc0_w", fc0_w);
        f("fc0_b", fc0_b);
        f("bn_gamma", bn_gamma);
        f("bn_beta", bn_beta);
        f("bn_running_mean", bn_running_mean);
        f("bn_running_var", bn_running_var);
        f("fc1_w", fc1_w);
    }
};

template <typename S>
struct MedNcaModelT {
    MedNcaConfig config;
    CellParamsT<S> level1, level2;

    static MedNcaModelT sized(const MedNcaConfig& cfg) {
        cfg.validate();
        MedNcaModelT m;
        m.config = cfg;
        m.level1 = CellParamsT<S>::sized(cfg);
        m.level2 = CellParamsT<S>::sized(cfg);
        return m;
    }

    template <typename F>
    void for_each_param(F f) {
        level1.for_each_param([&](const char* n, TensorT<S>& t) { f((std::string("level1.") + n), t); });
        level2.for_each_param([&](const char* n, TensorT<S>& t) { f((std::string("level2.") + n), t); });
    }

    std::vector<TensorT<S>*> trainable() {
        std::vector<TensorT<S>*> out;
        for_each_param([&](const std::string&, TensorT<S>& t) { out.push_back(&t); });
        return out;
    }
};

using MedNcaModel = MedNcaModelT<float>;

/// Closed-form trainable parameter count:
/// per cell 2*(9C^2 + C) + (3C*H + H) + 2H + H*C, two cells.
inline int64_t count_parameters(const MedNcaConfig& cfg) {
    const int64_t c = cfg.channels, h = cfg.hidden;
    const int64_t per_cell = 2 * (c * c * 9 + c) + (3 * c * h + h) + 2 * h + h * c;
    return 2 * per_cell;
}

template <typename S>
int64_t count_parameters(MedNcaModelT<S>& model) {
    int64_t total = 0;
    model.for_each_param([&](const std::string&, TensorT<S>& t) { total += t.size(); });
    return total;
}

template <typename To, typename From>
MedNcaModelT<To> model_cast(MedNcaModelT<From>& m) {
    MedNcaModelT<To> out = MedNcaModelT<To>::sized(m.config);
    auto copy_cell = [](CellParamsT<From>& a, CellParamsT<To>& b) {
        std::vector<TensorT<From>*> src;
        std::vector<TensorT<To>*> dst;
        a.for_each_tensor([&](const char*, TensorT<From>& t) { src.push_back(&t); });
        b.for_each_tensor([&](const char*, TensorT<To>& t) { dst.push_back(&t); });
        for (size_t i = 0; i < src.size(); ++i) *dst[i] = tensor_cast<To>(*src[i]);
    };
    copy_cell(m.level1, out.level1);
    copy_cell(m.level2, out.level2);
    return out;
}

}  // namespace nca

#endif
