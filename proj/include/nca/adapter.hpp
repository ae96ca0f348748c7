#ifndef NCA_ADAPTER_HPP
#define NCA_ADAPTER_HPP

#include <filesystem>
#include <optional>

#include "nca/dataset.hpp"
#include "nca/losses.hpp"
#include "nca/model.hpp"

namespace nca {

/// Per-pixel statistics of repeated stochastic predictions (sigmoid of the
/// level-2 logits). std_dev uses the population convention (divide by N).
struct EnsembleStats {
    Tensor mean;     // (1,1,h,w) in [0,1]
    Tensor std_dev;  // (1,1,h,w) in [0,0.5]
    int n_runs = 10;
};

/// Surrogate supervision built from ensemble statistics.
struct Surrogate {
    Tensor target;      // 1[mean >= 0.5]
    Tensor weights;     // clamp(1 - 2*std, 0, 1)
    Tensor target_l1;   // bilinear downsample, re-binarized at 0.5
    Tensor weights_l1;  // bilinear downsample
};

struct AdaptConfig {
    int n_runs = 10;
    int epochs = 100;
    int batch_size = 4;
    float vwsl_gamma = 1e3f;
    float lr = 1.6e-4f;  // pretrain default / 10
    float beta1 = 0.9f;
    float beta2 = 0.99f;
    float adam_eps = 1e-8f;
    uint64_t seed = 7;
    bool freeze_bn_stats = true;
    int stats_refresh_every = 0;  // 0 = compute surrogates once (default)

    void validate() const {
        if (n_runs < 2) throw config_error("adapt: n_runs must be >= 2");
        if (epochs < 0) throw config_error("adapt: epochs must be >= 0");
        if (batch_size < 1) throw config_error("adapt: batch_size must be >= 1");
        if (lr <= 0) throw config_error("adapt: lr must be > 0");
        if (vwsl_gamma < 0) throw config_error("adapt: vwsl_gamma must be >= 0");
    }
};

struct AdaptReport {
    std::vector<float> epoch_loss;
    float consistency_before = 0;
    float consistency_after = 0;
    float dice_before = -1.0f;  // set when reference masks are available
    float dice_after = -1.0f;
    double wall_seconds = 0;
};

/// n_runs stochastic Eval-mode forwards with derived per-run streams.
EnsembleStats ensemble_predict(MedNcaModel& model, const Tensor& image, int n_runs, const Rng& rng);

Surrogate build_surrogate(const EnsembleStats& stats, int scale_factor, bool weight_clamp);

/// Two-phase unsupervised adaptation: (1) frozen-model ensembles give a
/// surrogate target and variance weights per image; (2) VWSL fine-tuning with
/// two independent stochastic forwards per batch. BN running statistics stay
/// frozen (Eval-mode normalization) while the affine BN parameters train.
/// Masks in `samples` are ignored for training and only used for the
/// before/after Dice fields of the report. When out_dir is given, the initial
/// mean and std maps are exported as 8-bit PGMs (std mapped [0,0.5]->[0,255]).
AdaptReport adapt(MedNcaModel& model, const std::vector<SampleRecord>& samples,
                  const AdaptConfig& cfg, const LossConfig& loss_cfg,
                  const std::optional<std::filesystem::path>& out_dir = std::nullopt);

}  // namespace nca

#endif
