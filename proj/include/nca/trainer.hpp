#ifndef NCA_TRAINER_HPP
#define NCA_TRAINER_HPP

#include <filesystem>
#include <optional>

#include "nca/dataset.hpp"
#include "nca/losses.hpp"
#include "nca/model.hpp"

namespace nca {

struct TrainConfig {
    int epochs = 1500;
    int batch_size = 8;
    float lr = 1.6e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.99f;
    float adam_eps = 1e-8f;
    float lr_decay_to = 0.01f;  // lr ends at lr * lr_decay_to, exponential schedule
    uint64_t seed = 42;
    int patch_size = 64;
    int checkpoint_every = 0;  // 0 = only the final/best checkpoint
    int val_every = 10;

    void validate() const {
        if (epochs < 0) throw config_error("train: epochs must be >= 0");
        if (batch_size < 1) throw config_error("train: batch_size must be >= 1");
        if (lr <= 0) throw config_error("train: lr must be > 0");
        if (patch_size < 1) throw config_error("train: patch_size must be >= 1");
    }
};

struct TrainReport {
    std::vector<float> epoch_loss;
    std::vector<std::pair<int, float>> val_dice;  // (epoch, dice)
    double wall_seconds = 0;
    float best_val_dice = -1.0f;
    int best_epoch = -1;
    int64_t parameter_count = 0;
    std::string best_checkpoint;
};

/// Uniform(-1/sqrt(fan_in), +) for convs and dense layers (bias included),
/// BN gamma=1/beta=0, and a zero final projection so the untrained cell step
/// is the identity dynamic.
MedNcaModel initialize_parameters(const MedNcaConfig& cfg, const Rng& rng);

/// Supervised pretraining; returns the best-validation model in `model`
/// (last-epoch model when no validation set is given). Deterministic per
/// (seed, data, config). Throws numeric_error on NaN loss.
TrainReport train(MedNcaModel& model, const std::vector<SampleRecord>& train_set,
                  const std::vector<SampleRecord>& val_set, const TrainConfig& cfg,
                  const LossConfig& loss_cfg,
                  const std::optional<std::filesystem::path>& out_dir = std::nullopt);

}  // namespace nca

#endif
