#include "nca/trainer.hpp"

#include <chrono>
#include <numeric>

#include "nca/checkpoint.hpp"
#include "nca/forward.hpp"
#include "nca/metrics.hpp"
#include "nca/optimizer.hpp"

namespace nca {
namespace {

// rng stream tags
constexpr uint64_t kStreamInit = 10;
constexpr uint64_t kStreamShuffle = 11;
constexpr uint64_t kStreamStep = 12;
constexpr uint64_t kStreamVal = 13;

void fill_uniform(Tensor& t, float k, Rng& rng) {
    for (auto& v : t.data) v = rng.uniform(-k, k);
}

void stack_batch(const std::vector<SampleRecord>& set, const std::vector<int>& order, size_t b0,
                 size_t b1, Tensor& images, Tensor& masks) {
    const auto& s0 = set[static_cast<size_t>(order[b0])].image.shape;
    const int64_t bs = static_cast<int64_t>(b1 - b0);
    images = Tensor({bs, 1, s0.h, s0.w});
    masks = Tensor({bs, 1, s0.h, s0.w});
    const int64_t hw = s0.h * s0.w;
    for (size_t i = b0; i < b1; ++i) {
        const auto& rec = set[static_cast<size_t>(order[i])];
        check_same_shape("train batch", s0, rec.image.shape);
        std::copy_n(rec.image.data.data(), hw, images.data.data() + static_cast<int64_t>(i - b0) * hw);
        std::copy_n(rec.mask->data.data(), hw, masks.data.data() + static_cast<int64_t>(i - b0) * hw);
    }
}

double param_norm(MedNcaModel& model) {
    double acc = 0;
    model.for_each_param([&](const std::string&, Tensor& t) {
        for (float v : t.data) acc += static_cast<double>(v) * static_cast<double>(v);
    });
    return std::sqrt(acc);
}

float validation_dice(MedNcaModel& model, const std::vector<SampleRecord>& val_set, const Rng& rng) {
    double acc = 0;
    for (size_t i = 0; i < val_set.size(); ++i) {
        auto out = forward(static_cast<Tape*>(nullptr), model, val_set[i].image, rng.derive(i), Mode::Eval);
        auto prob = sigmoid(static_cast<Tape*>(nullptr), out.logits_l2);
        acc += dice_metric(binarize(prob, 0.5f), *val_set[i].mask);
    }
    return static_cast<float>(acc / static_cast<double>(val_set.size()));
}

}  // namespace

MedNcaModel initialize_parameters(const MedNcaConfig& cfg, const Rng& rng) {
    auto model = MedNcaModel::sized(cfg);
    const float c = static_cast<float>(cfg.channels);
    CellParamsT<float>* cells[2] = {&model.level1, &model.level2};
    for (int k = 0; k < 2; ++k) {
        Rng stream = rng.derive(kStreamInit, static_cast<uint64_t>(k));
        auto& cell = *cells[k];
        const float k_conv = 1.0f / std::sqrt(c * 9.0f);
        fill_uniform(cell.perceive1_w, k_conv, stream);
        fill_uniform(cell.perceive1_b, k_conv, stream);
        fill_uniform(cell.perceive2_w, k_conv, stream);
        fill_uniform(cell.perceive2_b, k_conv, stream);
        const float k_fc0 = 1.0f / std::sqrt(3.0f * c);
        fill_uniform(cell.fc0_w, k_fc0, stream);
        fill_uniform(cell.fc0_b, k_fc0, stream);
        // fc1 stays zero: step 0 is the identity dynamic
    }
    return model;
}

TrainReport train(MedNcaModel& model, const std::vector<SampleRecord>& train_set,
                  const std::vector<SampleRecord>& val_set, const TrainConfig& cfg,
                  const LossConfig& loss_cfg, const std::optional<std::filesystem::path>& out_dir) {
    cfg.validate();
    loss_cfg.validate();
    if (train_set.empty()) throw config_error("train: empty dataset");
    for (const auto& s : train_set)
        if (!s.mask) throw config_error("train: sample '" + s.id + "' has no mask");
    for (const auto& s : val_set)
        if (!s.mask) throw config_error("train: validation sample '" + s.id + "' has no mask");

    const auto t_start = std::chrono::steady_clock::now();
    TrainReport report;
    report.parameter_count = count_parameters(model);
    if (cfg.epochs == 0) {
        if (out_dir) {
            save_checkpoint(*out_dir / "checkpoint.ncas", model);
            report.best_checkpoint = (*out_dir / "checkpoint.ncas").string();
        }
        return report;
    }

    const auto& ishape = train_set[0].image.shape;
    const int64_t patch = std::min<int64_t>({cfg.patch_size, ishape.h, ishape.w});
    auto params = model.trainable();
    auto adam = AdamStateT<float>::init(params);
    Rng base(cfg.seed);

    std::vector<int> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);

    MedNcaModel best;
    bool has_best = false;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const float lr_e =
            cfg.lr * (cfg.epochs > 1
                          ? std::pow(cfg.lr_decay_to,
                                     static_cast<float>(epoch) / static_cast<float>(cfg.epochs - 1))
                          : 1.0f);
        Rng shuffle_rng = base.derive(kStreamShuffle, static_cast<uint64_t>(epoch));
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<size_t>(shuffle_rng.uniform_int(0, static_cast<int64_t>(i) - 1))]);

        double epoch_loss = 0;
        int batches = 0;
        for (size_t b0 = 0; b0 < order.size(); b0 += static_cast<size_t>(cfg.batch_size)) {
            const size_t b1 = std::min(order.size(), b0 + static_cast<size_t>(cfg.batch_size));
            Tensor images, masks;
            stack_batch(train_set, order, b0, b1, images, masks);

            Tape tape;
            for (auto* p : params) tape.watch(*p);
            auto out = forward_training_patch(&tape, model, images, masks,
                                              base.derive(kStreamStep, static_cast<uint64_t>(epoch),
                                                          static_cast<uint64_t>(batches)),
                                              patch, Mode::Train);
            auto loss = supervised_loss(&tape, out.logits_l1, out.logits_l2, out.target_l1,
                                        out.target_l2, loss_cfg);
            const float lv = loss.item();
            if (!std::isfinite(lv))
                throw numeric_error("train: non-finite loss at epoch " + std::to_string(epoch) +
                                    ", batch " + std::to_string(batches) +
                                    " (parameter norm " + std::to_string(param_norm(model)) + ")");
            tape.backward(loss);
            std::vector<Tensor> grads;
            grads.reserve(params.size());
            for (auto* p : params) grads.push_back(tape.grad(*p));
            adam_step(params, grads, adam, lr_e, cfg.beta1, cfg.beta2, cfg.adam_eps);
            epoch_loss += lv;
            ++batches;
        }
        report.epoch_loss.push_back(static_cast<float>(epoch_loss / std::max(batches, 1)));

        const bool last = epoch == cfg.epochs - 1;
        if (!val_set.empty() && cfg.val_every > 0 &&
            ((epoch + 1) % cfg.val_every == 0 || last)) {
            const float d = validation_dice(model, val_set, base.derive(kStreamVal));
            report.val_dice.emplace_back(epoch, d);
            if (d > report.best_val_dice) {
                report.best_val_dice = d;
                report.best_epoch = epoch;
                best = model;
                has_best = true;
            }
        }
        if (out_dir && cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0)
            save_checkpoint(*out_dir / ("ckpt_epoch_" + std::to_string(epoch + 1) + ".ncas"), model);
    }

    if (has_best) model = best;
    if (out_dir) {
        save_checkpoint(*out_dir / "checkpoint.ncas", model);
        report.best_checkpoint = (*out_dir / "checkpoint.ncas").string();
    }
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return report;
}

}  // namespace nca
