#include "nca/adapter.hpp"

#include <chrono>
#include <numeric>

#include "nca/forward.hpp"
#include "nca/metrics.hpp"
#include "nca/optimizer.hpp"

namespace nca {
namespace {

constexpr uint64_t kStreamPhase1 = 21;
constexpr uint64_t kStreamShuffle = 22;
constexpr uint64_t kStreamProbe = 23;
constexpr uint64_t kStreamDice = 24;
constexpr uint64_t kStreamStep = 25;

Tensor stack_maps(const std::vector<Tensor>& maps, const std::vector<int>& order, size_t b0, size_t b1) {
    const auto& s0 = maps[static_cast<size_t>(order[b0])].shape;
    Tensor out({static_cast<int64_t>(b1 - b0), s0.c, s0.h, s0.w});
    const int64_t chw = s0.c * s0.h * s0.w;
    for (size_t i = b0; i < b1; ++i)
        std::copy_n(maps[static_cast<size_t>(order[i])].data.data(), chw,
                    out.data.data() + static_cast<int64_t>(i - b0) * chw);
    return out;
}

float mean_consistency(MedNcaModel& model, const std::vector<SampleRecord>& samples, const Rng& rng) {
    double acc = 0;
    for (size_t i = 0; i < samples.size(); ++i) {
        auto o1 = forward(static_cast<Tape*>(nullptr), model, samples[i].image, rng.derive(i, 1), Mode::Eval);
        auto o2 = forward(static_cast<Tape*>(nullptr), model, samples[i].image, rng.derive(i, 2), Mode::Eval);
        auto p1 = sigmoid(static_cast<Tape*>(nullptr), o1.logits_l2);
        auto p2 = sigmoid(static_cast<Tape*>(nullptr), o2.logits_l2);
        double l1 = 0;
        for (size_t j = 0; j < p1.data.size(); ++j)
            l1 += std::abs(static_cast<double>(p1.data[j]) - static_cast<double>(p2.data[j]));
        acc += l1 / static_cast<double>(p1.data.size());
    }
    return static_cast<float>(acc / static_cast<double>(samples.size()));
}

float mean_dice(MedNcaModel& model, const std::vector<SampleRecord>& samples, const Rng& rng) {
    double acc = 0;
    for (size_t i = 0; i < samples.size(); ++i) {
        auto out = forward(static_cast<Tape*>(nullptr), model, samples[i].image, rng.derive(i), Mode::Eval);
        auto prob = sigmoid(static_cast<Tape*>(nullptr), out.logits_l2);
        acc += dice_metric(binarize(prob, 0.5f), *samples[i].mask);
    }
    return static_cast<float>(acc / static_cast<double>(samples.size()));
}

std::vector<Surrogate> compute_surrogates(MedNcaModel& model, const std::vector<SampleRecord>& samples,
                                          const AdaptConfig& cfg, bool weight_clamp, const Rng& rng) {
    std::vector<Surrogate> out(samples.size());
    for (size_t i = 0; i < samples.size(); ++i) {
        auto stats = ensemble_predict(model, samples[i].image, cfg.n_runs, rng.derive(i));
        out[i] = build_surrogate(stats, model.config.scale_factor, weight_clamp);
    }
    return out;
}

}  // namespace

EnsembleStats ensemble_predict(MedNcaModel& model, const Tensor& image, int n_runs, const Rng& rng) {
    if (n_runs < 2) throw config_error("ensemble_predict: n_runs must be >= 2");
    EnsembleStats stats;
    stats.n_runs = n_runs;
    std::vector<double> sum, sumsq;
    for (int k = 0; k < n_runs; ++k) {
        auto out = forward(static_cast<Tape*>(nullptr), model, image, rng.derive(static_cast<uint64_t>(k)), Mode::Eval);
        auto prob = sigmoid(static_cast<Tape*>(nullptr), out.logits_l2);
        if (sum.empty()) {
            sum.assign(prob.data.size(), 0.0);
            sumsq.assign(prob.data.size(), 0.0);
            stats.mean = Tensor(prob.shape);
            stats.std_dev = Tensor(prob.shape);
        }
        for (size_t i = 0; i < prob.data.size(); ++i) {
            sum[i] += static_cast<double>(prob.data[i]);
            sumsq[i] += static_cast<double>(prob.data[i]) * static_cast<double>(prob.data[i]);
        }
    }
    const double inv = 1.0 / static_cast<double>(n_runs);
    for (size_t i = 0; i < sum.size(); ++i) {
        const double m = sum[i] * inv;
        const double var = std::max(0.0, sumsq[i] * inv - m * m);
        stats.mean.data[i] = static_cast<float>(m);
        stats.std_dev.data[i] = static_cast<float>(std::sqrt(var));
    }
    return stats;
}

Surrogate build_surrogate(const EnsembleStats& stats, int scale_factor, bool weight_clamp) {
    Surrogate s;
    s.target = binarize(stats.mean, 0.5f);
    s.weights = Tensor(stats.std_dev.shape);
    for (size_t i = 0; i < s.weights.data.size(); ++i) {
        float w = 1.0f - 2.0f * stats.std_dev.data[i];
        if (weight_clamp) w = std::clamp(w, 0.0f, 1.0f);
        s.weights.data[i] = w;
    }
    const int64_t lh = stats.mean.shape.h / scale_factor, lw = stats.mean.shape.w / scale_factor;
    s.target_l1 = binarize(
        resample(static_cast<Tape*>(nullptr), s.target, lh, lw, Resample::Bilinear), 0.5f);
    s.weights_l1 = resample(static_cast<Tape*>(nullptr), s.weights, lh, lw, Resample::Bilinear);
    return s;
}

AdaptReport adapt(MedNcaModel& model, const std::vector<SampleRecord>& samples,
                  const AdaptConfig& cfg, const LossConfig& loss_cfg,
                  const std::optional<std::filesystem::path>& out_dir) {
    cfg.validate();
    loss_cfg.validate();
    if (samples.empty()) throw config_error("adapt: empty dataset");
    const auto t_start = std::chrono::steady_clock::now();

    LossConfig vwsl_cfg = loss_cfg;
    vwsl_cfg.vwsl_gamma = cfg.vwsl_gamma;
    Rng base(cfg.seed);
    AdaptReport report;

    bool have_masks = true;
    for (const auto& s : samples) have_masks = have_masks && s.mask.has_value();

    // Phase 1: frozen-model ensembles -> surrogate targets and weights.
    std::vector<Surrogate> surrogates(samples.size());
    {
        Rng ph1 = base.derive(kStreamPhase1, 0);
        std::optional<std::filesystem::path> maps;
        if (out_dir) {
            maps = *out_dir / "maps";
            std::filesystem::create_directories(*maps);
        }
        for (size_t i = 0; i < samples.size(); ++i) {
            auto stats = ensemble_predict(model, samples[i].image, cfg.n_runs, ph1.derive(i));
            surrogates[i] = build_surrogate(stats, model.config.scale_factor, loss_cfg.weight_clamp);
            if (maps) {
                write_pgm(*maps / ("mean_" + samples[i].id + ".pgm"), stats.mean);
                Tensor scaled(stats.std_dev.shape);
                for (size_t j = 0; j < scaled.data.size(); ++j)
                    scaled.data[j] = std::clamp(stats.std_dev.data[j] / 0.5f, 0.0f, 1.0f);
                write_pgm(*maps / ("std_" + samples[i].id + ".pgm"), scaled);
            }
        }
    }

    report.consistency_before = mean_consistency(model, samples, base.derive(kStreamProbe));
    if (have_masks) report.dice_before = mean_dice(model, samples, base.derive(kStreamDice));

    if (cfg.epochs > 0) {
        auto params = model.trainable();
        auto adam = AdamStateT<float>::init(params);
        std::vector<int> order(samples.size());
        std::iota(order.begin(), order.end(), 0);
        std::vector<Tensor> imgs, tgt, wts, tgt1, wts1;
        for (size_t i = 0; i < samples.size(); ++i) imgs.push_back(samples[i].image);

        const Mode fwd_mode = cfg.freeze_bn_stats ? Mode::Eval : Mode::Train;
        for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
            if (cfg.stats_refresh_every > 0 && epoch > 0 && epoch % cfg.stats_refresh_every == 0)
                surrogates = compute_surrogates(model, samples, cfg, loss_cfg.weight_clamp,
                                                base.derive(kStreamPhase1, static_cast<uint64_t>(epoch)));
            tgt.clear(); wts.clear(); tgt1.clear(); wts1.clear();
            for (const auto& s : surrogates) {
                tgt.push_back(s.target);
                wts.push_back(s.weights);
                tgt1.push_back(s.target_l1);
                wts1.push_back(s.weights_l1);
            }

            Rng shuffle_rng = base.derive(kStreamShuffle, static_cast<uint64_t>(epoch));
            for (size_t i = order.size(); i > 1; --i)
                std::swap(order[i - 1], order[static_cast<size_t>(shuffle_rng.uniform_int(0, static_cast<int64_t>(i) - 1))]);

            double epoch_loss = 0;
            int batches = 0;
            for (size_t b0 = 0; b0 < order.size(); b0 += static_cast<size_t>(cfg.batch_size)) {
                const size_t b1 = std::min(order.size(), b0 + static_cast<size_t>(cfg.batch_size));
                Tensor bimg = stack_maps(imgs, order, b0, b1);
                Tensor btgt = stack_maps(tgt, order, b0, b1);
                Tensor bwts = stack_maps(wts, order, b0, b1);
                Tensor btgt1 = stack_maps(tgt1, order, b0, b1);
                Tensor bwts1 = stack_maps(wts1, order, b0, b1);

                Tape tape;
                for (auto* p : params) tape.watch(*p);
                const Rng step_rng = base.derive(kStreamStep)
                                         .derive(static_cast<uint64_t>(epoch), static_cast<uint64_t>(batches));
                auto o1 = forward(&tape, model, bimg, step_rng.derive(1), fwd_mode);
                auto o2 = forward(&tape, model, bimg, step_rng.derive(2), fwd_mode);
                auto loss = vwsl(&tape, o1.logits_l1, o2.logits_l1, o1.logits_l2, o2.logits_l2,
                                 btgt1, bwts1, btgt, bwts, vwsl_cfg);
                const float lv = loss.item();
                if (!std::isfinite(lv))
                    throw numeric_error("adapt: non-finite loss at epoch " + std::to_string(epoch) +
                                        ", batch " + std::to_string(batches));
                tape.backward(loss);
                std::vector<Tensor> grads;
                grads.reserve(params.size());
                for (auto* p : params) grads.push_back(tape.grad(*p));
                adam_step(params, grads, adam, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
                epoch_loss += lv;
                ++batches;
            }
            report.epoch_loss.push_back(static_cast<float>(epoch_loss / std::max(batches, 1)));
        }
    }

    report.consistency_after = mean_consistency(model, samples, base.derive(kStreamProbe));
    if (have_masks) report.dice_after = mean_dice(model, samples, base.derive(kStreamDice));
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return report;
}

}  // namespace nca
