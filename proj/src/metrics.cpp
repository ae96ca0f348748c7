#include "nca/metrics.hpp"

#include <fstream>

#include "nca/forward.hpp"

namespace nca {
namespace {

bool is_boundary(const Tensor& m, int64_t y, int64_t x) {
    if (m.at(0, 0, y, x) < 0.5f) return false;
    const int64_t H = m.shape.h, W = m.shape.w;
    const int64_t dy[4] = {-1, 1, 0, 0}, dx[4] = {0, 0, -1, 1};
    for (int k = 0; k < 4; ++k) {
        const int64_t ny = y + dy[k], nx = x + dx[k];
        if (ny < 0 || ny >= H || nx < 0 || nx >= W) return true;
        if (m.at(0, 0, ny, nx) < 0.5f) return true;
    }
    return false;
}

}  // namespace

double dice_metric(const Tensor& pred_binary, const Tensor& mask) {
    check_same_shape("dice_metric", pred_binary.shape, mask.shape);
    int64_t inter = 0, p = 0, t = 0;
    for (size_t i = 0; i < pred_binary.data.size(); ++i) {
        const bool pv = pred_binary.data[i] >= 0.5f;
        const bool tv = mask.data[i] >= 0.5f;
        p += pv;
        t += tv;
        inter += pv && tv;
    }
    if (p + t == 0) return 1.0;  // correctly predicted absence
    return 2.0 * static_cast<double>(inter) / static_cast<double>(p + t);
}

EvalReport evaluate(MedNcaModel& model, const std::vector<SampleRecord>& samples, uint64_t seed,
                    EvalMode mode, int n_runs, const std::string& model_id) {
    EvalReport rep;
    rep.model_id = model_id;
    rep.mode = mode == EvalMode::SinglePass ? "single-pass" : "ensemble-mean";
    rep.seed = seed;
    if (!samples.empty()) rep.domain = samples[0].domain;
    Rng base(seed);
    double acc = 0;
    for (size_t i = 0; i < samples.size(); ++i) {
        const auto& s = samples[i];
        if (!s.mask) throw config_error("evaluate: sample '" + s.id + "' has no mask");
        Tensor pred;
        if (mode == EvalMode::SinglePass) {
            auto out = forward(static_cast<Tape*>(nullptr), model, s.image, base.derive(i), Mode::Eval);
            pred = binarize(sigmoid(static_cast<Tape*>(nullptr), out.logits_l2), 0.5f);
        } else {
            if (n_runs < 1) throw config_error("evaluate: n_runs must be >= 1");
            Tensor mean;
            for (int k = 0; k < n_runs; ++k) {
                auto out = forward(static_cast<Tape*>(nullptr), model, s.image,
                                   base.derive(i, static_cast<uint64_t>(k)), Mode::Eval);
                auto prob = sigmoid(static_cast<Tape*>(nullptr), out.logits_l2);
                if (mean.empty())
                    mean = Tensor(prob.shape);
                for (size_t j = 0; j < prob.data.size(); ++j) mean.data[j] += prob.data[j];
            }
            for (auto& v : mean.data) v /= static_cast<float>(n_runs);
            pred = binarize(mean, 0.5f);
        }
        const double d = dice_metric(pred, *s.mask);
        rep.per_sample.emplace_back(s.id, d);
        acc += d;
    }
    const double n = static_cast<double>(std::max<size_t>(rep.per_sample.size(), 1));
    rep.dice_mean = acc / n;
    double var = 0;
    for (const auto& [id, d] : rep.per_sample) var += (d - rep.dice_mean) * (d - rep.dice_mean);
    rep.dice_std = std::sqrt(var / n);
    return rep;
}

Tensor render_overlay(const Tensor& image, const Tensor& pred_binary, const Tensor* mask) {
    check_same_shape("render_overlay(image,pred)", image.shape, pred_binary.shape);
    if (mask) check_same_shape("render_overlay(image,mask)", image.shape, mask->shape);
    Tensor out = image;
    out.node = -1;
    out.tape_id = 0;
    if (mask) {
        for (int64_t y = 0; y < image.shape.h; ++y)
            for (int64_t x = 0; x < image.shape.w; ++x)
                if (is_boundary(*mask, y, x)) out.at(0, 0, y, x) = 160.0f / 255.0f;
    }
    for (int64_t y = 0; y < image.shape.h; ++y)
        for (int64_t x = 0; x < image.shape.w; ++x)
            if (is_boundary(pred_binary, y, x)) out.at(0, 0, y, x) = 1.0f;
    return out;
}

void write_csv(const std::filesystem::path& path, const std::vector<CsvRow>& rows) {
    std::ofstream f(path);
    if (!f) throw io_error("csv: cannot open for writing: " + path.string());
    f << "model,train_domain,eval_domain,mode,dice_mean,dice_std,n\n";
    for (const auto& r : rows) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.6f,%.6f", r.dice_mean, r.dice_std);
        f << r.model << "," << r.train_domain << "," << r.eval_domain << "," << r.mode << "," << buf
          << "," << r.n << "\n";
    }
}

}  // namespace nca
