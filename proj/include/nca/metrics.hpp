#ifndef NCA_METRICS_HPP
#define NCA_METRICS_HPP

#include <filesystem>
#include <string>
#include <vector>

#include "nca/dataset.hpp"
#include "nca/model.hpp"

namespace nca {

/// 2|P∩T| / (|P|+|T|) on binary tensors; both empty is defined as 1.0.
double dice_metric(const Tensor& pred_binary, const Tensor& mask);

enum class EvalMode { SinglePass, EnsembleMean };

struct EvalReport {
    std::string model_id;
    std::string domain;
    std::string mode;  // "single-pass" | "ensemble-mean"
    uint64_t seed = 0;
    std::vector<std::pair<std::string, double>> per_sample;  // (id, dice)
    double dice_mean = 0;
    double dice_std = 0;  // population std over samples
};

/// Single-pass: one seeded stochastic forward, sigmoid thresholded at 0.5.
/// Ensemble-mean: per-pixel mean of n_runs forwards, thresholded. Every
/// sample uses an rng stream derived from (seed, sample index).
EvalReport evaluate(MedNcaModel& model, const std::vector<SampleRecord>& samples, uint64_t seed,
                    EvalMode mode, int n_runs = 10, const std::string& model_id = "model");

/// Grayscale overlay: prediction contour burned at 1.0 (255), ground-truth
/// contour at 160/255. Contours are 4-connectivity boundaries (foreground
/// pixels with a background or out-of-image 4-neighbor).
Tensor render_overlay(const Tensor& image, const Tensor& pred_binary, const Tensor* mask);

struct CsvRow {
    std::string model, train_domain, eval_domain, mode;
    double dice_mean = 0, dice_std = 0;
    int n = 0;
};

/// Table layout: model,train_domain,eval_domain,mode,dice_mean,dice_std,n
void write_csv(const std::filesystem::path& path, const std::vector<CsvRow>& rows);

}  // namespace nca

#endif
