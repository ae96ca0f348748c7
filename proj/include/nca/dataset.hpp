#ifndef NCA_DATASET_HPP
#define NCA_DATASET_HPP

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "nca/rng.hpp"
#include "nca/tensor.hpp"

namespace nca {

struct SampleRecord {
    std::string id;
    Tensor image;                 // (1,1,h,w) in [0,1]
    std::optional<Tensor> mask;   // (1,1,h,w) binary
    std::string domain;
};

struct ManifestEntry {
    std::string id;
    std::string image;  // path relative to manifest root
    std::string mask;   // empty = unlabeled
    std::string split;  // train | val | test
    std::string domain;
};

struct Manifest {
    std::filesystem::path root;
    int version = 1;
    int working_size = 256;
    std::vector<ManifestEntry> entries;

    std::vector<const ManifestEntry*> split(const std::string& name) const {
        std::vector<const ManifestEntry*> out;
        for (const auto& e : entries)
            if (e.split == name) out.push_back(&e);
        return out;
    }
};

// 8-bit binary PGM (P5), the one mandatory image format.
Tensor read_pgm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const Tensor& img01);

Manifest load_manifest(const std::filesystem::path& path);
void save_manifest(const Manifest& m, const std::filesystem::path& path);

/// Loads, rescales to [0,1], and resizes to the manifest working size
/// (bilinear for images, nearest for masks; mask bytes > 127 become 1).
SampleRecord load_sample(const Manifest& m, const ManifestEntry& e);
std::vector<SampleRecord> load_split(const Manifest& m, const std::string& split);

struct MoireSpec {
    float period_px = 6.0f;
    float angle_rad = 0.3f;
    float amplitude = 0.12f;
};

/// Photometric domain shift:
///   image' = clamp(contrast*(image^gamma - 0.5) + 0.5 + bias + moire + noise, 0, 1)
struct ShiftSpec {
    float gamma_correction = 1.0f;
    float contrast_scale = 1.0f;
    float gaussian_noise_sigma = 0.0f;
    float bias_field_strength = 0.0f;
    std::optional<MoireSpec> moire;
    uint64_t seed = 0;
    std::string tag = "shift";
};

/// Named presets; throws config_error for unknown names.
ShiftSpec shift_preset(const std::string& name);

/// Shifted copy; the mask is never touched, the domain tag gets "+tag".
SampleRecord apply_shift(const SampleRecord& s, const ShiftSpec& spec);

struct SynthSpec {
    int train = 50, val = 50, test = 50;
    int size = 64;
    uint64_t seed = 1;
};

/// Writes PGM images/masks plus manifest.json into out_dir: dark background
/// with smooth texture, two bright ellipse "lungs", union mask.
Manifest generate_synthetic(const std::filesystem::path& out_dir, const SynthSpec& spec);

/// Writes shifted copies of every image in `base` (masks reused untouched)
/// and a second manifest manifest_<tag>.json alongside the base one.
Manifest generate_shifted(const Manifest& base, const ShiftSpec& shift);

}  // namespace nca

#endif
