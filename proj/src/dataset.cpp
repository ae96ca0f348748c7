#include "nca/dataset.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include <json.hpp>

#include "nca/autodiff.hpp"
#include "nca/forward.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace nca {
namespace {

uint64_t fnv1a(const std::string& s) {
    uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

int read_pnm_token(std::istream& in) {
    // skips whitespace and '#' comments
    while (true) {
        int ch = in.peek();
        if (ch == '#') {
            std::string line;
            std::getline(in, line);
        } else if (std::isspace(ch)) {
            in.get();
        } else {
            break;
        }
    }
    int v = -1;
    in >> v;
    return v;
}

Tensor resize_image(const Tensor& t, int64_t size) {
    if (t.shape.h == size && t.shape.w == size) return t;
    return resample(static_cast<Tape*>(nullptr), t, size, size, Resample::Bilinear);
}

Tensor resize_mask(const Tensor& t, int64_t size) {
    if (t.shape.h == size && t.shape.w == size) return t;
    return resample(static_cast<Tape*>(nullptr), t, size, size, Resample::Nearest);
}

}  // namespace

Tensor read_pgm(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw io_error("pgm: cannot open: " + path.string());
    char m0 = 0, m1 = 0;
    f.get(m0);
    f.get(m1);
    if (m0 != 'P' || m1 != '5') throw io_error("pgm: not a binary P5 file: " + path.string());
    const int w = read_pnm_token(f);
    const int h = read_pnm_token(f);
    const int maxval = read_pnm_token(f);
    if (w < 1 || h < 1) throw io_error("pgm: malformed header (bad size) in " + path.string());
    if (maxval < 1 || maxval > 255)
        throw io_error("pgm: only 8-bit files supported (maxval " + std::to_string(maxval) + ") in " + path.string());
    f.get();  // single whitespace after maxval
    std::vector<unsigned char> bytes(static_cast<size_t>(w) * static_cast<size_t>(h));
    f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw io_error("pgm: truncated pixel data in " + path.string());
    Tensor t({1, 1, h, w});
    const float inv = 1.0f / static_cast<float>(maxval);
    for (size_t i = 0; i < bytes.size(); ++i) t.data[i] = static_cast<float>(bytes[i]) * inv;
    return t;
}

void write_pgm(const fs::path& path, const Tensor& img01) {
    if (img01.shape.n != 1 || img01.shape.c != 1)
        throw shape_error("write_pgm: expected (1,1,h,w), got " + img01.shape.str());
    std::ofstream f(path, std::ios::binary);
    if (!f) throw io_error("pgm: cannot open for writing: " + path.string());
    f << "P5\n" << img01.shape.w << " " << img01.shape.h << "\n255\n";
    std::vector<unsigned char> bytes(img01.data.size());
    for (size_t i = 0; i < bytes.size(); ++i) {
        const float v = std::clamp(img01.data[i], 0.0f, 1.0f);
        bytes[i] = static_cast<unsigned char>(std::lround(v * 255.0f));
    }
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw io_error("pgm: write failed: " + path.string());
}

Manifest load_manifest(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw io_error("manifest: cannot open: " + path.string());
    json j;
    try {
        f >> j;
    } catch (const json::parse_error& e) {
        throw io_error("manifest: invalid JSON in " + path.string() + ": " + e.what());
    }
    Manifest m;
    m.root = path.parent_path();
    m.version = j.at("version").get<int>();
    m.working_size = j.at("working_size").get<int>();
    std::set<std::string> ids;
    for (const auto& je : j.at("entries")) {
        ManifestEntry e;
        e.id = je.at("id").get<std::string>();
        e.image = je.at("image").get<std::string>();
        e.mask = je.value("mask", "");
        e.split = je.at("split").get<std::string>();
        e.domain = je.value("domain", "unknown");
        if (e.split != "train" && e.split != "val" && e.split != "test")
            throw io_error("manifest: unknown split '" + e.split + "' for id " + e.id);
        if (!ids.insert(e.id).second)
            throw io_error("manifest: duplicate id '" + e.id + "' in " + path.string());
        if (!fs::exists(m.root / e.image))
            throw io_error("manifest: missing image file " + (m.root / e.image).string());
        if (!e.mask.empty() && !fs::exists(m.root / e.mask))
            throw io_error("manifest: missing mask file " + (m.root / e.mask).string());
        m.entries.push_back(std::move(e));
    }
    return m;
}

void save_manifest(const Manifest& m, const fs::path& path) {
    json j;
    j["version"] = m.version;
    j["working_size"] = m.working_size;
    j["entries"] = json::array();
    for (const auto& e : m.entries) {
        json je;
        je["id"] = e.id;
        je["image"] = e.image;
        if (!e.mask.empty()) je["mask"] = e.mask;
        je["split"] = e.split;
        je["domain"] = e.domain;
        j["entries"].push_back(je);
    }
    std::ofstream f(path);
    if (!f) throw io_error("manifest: cannot open for writing: " + path.string());
    f << j.dump(2) << "\n";
}

SampleRecord load_sample(const Manifest& m, const ManifestEntry& e) {
    SampleRecord s;
    s.id = e.id;
    s.domain = e.domain;
    Tensor img = read_pgm(m.root / e.image);
    if (!e.mask.empty()) {
        Tensor raw = read_pgm(m.root / e.mask);
        if (raw.shape != img.shape)
            throw io_error("manifest: image/mask size mismatch for id " + e.id + " (" +
                           img.shape.str() + " vs " + raw.shape.str() + ")");
        s.mask = resize_mask(binarize(raw, 0.5f), m.working_size);  // bytes > 127 -> 1
    }
    s.image = resize_image(std::move(img), m.working_size);
    return s;
}

std::vector<SampleRecord> load_split(const Manifest& m, const std::string& split) {
    std::vector<SampleRecord> out;
    for (const auto* e : m.split(split)) out.push_back(load_sample(m, *e));
    return out;
}

ShiftSpec shift_preset(const std::string& name) {
    ShiftSpec s;
    s.tag = name;
    if (name == "identity") {
        return s;
    } else if (name == "phone_capture") {
        // monitor photo: washed-out gamma, boosted contrast, moire grating
        s.gamma_correction = 0.6f;
        s.contrast_scale = 1.6f;
        s.moire = MoireSpec{6.0f, 0.3f, 0.12f};
        s.gaussian_noise_sigma = 0.02f;
        s.bias_field_strength = 0.0f;
        return s;
    } else if (name == "cross_site") {
        // different-scanner look: darker gamma, flattened contrast, bias field
        s.gamma_correction = 1.5f;
        s.contrast_scale = 0.72f;
        s.gaussian_noise_sigma = 0.03f;
        s.bias_field_strength = 0.12f;
        return s;
    }
    throw config_error("unknown shift preset '" + name + "' (identity, phone_capture, cross_site)");
}

SampleRecord apply_shift(const SampleRecord& in, const ShiftSpec& spec) {
    SampleRecord out = in;
    out.domain = in.domain + "+" + spec.tag;
    Rng rng = Rng(spec.seed).derive(fnv1a(in.id));
    const auto& sh = in.image.shape;
    float bias_c[4] = {0, 0, 0, 0};
    for (auto& c : bias_c) c = rng.uniform(-1.0f, 1.0f);
    const float theta = spec.moire ? spec.moire->angle_rad : 0.0f;
    const float ct = std::cos(theta), st = std::sin(theta);
    for (int64_t y = 0; y < sh.h; ++y)
        for (int64_t x = 0; x < sh.w; ++x) {
            const float u = (static_cast<float>(x) + 0.5f) / static_cast<float>(sh.w);
            const float v = (static_cast<float>(y) + 0.5f) / static_cast<float>(sh.h);
            float val = in.image.at(0, 0, y, x);
            val = std::pow(std::max(val, 0.0f), spec.gamma_correction);
            val = spec.contrast_scale * (val - 0.5f) + 0.5f;
            if (spec.bias_field_strength != 0.0f)
                val += spec.bias_field_strength *
                       (bias_c[0] * (u - 0.5f) + bias_c[1] * (v - 0.5f) +
                        2.0f * bias_c[2] * (u - 0.5f) * (v - 0.5f) +
                        2.0f * bias_c[3] * ((u - 0.5f) * (u - 0.5f) + (v - 0.5f) * (v - 0.5f) - 0.25f));
            if (spec.moire)
                val += spec.moire->amplitude *
                       std::sin(2.0f * static_cast<float>(M_PI) *
                                (static_cast<float>(x) * ct + static_cast<float>(y) * st) /
                                spec.moire->period_px);
            if (spec.gaussian_noise_sigma != 0.0f)
                val += spec.gaussian_noise_sigma * rng.normal<float>();
            out.image.at(0, 0, y, x) = std::clamp(val, 0.0f, 1.0f);
        }
    return out;
}

namespace {

SampleRecord synth_sample(const std::string& id, int size, Rng rng) {
    SampleRecord s;
    s.id = id;
    s.domain = "synthetic";
    s.image = Tensor({1, 1, size, size});
    s.mask = Tensor({1, 1, size, size});

    // smooth background texture
    const float f1a = rng.uniform(0.5f, 2.5f), f1b = rng.uniform(0.5f, 2.5f);
    const float f2a = rng.uniform(0.5f, 2.5f), f2b = rng.uniform(0.5f, 2.5f);
    const float ph1 = rng.uniform(0.0f, 6.2831853f), ph2 = rng.uniform(0.0f, 6.2831853f);

    struct Ellipse {
        float cx, cy, ra, rb, rot, bright;
    };
    Ellipse ell[2];
    for (int k = 0; k < 2; ++k) {
        ell[k].cx = k == 0 ? rng.uniform(0.26f, 0.32f) : rng.uniform(0.68f, 0.74f);
        ell[k].cy = rng.uniform(0.45f, 0.55f);
        ell[k].ra = rng.uniform(0.10f, 0.13f);
        ell[k].rb = rng.uniform(0.17f, 0.24f);
        ell[k].rot = rng.uniform(-0.15f, 0.15f);
        ell[k].bright = rng.uniform(0.42f, 0.55f);
    }

    std::vector<float> noise(static_cast<size_t>(size) * static_cast<size_t>(size));
    for (auto& v : noise) v = 0.01f * rng.normal<float>();

    for (int64_t y = 0; y < size; ++y)
        for (int64_t x = 0; x < size; ++x) {
            const float u = (static_cast<float>(x) + 0.5f) / static_cast<float>(size);
            const float v = (static_cast<float>(y) + 0.5f) / static_cast<float>(size);
            float val = 0.12f + 0.05f * std::sin(6.2831853f * (f1a * u + f1b * v) + ph1) +
                        0.04f * std::sin(6.2831853f * (f2a * u + f2b * v) + ph2);
            float m = 0.0f;
            for (const auto& e : ell) {
                const float du = u - e.cx, dv = v - e.cy;
                const float xr = du * std::cos(e.rot) + dv * std::sin(e.rot);
                const float yr = -du * std::sin(e.rot) + dv * std::cos(e.rot);
                const float r2 = (xr / e.ra) * (xr / e.ra) + (yr / e.rb) * (yr / e.rb);
                const float r = std::sqrt(r2);
                if (r <= 1.0f) m = 1.0f;
                if (r < 1.15f) {
                    const float edge = std::clamp((1.15f - r) / 0.20f, 0.0f, 1.0f);
                    val += e.bright * edge * (0.85f + 0.15f * std::max(0.0f, 1.0f - r2));
                }
            }
            val += noise[static_cast<size_t>(y * size + x)];
            s.image.at(0, 0, y, x) = std::clamp(val, 0.0f, 1.0f);
            s.mask->at(0, 0, y, x) = m;
        }
    return s;
}

}  // namespace

Manifest generate_synthetic(const fs::path& out_dir, const SynthSpec& spec) {
    fs::create_directories(out_dir / "images");
    fs::create_directories(out_dir / "masks");
    Manifest m;
    m.root = out_dir;
    m.working_size = spec.size;

    const std::pair<std::string, int> splits[3] = {{"train", spec.train}, {"val", spec.val}, {"test", spec.test}};
    Rng base(spec.seed);
    int split_ord = 0;
    for (const auto& [split, count] : splits) {
        for (int i = 0; i < count; ++i) {
            char buf[32];
            std::snprintf(buf, sizeof(buf), "%s_%03d", split.c_str(), i);
            auto s = synth_sample(buf, spec.size, base.derive(static_cast<uint64_t>(split_ord), static_cast<uint64_t>(i)));
            ManifestEntry e;
            e.id = s.id;
            e.image = "images/" + s.id + ".pgm";
            e.mask = "masks/" + s.id + ".pgm";
            e.split = split;
            e.domain = s.domain;
            write_pgm(out_dir / e.image, s.image);
            write_pgm(out_dir / e.mask, *s.mask);
            m.entries.push_back(std::move(e));
        }
        ++split_ord;
    }
    save_manifest(m, out_dir / "manifest.json");
    return m;
}

Manifest generate_shifted(const Manifest& base, const ShiftSpec& shift) {
    const fs::path dir = base.root / ("images_" + shift.tag);
    fs::create_directories(dir);
    Manifest out = base;
    for (auto& e : out.entries) {
        SampleRecord s;
        s.id = e.id;
        s.domain = e.domain;
        s.image = read_pgm(base.root / e.image);  // native size, no resize
        auto shifted = apply_shift(s, shift);
        e.image = "images_" + shift.tag + "/" + e.id + ".pgm";
        e.domain = shifted.domain;
        write_pgm(base.root / e.image, shifted.image);
    }
    save_manifest(out, base.root / ("manifest_" + shift.tag + ".json"));
    return out;
}

}  // namespace nca
