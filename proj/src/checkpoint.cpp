#include "nca/checkpoint.hpp"

#include <array>
#include <cstring>
#include <fstream>

namespace nca {
namespace {

std::array<uint32_t, 256> make_crc_table() {
    std::array<uint32_t, 256> table{};
    for (uint32_t i = 0; i < 256; ++i) {
        uint32_t c = i;
        for (int k = 0; k < 8; ++k) c = (c & 1u) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
        table[i] = c;
    }
    return table;
}

void put_u16(std::vector<uint8_t>& out, uint16_t v) {
    out.push_back(static_cast<uint8_t>(v & 0xFF));
    out.push_back(static_cast<uint8_t>(v >> 8));
}

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xFF));
}

void put_i32(std::vector<uint8_t>& out, int32_t v) { put_u32(out, static_cast<uint32_t>(v)); }

void put_f32(std::vector<uint8_t>& out, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

struct Reader {
    const std::vector<uint8_t>& buf;
    size_t pos = 0;

    uint8_t u8() {
        if (pos >= buf.size()) throw io_error("checkpoint: truncated file");
        return buf[pos++];
    }
    uint16_t u16() {
        uint16_t a = u8(), b = u8();
        return static_cast<uint16_t>(a | (b << 8));
    }
    uint32_t u32() {
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(u8()) << (8 * i);
        return v;
    }
    int32_t i32() { return static_cast<int32_t>(u32()); }
    float f32() {
        uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
};

constexpr uint16_t kVersion = 1;

}  // namespace

uint32_t crc32(const uint8_t* data, size_t len) {
    static const auto table = make_crc_table();
    uint32_t c = 0xFFFFFFFFu;
    for (size_t i = 0; i < len; ++i) c = table[(c ^ data[i]) & 0xFFu] ^ (c >> 8);
    return c ^ 0xFFFFFFFFu;
}

int64_t checkpoint_size(const MedNcaConfig& cfg) {
    const int64_t c = cfg.channels, h = cfg.hidden;
    const int64_t per_cell = 2 * (c * c * 9 + c) + (3 * c * h + h) + 4 * h + h * c;
    return 4 + 2 + 8 * 4 + 2 * per_cell * 4 + 4;
}

std::vector<uint8_t> checkpoint_bytes(MedNcaModel& model) {
    std::vector<uint8_t> out;
    out.reserve(static_cast<size_t>(checkpoint_size(model.config)));
    for (char c : {'N', 'C', 'A', 'S'}) out.push_back(static_cast<uint8_t>(c));
    put_u16(out, kVersion);
    const auto& c = model.config;
    put_i32(out, c.channels);
    put_i32(out, c.hidden);
    put_i32(out, c.scale_factor);
    put_i32(out, c.steps_level1);
    put_i32(out, c.steps_level2);
    put_f32(out, c.fire_rate);
    put_i32(out, c.input_channels);
    put_i32(out, c.output_channels);
    auto dump_cell = [&](CellParamsT<float>& cell) {
        cell.for_each_tensor([&](const char*, Tensor& t) {
            for (float v : t.data) put_f32(out, v);
        });
    };
    dump_cell(model.level1);
    dump_cell(model.level2);
    put_u32(out, crc32(out.data(), out.size()));
    return out;
}

void save_checkpoint(const std::filesystem::path& path, MedNcaModel& model) {
    auto bytes = checkpoint_bytes(model);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw io_error("checkpoint: cannot open for writing: " + path.string());
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw io_error("checkpoint: write failed: " + path.string());
}

MedNcaModel load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw io_error("checkpoint: cannot open: " + path.string());
    std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (buf.size() < 4 + 2 + 8 * 4 + 4) throw io_error("checkpoint: file too small: " + path.string());

    const uint32_t stored = static_cast<uint32_t>(buf[buf.size() - 4]) |
                            (static_cast<uint32_t>(buf[buf.size() - 3]) << 8) |
                            (static_cast<uint32_t>(buf[buf.size() - 2]) << 16) |
                            (static_cast<uint32_t>(buf[buf.size() - 1]) << 24);
    if (crc32(buf.data(), buf.size() - 4) != stored)
        throw io_error("checkpoint: CRC mismatch (corrupt file): " + path.string());

    Reader r{buf};
    if (r.u8() != 'N' || r.u8() != 'C' || r.u8() != 'A' || r.u8() != 'S')
        throw io_error("checkpoint: bad magic bytes: " + path.string());
    const uint16_t version = r.u16();
    if (version != kVersion)
        throw io_error("checkpoint: unsupported format version " + std::to_string(version));

    MedNcaConfig cfg;
    cfg.channels = r.i32();
    cfg.hidden = r.i32();
    cfg.scale_factor = r.i32();
    cfg.steps_level1 = r.i32();
    cfg.steps_level2 = r.i32();
    cfg.fire_rate = r.f32();
    cfg.input_channels = r.i32();
    cfg.output_channels = r.i32();
    cfg.validate();
    if (static_cast<int64_t>(buf.size()) != checkpoint_size(cfg))
        throw io_error("checkpoint: size " + std::to_string(buf.size()) + " does not match config (expected " +
                       std::to_string(checkpoint_size(cfg)) + "): " + path.string());

    MedNcaModel model = MedNcaModel::sized(cfg);
    auto read_cell = [&](CellParamsT<float>& cell) {
        cell.for_each_tensor([&](const char*, Tensor& t) {
            for (auto& v : t.data) v = r.f32();
        });
    };
    read_cell(model.level1);
    read_cell(model.level2);
    return model;
}

}  // namespace nca
