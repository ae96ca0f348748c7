#ifndef NCA_CHECKPOINT_HPP
#define NCA_CHECKPOINT_HPP

// Bit-exact model serialization.
//
// Layout (all little-endian):
//   "NCAS"                        4 bytes magic
//   format version                u16 (currently 1)
//   config: channels, hidden, scale_factor, steps_level1, steps_level2   i32 each
//           fire_rate             f32
//           input_channels, output_channels                              i32 each
//   level1 then level2 tensors in declared field order (perceive1_w/b,
//   perceive2_w/b, fc0_w/b, bn_gamma, bn_beta, bn_running_mean,
//   bn_running_var, fc1_w), raw f32 values, row-major
//   CRC-32 (IEEE) of all preceding bytes                                 u32
//
// Default config: 4 + 2 + 32 + 2*13472*4 + 4 = 107818 bytes.

#include <cstdint>
#include <filesystem>
#include <vector>

#include "nca/model.hpp"

namespace nca {

uint32_t crc32(const uint8_t* data, size_t len);

std::vector<uint8_t> checkpoint_bytes(MedNcaModel& model);
void save_checkpoint(const std::filesystem::path& path, MedNcaModel& model);
MedNcaModel load_checkpoint(const std::filesystem::path& path);

/// Expected on-disk size for a config, in bytes.
int64_t checkpoint_size(const MedNcaConfig& cfg);

}  // namespace nca

#endif
