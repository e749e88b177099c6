#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dubox/tensor.hpp"

namespace dubox {

// On-disk layout (all integers little-endian):
//   "DBCKPT\0"            7-byte magic
//   u16 version           currently 1
//   u32 entry count
//   per entry: u16 name length, UTF-8 name, u8 rank, u32 dims[rank],
//              f32 payload[prod(dims)]
// Momentum buffers follow all parameter values, named "<param>#m". The
// free-form header text ("key=value\n" lines describing the model) travels as
// a leading rank-1 entry named "#header" holding one byte per f32.
struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  std::string header;
  std::vector<CheckpointEntry> entries;

  const CheckpointEntry* find(std::string_view name) const;
};

inline constexpr std::uint16_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

template <typename T>
Checkpoint make_checkpoint(std::span<const Parameter<T>> params, std::string header);

// Copies values (and momentum buffers when present) into `params` by name.
// Throws ContractError when a parameter is missing or its shape differs.
template <typename T>
void restore_parameters(const Checkpoint& ckpt, std::span<Parameter<T>> params);

}  // namespace dubox
