#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "diffuse/tensor.hpp"

namespace diffuse {

struct NamedTensor {
  std::string name;
  Tensor value;
};

struct CheckpointHeader {
  std::string init_scheme;
  std::uint64_t seed = 0;
};

struct Checkpoint {
  CheckpointHeader header;
  std::vector<NamedTensor> params;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Binary layout, little-endian throughout:
///   "DFCKPT01" u32 version, u32 len + init scheme bytes, u64 seed, u32 record count,
///   then per record: u32 len + name bytes, u32 rank, u64 dims[rank], u64 count,
///   count x float32 values.
void write_checkpoint(std::ostream& out, const Checkpoint& ckpt);
Checkpoint read_checkpoint(std::istream& in);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Nearest float32 value, as a double.
inline double to_float32(double v) { return static_cast<double>(static_cast<float>(v)); }

}  // namespace diffuse
