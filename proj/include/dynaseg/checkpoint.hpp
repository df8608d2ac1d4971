#pragma once

#include <map>
#include <string>

#include "dynaseg/tensor.hpp"

namespace dynaseg {

inline constexpr char kCheckpointMagic[8] = {'D', 'S', 'G', 'C', 'K', 'P', 'T', '\0'};
inline constexpr uint32_t kCheckpointVersion = 1;

enum class DType : uint8_t { kF64 = 0, kF32 = 1, kU8 = 2 };

// Named tensors plus named byte blobs (used for the embedded run metadata).
// Tensors are written as f64; f32 payloads are widened on read. Layout is
// documented in docs/checkpoint_format.md.
struct Checkpoint {
  std::map<std::string, Tensor> tensors;
  std::map<std::string, std::string> blobs;
};

void write_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::string& path);

}  // namespace dynaseg
