#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cvd/config.hpp"
#include "cvd/model.hpp"

namespace cvd {

// Everything needed to resume a run bit-exactly.
struct Checkpoint {
  std::uint64_t step = 0;
  RunConfig config;
  Parameters parameters;
  std::map<std::string, Tensor> optimizer_state;
  std::string rng_state;  // textual std::mt19937_64 state
};

constexpr std::uint32_t kCheckpointVersion = 1;

// CVDC layout, little-endian: magic, u32 version, u64 step, u32 tensor count,
// tensors ("model.*" then "optim.*", lexicographic) as
// {u16 name length, name, u8 rank, rank x u32 dims, f64 data},
// u32 + rng state bytes, u32 + config text.
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
// Throws Error("format") on any malformed input; nothing is returned partially.
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Rebuilds the model described by the checkpoint and installs its weights.
CvdModel restore_model(const Checkpoint& ckpt);

}  // namespace cvd
