#pragma once

#include <cstdint>
#include <string>

#include "uniap/episodic.hpp"
#include "uniap/model.hpp"

namespace uniap::io {

inline constexpr const char* kVersionString = "uniap-0.1.0";

struct CheckpointMeta {
    std::uint64_t config_hash = 0;
    std::uint64_t iteration = 0;
    std::uint64_t rng_key = 0;
    std::uint64_t rng_counter = 0;
};

// Container: magic "UAPCKPT1", u32 version, u32 entry count; per entry a u16
// name length, UTF-8 name, u8 dtype tag (0 = f32, 1 = f64, 2 = u64), u8 rank,
// rank u32 dims, then the raw little-endian payload.
void save_checkpoint(const std::string& path, model::ModelParams<float>& params,
                     const CheckpointMeta& meta);

// Fails when the stored config hash differs from `expect_config_hash`,
// unless force is set. Parameter tensors round-trip bit-exactly.
model::ModelParams<float> load_checkpoint(const std::string& path,
                                          const model::ModelConfig& cfg,
                                          std::uint64_t expect_config_hash,
                                          CheckpointMeta* meta_out = nullptr,
                                          bool force = false);

std::uint64_t fnv1a_hash(const std::string& s);

}  // namespace uniap::io
