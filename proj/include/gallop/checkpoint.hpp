#pragma once

#include "gallop/model.hpp"
#include "gallop/params.hpp"
#include "gallop/selection.hpp"

#include <optional>
#include <string>

namespace gallop {

/// Checkpoint container, version 1. Little-endian throughout:
///   magic "GLPC", u32 version
///   u64 json length, model config as JSON
///   u32 layer count; per layer: u32 name length, name, u64 rows, u64 cols
///   per layer: rows*cols f64 values
///   u8 mask flag; if set: f64 threshold, f64 target density, u64 sample seed,
///   then per layer ceil(size/64) u64 bitset words
struct Checkpoint {
    ModelConfig config;
    ParameterSet params;
    std::optional<SparsityMask> mask;
};

void save_checkpoint(const std::string& path, const ModelConfig& config,
                     const ParameterSet& params, const SparsityMask* mask = nullptr);

Checkpoint load_checkpoint(const std::string& path);

std::string model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const std::string& text);

} // namespace gallop
