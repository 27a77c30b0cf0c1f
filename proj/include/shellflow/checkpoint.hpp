#pragma once

#include <json.hpp>
#include <string>

#include "shellflow/nn.hpp"

namespace shellflow {

// Single-file checkpoint: 8-byte magic, u64 manifest length, JSON manifest,
// then the named tensors as little-endian float64 in manifest order. The
// manifest carries arbitrary metadata under "meta" plus per-tensor shapes.
void save_checkpoint(const std::string& path, const ParamStore& params,
                     const nlohmann::json& meta);

// Loads tensors into a fresh ParamStore; meta is returned through out_meta.
ParamStore load_checkpoint(const std::string& path, nlohmann::json& out_meta);

}  // namespace shellflow
