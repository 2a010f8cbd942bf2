#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "gradot/matrix.hpp"
#include "gradot/model.hpp"

namespace gradot {

// Single-file container: one line of manifest JSON (UTF-8, no embedded
// newlines), then raw little-endian float64 payloads in manifest order.
// Offsets in the manifest are relative to the first payload byte.
namespace container {

void write(const std::string& path, const nlohmann::json& meta,
           const std::vector<std::pair<std::string, const Matrix*>>& tensors);

struct Contents {
    nlohmann::json meta;
    std::vector<std::string> order;
    std::map<std::string, Matrix> tensors;
};

Contents read(const std::string& path);

} // namespace container

// Hex content hash of a file (FNV-1a 64 over all bytes).
std::string file_hash_hex(const std::string& path);
std::string bytes_hash_hex(const void* data, std::size_t len);

// Model checkpoints. extra_meta is merged into the manifest under "meta".
void save_model(const std::string& path, const ParamSet& params, const ModelConfig& cfg,
                const nlohmann::json& extra_meta = {});

struct LoadedModel {
    ParamSet params;
    ModelConfig cfg;
    nlohmann::json meta;
};

LoadedModel load_model(const std::string& path);

nlohmann::json config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const nlohmann::json& j);

} // namespace gradot
