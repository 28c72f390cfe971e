#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "tokenflux/model.hpp"
#include "tokenflux/numerics.hpp"
#include "tokenflux/pruning.hpp"

namespace tokenflux {

// TFLX weight container: "TFLX" magic, u32 version, then T, d, m, heads as
// little-endian u32, followed by the tensors in a fixed order (per layer:
// attn_norm, W_Q, W_K, W_V, W_O, ffn_norm, W_up, W_down; then final_norm and
// the output projection), each row-major f64 little-endian. The full config
// (including vocab_size and rope_base) mirrors into <base>.json.
void save_model(const LayerWeights& w, const std::filesystem::path& base);
LayerWeights load_model(const std::filesystem::path& base);

// Standalone tensor file: "TFLX" magic, u32 version, u32 rows, u32 cols,
// row-major f64 little-endian payload.
void write_tensor(const std::filesystem::path& path, const Matrix& m);
Matrix read_tensor(const std::filesystem::path& path);

nlohmann::json config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const nlohmann::json& j);

nlohmann::json schedule_to_json(const PruneSchedule& schedule);
PruneSchedule schedule_from_json(const nlohmann::json& j);

// Shortest round-trip decimal form of a double.
std::string format_double(double v);

void write_text_file(const std::filesystem::path& path, const std::string& content);
std::string read_text_file(const std::filesystem::path& path);
nlohmann::json read_json_file(const std::filesystem::path& path);
void write_json_file(const std::filesystem::path& path, const nlohmann::json& j);

}  // namespace tokenflux
