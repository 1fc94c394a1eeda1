#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "ptqlab/model.hpp"
#include "ptqlab/quant.hpp"

namespace ptqlab {

// Binary checkpoint container; the byte layout is described in
// docs/checkpoint_format.md.
inline constexpr char kCheckpointMagic[8] = {'P', 'T', 'Q', 'L', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

nlohmann::json config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const nlohmann::json& j);

struct CheckpointFile {
  ModelCheckpoint checkpoint;
  // Optional debug export of codes and scales, keyed by module path.
  std::map<std::string, QuantizedWeight> quantized;
  // Extra header fields (plan echo, producing stage, config hash of the stage).
  nlohmann::json annotations = nlohmann::json::object();
};

std::vector<std::uint8_t> serialize_checkpoint(const CheckpointFile& file);
CheckpointFile deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const CheckpointFile& file, const std::string& path);
void save_checkpoint(const ModelCheckpoint& ckpt, const std::string& path);
CheckpointFile load_checkpoint_file(const std::string& path);
ModelCheckpoint load_checkpoint(const std::string& path);

std::vector<std::uint8_t> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes);

}  // namespace ptqlab
