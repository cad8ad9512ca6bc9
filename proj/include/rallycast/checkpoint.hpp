#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "json.hpp"

#include "rallycast/model.hpp"
#include "rallycast/rally.hpp"

namespace rallycast {

inline constexpr int kCheckpointFormat = 1;

struct TrainingInfo {
  std::uint64_t seed = 0;
  std::size_t tau = 0;
  std::size_t epochs = 0;
  std::size_t batch = 0;
  double learning_rate = 0.0;
  std::size_t rallies = 0;
  friend bool operator==(const TrainingInfo&, const TrainingInfo&) = default;
};

// Everything needed to run the model on raw court coordinates.
struct Checkpoint {
  model::ModelConfig config;
  data::Vocabulary vocabulary;
  data::NormStats norm_stats;
  model::ParameterSet params;
  TrainingInfo training;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

nlohmann::json config_to_json(const model::ModelConfig& config);
model::ModelConfig config_from_json(const nlohmann::json& j);

nlohmann::json to_json(const Checkpoint& checkpoint);
// Throws ConfigError when the document is malformed or shapes disagree.
Checkpoint checkpoint_from_json(const nlohmann::json& j);

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace rallycast
