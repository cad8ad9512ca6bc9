#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "rallycast/checkpoint.hpp"
#include "rallycast/model.hpp"
#include "rallycast/optim.hpp"
#include "rallycast/rally.hpp"

namespace rallycast::train {

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double loss = 0.0;      // summed over rallies
  double shot_loss = 0.0;
  double loc_a_loss = 0.0;
  double loc_b_loss = 0.0;
  std::size_t predictions = 0;
  std::size_t correct_shots = 0;

  double accuracy() const {
    return predictions == 0 ? 0.0 : static_cast<double>(correct_shots) / predictions;
  }
  friend bool operator==(const EpochLog&, const EpochLog&) = default;
};

struct TrainOptions {
  std::uint64_t seed = 0;
  std::size_t epochs = 100;
  std::size_t batch = 32;
  std::size_t tau = 4;
  double learning_rate = 1e-3;
  model::ModelConfig config;
  // Per rally side, chance of training on the unknown-player row instead.
  double unknown_player_rate = 0.01;
  std::function<void(const EpochLog&)> on_epoch;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<EpochLog> history;
  std::vector<std::string> warnings;
};

// Teacher-forced minibatch Adam over raw-coordinate rallies. Vocabulary and
// normalization come from `rallies`. Gradients are summed over a batch.
TrainResult train(std::span<const data::Rally> rallies, const TrainOptions& options);

nlohmann::json to_json(const EpochLog& log);

struct TeacherForcedScore {
  double loss = 0.0;
  double shot_loss = 0.0;
  double loc_a_loss = 0.0;
  double loc_b_loss = 0.0;
  std::size_t predictions = 0;
  std::size_t correct_shots = 0;
  std::size_t rallies = 0;

  double accuracy() const {
    return predictions == 0 ? 0.0 : static_cast<double>(correct_shots) / predictions;
  }
};

// Teacher-forced loss and shot accuracy without dropout; rallies shorter than
// tau + 1 are ignored.
TeacherForcedScore score_teacher_forced(const Checkpoint& checkpoint,
                                        std::span<const data::Rally> rallies, std::size_t tau);

// Fixed evaluation point for checking the full loss gradient: one 4-stroke
// synthetic rally (standardized), tau = 2, parameters drawn uniformly from
// [-1, 1]. At Xavier scale many co-attention gradients sit below what central
// differences can resolve in double precision, so the point is pinned.
struct GradCheckOptions {
  std::size_t dims = 4;
  std::string variant = "full";
  std::uint64_t data_seed = 7;
  std::uint64_t param_seed = 35;
  double param_range = 1.0;
  double eps = 1e-5;
};

struct GradCheckReport {
  tensor::GradCheckResult result;
  std::string worst_parameter;  // name[flat index]
  std::size_t parameter_count = 0;
  double loss = 0.0;
};

GradCheckReport gradcheck_model(const GradCheckOptions& options);

}  // namespace rallycast::train
