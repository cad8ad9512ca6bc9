#pragma once

#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "rallycast/evaluate.hpp"
#include "rallycast/train.hpp"

namespace rallycast::ablation {

struct Options {
  // Dimensions and dropout of `train.config` carry over to every variant;
  // the variant flags replace its flags.
  train::TrainOptions train;
  std::size_t n_samples = 10;
  std::uint64_t eval_seed = 0;
};

struct Row {
  std::string variant;
  std::size_t parameter_count = 0;
  double first_loss = 0.0;
  double final_loss = 0.0;
  eval::EvalReport report;
};

// Base config with the flags of a named variant.
model::ModelConfig variant_config(const model::ModelConfig& base, std::string_view name);

// Trains and evaluates each variant with the same seeds. Empty variant list
// -> ConfigError.
std::vector<Row> sweep(std::span<const data::Rally> train_set,
                       std::span<const data::Rally> test_set,
                       std::span<const std::string> variants, const Options& options);

nlohmann::json to_json(std::span<const Row> rows);
std::string to_table(std::span<const Row> rows);

}  // namespace rallycast::ablation
