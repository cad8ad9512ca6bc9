#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "rallycast/checkpoint.hpp"
#include "rallycast/model.hpp"
#include "rallycast/rally.hpp"
#include "rallycast/rng.hpp"

namespace rallycast::eval {

struct LocationPair {
  data::Point a;
  data::Point b;
  friend bool operator==(const LocationPair&, const LocationPair&) = default;
};

// Sums over all steps of the squared / absolute errors of the four
// coordinates. Spans must have equal length (ContractError otherwise).
double metric_mse(std::span<const LocationPair> predicted, std::span<const LocationPair> target);
double metric_mae(std::span<const LocationPair> predicted, std::span<const LocationPair> target);
// -sum log softmax(logits_i)[target_i]. Each row has 10 entries; -inf marks
// a masked class. Row count must match the target count.
double metric_ce(std::span<const std::vector<double>> logits,
                 std::span<const std::size_t> targets);

// One free-running decode. Step i predicts the shot of stroke cursor+i and
// both locations at stroke cursor+i+1.
struct Rollout {
  std::vector<std::vector<double>> logits;  // masked: -inf on forbidden classes
  std::vector<data::ShotType> shots;
  std::vector<model::Gaussian> gaussians_a;
  std::vector<model::Gaussian> gaussians_b;
  std::vector<LocationPair> locations;
};

// Advances a copy of `session` by `steps` decoder iterations. `last` holds
// the locations at the session cursor. Locations are sampled from the
// predicted Gaussians when `rng` is set, otherwise the means are fed back.
// The first `forced.size()` shots are committed as given instead of argmax.
Rollout rollout(const model::Session& session, LocationPair last, std::size_t steps, Rng* rng,
                std::span<const data::ShotType> forced = {});

// Produces one rollout per stream for a rally (prefix = first tau strokes).
using RolloutFn =
    std::function<std::vector<Rollout>(const data::Rally& rally, std::span<Rng> streams)>;

struct RallyScore {
  std::string match_id;
  std::string rally_id;
  std::size_t steps = 0;
  std::size_t chosen_sample = 0;
  double mse = 0.0;
  double mae = 0.0;
  double ce = 0.0;
};

struct EvalReport {
  double mse = 0.0;
  double mae = 0.0;
  double ce = 0.0;
  std::size_t n_rallies = 0;
  std::size_t tau = 0;
  std::size_t n_samples = 0;
  std::uint64_t seed = 0;
  std::vector<RallyScore> per_rally;
  std::vector<std::string> warnings;
};

// Closest-sample protocol: per rally, n_samples rollouts from streams
// Rng(seed)/"eval"/rally/sample; the one with the least summed squared
// location error is scored (first on ties). Rallies shorter than tau + 1 are
// skipped with a warning.
EvalReport evaluate_protocol(std::span<const data::Rally> rallies, std::size_t tau,
                             std::size_t n_samples, std::uint64_t seed, const RolloutFn& fn);

// Model evaluation on raw-coordinate rallies; metrics in standardized space.
EvalReport evaluate(const Checkpoint& checkpoint, std::span<const data::Rally> rallies,
                    std::size_t tau, std::size_t n_samples, std::uint64_t seed);

// Sorted keys, per-rally breakdown included.
nlohmann::json to_json(const EvalReport& report);

}  // namespace rallycast::eval
