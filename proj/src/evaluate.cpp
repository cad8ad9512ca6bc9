#include "rallycast/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "rallycast/errors.hpp"

namespace rallycast::eval {

using nlohmann::json;

namespace {

void check_aligned(std::size_t predicted, std::size_t target, const char* what) {
  if (predicted != target) {
    throw ContractError(std::string(what) + ": " + std::to_string(predicted) +
                        " predictions for " + std::to_string(target) + " targets");
  }
}

double log_softmax_at(std::span<const double> logits, std::size_t target) {
  if (target >= logits.size()) throw ContractError("CE target class out of range");
  const double inf = std::numeric_limits<double>::infinity();
  double m = -inf;
  for (double v : logits) m = std::max(m, v);
  if (m == -inf) throw ContractError("CE row has every class masked");
  if (logits[target] == -inf) return -inf;
  double s = 0.0;
  for (double v : logits)
    if (v != -inf) s += std::exp(v - m);
  return logits[target] - m - std::log(s);
}

}  // namespace

double metric_mse(std::span<const LocationPair> predicted, std::span<const LocationPair> target) {
  check_aligned(predicted.size(), target.size(), "MSE");
  double total = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const auto& p = predicted[i];
    const auto& q = target[i];
    const double ax = p.a.x - q.a.x, ay = p.a.y - q.a.y;
    const double bx = p.b.x - q.b.x, by = p.b.y - q.b.y;
    total += ax * ax + ay * ay + bx * bx + by * by;
  }
  return total;
}

double metric_mae(std::span<const LocationPair> predicted, std::span<const LocationPair> target) {
  check_aligned(predicted.size(), target.size(), "MAE");
  double total = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const auto& p = predicted[i];
    const auto& q = target[i];
    total += std::abs(p.a.x - q.a.x) + std::abs(p.a.y - q.a.y) + std::abs(p.b.x - q.b.x) +
             std::abs(p.b.y - q.b.y);
  }
  return total;
}

double metric_ce(std::span<const std::vector<double>> logits,
                 std::span<const std::size_t> targets) {
  check_aligned(logits.size(), targets.size(), "CE");
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (logits[i].size() != data::kShotTypeCount) {
      throw ContractError("CE rows must have " + std::to_string(data::kShotTypeCount) +
                          " logits");
    }
    total -= log_softmax_at(logits[i], targets[i]);
  }
  return total;
}

Rollout rollout(const model::Session& session, LocationPair last, std::size_t steps, Rng* rng,
                std::span<const data::ShotType> forced) {
  model::Session s = session;
  Rollout out;
  const double inf = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < steps; ++i) {
    const auto logits = s.predict_next_shot(last.a, last.b);
    const auto mask = model::shot_mask(s.cursor() - 1);
    std::vector<double> row(logits.value().values().begin(), logits.value().values().end());
    for (std::size_t c = 0; c < row.size(); ++c)
      if (mask[c]) row[c] = -inf;
    const auto shot = i < forced.size() ? forced[i]
                                        : data::shot_from_index(model::masked_argmax(row, mask));

    const auto heads = s.commit_shot(shot);
    const auto ga = model::to_gaussian(heads.a.value().values());
    const auto gb = model::to_gaussian(heads.b.value().values());
    LocationPair next;
    if (rng) {
      next.a = model::sample(ga, *rng);
      next.b = model::sample(gb, *rng);
    } else {
      next.a = {ga.mu_x, ga.mu_y};
      next.b = {gb.mu_x, gb.mu_y};
    }
    out.logits.push_back(std::move(row));
    out.shots.push_back(shot);
    out.gaussians_a.push_back(ga);
    out.gaussians_b.push_back(gb);
    out.locations.push_back(next);
    last = next;
  }
  return out;
}

EvalReport evaluate_protocol(std::span<const data::Rally> rallies, std::size_t tau,
                             std::size_t n_samples, std::uint64_t seed, const RolloutFn& fn) {
  if (tau < 2) throw ConfigError("tau must be at least 2");
  if (n_samples == 0) throw ConfigError("evaluation needs at least one sample");
  EvalReport report;
  report.tau = tau;
  report.n_samples = n_samples;
  report.seed = seed;
  const Rng root = Rng(seed).substream("eval");

  for (std::size_t r = 0; r < rallies.size(); ++r) {
    const auto& rally = rallies[r];
    if (rally.size() < tau + 1) {
      report.warnings.push_back("rally " + rally.match_id + "/" + rally.rally_id +
                                " shorter than tau + 1, skipped");
      continue;
    }
    const std::size_t steps = rally.size() - tau;
    std::vector<LocationPair> truth;
    std::vector<std::size_t> shots;
    for (std::size_t k = tau + 1; k <= rally.size(); ++k) {
      truth.push_back({rally.strokes[k - 1].a, rally.strokes[k - 1].b});
      shots.push_back(data::shot_index(rally.strokes[k - 2].shot));
    }

    std::vector<Rng> streams;
    const Rng per_rally = root.substream(r);
    for (std::size_t j = 0; j < n_samples; ++j) streams.push_back(per_rally.substream(j));
    const auto samples = fn(rally, streams);
    if (samples.size() != n_samples) {
      throw ContractError("rollout function returned " + std::to_string(samples.size()) +
                          " samples, expected " + std::to_string(n_samples));
    }

    RallyScore score{rally.match_id, rally.rally_id, steps, 0,
                     std::numeric_limits<double>::infinity(), 0.0, 0.0};
    for (std::size_t j = 0; j < samples.size(); ++j) {
      const double mse = metric_mse(samples[j].locations, truth);
      if (mse < score.mse) {
        score.mse = mse;
        score.chosen_sample = j;
      }
    }
    const auto& chosen = samples[score.chosen_sample];
    score.mae = metric_mae(chosen.locations, truth);
    score.ce = metric_ce(chosen.logits, shots);
    report.mse += score.mse;
    report.mae += score.mae;
    report.ce += score.ce;
    ++report.n_rallies;
    report.per_rally.push_back(std::move(score));
  }
  return report;
}

EvalReport evaluate(const Checkpoint& checkpoint, std::span<const data::Rally> rallies,
                    std::size_t tau, std::size_t n_samples, std::uint64_t seed) {
  model::check_parameters(checkpoint.config, checkpoint.vocabulary.player_count(),
                          checkpoint.params);
  std::vector<data::Rally> normalized;
  normalized.reserve(rallies.size());
  for (const auto& r : rallies) normalized.push_back(data::normalize(r, checkpoint.norm_stats));

  const auto fn = [&](const data::Rally& rally, std::span<Rng> streams) {
    tensor::Tape tape;
    const model::Network net(tape, checkpoint.params, checkpoint.config, false);
    model::SessionOptions options;
    options.player_a = checkpoint.vocabulary.index(rally.player_a);
    options.player_b = checkpoint.vocabulary.index(rally.player_b);
    const std::span<const data::Stroke> strokes(rally.strokes);
    const model::Session session(net, strokes.first(tau), options);
    const LocationPair last{strokes[tau - 1].a, strokes[tau - 1].b};
    std::vector<Rollout> out;
    for (auto& rng : streams) out.push_back(rollout(session, last, rally.size() - tau, &rng));
    return out;
  };
  return evaluate_protocol(normalized, tau, n_samples, seed, fn);
}

json to_json(const EvalReport& report) {
  json per_rally = json::array();
  for (const auto& s : report.per_rally) {
    per_rally.push_back({{"match_id", s.match_id},
                         {"rally_id", s.rally_id},
                         {"steps", s.steps},
                         {"chosen_sample", s.chosen_sample},
                         {"mse", s.mse},
                         {"mae", s.mae},
                         {"ce", s.ce}});
  }
  return {{"mse", report.mse},
          {"mae", report.mae},
          {"ce", report.ce},
          {"n_rallies", report.n_rallies},
          {"tau", report.tau},
          {"n_samples", report.n_samples},
          {"seed", report.seed},
          {"per_rally", per_rally},
          {"warnings", report.warnings}};
}

}  // namespace rallycast::eval
