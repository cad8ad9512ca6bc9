#include "rallycast/train.hpp"

#include <numeric>

#include "rallycast/errors.hpp"
#include "rallycast/rng.hpp"

namespace rallycast::train {

using nlohmann::json;

namespace {

void check_options(const TrainOptions& o) {
  o.config.check();
  if (o.tau < 2) throw ConfigError("tau must be at least 2");
  if (o.epochs == 0) throw ConfigError("epochs must be at least 1");
  if (o.batch == 0) throw ConfigError("batch size must be at least 1");
  if (!(o.learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (!(o.unknown_player_rate >= 0.0 && o.unknown_player_rate <= 1.0)) {
    throw ConfigError("unknown player rate must lie in [0, 1]");
  }
}

}  // namespace

TrainResult train(std::span<const data::Rally> rallies, const TrainOptions& options) {
  check_options(options);
  if (rallies.empty()) throw ConfigError("training set is empty");

  TrainResult result;
  std::vector<data::Rally> usable;
  for (const auto& r : rallies) {
    data::validate(r);
    if (r.size() < options.tau + 1) {
      result.warnings.push_back("rally " + r.match_id + "/" + r.rally_id + " has " +
                                std::to_string(r.size()) + " strokes, needs " +
                                std::to_string(options.tau + 1) + "; skipped");
      continue;
    }
    usable.push_back(r);
  }
  if (usable.empty()) throw ConfigError("no training rally has at least tau + 1 strokes");

  auto& ck = result.checkpoint;
  ck.config = options.config;
  ck.vocabulary = data::Vocabulary::build(usable);
  ck.norm_stats = data::NormStats::compute(usable);
  ck.training = {options.seed,  options.tau,           options.epochs,
                 options.batch, options.learning_rate, usable.size()};
  for (auto& r : usable) r = data::normalize(r, ck.norm_stats);

  std::vector<std::array<std::size_t, 2>> players;
  for (const auto& r : usable)
    players.push_back({ck.vocabulary.index(r.player_a), ck.vocabulary.index(r.player_b)});

  const Rng root(options.seed);
  ck.params = model::init_parameters(ck.config, ck.vocabulary.player_count(), options.seed);
  tensor::Adam adam(ck.params, {.learning_rate = options.learning_rate});

  std::vector<std::size_t> order(usable.size());
  for (std::size_t epoch = 1; epoch <= options.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto shuffle_rng = root.substream("shuffle").substream(epoch);
    shuffle_rng.shuffle(order.begin(), order.end());

    EpochLog log;
    log.epoch = epoch;
    for (std::size_t start = 0; start < order.size(); start += options.batch) {
      const auto end = std::min(order.size(), start + options.batch);
      auto grads = ck.params.zeros_like();
      for (std::size_t i = start; i < end; ++i) {
        const auto idx = order[i];
        auto dropout_rng = root.substream("dropout").substream(epoch).substream(idx);
        auto unknown_rng = root.substream("unknown").substream(epoch).substream(idx);

        model::SessionOptions so;
        so.player_a = players[idx][0];
        so.player_b = players[idx][1];
        if (unknown_rng.bernoulli(options.unknown_player_rate))
          so.player_a = data::Vocabulary::kUnknownPlayer;
        if (unknown_rng.bernoulli(options.unknown_player_rate))
          so.player_b = data::Vocabulary::kUnknownPlayer;
        if (ck.config.dropout > 0.0) so.dropout = &dropout_rng;

        tensor::Tape tape;
        const model::Network net(tape, ck.params, ck.config, true);
        const auto tf = model::teacher_forced_loss(net, usable[idx], options.tau, so);
        tape.backward(tf.loss);
        grads.accumulate(net.gradients());

        log.loss += tf.loss.value()[0];
        log.shot_loss += tf.shot_loss.value()[0];
        log.loc_a_loss += tf.loc_a_loss.value()[0];
        log.loc_b_loss += tf.loc_b_loss.value()[0];
        log.predictions += tf.predictions;
        log.correct_shots += tf.correct_shots;
      }
      adam.step(ck.params, grads);
    }
    result.history.push_back(log);
    if (options.on_epoch) options.on_epoch(log);
  }
  return result;
}

json to_json(const EpochLog& log) {
  return {{"epoch", log.epoch},
          {"loss", log.loss},
          {"shot_loss", log.shot_loss},
          {"loc_a_loss", log.loc_a_loss},
          {"loc_b_loss", log.loc_b_loss},
          {"predictions", log.predictions},
          {"correct_shots", log.correct_shots},
          {"accuracy", log.accuracy()}};
}

TeacherForcedScore score_teacher_forced(const Checkpoint& checkpoint,
                                        std::span<const data::Rally> rallies, std::size_t tau) {
  TeacherForcedScore score;
  for (const auto& raw : rallies) {
    if (raw.size() < tau + 1) continue;
    const auto rally = data::normalize(raw, checkpoint.norm_stats);
    model::SessionOptions so;
    so.player_a = checkpoint.vocabulary.index(rally.player_a);
    so.player_b = checkpoint.vocabulary.index(rally.player_b);
    tensor::Tape tape;
    const model::Network net(tape, checkpoint.params, checkpoint.config, false);
    const auto tf = model::teacher_forced_loss(net, rally, tau, so);
    score.loss += tf.loss.value()[0];
    score.shot_loss += tf.shot_loss.value()[0];
    score.loc_a_loss += tf.loc_a_loss.value()[0];
    score.loc_b_loss += tf.loc_b_loss.value()[0];
    score.predictions += tf.predictions;
    score.correct_shots += tf.correct_shots;
    ++score.rallies;
  }
  return score;
}

GradCheckReport gradcheck_model(const GradCheckOptions& options) {
  auto config = model::ModelConfig::variant(options.variant);
  const auto dims = model::ModelConfig::with_dims(options.dims);
  config.location_dim = dims.location_dim;
  config.player_dim = dims.player_dim;
  config.node_dim = dims.node_dim;
  config.dropout = 0.0;
  config.check();

  data::SyntheticOptions so;
  so.seed = options.data_seed;
  so.rallies = 1;
  so.min_length = 4;
  so.max_length = 4;
  const auto synthetic = data::generate_synthetic(so);
  const auto rally = data::normalize(synthetic[0], data::NormStats::compute(synthetic));

  // Players 1 and 2 of a two-player vocabulary.
  constexpr std::size_t kPlayers = 3;
  auto params = model::init_parameters(config, kPlayers, options.param_seed);
  auto x = params.flatten();
  Rng rng(options.param_seed);
  for (auto& v : x) v = rng.uniform(-options.param_range, options.param_range);

  const tensor::Objective f = [&](std::span<const double> flat, std::vector<double>* grad) {
    params.assign(flat);
    tensor::Tape tape;
    const model::Network net(tape, params, config, grad != nullptr);
    model::SessionOptions session;
    session.player_a = 1;
    session.player_b = 2;
    const auto tf = model::teacher_forced_loss(net, rally, 2, session);
    if (grad) {
      tape.backward(tf.loss);
      *grad = net.gradients().flatten();
    }
    return tf.loss.value()[0];
  };

  GradCheckReport report;
  report.parameter_count = x.size();
  report.loss = f(x, nullptr);
  report.result = tensor::grad_check(f, x, options.eps);
  std::size_t offset = 0;
  for (const auto& e : params.entries()) {
    if (report.result.worst_index < offset + e.value.size()) {
      report.worst_parameter =
          e.name + "[" + std::to_string(report.result.worst_index - offset) + "]";
      break;
    }
    offset += e.value.size();
  }
  return report;
}

}  // namespace rallycast::train
