#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <iterator>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "rallycast/ablation.hpp"
#include "rallycast/checkpoint.hpp"
#include "rallycast/errors.hpp"
#include "rallycast/evaluate.hpp"
#include "rallycast/rally.hpp"
#include "rallycast/service.hpp"
#include "rallycast/train.hpp"

namespace {

using namespace rallycast;
using nlohmann::json;

constexpr int kUsageError = 2;
constexpr int kRuntimeError = 1;

std::vector<data::Rally> load_rallies(const std::string& path) {
  auto parsed = data::parse_rallies(std::filesystem::path(path));
  for (const auto& w : parsed.warnings) std::cerr << "warning: " << w << '\n';
  if (parsed.rallies.empty()) throw ConfigError(path + " contains no usable rallies");
  return std::move(parsed.rallies);
}

std::string read_text(const std::string& path) {
  if (path == "-") {
    return {std::istreambuf_iterator<char>(std::cin), std::istreambuf_iterator<char>()};
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void emit(const json& j, bool compact) { std::cout << (compact ? j.dump() : j.dump(2)) << '\n'; }

void require_checkpoint(const std::string& path) {
  if (path.empty()) {
    throw ConfigError("no checkpoint: pass --checkpoint or set RALLYCAST_CHECKPOINT");
  }
}

struct ModelFlags {
  std::string variant = "full";
  std::size_t dims = 0;
  double dropout = 0.1;

  model::ModelConfig config() const {
    auto c = model::ModelConfig::variant(variant);
    if (dims > 0) {
      c.location_dim = c.player_dim = c.node_dim = dims;
    }
    c.dropout = dropout;
    c.check();
    return c;
  }
};

void add_model_flags(CLI::App* cmd, ModelFlags& m) {
  cmd->add_option("--variant", m.variant, "full, noDynamic, noPlayerPlayer, noRallyWeight, "
                                          "noStyleWeight, completeGraph, rgcnPmBaseline");
  cmd->add_option("--dims", m.dims, "Embedding width for all three dimensions (default 16)");
  cmd->add_option("--dropout", m.dropout, "Dropout rate during training");
}

// --- request helpers shared by forecast and whatif ---

json request_from_rally(const data::Rally& r, std::size_t tau, bool keep_last_shot) {
  if (r.size() < tau) {
    throw ConfigError("rally " + r.rally_id + " has fewer than " + std::to_string(tau) +
                      " strokes");
  }
  json prefix = json::array();
  for (std::size_t i = 0; i < tau; ++i) {
    const auto& s = r.strokes[i];
    json stroke = {{"t", s.t},
                   {"locationA", {{"x", s.a.x}, {"y", s.a.y}}},
                   {"locationB", {{"x", s.b.x}, {"y", s.b.y}}}};
    if (i + 1 < tau || keep_last_shot) stroke["shotType"] = std::string(data::shot_name(s.shot));
    prefix.push_back(stroke);
  }
  return {{"playerA", r.player_a}, {"playerB", r.player_b}, {"prefix", prefix}};
}

struct RequestFlags {
  std::string request;
  std::string data;
  std::string rally_id;
  std::size_t tau = 4;
  bool keep_last_shot = false;
  std::optional<std::size_t> horizon;
  std::optional<std::size_t> samples;
  std::optional<std::uint64_t> seed;

  json build() const {
    json body;
    if (!request.empty()) {
      body = json::parse(read_text(request));
    } else if (!data.empty()) {
      const auto rallies = load_rallies(data);
      const data::Rally* chosen = &rallies.front();
      if (!rally_id.empty()) {
        chosen = nullptr;
        for (const auto& r : rallies)
          if (r.rally_id == rally_id) chosen = &r;
        if (!chosen) throw ConfigError("no rally with id '" + rally_id + "' in " + data);
      }
      body = request_from_rally(*chosen, tau, keep_last_shot);
    } else {
      throw ConfigError("pass --request FILE or --data CSV");
    }
    if (horizon) body["horizon"] = *horizon;
    if (samples) body["nSamples"] = *samples;
    if (seed) body["seed"] = *seed;
    return body;
  }
};

void add_request_flags(CLI::App* cmd, RequestFlags& r) {
  cmd->add_option("--request", r.request, "ForecastRequest JSON file ('-' for stdin)");
  cmd->add_option("--data", r.data, "Take the prefix from a rally in this CSV instead");
  cmd->add_option("--rally-id", r.rally_id, "Rally to use with --data (default: first)");
  cmd->add_option("--tau", r.tau, "Prefix length taken from --data");
  cmd->add_flag("--keep-last-shot", r.keep_last_shot,
                "Commit the last prefix stroke's recorded shot instead of forecasting it");
  cmd->add_option("--horizon", r.horizon, "Strokes to forecast");
  cmd->add_option("--samples", r.samples, "Sampled rollouts per request");
  cmd->add_option("--seed", r.seed, "Sampling seed");
}

std::unique_ptr<serve::ForecastService> service_for(const std::string& checkpoint) {
  require_checkpoint(checkpoint);
  auto svc = std::make_unique<serve::ForecastService>();
  svc->load(checkpoint);
  return svc;
}

json forecast_or_throw(const serve::ForecastService& svc, const json& body) {
  const auto r = svc.forecast(body.dump());
  if (r.status != 200) throw ValidationError(r.body.value("error", "forecast failed"));
  return r.body;
}

// "T:SIDE:X,Y" -> edit of the prefix location of one player.
void apply_location_edit(json& body, const std::string& edit) {
  const auto c1 = edit.find(':');
  const auto c2 = edit.find(':', c1 == std::string::npos ? c1 : c1 + 1);
  const auto comma = edit.find(',', c2 == std::string::npos ? c2 : c2 + 1);
  if (c1 == std::string::npos || c2 == std::string::npos || comma == std::string::npos) {
    throw ConfigError("--move expects T:SIDE:X,Y, got '" + edit + "'");
  }
  const auto t = std::stoul(edit.substr(0, c1));
  const auto side = edit.substr(c1 + 1, c2 - c1 - 1);
  if (side != "A" && side != "B") throw ConfigError("--move side must be A or B");
  auto& prefix = body.at("prefix");
  if (t < 1 || t > prefix.size()) throw ConfigError("--move stroke out of range: " + edit);
  prefix[t - 1][side == "A" ? "locationA" : "locationB"] = {
      {"x", std::stod(edit.substr(c2 + 1, comma - c2 - 1))},
      {"y", std::stod(edit.substr(comma + 1))}};
}

void apply_shot_edit(json& body, const std::string& edit) {
  const auto colon = edit.find(':');
  if (colon == std::string::npos) throw ConfigError("--shot expects T:NAME, got '" + edit + "'");
  const auto t = std::stoul(edit.substr(0, colon));
  auto& prefix = body.at("prefix");
  if (t < 1 || t > prefix.size()) throw ConfigError("--shot stroke out of range: " + edit);
  prefix[t - 1]["shotType"] = edit.substr(colon + 1);
}

json compare_steps(const json& base, const json& edited) {
  json out = json::array();
  const auto& a = base.at("steps");
  const auto& b = edited.at("steps");
  for (std::size_t i = 0; i < a.size(); ++i) {
    std::vector<double> delta;
    const auto pa = a[i].at("shotDistribution").get<std::vector<double>>();
    const auto pb = b[i].at("shotDistribution").get<std::vector<double>>();
    for (std::size_t c = 0; c < pa.size(); ++c) delta.push_back(pb[c] - pa[c]);
    out.push_back({{"stroke", a[i].at("stroke")},
                   {"chosenShot", {a[i].at("chosenShot"), b[i].at("chosenShot")}},
                   {"shotDistributionDelta", delta}});
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Badminton rally movement forecasting"};
  app.require_subcommand(1);
  app.fallthrough();
  bool compact = false;
  app.add_flag("--json", compact, "Compact single-line JSON output");
  std::string checkpoint;

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a model on a rally CSV");
  std::string train_data, train_log;
  train::TrainOptions topt;
  ModelFlags train_model;
  bool use_all = false;
  train_cmd->add_option("--data", train_data, "Rally CSV")->required();
  train_cmd->add_option("--checkpoint", checkpoint, "Output checkpoint path")
      ->envname("RALLYCAST_CHECKPOINT");
  train_cmd->add_option("--tau", topt.tau, "Observed prefix length");
  train_cmd->add_option("--epochs", topt.epochs);
  train_cmd->add_option("--batch", topt.batch);
  train_cmd->add_option("--lr", topt.learning_rate);
  train_cmd->add_option("--seed", topt.seed);
  train_cmd->add_option("--unknown-rate", topt.unknown_player_rate,
                        "Chance of substituting the unknown player per side");
  train_cmd->add_option("--log", train_log, "Write the per-epoch JSON lines here, not stdout");
  train_cmd->add_flag("--all", use_all, "Train on every rally instead of the 80% split");
  add_model_flags(train_cmd, train_model);

  // evaluate
  auto* eval_cmd = app.add_subcommand("evaluate", "Closest-of-N evaluation of a checkpoint");
  std::string eval_data;
  std::optional<std::size_t> eval_tau;
  std::size_t eval_samples = 10;
  std::uint64_t eval_seed = 0;
  bool eval_all = false;
  eval_cmd->add_option("--data", eval_data, "Rally CSV")->required();
  eval_cmd->add_option("--checkpoint", checkpoint)->envname("RALLYCAST_CHECKPOINT");
  eval_cmd->add_option("--tau", eval_tau, "Observed prefix length (default: training tau)");
  eval_cmd->add_option("--samples", eval_samples);
  eval_cmd->add_option("--seed", eval_seed);
  eval_cmd->add_flag("--all", eval_all, "Evaluate every rally instead of the 20% test split");

  // forecast / whatif
  auto* fc_cmd = app.add_subcommand("forecast", "Forecast the strokes after a prefix");
  RequestFlags fc_req;
  fc_cmd->add_option("--checkpoint", checkpoint)->envname("RALLYCAST_CHECKPOINT");
  add_request_flags(fc_cmd, fc_req);

  auto* wi_cmd = app.add_subcommand("whatif", "Compare a forecast with an edited prefix");
  RequestFlags wi_req;
  std::vector<std::string> moves, shot_edits;
  wi_cmd->add_option("--checkpoint", checkpoint)->envname("RALLYCAST_CHECKPOINT");
  add_request_flags(wi_cmd, wi_req);
  wi_cmd->add_option("--move", moves, "Move a player: T:SIDE:X,Y (repeatable)");
  wi_cmd->add_option("--shot", shot_edits, "Change a shot: T:NAME (repeatable)");

  // gen-synthetic
  auto* gen_cmd = app.add_subcommand("gen-synthetic", "Write deterministic synthetic rallies");
  data::SyntheticOptions gopt;
  std::string gen_out;
  gen_cmd->add_option("--seed", gopt.seed);
  gen_cmd->add_option("--n", gopt.rallies, "Number of rallies");
  gen_cmd->add_option("--min-length", gopt.min_length);
  gen_cmd->add_option("--max-length", gopt.max_length);
  gen_cmd->add_option("--players", gopt.players);
  gen_cmd->add_option("--per-match", gopt.rallies_per_match, "Rallies per match");
  gen_cmd->add_option("--out", gen_out, "Output CSV (default stdout)");

  // gradcheck
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference check of the full loss");
  train::GradCheckOptions gc;
  double gc_threshold = 1e-4;
  gc_cmd->add_option("--dims", gc.dims);
  gc_cmd->add_option("--variant", gc.variant);
  gc_cmd->add_option("--data-seed", gc.data_seed);
  gc_cmd->add_option("--param-seed", gc.param_seed);
  gc_cmd->add_option("--eps", gc.eps);
  gc_cmd->add_option("--threshold", gc_threshold);

  // ablate
  auto* ab_cmd = app.add_subcommand("ablate", "Train and evaluate model variants side by side");
  std::string ab_data;
  std::vector<std::string> ab_variants;
  ablation::Options aopt;
  ModelFlags ab_model;
  ab_cmd->add_option("--data", ab_data, "Rally CSV (default: 16 synthetic rallies)");
  ab_cmd->add_option("--variant", ab_variants, "Variant to include (repeatable; default all)");
  ab_cmd->add_option("--tau", aopt.train.tau);
  ab_cmd->add_option("--epochs", aopt.train.epochs);
  ab_cmd->add_option("--batch", aopt.train.batch);
  ab_cmd->add_option("--lr", aopt.train.learning_rate);
  ab_cmd->add_option("--seed", aopt.train.seed);
  ab_cmd->add_option("--samples", aopt.n_samples);
  ab_cmd->add_option("--dims", ab_model.dims);
  ab_cmd->add_option("--dropout", ab_model.dropout);

  // serve
  auto* srv_cmd = app.add_subcommand("serve", "HTTP service for forecasts");
  serve::ServerOptions sopt;
  std::string static_dir;
  srv_cmd->add_option("--checkpoint", checkpoint)->envname("RALLYCAST_CHECKPOINT");
  srv_cmd->add_option("--port", sopt.port);
  srv_cmd->add_option("--host", sopt.host);
  srv_cmd->add_option("--static", static_dir, "Directory served at /");
  srv_cmd->add_flag("--watch", sopt.watch, "Reload the checkpoint file when it changes");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsageError;
  }

  try {
    if (*train_cmd) {
      require_checkpoint(checkpoint);
      topt.config = train_model.config();
      auto rallies = load_rallies(train_data);
      const auto train_set = use_all ? rallies : data::split_train_test(rallies).train;
      std::ofstream log_file;
      if (!train_log.empty()) {
        log_file.open(train_log, std::ios::binary);
        if (!log_file) throw Error("cannot write " + train_log);
      }
      std::ostream& log = train_log.empty() ? std::cout : log_file;
      topt.on_epoch = [&log](const train::EpochLog& e) { log << train::to_json(e).dump() << '\n'; };
      const auto result = train::train(train_set, topt);
      for (const auto& w : result.warnings) std::cerr << "warning: " << w << '\n';
      save_checkpoint(result.checkpoint, checkpoint);
      std::cerr << "saved " << checkpoint << " (" << result.checkpoint.params.scalar_count()
                << " parameters, final loss " << result.history.back().loss << ")\n";
      return 0;
    }
    if (*eval_cmd) {
      require_checkpoint(checkpoint);
      const auto ck = load_checkpoint(checkpoint);
      auto rallies = load_rallies(eval_data);
      const auto test_set = eval_all ? rallies : data::split_train_test(rallies).test;
      const auto tau = eval_tau.value_or(ck.training.tau < 2 ? 4 : ck.training.tau);
      const auto report = eval::evaluate(ck, test_set, tau, eval_samples, eval_seed);
      for (const auto& w : report.warnings) std::cerr << "warning: " << w << '\n';
      emit(eval::to_json(report), compact);
      return 0;
    }
    if (*fc_cmd) {
      const auto svc = service_for(checkpoint);
      emit(forecast_or_throw(*svc, fc_req.build()), compact);
      return 0;
    }
    if (*wi_cmd) {
      const auto svc = service_for(checkpoint);
      auto base = wi_req.build();
      if (!base.contains("seed")) base["seed"] = 0;
      auto edited = base;
      for (const auto& m : moves) apply_location_edit(edited, m);
      for (const auto& s : shot_edits) apply_shot_edit(edited, s);
      const auto a = forecast_or_throw(*svc, base);
      const auto b = forecast_or_throw(*svc, edited);
      emit({{"base", a}, {"edited", b}, {"comparison", compare_steps(a, b)}}, compact);
      return 0;
    }
    if (*gen_cmd) {
      const auto rallies = data::generate_synthetic(gopt);
      if (gen_out.empty()) {
        data::write_rallies(std::cout, rallies);
      } else {
        data::write_rallies(std::filesystem::path(gen_out), rallies);
      }
      return 0;
    }
    if (*gc_cmd) {
      const auto start = std::chrono::steady_clock::now();
      const auto r = train::gradcheck_model(gc);
      const double seconds =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      const bool pass = r.result.max_relative_error < gc_threshold;
      emit({{"max_rel_err", r.result.max_relative_error},
            {"worst_parameter", r.worst_parameter},
            {"analytic", r.result.analytic},
            {"numeric", r.result.numeric},
            {"parameters", r.parameter_count},
            {"loss", r.loss},
            {"variant", gc.variant},
            {"dims", gc.dims},
            {"threshold", gc_threshold},
            {"pass", pass},
            {"seconds", seconds}},
           compact);
      return pass ? 0 : kRuntimeError;
    }
    if (*ab_cmd) {
      aopt.train.config = ab_model.config();
      aopt.eval_seed = aopt.train.seed;
      std::vector<data::Rally> train_set, test_set;
      if (ab_data.empty()) {
        data::SyntheticOptions so;
        so.seed = aopt.train.seed;
        train_set = data::generate_synthetic(so);
        test_set = train_set;
      } else {
        auto split = data::split_train_test(load_rallies(ab_data));
        train_set = std::move(split.train);
        test_set = split.test.empty() ? train_set : std::move(split.test);
      }
      if (ab_variants.empty())
        for (auto v : model::variant_names()) ab_variants.emplace_back(v);
      const auto rows = ablation::sweep(train_set, test_set, ab_variants, aopt);
      if (compact) {
        emit(ablation::to_json(rows), true);
      } else {
        std::cout << ablation::to_table(rows);
      }
      return 0;
    }
    if (*srv_cmd) {
      if (!checkpoint.empty()) sopt.checkpoint = checkpoint;
      if (!static_dir.empty()) sopt.static_dir = static_dir;
      serve::ForecastService svc;
      return serve::run_server(svc, sopt);
    }
  } catch (const json::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return kUsageError;
}
