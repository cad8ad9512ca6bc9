#include "rallycast/service.hpp"

#include <cmath>
#include <random>

#include "rallycast/errors.hpp"
#include "rallycast/evaluate.hpp"
#include "rallycast/model.hpp"

namespace rallycast::serve {

using nlohmann::json;

namespace {

// "field: message"; the field part is echoed separately in 400 bodies.
class RequestError : public ValidationError {
 public:
  RequestError(std::string field, const std::string& message)
      : ValidationError(field + ": " + message), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

const json& member(const json& obj, const std::string& key, const std::string& field) {
  if (!obj.contains(key)) throw RequestError(field, "missing");
  return obj.at(key);
}

std::string string_field(const json& obj, const std::string& key) {
  const auto& v = member(obj, key, key);
  if (!v.is_string()) throw RequestError(key, "must be a string");
  return v.get<std::string>();
}

std::uint64_t unsigned_field(const json& v, const std::string& field) {
  if (v.is_number_unsigned()) return v.get<std::uint64_t>();
  if (v.is_number_integer() && v.get<std::int64_t>() >= 0) return v.get<std::uint64_t>();
  throw RequestError(field, "must be a non-negative integer");
}

data::Point point_field(const json& stroke, const std::string& key, const std::string& field) {
  const auto& p = member(stroke, key, field);
  if (!p.is_object()) throw RequestError(field, "must be an object {x, y}");
  data::Point out;
  for (const char* axis : {"x", "y"}) {
    const auto& v = member(p, axis, field + "." + axis);
    if (!v.is_number()) throw RequestError(field + "." + axis, "must be a number");
    const double d = v.get<double>();
    if (!std::isfinite(d)) throw RequestError(field + "." + axis, "must be finite");
    (axis[0] == 'x' ? out.x : out.y) = d;
  }
  return out;
}

json point_json(data::Point p) { return {{"x", p.x}, {"y", p.y}}; }

json gaussian_json(const model::Gaussian& g, const data::NormStats& s) {
  const auto mu = s.denormalize({g.mu_x, g.mu_y});
  return {{"muX", mu.x},
          {"muY", mu.y},
          {"sigmaX", g.sigma_x * s.std_x},
          {"sigmaY", g.sigma_y * s.std_y},
          {"rho", g.rho}};
}

std::vector<double> masked_softmax(const std::vector<double>& logits) {
  const double inf = std::numeric_limits<double>::infinity();
  double m = -inf;
  for (double v : logits) m = std::max(m, v);
  std::vector<double> p(logits.size(), 0.0);
  double total = 0.0;
  for (std::size_t c = 0; c < logits.size(); ++c) {
    if (logits[c] == -inf) continue;
    p[c] = std::exp(logits[c] - m);
    total += p[c];
  }
  for (auto& v : p) v /= total;
  return p;
}

json error_body(const std::string& message, const std::string& field = {}) {
  json body = {{"error", message}};
  if (!field.empty()) body["field"] = field;
  return body;
}

Response unavailable() { return {503, error_body("no checkpoint loaded")}; }

// JSON numbers above 2^53 lose precision in browsers.
std::uint64_t draw_seed() {
  std::random_device rd;
  const std::uint64_t hi = rd(), lo = rd();
  return ((hi << 32) | lo) & ((std::uint64_t{1} << 53) - 1);
}

}  // namespace

ForecastRequest parse_forecast_request(const json& body) {
  if (!body.is_object()) throw RequestError("body", "must be a JSON object");
  ForecastRequest req;
  req.player_a = string_field(body, "playerA");
  req.player_b = string_field(body, "playerB");

  const auto& prefix = member(body, "prefix", "prefix");
  if (!prefix.is_array()) throw RequestError("prefix", "must be an array of strokes");
  if (prefix.size() < 2) throw RequestError("prefix", "needs at least 2 strokes");
  if (prefix.size() > data::kMaxRallyLength) {
    throw RequestError("prefix", "has " + std::to_string(prefix.size()) +
                                     " strokes; the maximum is " +
                                     std::to_string(data::kMaxRallyLength));
  }
  for (std::size_t i = 0; i < prefix.size(); ++i) {
    const auto field = "prefix[" + std::to_string(i) + "]";
    const auto& s = prefix[i];
    if (!s.is_object()) throw RequestError(field, "must be an object");
    data::Stroke stroke;
    const auto t = unsigned_field(member(s, "t", field + ".t"), field + ".t");
    if (t != i + 1) {
      throw RequestError(field + ".t", "expected " + std::to_string(i + 1) + ", got " +
                                           std::to_string(t) +
                                           "; strokes must alternate from the serve");
    }
    stroke.t = static_cast<int>(t);
    stroke.a = point_field(s, "locationA", field + ".locationA");
    stroke.b = point_field(s, "locationB", field + ".locationB");

    const bool last = i + 1 == prefix.size();
    if (last && (!s.contains("shotType") || s.at("shotType").is_null())) {
      req.last_shot_given = false;
      stroke.shot = data::ShotType::kClear;  // placeholder, never read
    } else {
      const auto& v = member(s, "shotType", field + ".shotType");
      if (!v.is_string()) throw RequestError(field + ".shotType", "must be a string");
      const auto shot = data::parse_shot(v.get<std::string>());
      if (!shot) {
        throw RequestError(field + ".shotType",
                           "unknown shot type '" + v.get<std::string>() + "'");
      }
      if (i == 0 && !data::is_serve(*shot)) {
        throw RequestError(field + ".shotType", "stroke 1 must be a serve");
      }
      if (i > 0 && data::is_serve(*shot)) {
        throw RequestError(field + ".shotType", "serves are only allowed at stroke 1");
      }
      stroke.shot = *shot;
    }
    req.prefix.push_back(stroke);
  }

  if (body.contains("horizon")) req.horizon = unsigned_field(body.at("horizon"), "horizon");
  if (req.horizon < 1) throw RequestError("horizon", "must be at least 1");
  if (req.prefix.size() + req.horizon > data::kMaxRallyLength) {
    throw RequestError("horizon", "prefix plus horizon exceeds " +
                                      std::to_string(data::kMaxRallyLength) + " strokes");
  }
  if (body.contains("nSamples"))
    req.n_samples = unsigned_field(body.at("nSamples"), "nSamples");
  if (req.n_samples < 1 || req.n_samples > kMaxSamples) {
    throw RequestError("nSamples", "must lie in [1, " + std::to_string(kMaxSamples) + "]");
  }
  if (body.contains("seed") && !body.at("seed").is_null())
    req.seed = unsigned_field(body.at("seed"), "seed");
  return req;
}

json to_json(const ForecastRequest& req) {
  json prefix = json::array();
  for (std::size_t i = 0; i < req.prefix.size(); ++i) {
    const auto& s = req.prefix[i];
    json stroke = {{"t", s.t}, {"locationA", point_json(s.a)}, {"locationB", point_json(s.b)}};
    if (i + 1 < req.prefix.size() || req.last_shot_given)
      stroke["shotType"] = std::string(data::shot_name(s.shot));
    prefix.push_back(stroke);
  }
  json out = {{"playerA", req.player_a},
              {"playerB", req.player_b},
              {"prefix", prefix},
              {"horizon", req.horizon},
              {"nSamples", req.n_samples}};
  if (req.seed) out["seed"] = *req.seed;
  return out;
}

json forecast(const Checkpoint& ck, const ForecastRequest& req, std::uint64_t seed) {
  const auto& stats = ck.norm_stats;
  std::vector<data::Stroke> prefix = req.prefix;
  for (auto& s : prefix) {
    s.a = stats.normalize(s.a);
    s.b = stats.normalize(s.b);
  }

  json warnings = json::array();
  model::SessionOptions options;
  const auto resolve = [&](const std::string& id, const char* field) {
    const auto index = ck.vocabulary.find(id);
    if (!index) {
      warnings.push_back(std::string(field) + " '" + id +
                         "' is not in the checkpoint vocabulary; using the unknown-player "
                         "embedding");
    }
    return json{{"id", id}, {"index", index.value_or(data::Vocabulary::kUnknownPlayer)},
                {"known", index.has_value()}};
  };
  const auto player_a = resolve(req.player_a, "playerA");
  const auto player_b = resolve(req.player_b, "playerB");
  options.player_a = player_a.at("index").get<std::size_t>();
  options.player_b = player_b.at("index").get<std::size_t>();

  tensor::Tape tape;
  const model::Network net(tape, ck.params, ck.config, false);
  const model::Session session(net, prefix, options);
  const eval::LocationPair last{prefix.back().a, prefix.back().b};
  std::vector<data::ShotType> forced;
  if (req.last_shot_given) forced.push_back(prefix.back().shot);

  const auto mean = eval::rollout(session, last, req.horizon, nullptr, forced);
  std::vector<eval::Rollout> samples;
  const Rng root = Rng(seed).substream("forecast");
  for (std::size_t j = 0; j < req.n_samples; ++j) {
    auto rng = root.substream(j);
    samples.push_back(eval::rollout(session, last, req.horizon, &rng, forced));
  }

  json steps = json::array();
  const auto n = static_cast<int>(prefix.size());
  for (std::size_t i = 0; i < req.horizon; ++i) {
    json drawn = json::array();
    for (const auto& s : samples) {
      const auto& loc = s.locations[i];
      drawn.push_back({{"a", point_json(stats.denormalize(loc.a))},
                       {"b", point_json(stats.denormalize(loc.b))},
                       {"shot", std::string(data::shot_name(s.shots[i]))}});
    }
    const auto& loc = mean.locations[i];
    steps.push_back({
        {"shotStroke", n + static_cast<int>(i)},
        {"stroke", n + static_cast<int>(i) + 1},
        {"shotDistribution", masked_softmax(mean.logits[i])},
        {"chosenShot", std::string(data::shot_name(mean.shots[i]))},
        {"shotForced", i < forced.size()},
        {"gaussians",
         {{"a", gaussian_json(mean.gaussians_a[i], stats)},
          {"b", gaussian_json(mean.gaussians_b[i], stats)}}},
        {"meanPath",
         {{"a", point_json(stats.denormalize(loc.a))},
          {"b", point_json(stats.denormalize(loc.b))}}},
        {"samples", drawn},
    });
  }
  return {{"version", "v1"},   {"seed", seed},         {"playerA", player_a},
          {"playerB", player_b}, {"horizon", req.horizon}, {"nSamples", req.n_samples},
          {"steps", steps},    {"warnings", warnings}};
}

void ForecastService::load(const std::filesystem::path& path) {
  install(load_checkpoint(path), path.string());
}

void ForecastService::install(Checkpoint checkpoint, std::string source) {
  model::check_parameters(checkpoint.config, checkpoint.vocabulary.player_count(),
                          checkpoint.params);
  auto next = std::make_shared<const Snapshot>(Snapshot{std::move(checkpoint), std::move(source)});
  std::lock_guard lock(mutex_);
  snapshot_ = std::move(next);
}

std::shared_ptr<const Snapshot> ForecastService::snapshot() const {
  std::lock_guard lock(mutex_);
  return snapshot_;
}

Response ForecastService::forecast(std::string_view body) const {
  const auto snap = snapshot();
  if (!snap) return unavailable();
  ForecastRequest req;
  try {
    const auto parsed = json::parse(body);
    req = parse_forecast_request(parsed);
  } catch (const json::parse_error&) {
    return {400, error_body("body: not valid JSON", "body")};
  } catch (const RequestError& e) {
    return {400, error_body(e.what(), e.field())};
  }
  const auto seed = req.seed ? *req.seed : draw_seed();
  try {
    return {200, serve::forecast(snap->checkpoint, req, seed)};
  } catch (const Error& e) {
    return {400, error_body(e.what())};
  }
}

Response ForecastService::meta() const {
  const auto snap = snapshot();
  if (!snap) return unavailable();
  const auto& ck = snap->checkpoint;
  json shots = json::array();
  for (auto s : data::all_shots()) shots.push_back(std::string(data::shot_name(s)));
  return {200,
          {{"version", "v1"},
           {"players", ck.vocabulary.players()},
           {"shotTypes", shots},
           {"serveTypes", {std::string(data::shot_name(data::ShotType::kShortService)),
                           std::string(data::shot_name(data::ShotType::kLongService))}},
           {"courtBounds", {{"width", data::kCourtWidth}, {"length", data::kCourtLength},
                            {"units", "m"}}},
           {"maxRallyLength", data::kMaxRallyLength},
           {"checkpointInfo",
            {{"source", snap->source},
             {"formatVersion", kCheckpointFormat},
             {"variant", ck.config.variant_name()},
             {"config", config_to_json(ck.config)},
             {"parameterCount", ck.params.scalar_count()},
             {"trainingSeed", ck.training.seed},
             {"tau", ck.training.tau},
             {"epochs", ck.training.epochs}}}}};
}

Response ForecastService::health() const {
  const auto snap = snapshot();
  return {200, {{"status", "ok"}, {"checkpointLoaded", snap != nullptr}}};
}

}  // namespace rallycast::serve
