#include "rallycast/checkpoint.hpp"

#include <fstream>

#include "rallycast/errors.hpp"

namespace rallycast {

using nlohmann::json;

namespace {

json nested(const tensor::Tensor& t, std::size_t axis, std::size_t& at) {
  const auto& shape = t.shape();
  json out = json::array();
  if (axis + 1 == shape.size()) {
    for (std::size_t i = 0; i < shape[axis]; ++i) out.push_back(t[at++]);
    return out;
  }
  for (std::size_t i = 0; i < shape[axis]; ++i) out.push_back(nested(t, axis + 1, at));
  return out;
}

void flatten_into(const json& j, const tensor::Shape& shape, std::size_t axis,
                  std::vector<double>& out, const std::string& name) {
  if (!j.is_array() || j.size() != shape[axis]) {
    throw ConfigError("parameter '" + name + "' does not match shape " +
                      tensor::shape_string(shape));
  }
  for (const auto& item : j) {
    if (axis + 1 == shape.size()) {
      if (!item.is_number()) throw ConfigError("parameter '" + name + "' has a non-number");
      out.push_back(item.get<double>());
    } else {
      flatten_into(item, shape, axis + 1, out, name);
    }
  }
}

template <typename T>
T field(const json& j, const char* key) {
  if (!j.contains(key)) throw ConfigError(std::string("checkpoint is missing '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("checkpoint field '") + key + "': " + e.what());
  }
}

}  // namespace

json config_to_json(const model::ModelConfig& c) {
  return {
      {"location_dim", c.location_dim},
      {"player_dim", c.player_dim},
      {"node_dim", c.node_dim},
      {"gnn_layers", c.gnn_layers},
      {"basis_count", c.basis_count},
      {"kernel_size", c.kernel_size},
      {"lstm_layers", c.lstm_layers},
      {"dropout", c.dropout},
      {"no_dynamic", c.no_dynamic},
      {"no_player_player", c.no_player_player},
      {"no_rally_weight", c.no_rally_weight},
      {"no_style_weight", c.no_style_weight},
      {"complete_graph", c.complete_graph},
      {"rgcn_pm_baseline", c.rgcn_pm_baseline},
      {"variant", c.variant_name()},
  };
}

model::ModelConfig config_from_json(const json& j) {
  model::ModelConfig c;
  c.location_dim = field<std::size_t>(j, "location_dim");
  c.player_dim = field<std::size_t>(j, "player_dim");
  c.node_dim = field<std::size_t>(j, "node_dim");
  c.gnn_layers = field<std::size_t>(j, "gnn_layers");
  c.basis_count = field<std::size_t>(j, "basis_count");
  c.kernel_size = field<std::size_t>(j, "kernel_size");
  c.lstm_layers = field<std::size_t>(j, "lstm_layers");
  c.dropout = field<double>(j, "dropout");
  c.no_dynamic = field<bool>(j, "no_dynamic");
  c.no_player_player = field<bool>(j, "no_player_player");
  c.no_rally_weight = field<bool>(j, "no_rally_weight");
  c.no_style_weight = field<bool>(j, "no_style_weight");
  c.complete_graph = field<bool>(j, "complete_graph");
  c.rgcn_pm_baseline = field<bool>(j, "rgcn_pm_baseline");
  c.check();
  return c;
}

json to_json(const Checkpoint& ck) {
  json params = json::object();
  for (const auto& e : ck.params.entries()) {
    std::size_t at = 0;
    params[e.name] = e.value.rank() == 0 ? json(e.value[0]) : nested(e.value, 0, at);
  }
  const auto& s = ck.norm_stats;
  return {
      {"format_version", kCheckpointFormat},
      {"config", config_to_json(ck.config)},
      {"vocabulary", ck.vocabulary.players()},
      {"norm_stats",
       {{"mean_x", s.mean_x}, {"mean_y", s.mean_y}, {"std_x", s.std_x}, {"std_y", s.std_y}}},
      {"training",
       {{"seed", ck.training.seed},
        {"tau", ck.training.tau},
        {"epochs", ck.training.epochs},
        {"batch", ck.training.batch},
        {"learning_rate", ck.training.learning_rate},
        {"rallies", ck.training.rallies}}},
      {"parameters", params},
  };
}

Checkpoint checkpoint_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("checkpoint must be a JSON object");
  const auto version = field<int>(j, "format_version");
  if (version != kCheckpointFormat) {
    throw ConfigError("unsupported checkpoint format_version " + std::to_string(version));
  }
  Checkpoint ck;
  ck.config = config_from_json(field<json>(j, "config"));
  ck.vocabulary = data::Vocabulary(field<std::vector<std::string>>(j, "vocabulary"));
  const auto s = field<json>(j, "norm_stats");
  ck.norm_stats = {field<double>(s, "mean_x"), field<double>(s, "mean_y"),
                   field<double>(s, "std_x"), field<double>(s, "std_y")};
  ck.norm_stats.check();
  if (j.contains("training")) {
    const auto tr = j.at("training");
    ck.training = {field<std::uint64_t>(tr, "seed"),  field<std::size_t>(tr, "tau"),
                   field<std::size_t>(tr, "epochs"),  field<std::size_t>(tr, "batch"),
                   field<double>(tr, "learning_rate"), field<std::size_t>(tr, "rallies")};
  }

  // The layout (names, order, shapes) comes from the config; values from the file.
  ck.params = model::init_parameters(ck.config, ck.vocabulary.player_count(), 0);
  const auto stored = field<json>(j, "parameters");
  if (!stored.is_object() || stored.size() != ck.params.size()) {
    throw ConfigError("checkpoint parameters do not match the model config");
  }
  for (auto& e : ck.params.entries()) {
    if (!stored.contains(e.name)) throw ConfigError("checkpoint lacks parameter '" + e.name + "'");
    std::vector<double> values;
    values.reserve(e.value.size());
    flatten_into(stored.at(e.name), e.value.shape(), 0, values, e.name);
    e.value = tensor::Tensor(e.value.shape(), std::move(values));
  }
  return ck;
}

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint " + path.string());
  out << to_json(ck).dump(1) << '\n';
  if (!out) throw Error("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read checkpoint " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("checkpoint " + path.string() + " is not valid JSON: " + e.what());
  }
  return checkpoint_from_json(j);
}

}  // namespace rallycast
