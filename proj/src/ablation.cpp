#include "rallycast/ablation.hpp"

#include <charconv>
#include <sstream>

#include "rallycast/errors.hpp"

namespace rallycast::ablation {

using nlohmann::json;

namespace {

std::string fixed(double v, int precision) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::fixed, precision);
  return std::string(buf, r.ptr);
}

}  // namespace

model::ModelConfig variant_config(const model::ModelConfig& base, std::string_view name) {
  auto c = model::ModelConfig::variant(name);
  c.location_dim = base.location_dim;
  c.player_dim = base.player_dim;
  c.node_dim = base.node_dim;
  c.gnn_layers = base.gnn_layers;
  c.basis_count = base.basis_count;
  c.kernel_size = base.kernel_size;
  c.lstm_layers = base.lstm_layers;
  c.dropout = base.dropout;
  return c;
}

std::vector<Row> sweep(std::span<const data::Rally> train_set,
                       std::span<const data::Rally> test_set,
                       std::span<const std::string> variants, const Options& options) {
  if (variants.empty()) throw ConfigError("ablation needs at least one variant");
  std::vector<Row> rows;
  for (const auto& name : variants) {
    auto opts = options.train;
    opts.config = variant_config(options.train.config, name);
    const auto result = train::train(train_set, opts);
    Row row;
    row.variant = name;
    row.parameter_count = result.checkpoint.params.scalar_count();
    row.first_loss = result.history.front().loss;
    row.final_loss = result.history.back().loss;
    row.report = eval::evaluate(result.checkpoint, test_set, opts.tau, options.n_samples,
                                options.eval_seed);
    rows.push_back(std::move(row));
  }
  return rows;
}

json to_json(std::span<const Row> rows) {
  json out = json::array();
  for (const auto& r : rows) {
    out.push_back({{"variant", r.variant},
                   {"parameter_count", r.parameter_count},
                   {"first_loss", r.first_loss},
                   {"final_loss", r.final_loss},
                   {"report", eval::to_json(r.report)}});
  }
  return out;
}

std::string to_table(std::span<const Row> rows) {
  const std::vector<std::string> header = {"variant", "params", "loss[1]", "loss[end]",
                                           "MSE",     "MAE",    "CE"};
  std::vector<std::vector<std::string>> cells{header};
  for (const auto& r : rows) {
    cells.push_back({r.variant, std::to_string(r.parameter_count), fixed(r.first_loss, 3),
                     fixed(r.final_loss, 3), fixed(r.report.mse, 4), fixed(r.report.mae, 4),
                     fixed(r.report.ce, 4)});
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& line : cells)
    for (std::size_t c = 0; c < line.size(); ++c) width[c] = std::max(width[c], line[c].size());

  std::ostringstream out;
  for (const auto& line : cells) {
    for (std::size_t c = 0; c < line.size(); ++c) {
      const auto pad = std::string(width[c] - line[c].size(), ' ');
      // Names left-aligned, numbers right-aligned.
      out << (c == 0 ? line[c] + pad : pad + line[c]) << (c + 1 < line.size() ? "  " : "\n");
    }
  }
  return out.str();
}

}  // namespace rallycast::ablation
