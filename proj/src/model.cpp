#include "rallycast/model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "rallycast/errors.hpp"

namespace rallycast::model {

namespace t = rallycast::tensor;
using graph::Side;

namespace {

constexpr std::array<std::string_view, 7> kVariants = {
    "full",          "noDynamic",     "noPlayerPlayer", "noRallyWeight",
    "noStyleWeight", "completeGraph", "rgcnPmBaseline",
};

struct ParamSpec {
  std::string name;
  t::Shape shape;
  std::size_t fan_in = 0;
  std::size_t fan_out = 0;
  bool zero = false;
};

std::vector<ParamSpec> parameter_specs(const ModelConfig& c, std::size_t players) {
  const auto dl = c.location_dim, dp = c.player_dim, d = c.node_dim;
  const auto B = c.basis_count, R = c.relation_count(), K = c.kernel_size;
  std::vector<ParamSpec> specs;
  auto matrix = [&](std::string name, t::Shape shape, std::size_t in, std::size_t out) {
    specs.push_back({std::move(name), std::move(shape), in, out, false});
  };
  auto zeros = [&](std::string name, t::Shape shape) {
    specs.push_back({std::move(name), std::move(shape), 0, 0, true});
  };

  matrix("embed.W_L", {dl, 2}, 2, dl);
  matrix("embed.W_p", {dp, players}, players, dp);
  matrix("embed.W_e", {d, dl + dp}, dl + dp, d);
  for (std::size_t l = 0; l < c.gnn_layers; ++l) {
    const auto prefix = "rgcn." + std::to_string(l) + ".";
    matrix(prefix + "basis", {B, d, d}, d, d);
    matrix(prefix + "coeff", {R, B}, B, R);
    matrix(prefix + "W_self", {d, d}, d, d);
  }
  if (!c.rgcn_pm_baseline) {
    if (c.no_dynamic) {
      matrix("dyn.W_gcn", {d, d}, d, d);
    } else {
      matrix("dyn.W_n", {d, d + dp}, d + dp, d);
      matrix("dyn.conv.weight", {K, d, d}, K * d, K * d);
      zeros("dyn.conv.bias", {d});
      matrix("dyn.lstm.W_ih", {4 * d, d}, d, 4 * d);
      matrix("dyn.lstm.W_hh", {4 * d, d}, d, 4 * d);
      zeros("dyn.lstm.bias", {4 * d});
    }
    if (!c.no_player_player) {
      matrix("pp.W_D", {d, d}, d, d);
      matrix("pp.W_a", {d, d}, d, d);
      matrix("pp.W_b", {d, d}, d, d);
      for (const char* v : {"pp.w_ha", "pp.w_hb", "pp.w_ahat", "pp.w_bhat"})
        matrix(v, {d}, d, 1);
    }
    if (!c.no_style_weight) matrix("pr.w_S", {d}, d, 1);
    if (!c.no_rally_weight) matrix("pr.w_Z", {d}, d, 1);
  }
  matrix("head.W_s", {data::kShotTypeCount, 2 * d}, 2 * d, data::kShotTypeCount);
  matrix("head.W_BG", {10, 2 * d}, 2 * d, 10);
  return specs;
}

t::SparseMatrix relation_matrix(const graph::PMGraph& g, graph::Relation r) {
  const auto& lists = g.adjacency(r);
  t::SparseMatrix s;
  s.rows = s.cols = g.nodes().size();
  for (std::size_t i = 0; i < lists.size(); ++i)
    for (auto j : lists[i]) s.entries.push_back({i, j, 1.0});
  return s;
}

// Symmetric-normalized path graph with self-loops over one player's steps.
t::SparseMatrix path_norm(std::size_t len) {
  t::SparseMatrix s;
  s.rows = s.cols = len;
  auto degree = [len](std::size_t i) {
    return 1.0 + (i > 0 ? 1.0 : 0.0) + (i + 1 < len ? 1.0 : 0.0);
  };
  for (std::size_t i = 0; i < len; ++i) {
    const std::size_t lo = i == 0 ? 0 : i - 1;
    const std::size_t hi = std::min(len - 1, i + 1);
    for (std::size_t j = lo; j <= hi; ++j)
      s.entries.push_back({i, j, 1.0 / std::sqrt(degree(i) * degree(j))});
  }
  return s;
}

Var column(const Var& v) { return t::reshape(v, {v.value().size(), 1}); }

}  // namespace

// ---------------------------------------------------------------------------
// configuration

void ModelConfig::check() const {
  if (location_dim == 0 || player_dim == 0 || node_dim == 0) {
    throw ConfigError("model dimensions must be positive");
  }
  if (gnn_layers == 0) throw ConfigError("at least one relational layer is required");
  if (basis_count == 0) throw ConfigError("basis count must be >= 1");
  if (kernel_size % 2 == 0) {
    throw ConfigError("kernel size must be odd, got " + std::to_string(kernel_size));
  }
  if (lstm_layers != 1) throw ConfigError("only a single LSTM layer is supported");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
  if (rgcn_pm_baseline && (no_dynamic || no_player_player || no_rally_weight || no_style_weight)) {
    throw ConfigError("the relational baseline cannot be combined with fusion ablations");
  }
}

std::size_t ModelConfig::relation_count() const {
  return complete_graph ? graph::kRelationCountWithDummy : graph::kRelationCount;
}

std::string ModelConfig::variant_name() const {
  for (auto name : kVariants) {
    auto v = variant(name);
    v.location_dim = location_dim;
    v.player_dim = player_dim;
    v.node_dim = node_dim;
    v.gnn_layers = gnn_layers;
    v.basis_count = basis_count;
    v.kernel_size = kernel_size;
    v.lstm_layers = lstm_layers;
    v.dropout = dropout;
    if (v == *this) return std::string(name);
  }
  return "custom";
}

ModelConfig ModelConfig::variant(std::string_view name) {
  ModelConfig c;
  if (name == "full") return c;
  if (name == "noDynamic") {
    c.no_dynamic = true;
  } else if (name == "noPlayerPlayer") {
    c.no_player_player = true;
  } else if (name == "noRallyWeight") {
    c.no_rally_weight = true;
  } else if (name == "noStyleWeight") {
    c.no_style_weight = true;
  } else if (name == "completeGraph") {
    c.complete_graph = true;
  } else if (name == "rgcnPmBaseline") {
    c.rgcn_pm_baseline = true;
  } else {
    throw ConfigError("unknown model variant '" + std::string(name) + "'");
  }
  return c;
}

ModelConfig ModelConfig::with_dims(std::size_t d) {
  ModelConfig c;
  c.location_dim = c.player_dim = c.node_dim = d;
  return c;
}

const std::array<std::string_view, 7>& variant_names() { return kVariants; }

ParameterSet init_parameters(const ModelConfig& config, std::size_t player_count,
                             std::uint64_t seed) {
  config.check();
  if (player_count == 0) throw ConfigError("player vocabulary is empty");
  // One stream per parameter name, so ablations do not shift the others.
  const Rng root = Rng(seed).substream("init");
  ParameterSet params;
  for (auto& layout : parameter_specs(config, player_count)) {
    Tensor value(layout.shape);
    if (!layout.zero) {
      Rng rng = root.substream(layout.name);
      const double a = std::sqrt(6.0 / static_cast<double>(layout.fan_in + layout.fan_out));
      for (auto& v : value.values()) v = rng.uniform(-a, a);
    }
    params.add(layout.name, std::move(value));
  }
  return params;
}

void check_parameters(const ModelConfig& config, std::size_t player_count,
                      const ParameterSet& params) {
  const auto specs = parameter_specs(config, player_count);
  if (specs.size() != params.size()) {
    throw ConfigError("expected " + std::to_string(specs.size()) + " parameter tensors, got " +
                      std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto& e = params.entries()[i];
    if (e.name != specs[i].name || e.value.shape() != specs[i].shape) {
      throw ConfigError("parameter " + std::to_string(i) + " is '" + e.name + "' " +
                        e.value.shape_string() + ", expected '" + specs[i].name + "' " +
                        t::shape_string(specs[i].shape));
    }
  }
}

// ---------------------------------------------------------------------------
// gaussian head

Gaussian to_gaussian(std::span<const double> raw) {
  if (raw.size() != 5) {
    throw DimensionError("gaussian head needs 5 values, got " + std::to_string(raw.size()));
  }
  Gaussian g;
  g.mu_x = raw[0];
  g.mu_y = raw[1];
  g.sigma_x = std::exp(std::clamp(raw[2], t::kMinLogSigma, t::kMaxLogSigma));
  g.sigma_y = std::exp(std::clamp(raw[3], t::kMinLogSigma, t::kMaxLogSigma));
  g.rho = t::kRhoScale * std::tanh(raw[4]);
  return g;
}

double gaussian_nll(const Gaussian& g, double x, double y) {
  if (!(g.sigma_x > 0.0 && g.sigma_y > 0.0 && std::abs(g.rho) < 1.0)) {
    throw ContractError("invalid bivariate gaussian");
  }
  const double u = (x - g.mu_x) / g.sigma_x;
  const double v = (y - g.mu_y) / g.sigma_y;
  const double omega = 1.0 - g.rho * g.rho;
  const double q = u * u + v * v - 2.0 * g.rho * u * v;
  return std::log(2.0 * std::numbers::pi) + std::log(g.sigma_x) + std::log(g.sigma_y) +
         0.5 * std::log(omega) + q / (2.0 * omega);
}

data::Point sample(const Gaussian& g, Rng& rng) {
  const double z1 = rng.normal();
  const double z2 = rng.normal();
  return {g.mu_x + g.sigma_x * z1,
          g.mu_y + g.sigma_y * (g.rho * z1 + std::sqrt(1.0 - g.rho * g.rho) * z2)};
}

// ---------------------------------------------------------------------------
// network

Network::Network(Tape& tape, const ParameterSet& params, const ModelConfig& config,
                 bool trainable)
    : tape_(&tape), params_(&params), config_(config) {
  config_.check();
  if (!params.contains("embed.W_p")) throw ConfigError("parameter set has no player embedding");
  player_count_ = params.at("embed.W_p").cols();
  check_parameters(config_, player_count_, params);
  vars_.reserve(params.size());
  for (const auto& e : params.entries())
    vars_.push_back(trainable ? tape.leaf(e.value) : tape.constant(e.value));

  const auto d = config_.node_dim;
  auto& b = bound_;
  b.loc_t = t::transpose(param("embed.W_L"));
  b.player = param("embed.W_p");
  b.embed_t = t::transpose(param("embed.W_e"));
  for (std::size_t l = 0; l < config_.gnn_layers; ++l) {
    const auto prefix = "rgcn." + std::to_string(l) + ".";
    Layer layer;
    const auto basis = t::reshape(param(prefix + "basis"), {config_.basis_count, d * d});
    const auto composed = t::matmul(param(prefix + "coeff"), basis);
    for (std::size_t r = 0; r < config_.relation_count(); ++r)
      layer.relation_t.push_back(t::transpose(t::reshape(t::row(composed, r), {d, d})));
    layer.self_t = t::transpose(param(prefix + "W_self"));
    b.layers.push_back(std::move(layer));
  }
  if (!config_.rgcn_pm_baseline) {
    if (config_.no_dynamic) {
      b.gcn_t = t::transpose(param("dyn.W_gcn"));
    } else {
      b.dyn_in_t = t::transpose(param("dyn.W_n"));
      b.conv_weight = param("dyn.conv.weight");
      b.conv_bias = param("dyn.conv.bias");
      b.lstm = {param("dyn.lstm.W_ih"), param("dyn.lstm.W_hh"), param("dyn.lstm.bias")};
    }
    if (!config_.no_player_player) {
      b.co_d = param("pp.W_D");
      b.co_a_t = t::transpose(param("pp.W_a"));
      b.co_b_t = t::transpose(param("pp.W_b"));
      b.w_ha = column(param("pp.w_ha"));
      b.w_hb = column(param("pp.w_hb"));
      b.w_ahat = column(param("pp.w_ahat"));
      b.w_bhat = column(param("pp.w_bhat"));
    }
    if (!config_.no_style_weight) b.w_style = column(param("pr.w_S"));
    if (!config_.no_rally_weight) b.w_rally = column(param("pr.w_Z"));
  }
  b.shot_t = t::transpose(param("head.W_s"));
  b.loc_head_t = t::transpose(param("head.W_BG"));
}

const Var& Network::param(std::string_view name) const { return vars_[params_->index_of(name)]; }

ParameterSet Network::gradients() const {
  ParameterSet grads;
  const auto& entries = params_->entries();
  for (std::size_t i = 0; i < entries.size(); ++i)
    grads.add(entries[i].name, tape_->grad(vars_[i]));
  return grads;
}

// ---------------------------------------------------------------------------
// session

Session::Session(const Network& net, std::span<const data::Stroke> prefix,
                 SessionOptions options)
    : net_(&net), options_(options) {
  if (prefix.size() < 2) {
    throw ContractError("the encoder needs at least 2 observed strokes, got " +
                        std::to_string(prefix.size()));
  }
  if (options_.player_a >= net.player_count() || options_.player_b >= net.player_count()) {
    throw ContractError("player index outside the model vocabulary");
  }
  graph_ = graph::PMGraph::build_encoder(prefix);

  std::vector<data::Point> locations;
  std::vector<std::size_t> players;
  for (const auto& n : graph_.nodes()) {
    const auto& s = prefix[static_cast<std::size_t>(n.t - 1)];
    locations.push_back(n.side == Side::kA ? s.a : s.b);
    players.push_back(player_index(n.side));
  }
  const auto e = dropout(embed(locations, players));
  for (std::size_t i = 0; i < locations.size(); ++i) initial_.push_back(t::row(e, i));
  fused_.resize(initial_.size());

  const auto z = relational(e);
  const int tau = static_cast<int>(prefix.size());
  if (net_->config().rgcn_pm_baseline) {
    for (std::size_t i = 0; i < fused_.size(); ++i) fused_[i] = t::row(z, i);
  } else {
    for (int step = 1; step <= tau; ++step) {
      const int steps[] = {step};
      fuse(z, step, steps, false);
    }
  }
  last_a_ = prefix.back().a;
  last_b_ = prefix.back().b;
}

std::size_t Session::player_index(Side side) const {
  return side == Side::kA ? options_.player_a : options_.player_b;
}

const Var& Session::fused(Side side, int step) const { return fused_[graph_.node(side, step)]; }

const Var& Session::initial(Side side, int step) const {
  return initial_[graph_.node(side, step)];
}

Var Session::embed(std::span<const data::Point> locations,
                   std::span<const std::size_t> players) const {
  const auto& b = net_->bound();
  std::vector<double> coords;
  coords.reserve(2 * locations.size());
  for (const auto& p : locations) {
    coords.push_back(p.x);
    coords.push_back(p.y);
  }
  const auto loc = net_->tape().constant(Tensor({locations.size(), 2}, std::move(coords)));
  const auto hidden = t::relu(t::matmul(loc, b.loc_t));
  const auto player = t::gather_cols(b.player, players);
  return t::matmul(t::concat(hidden, player), b.embed_t);
}

Var Session::embed_node(Side side, data::Point location) const {
  const std::size_t player[] = {player_index(side)};
  return dropout(embed(std::span(&location, 1), player));
}

Var Session::dropout(const Var& v) const {
  const double p = net_->config().dropout;
  if (!options_.dropout || p == 0.0) return v;
  Tensor mask(v.value().shape());
  const double keep = 1.0 / (1.0 - p);
  for (auto& m : mask.values()) m = options_.dropout->bernoulli(p) ? 0.0 : keep;
  return t::mul_constant(v, mask);
}

Var Session::relational(const Var& first_layer) const {
  const auto& cfg = net_->config();
  const auto& b = net_->bound();
  graph::PMGraph completed;
  const graph::PMGraph* g = &graph_;
  if (cfg.complete_graph) {
    completed = graph_.completed();
    g = &completed;
  }
  std::vector<t::SparseMatrix> adjacency;
  std::vector<std::size_t> used;
  for (std::size_t r = 0; r < cfg.relation_count(); ++r) {
    auto s = relation_matrix(*g, graph::relation_from_index(r));
    if (s.entries.empty()) continue;  // no messages, and no gradient for W^r
    adjacency.push_back(std::move(s));
    used.push_back(r);
  }
  Var h = first_layer;
  for (std::size_t l = 0; l < b.layers.size(); ++l) {
    const auto& layer = b.layers[l];
    Var acc = t::matmul(h, layer.self_t);
    for (std::size_t i = 0; i < used.size(); ++i)
      acc = t::add(acc, t::matmul(t::spmm(adjacency[i], h), layer.relation_t[used[i]]));
    h = dropout(l + 1 == b.layers.size() ? t::sigmoid(acc) : t::relu(acc));
  }
  return h;
}

Var Session::dynamic_side(const Var& inputs, Side side) const {
  const auto& cfg = net_->config();
  const auto& b = net_->bound();
  const auto len = inputs.value().rows();
  const auto norm = path_norm(len);
  if (cfg.no_dynamic) return dropout(t::relu(t::spmm(norm, t::matmul(inputs, b.gcn_t))));
  const std::size_t player[] = {player_index(side)};
  const auto p = t::gather_cols(b.player, player);
  const auto n = t::matmul(t::concat(inputs, t::repeat_row(p, len)), b.dyn_in_t);
  const auto patterns = t::conv1d_same(n, b.conv_weight, b.conv_bias);
  const auto q = t::lstm_sequence(patterns, b.lstm);
  return dropout(t::relu(t::spmm(norm, t::mul(q, n))));
}

std::pair<Var, Var> Session::player_player(const Var& da, const Var& db) const {
  const auto& b = net_->bound();
  const auto g = t::tanh(t::matmul(t::matmul(da, b.co_d), t::transpose(db)));
  const auto pa = t::matmul(da, b.co_a_t);
  const auto pb = t::matmul(db, b.co_b_t);
  const auto ha = t::tanh(t::add(pa, t::matmul(g, pb)));
  const auto hb = t::tanh(t::add(pb, t::matmul(t::transpose(g), pa)));
  const auto att_a = t::softmax(t::matmul(ha, b.w_ha), 0);
  const auto att_b = t::softmax(t::matmul(hb, b.w_hb), 0);
  const auto a_hat = t::matmul(t::transpose(att_a), da);
  const auto b_hat = t::matmul(t::transpose(att_b), db);
  const auto f_a = t::sigmoid(t::matmul(a_hat, b.w_ahat));
  const auto f_b = t::sigmoid(t::matmul(b_hat, b.w_bhat));
  return {t::add(t::scalar_mul(f_b, db), da), t::add(t::scalar_mul(f_a, da), db)};
}

Var Session::player_rally(const Var& d_prime, const Var& z) const {
  const auto& b = net_->bound();
  const auto style = b.w_style.valid()
                         ? t::scalar_mul(t::sigmoid(t::matmul(d_prime, b.w_style)), d_prime)
                         : d_prime;
  const auto rally =
      b.w_rally.valid() ? t::scalar_mul(t::sigmoid(t::matmul(z, b.w_rally)), z) : z;
  return t::add(style, rally);
}

Var Session::first_layer_states() const {
  std::vector<Var> rows;
  rows.reserve(initial_.size());
  for (std::size_t i = 0; i < initial_.size(); ++i)
    rows.push_back(fused_[i].valid() ? fused_[i] : initial_[i]);
  return t::stack_rows(rows);
}

Var Session::sequence(Side side, int upto, bool use_fused) const {
  std::vector<Var> rows;
  for (int step = 1; step <= upto; ++step) {
    const auto id = graph_.node(side, step);
    rows.push_back(use_fused && fused_[id].valid() ? fused_[id] : initial_[id]);
  }
  return t::stack_rows(rows);
}

void Session::fuse(const Var& z, int upto, std::span<const int> steps, bool use_fused) {
  const auto da = dynamic_side(sequence(Side::kA, upto, use_fused), Side::kA);
  const auto db = dynamic_side(sequence(Side::kB, upto, use_fused), Side::kB);
  const auto [pa, pb] =
      net_->config().no_player_player ? std::pair{da, db} : player_player(da, db);
  for (int step : steps) {
    const auto r = static_cast<std::size_t>(step - 1);
    const auto ia = graph_.node(Side::kA, step);
    const auto ib = graph_.node(Side::kB, step);
    fused_[ia] = player_rally(t::row(pa, r), t::row(z, ia));
    fused_[ib] = player_rally(t::row(pb, r), t::row(z, ib));
  }
}

Var Session::predict_next_shot(data::Point last_a, data::Point last_b) {
  const auto id = graph_.begin_decoder_step();
  last_a_ = last_a;
  last_b_ = last_b;
  const int k = graph_.cursor();
  const auto receiver = graph::hitter(k);
  initial_.push_back(embed_node(receiver, receiver == Side::kA ? last_a_ : last_b_));
  fused_.emplace_back();

  const auto z = relational(first_layer_states());
  const auto striker = t::row(z, graph_.node(graph::hitter(k - 1), k - 1));
  return t::matmul(t::concat(striker, t::row(z, id)), net_->bound().shot_t);
}

LocationHeads Session::commit_shot(data::ShotType shot) {
  const int k = graph_.cursor();
  graph_.commit_shot(shot);
  const auto striker = graph::hitter(k - 1);
  initial_.push_back(embed_node(striker, striker == Side::kA ? last_a_ : last_b_));
  fused_.emplace_back();

  const auto z = relational(first_layer_states());
  if (net_->config().rgcn_pm_baseline) {
    for (int step : {k - 1, k})
      for (auto side : {Side::kA, Side::kB}) {
        const auto id = graph_.node(side, step);
        fused_[id] = t::row(z, id);
      }
  } else {
    const int steps[] = {k - 1, k};
    fuse(z, k, steps, true);
  }
  const auto raw = t::matmul(t::concat(fused(Side::kA, k), fused(Side::kB, k)),
                             net_->bound().loc_head_t);
  graph_.finish_step();
  return {t::slice_cols(raw, 0, 5), t::slice_cols(raw, 5, 10)};
}

// ---------------------------------------------------------------------------
// losses

std::size_t masked_argmax(std::span<const double> logits, std::span<const bool> mask) {
  std::optional<std::size_t> best;
  for (std::size_t c = 0; c < logits.size(); ++c) {
    if (!mask.empty() && mask[c]) continue;
    if (!best || logits[c] > logits[*best]) best = c;
  }
  if (!best) throw DimensionError("argmax over an empty support");
  return *best;
}

std::array<bool, data::kShotTypeCount> shot_mask(int stroke) {
  std::array<bool, data::kShotTypeCount> mask{};
  if (stroke >= 2)
    for (auto s : data::all_shots()) mask[data::shot_index(s)] = data::is_serve(s);
  return mask;
}

namespace {

Var sum_terms(std::span<const Var> terms) { return t::sum(t::stack_rows(terms)); }

void check_terms(std::span<const Var> shots, std::span<const Var> a, std::span<const Var> b) {
  if (shots.empty() || shots.size() != a.size() || shots.size() != b.size()) {
    throw ContractError("loss terms misaligned: " + std::to_string(shots.size()) + " shot, " +
                        std::to_string(a.size()) + " / " + std::to_string(b.size()) +
                        " location terms");
  }
}

Var combine(const Var& shot, const Var& a, const Var& b) {
  return t::add(shot, t::add(t::scale(a, 0.5), t::scale(b, 0.5)));
}

}  // namespace

Var total_loss(std::span<const Var> shot_terms, std::span<const Var> loc_a_terms,
               std::span<const Var> loc_b_terms) {
  check_terms(shot_terms, loc_a_terms, loc_b_terms);
  return combine(sum_terms(shot_terms), sum_terms(loc_a_terms), sum_terms(loc_b_terms));
}

TeacherForced teacher_forced_loss(const Network& net, const data::Rally& rally, std::size_t tau,
                                  SessionOptions options) {
  const auto n = rally.size();
  if (tau < 2 || n < tau + 1) {
    throw ContractError("rally " + rally.rally_id + " has " + std::to_string(n) +
                        " strokes; teacher forcing needs at least tau + 1 = " +
                        std::to_string(tau + 1));
  }
  const std::span<const data::Stroke> strokes(rally.strokes);
  Session session(net, strokes.first(tau), options);
  std::vector<Var> shot_terms, loc_a, loc_b;
  TeacherForced out;
  for (std::size_t k = tau + 1; k <= n; ++k) {
    const auto& prev = strokes[k - 2];
    const auto& cur = strokes[k - 1];
    const auto logits = session.predict_next_shot(prev.a, prev.b);
    const auto mask = shot_mask(static_cast<int>(k - 1));
    const auto log_p = t::log_softmax(logits, mask);
    const auto target = data::shot_index(prev.shot);
    shot_terms.push_back(t::scale(t::pick(log_p, 0, target), -1.0));

    const auto best = masked_argmax(logits.value().values(), mask);
    if (best == target) ++out.correct_shots;

    const auto heads = session.commit_shot(prev.shot);
    loc_a.push_back(t::bivariate_nll(heads.a, cur.a.x, cur.a.y));
    loc_b.push_back(t::bivariate_nll(heads.b, cur.b.x, cur.b.y));
  }
  out.predictions = shot_terms.size();
  out.shot_loss = sum_terms(shot_terms);
  out.loc_a_loss = sum_terms(loc_a);
  out.loc_b_loss = sum_terms(loc_b);
  out.loss = combine(out.shot_loss, out.loc_a_loss, out.loc_b_loss);
  return out;
}

}  // namespace rallycast::model
