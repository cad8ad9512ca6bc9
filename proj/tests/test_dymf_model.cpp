#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <sstream>

#include "rallycast/checkpoint.hpp"
#include "rallycast/errors.hpp"
#include "rallycast/evaluate.hpp"
#include "rallycast/model.hpp"
#include "rallycast/train.hpp"
#include "support.hpp"

using namespace rallycast;
using namespace rallycast::model;
using data::Point;
using data::ShotType;
using data::Stroke;
using graph::Side;

namespace {

using Vec = std::vector<double>;

Tensor& mut(ParameterSet& p, std::string_view name) {
  return p.entries()[p.index_of(name)].value;
}

void fill_random(ParameterSet& p, Rng& rng, double range = 1.0) {
  for (auto& e : p.entries())
    for (auto& v : e.value.values()) v = rng.uniform(-range, range);
}

void fill_zero(ParameterSet& p) {
  for (auto& e : p.entries())
    for (auto& v : e.value.values()) v = 0.0;
}

ModelConfig small(std::string_view variant, std::size_t d = 2) {
  auto c = ModelConfig::variant(variant);
  c.location_dim = c.player_dim = c.node_dim = d;
  c.dropout = 0.0;
  return c;
}

std::vector<Stroke> random_strokes(std::size_t n, Rng& rng) {
  std::vector<Stroke> out;
  for (std::size_t t = 1; t <= n; ++t) {
    ShotType shot;
    if (t == 1) {
      shot = rng.bernoulli(0.5) ? ShotType::kShortService : ShotType::kLongService;
    } else {
      do {
        shot = data::shot_from_index(rng.below(data::kShotTypeCount));
      } while (data::is_serve(shot));
    }
    out.push_back({static_cast<int>(t),
                   {rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5)},
                   {rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5)},
                   shot});
  }
  return out;
}

Vec row_of(const Var& v) { return {v.value().values().begin(), v.value().values().end()}; }

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Plain-loop re-implementation of the network, one vector per node.
class Oracle {
 public:
  Oracle(const ParameterSet& p, const ModelConfig& c, std::size_t pa, std::size_t pb)
      : p_(p), c_(c), d_(c.node_dim), players_{pa, pb} {}

  void encode(const graph::PMGraph& g, std::span<const Stroke> prefix) {
    for (const auto& n : g.nodes()) {
      const auto& s = prefix[static_cast<std::size_t>(n.t - 1)];
      initial_.push_back(embed(n.side == Side::kA ? s.a : s.b, player(n.side)));
    }
    fused_.assign(initial_.size(), std::nullopt);
    const auto z = relational(g, initial_);
    if (c_.rgcn_pm_baseline) {
      for (std::size_t i = 0; i < z.size(); ++i) fused_[i] = z[i];
    } else {
      for (int step = 1; step <= static_cast<int>(prefix.size()); ++step)
        fuse(g, z, step, {step}, false);
    }
    last_ = {prefix.back().a, prefix.back().b};
  }

  // `g` already holds the new receiver node.
  Vec predict(const graph::PMGraph& g, Point a, Point b) {
    last_ = {a, b};
    const int k = g.cursor();
    const auto receiver = graph::hitter(k);
    initial_.push_back(embed(receiver == Side::kA ? a : b, player(receiver)));
    fused_.push_back(std::nullopt);
    const auto z = relational(g, first_layer());
    return linear("head.W_s", concat(z[g.node(graph::hitter(k - 1), k - 1)], z.back()));
  }

  // `g` is the graph after the commit.
  Vec commit(const graph::PMGraph& g) {
    const int k = g.cursor();
    const auto striker = graph::hitter(k - 1);
    initial_.push_back(embed(striker == Side::kA ? last_.first : last_.second, player(striker)));
    fused_.push_back(std::nullopt);
    const auto z = relational(g, first_layer());
    if (c_.rgcn_pm_baseline) {
      for (int step : {k - 1, k})
        for (auto side : {Side::kA, Side::kB}) fused_[g.node(side, step)] = z[g.node(side, step)];
    } else {
      fuse(g, z, k, {k - 1, k}, true);
    }
    return linear("head.W_BG", concat(*fused_[g.node(Side::kA, k)], *fused_[g.node(Side::kB, k)]));
  }

  const Vec& initial(std::size_t id) const { return initial_[id]; }
  const std::optional<Vec>& fused(std::size_t id) const { return fused_[id]; }

 private:
  std::size_t player(Side s) const { return s == Side::kA ? players_[0] : players_[1]; }

  const Tensor& P(std::string_view name) const { return p_.at(name); }

  // W (rows x cols, flat from `offset`) times x.
  static Vec matvec(const Tensor& w, const Vec& x, std::size_t rows, std::size_t offset = 0) {
    const auto cols = x.size();
    Vec out(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) out[r] += w[offset + r * cols + c] * x[c];
    return out;
  }
  Vec linear(std::string_view name, const Vec& x) const {
    return matvec(P(name), x, P(name).shape()[0]);
  }
  static Vec concat(const Vec& a, const Vec& b) {
    Vec out = a;
    out.insert(out.end(), b.begin(), b.end());
    return out;
  }
  static double dot(const Vec& a, const Vec& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
  }
  Vec player_column(std::size_t idx) const {
    const auto& w = P("embed.W_p");
    Vec out(c_.player_dim);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = w[i * w.shape()[1] + idx];
    return out;
  }
  Vec vec(std::string_view name) const { return {P(name).values().begin(), P(name).values().end()}; }

  Vec embed(Point loc, std::size_t who) const {
    Vec h = matvec(P("embed.W_L"), {loc.x, loc.y}, c_.location_dim);
    for (auto& v : h) v = std::max(0.0, v);
    return linear("embed.W_e", concat(h, player_column(who)));
  }

  std::vector<Vec> first_layer() const {
    std::vector<Vec> out;
    for (std::size_t i = 0; i < initial_.size(); ++i)
      out.push_back(fused_[i] ? *fused_[i] : initial_[i]);
    return out;
  }

  std::vector<Vec> relational(const graph::PMGraph& graph, std::vector<Vec> h) const {
    const auto g = c_.complete_graph ? graph.completed() : graph;
    const auto B = c_.basis_count, R = c_.relation_count();
    for (std::size_t l = 0; l < c_.gnn_layers; ++l) {
      const auto prefix = "rgcn." + std::to_string(l) + ".";
      const auto& basis = P(prefix + "basis");
      const auto& coeff = P(prefix + "coeff");
      std::vector<Tensor> wr(R, Tensor({d_ * d_}));
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t i = 0; i < d_ * d_; ++i) wr[r][i] += coeff[r * B + b] * basis[b * d_ * d_ + i];
      std::vector<Vec> next;
      for (const auto& x : h) next.push_back(matvec(P(prefix + "W_self"), x, d_));
      for (const auto& e : g.edges()) {
        const auto& w = wr[graph::relation_index(e.relation)];
        const auto to_from = matvec(w, h[e.to], d_);
        const auto from_to = matvec(w, h[e.from], d_);
        for (std::size_t i = 0; i < d_; ++i) {
          next[e.from][i] += to_from[i];
          next[e.to][i] += from_to[i];
        }
      }
      const bool last = l + 1 == c_.gnn_layers;
      for (auto& x : next)
        for (auto& v : x) v = last ? sigmoid(v) : std::max(0.0, v);
      h = std::move(next);
    }
    return h;
  }

  std::vector<Vec> dynamic(const std::vector<Vec>& x, std::size_t who) const {
    const auto t = x.size();
    std::vector<Vec> n, q;
    if (c_.no_dynamic) {
      for (const auto& v : x) n.push_back(linear("dyn.W_gcn", v));
      q.assign(t, Vec(d_, 1.0));
    } else {
      for (const auto& v : x) n.push_back(linear("dyn.W_n", concat(v, player_column(who))));
      const auto& w = P("dyn.conv.weight");
      const auto& bias = P("dyn.conv.bias");
      const long K = static_cast<long>(c_.kernel_size), pad = K / 2;
      std::vector<Vec> conv(t, Vec(d_));
      for (long i = 0; i < static_cast<long>(t); ++i)
        for (std::size_t o = 0; o < d_; ++o) {
          double acc = bias[o];
          for (long k = 0; k < K; ++k) {
            const long src = i + k - pad;
            if (src < 0 || src >= static_cast<long>(t)) continue;
            for (std::size_t c = 0; c < d_; ++c)
              acc += w[(static_cast<std::size_t>(k) * d_ + o) * d_ + c] * n[src][c];
          }
          conv[i][o] = acc;
        }
      Vec h(d_, 0.0), cell(d_, 0.0);
      const auto& lb = P("dyn.lstm.bias");
      for (std::size_t i = 0; i < t; ++i) {
        auto gates = matvec(P("dyn.lstm.W_ih"), conv[i], 4 * d_);
        const auto rec = matvec(P("dyn.lstm.W_hh"), h, 4 * d_);
        for (std::size_t j = 0; j < 4 * d_; ++j) gates[j] += rec[j] + lb[j];
        for (std::size_t j = 0; j < d_; ++j) {
          const double ig = sigmoid(gates[j]), fg = sigmoid(gates[d_ + j]);
          const double gg = std::tanh(gates[2 * d_ + j]), og = sigmoid(gates[3 * d_ + j]);
          cell[j] = fg * cell[j] + ig * gg;
          h[j] = og * std::tanh(cell[j]);
        }
        q.push_back(h);
      }
    }
    auto deg = [t](std::size_t i) { return 1.0 + (i > 0) + (i + 1 < t); };
    std::vector<Vec> out(t, Vec(d_, 0.0));
    for (std::size_t i = 0; i < t; ++i) {
      for (std::size_t j = 0; j < t; ++j) {
        if (j + 1 < i || j > i + 1) continue;
        const double norm = 1.0 / std::sqrt(deg(i) * deg(j));
        for (std::size_t c = 0; c < d_; ++c) out[i][c] += norm * q[j][c] * n[j][c];
      }
      for (auto& v : out[i]) v = std::max(0.0, v);
    }
    return out;
  }

  std::pair<std::vector<Vec>, std::vector<Vec>> player_player(const std::vector<Vec>& da,
                                                              const std::vector<Vec>& db) const {
    const auto t = da.size();
    std::vector<Vec> G(t, Vec(t));
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = 0; j < t; ++j) G[i][j] = std::tanh(dot(da[i], matvec(P("pp.W_D"), db[j], d_)));
    std::vector<Vec> pa, pb;
    for (std::size_t i = 0; i < t; ++i) {
      pa.push_back(linear("pp.W_a", da[i]));
      pb.push_back(linear("pp.W_b", db[i]));
    }
    auto attention = [&](bool side_a) {
      const auto w = vec(side_a ? "pp.w_ha" : "pp.w_hb");
      Vec score(t);
      for (std::size_t i = 0; i < t; ++i) {
        Vec h = side_a ? pa[i] : pb[i];
        for (std::size_t j = 0; j < t; ++j)
          for (std::size_t c = 0; c < d_; ++c)
            h[c] += side_a ? G[i][j] * pb[j][c] : G[j][i] * pa[j][c];
        for (auto& v : h) v = std::tanh(v);
        score[i] = dot(w, h);
      }
      double mx = -std::numeric_limits<double>::infinity(), z = 0.0;
      for (auto s : score) mx = std::max(mx, s);
      for (auto& s : score) z += (s = std::exp(s - mx));
      for (auto& s : score) s /= z;
      return score;
    };
    const auto att_a = attention(true), att_b = attention(false);
    Vec a_hat(d_, 0.0), b_hat(d_, 0.0);
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t c = 0; c < d_; ++c) {
        a_hat[c] += att_a[i] * da[i][c];
        b_hat[c] += att_b[i] * db[i][c];
      }
    const double fa = sigmoid(dot(vec("pp.w_ahat"), a_hat));
    const double fb = sigmoid(dot(vec("pp.w_bhat"), b_hat));
    std::vector<Vec> oa = da, ob = db;
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t c = 0; c < d_; ++c) {
        oa[i][c] += fb * db[i][c];
        ob[i][c] += fa * da[i][c];
      }
    return {oa, ob};
  }

  Vec player_rally(const Vec& dp, const Vec& z) const {
    const double alpha = c_.no_style_weight ? 1.0 : sigmoid(dot(vec("pr.w_S"), dp));
    const double beta = c_.no_rally_weight ? 1.0 : sigmoid(dot(vec("pr.w_Z"), z));
    Vec out(d_);
    for (std::size_t c = 0; c < d_; ++c) out[c] = alpha * dp[c] + beta * z[c];
    return out;
  }

  void fuse(const graph::PMGraph& g, const std::vector<Vec>& z, int upto, std::vector<int> steps,
            bool use_fused) {
    auto seq = [&](Side side) {
      std::vector<Vec> rows;
      for (int s = 1; s <= upto; ++s) {
        const auto id = g.node(side, s);
        rows.push_back(use_fused && fused_[id] ? *fused_[id] : initial_[id]);
      }
      return rows;
    };
    auto da = dynamic(seq(Side::kA), players_[0]);
    auto db = dynamic(seq(Side::kB), players_[1]);
    if (!c_.no_player_player) std::tie(da, db) = player_player(da, db);
    for (int step : steps) {
      const auto ia = g.node(Side::kA, step), ib = g.node(Side::kB, step);
      fused_[ia] = player_rally(da[step - 1], z[ia]);
      fused_[ib] = player_rally(db[step - 1], z[ib]);
    }
  }

  const ParameterSet& p_;
  ModelConfig c_;
  std::size_t d_;
  std::size_t players_[2];
  std::vector<Vec> initial_;
  std::vector<std::optional<Vec>> fused_;
  std::pair<Point, Point> last_;
};

double max_diff(const Vec& a, const Vec& b) {
  REQUIRE(a.size() == b.size());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Written out per variant, independent of the parameter layout code.
std::size_t expected_count(std::string_view variant, std::size_t d, std::size_t np) {
  const auto c = ModelConfig::variant(variant);
  const std::size_t R = c.complete_graph ? 13 : 12, B = 3, K = 3;
  std::size_t n = 2 * d + d * np + d * 2 * d;      // W_L, W_p, W_e
  n += 2 * (B * d * d + R * B + d * d);            // two relational layers
  n += 2 * 10 * 2 * d;                             // shot and location heads
  if (c.rgcn_pm_baseline) return n;
  n += c.no_dynamic ? d * d : d * 2 * d + K * d * d + d + 8 * d * d + 4 * d;
  if (!c.no_player_player) n += 3 * d * d + 4 * d;
  if (!c.no_style_weight) n += d;
  if (!c.no_rally_weight) n += d;
  return n;
}

// -log of the density written directly.
double density_nll(const Gaussian& g, double x, double y) {
  const double dx = (x - g.mu_x) / g.sigma_x, dy = (y - g.mu_y) / g.sigma_y;
  const double om = 1.0 - g.rho * g.rho;
  const double pdf = std::exp(-(dx * dx - 2.0 * g.rho * dx * dy + dy * dy) / (2.0 * om)) /
                     (2.0 * std::numbers::pi * g.sigma_x * g.sigma_y * std::sqrt(om));
  return -std::log(pdf);
}

double masked_log_softmax(const Vec& logits, std::span<const bool> mask, std::size_t target) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < logits.size(); ++c)
    if (!mask[c]) mx = std::max(mx, logits[c]);
  double z = 0.0;
  for (std::size_t c = 0; c < logits.size(); ++c)
    if (!mask[c]) z += std::exp(logits[c] - mx);
  return logits[target] - mx - std::log(z);
}

}  // namespace

// ---------------------------------------------------------------------------

TEST_CASE("config validation") {
  CHECK_NOTHROW(ModelConfig{}.check());
  auto bad = [](auto edit) {
    ModelConfig c;
    edit(c);
    CHECK_THROWS_AS(c.check(), ConfigError);
  };
  bad([](ModelConfig& c) { c.node_dim = 0; });
  bad([](ModelConfig& c) { c.basis_count = 0; });
  bad([](ModelConfig& c) { c.kernel_size = 4; });
  bad([](ModelConfig& c) { c.lstm_layers = 2; });
  bad([](ModelConfig& c) { c.dropout = 1.0; });
  bad([](ModelConfig& c) { c.rgcn_pm_baseline = c.no_dynamic = true; });
  CHECK_THROWS_AS(ModelConfig::variant("noSuchThing"), ConfigError);
  for (auto name : variant_names()) CHECK(small(name).variant_name() == name);
  auto c = ModelConfig{};
  c.no_dynamic = c.no_style_weight = true;
  CHECK(c.variant_name() == "custom");
  CHECK(ModelConfig{}.relation_count() == 12);
  CHECK(ModelConfig::variant("completeGraph").relation_count() == 13);
}

TEST_CASE("parameter counts follow the closed forms") {
  for (std::size_t np : {1, 5, 40})
    for (auto name : variant_names()) {
      auto c = ModelConfig::variant(name);
      CAPTURE(name);
      CHECK(init_parameters(c, np, 0).scalar_count() == expected_count(name, 16, np));
      c.location_dim = c.player_dim = c.node_dim = 4;
      CHECK(init_parameters(c, np, 0).scalar_count() == expected_count(name, 4, np));
    }
  const std::size_t d = 16, np = 5;
  const auto full = init_parameters(ModelConfig{}, np, 0).scalar_count();
  auto count = [&](std::string_view v) {
    return init_parameters(ModelConfig::variant(v), np, 0).scalar_count();
  };
  // conv + LSTM + W_n out, one plain GCN weight in.
  CHECK(full - count("noDynamic") == (2 * d * d + 3 * d * d + d + 8 * d * d + 4 * d) - d * d);
  CHECK(full - count("noPlayerPlayer") == 3 * d * d + 4 * d);
  CHECK(full - count("noStyleWeight") == d);
  CHECK(full - count("noRallyWeight") == d);
  CHECK(count("completeGraph") - full == 2 * 3);
  CHECK_THROWS_AS(init_parameters(ModelConfig{}, 0, 0), ConfigError);
}

TEST_CASE("init is deterministic and per-name") {
  const auto a = init_parameters(ModelConfig{}, 4, 11);
  CHECK(a == init_parameters(ModelConfig{}, 4, 11));
  CHECK_FALSE(a == init_parameters(ModelConfig{}, 4, 12));
  const auto b = init_parameters(ModelConfig::variant("noPlayerPlayer"), 4, 11);
  CHECK(a.at("embed.W_e") == b.at("embed.W_e"));
  CHECK(a.at("dyn.lstm.bias").values()[0] == 0.0);
  CHECK_NOTHROW(check_parameters(ModelConfig{}, 4, a));
  CHECK_THROWS_AS(check_parameters(ModelConfig{}, 5, a), ConfigError);
  CHECK_THROWS_AS(check_parameters(ModelConfig::variant("noDynamic"), 4, a), ConfigError);
}

TEST_CASE("gaussian head examples") {
  const double zeros[5] = {};
  const auto g = to_gaussian(zeros);
  CHECK(g.mu_x == 0.0);
  CHECK(g.mu_y == 0.0);
  CHECK(g.sigma_x == 1.0);
  CHECK(g.sigma_y == 1.0);
  CHECK(g.rho == 0.0);
  const double log2pi = std::log(2.0 * std::numbers::pi);
  CHECK(std::abs(gaussian_nll(g, 0.0, 0.0) - 1.8378770664093453) < 1e-12);
  CHECK(std::abs(gaussian_nll(g, 0.0, 0.0) - log2pi) < 1e-12);
  for (double s : {0.01, 0.5, 3.0}) {
    const Gaussian gs{1.0, -2.0, s, s, 0.0};
    CHECK(std::abs(gaussian_nll(gs, 1.0, -2.0) - (log2pi + 2.0 * std::log(s))) < 1e-12);
  }
  CHECK_THROWS_AS(gaussian_nll(Gaussian{0, 0, 1, 1, 1.0}, 0, 0), ContractError);
  CHECK_THROWS_AS(to_gaussian(std::span<const double>(zeros, 4)), DimensionError);
}

TEST_CASE("gaussian head: constraint maps are total, nll matches the density") {
  Rng rng(21);
  for (int trial = 0; trial < 2000; ++trial) {
    const double scale = trial < 1000 ? 3.0 : 50.0;
    double raw[5];
    for (auto& r : raw) r = rng.uniform(-scale, scale);
    const auto g = to_gaussian(raw);
    CHECK(g.sigma_x >= 1e-3 * (1 - 1e-12));
    CHECK(g.sigma_x <= 1e3 * (1 + 1e-12));
    CHECK(g.sigma_y >= 1e-3 * (1 - 1e-12));
    CHECK(g.sigma_y <= 1e3 * (1 + 1e-12));
    CHECK(std::abs(g.rho) <= 0.999);
    if (trial >= 1000) continue;
    // Near the mean, so the plain density neither overflows nor underflows.
    const double x = g.mu_x + g.sigma_x * rng.uniform(-3, 3);
    const double y = g.mu_y + g.sigma_y * rng.uniform(-3, 3);
    const double nll = gaussian_nll(g, x, y);
    // exp() underflows past ~700 nats for near-degenerate rho.
    if (nll < 600) CHECK(std::abs(nll - density_nll(g, x, y)) < 1e-11 * std::max(1.0, std::abs(nll)));

    tensor::Tape tape;
    const auto v = tape.constant(Tensor({1, 5}, Vec(raw, raw + 5)));
    CHECK(std::abs(tensor::bivariate_nll(v, x, y).value()[0] - nll) < 1e-12 * std::max(1.0, nll));
  }
}

TEST_CASE("gaussian sampling moments") {
  const Gaussian g{0.3, -1.2, 0.7, 1.9, -0.6};
  Rng rng(99);
  const std::size_t n = 100000;
  double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto p = sample(g, rng);
    sx += p.x;
    sy += p.y;
    sxx += p.x * p.x;
    syy += p.y * p.y;
    sxy += p.x * p.y;
  }
  const double mx = sx / n, my = sy / n;
  const double vx = sxx / n - mx * mx, vy = syy / n - my * my;
  const double cor = (sxy / n - mx * my) / std::sqrt(vx * vy);
  CHECK(std::abs(mx - g.mu_x) < 4 * g.sigma_x / std::sqrt(double(n)));
  CHECK(std::abs(my - g.mu_y) < 4 * g.sigma_y / std::sqrt(double(n)));
  CHECK(std::abs(std::sqrt(vx) / g.sigma_x - 1.0) < 0.01);
  CHECK(std::abs(std::sqrt(vy) / g.sigma_y - 1.0) < 0.01);
  CHECK(std::abs(cor - g.rho) < 0.01);
}

TEST_CASE("shot mask and masked argmax") {
  for (bool m : shot_mask(1)) CHECK_FALSE(m);
  for (int k : {2, 3, 35}) {
    const auto mask = shot_mask(k);
    for (auto s : data::all_shots()) CHECK(mask[data::shot_index(s)] == data::is_serve(s));
  }
  const Vec logits = {0, 9, 1, 9, 2, 2, 2, 2, 2, 2};
  CHECK(masked_argmax(logits, {}) == 1);
  std::array<bool, 10> mask{};
  mask[1] = true;
  CHECK(masked_argmax(logits, mask) == 3);
  mask.fill(true);
  CHECK_THROWS_AS(masked_argmax(logits, mask), DimensionError);
}

TEST_CASE("embed: hand trace at d = 2") {
  const auto c = small("rgcnPmBaseline");
  auto p = init_parameters(c, 2, 0);
  fill_zero(p);
  mut(p, "embed.W_L") = Tensor({2, 2}, {1, 2, 3, -4});
  mut(p, "embed.W_p") = Tensor({2, 2}, {0.5, 7, -1, 7});
  mut(p, "embed.W_e") = Tensor({2, 4}, {1, 0, 1, 0, 0, 1, 0, 1});
  tensor::Tape tape;
  Network net(tape, p, c, false);
  const std::vector<Stroke> prefix = {{1, {1, 0}, {0, 1}, ShotType::kShortService},
                                      {2, {0, 0}, {0, 0}, ShotType::kClear}};
  Session s(net, prefix, {0, 1, nullptr});
  // relu(W_L (1,0)) = (1, 3); W_p column 0 = (0.5, -1).
  CHECK(row_of(s.initial(Side::kA, 1)) == Vec{1.5, 2.0});
  // relu(W_L (0,1)) = (2, 0); W_p column 1 = (7, 7).
  CHECK(row_of(s.initial(Side::kB, 1)) == Vec{9.0, 7.0});
}

TEST_CASE("all-zero weights") {
  Rng rng(3);
  const auto prefix = random_strokes(4, rng);
  for (auto name : {"rgcnPmBaseline", "full"}) {
    const auto c = small(name, 3);
    auto p = init_parameters(c, 3, 0);
    fill_zero(p);
    tensor::Tape tape;
    Network net(tape, p, c, false);
    Session s(net, prefix, {1, 2, nullptr});
    for (int t = 1; t <= 4; ++t)
      for (auto side : {Side::kA, Side::kB}) {
        CHECK(row_of(s.initial(side, t)) == Vec(3, 0.0));
        // Layer 2 is a sigmoid; fusion gates are sigmoid(0) on zero dynamic rows.
        const Vec want(3, std::string_view(name) == "full" ? 0.25 : 0.5);
        CHECK(row_of(s.fused(side, t)) == want);
      }
    const auto logits = s.predict_next_shot(prefix[3].a, prefix[3].b);
    CHECK(row_of(logits) == Vec(10, 0.0));
    const auto heads = s.commit_shot(ShotType::kLob);
    const auto g = to_gaussian(heads.a.value().values());
    CHECK(g.sigma_x == 1.0);
    CHECK(g.rho == 0.0);
  }
}

TEST_CASE("compose relation weight") {
  Rng rng(4);
  auto c = small("full", 3);
  auto p = init_parameters(c, 2, 1);
  fill_random(p, rng);
  {
    tensor::Tape tape;
    Network net(tape, p, c, false);
    const auto& basis = p.at("rgcn.1.basis");
    const auto& coeff = p.at("rgcn.1.coeff");
    for (std::size_t r = 0; r < 12; ++r) {
      const auto& w = net.bound().layers[1].relation_t[r].value();  // transposed
      for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
          double want = 0.0;
          for (std::size_t b = 0; b < 3; ++b) want += coeff[r * 3 + b] * basis[b * 9 + i * 3 + j];
          CHECK(std::abs(w.at(j, i) - want) < 1e-14);
        }
    }
  }
  c.basis_count = 1;
  auto p1 = init_parameters(c, 2, 1);
  fill_random(p1, rng);
  for (auto& v : mut(p1, "rgcn.0.coeff").values()) v = 1.0;
  for (std::size_t r = 0; r < 12; ++r) mut(p1, "rgcn.1.coeff")[r] = 0.0;
  tensor::Tape tape;
  Network net(tape, p1, c, false);
  const auto& m0 = p1.at("rgcn.0.basis");
  for (std::size_t r = 0; r < 12; ++r) {
    const auto& w0 = net.bound().layers[0].relation_t[r].value();
    const auto& w1 = net.bound().layers[1].relation_t[r].value();
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j) {
        CHECK(w0.at(j, i) == m0[i * 3 + j]);
        CHECK(w1.at(j, i) == 0.0);
      }
  }
}

TEST_CASE("equal coefficients make relation labels irrelevant") {
  Rng rng(5);
  for (auto name : {"rgcnPmBaseline", "full"}) {
    const auto c = small(name, 3);
    auto p = init_parameters(c, 3, 0);
    fill_random(p, rng);
    for (std::size_t l = 0; l < 2; ++l) {
      auto& coeff = mut(p, "rgcn." + std::to_string(l) + ".coeff");
      for (std::size_t r = 1; r < 12; ++r)
        for (std::size_t b = 0; b < 3; ++b) coeff[r * 3 + b] = coeff[b];
    }
    auto a = random_strokes(6, rng);
    auto b = a;
    b[0].shot = a[0].shot == ShotType::kLongService ? ShotType::kShortService
                                                    : ShotType::kLongService;
    for (std::size_t i = 1; i < b.size(); ++i) b[i].shot = ShotType::kDrive;
    tensor::Tape tape;
    Network net(tape, p, c, false);
    Session sa(net, a, {1, 2, nullptr}), sb(net, b, {1, 2, nullptr});
    for (int t = 1; t <= 6; ++t)
      for (auto side : {Side::kA, Side::kB})
        CHECK(max_diff(row_of(sa.fused(side, t)), row_of(sb.fused(side, t))) < 1e-12);
  }
}

TEST_CASE("network matches the dense-loop oracle for every variant") {
  Rng rng(6);
  for (auto name : variant_names()) {
    for (std::size_t d : {2, 3}) {
      CAPTURE(name);
      CAPTURE(d);
      const auto c = small(name, d);
      auto p = init_parameters(c, 4, 0);
      fill_random(p, rng);
      const std::size_t tau = 3 + rng.below(3), h = 3;
      const auto rally = random_strokes(tau + h, rng);
      const std::span<const Stroke> all(rally);
      tensor::Tape tape;
      Network net(tape, p, c, false);
      Session s(net, all.first(tau), {1, 3, nullptr});
      Oracle o(p, c, 1, 3);
      o.encode(s.graph(), all.first(tau));
      for (std::size_t id = 0; id < s.graph().nodes().size(); ++id) {
        const auto& n = s.graph().nodes()[id];
        CHECK(max_diff(row_of(s.initial(n.side, n.t)), o.initial(id)) < 1e-12);
        REQUIRE(o.fused(id));
        CHECK(max_diff(row_of(s.fused(n.side, n.t)), *o.fused(id)) < 1e-12);
      }
      for (std::size_t k = tau + 1; k <= tau + h; ++k) {
        const auto& prev = rally[k - 2];
        const auto logits = s.predict_next_shot(prev.a, prev.b);
        CHECK(max_diff(row_of(logits), o.predict(s.graph(), prev.a, prev.b)) < 1e-12);
        const auto heads = s.commit_shot(prev.shot);
        const auto raw = o.commit(s.graph());
        auto got = row_of(heads.a);
        const auto bvals = row_of(heads.b);
        got.insert(got.end(), bvals.begin(), bvals.end());
        CHECK(max_diff(got, raw) < 1e-12);
      }
    }
  }
}

TEST_CASE("shared location and player embeddings") {
  const auto c = small("full", 3);
  auto p = init_parameters(c, 3, 2);
  std::size_t named = 0;
  for (const auto& e : p.entries()) named += e.name.find("W_L") != std::string::npos;
  CHECK(named == 1);

  Rng rng(7);
  const auto rally = random_strokes(5, rng);
  auto run = [&](const ParameterSet& params) {
    tensor::Tape tape;
    Network net(tape, params, c, false);
    Session s(net, std::span(rally).first(4), {1, 2, nullptr});
    s.predict_next_shot(rally[3].a, rally[3].b);
    s.commit_shot(rally[3].shot);
    return std::pair{row_of(s.initial(Side::kA, 1)), row_of(s.initial(Side::kB, 5))};
  };
  const auto before = run(p);
  mut(p, "embed.W_L")[0] += 0.5;
  mut(p, "embed.W_L")[3] -= 0.25;
  const auto after = run(p);
  CHECK(before.first != after.first);
  CHECK(before.second != after.second);

  // A gradient from a decoder node alone reaches the single W_L.
  tensor::Tape tape;
  Network net(tape, p, c, true);
  Session s(net, std::span(rally).first(4), {1, 2, nullptr});
  s.predict_next_shot(rally[3].a, rally[3].b);
  tape.backward(tensor::sum(s.initial(Side::kA, 5)));
  double g = 0.0;
  for (double v : net.gradients().at("embed.W_L").values()) g += std::abs(v);
  CHECK(g > 0.0);
}

TEST_CASE("decoder step examples") {
  Rng rng(8);
  const auto c = small("full", 4);
  auto p = init_parameters(c, 3, 3);
  const auto rally = random_strokes(8, rng);
  tensor::Tape tape;
  Network net(tape, p, c, false);
  Session s(net, std::span(rally).first(4), {1, 2, nullptr});
  CHECK(s.graph().nodes().size() == 8);
  CHECK(s.graph().edges().size() == 9);
  CHECK_THROWS_AS(s.commit_shot(ShotType::kLob), StateError);
  const auto logits = s.predict_next_shot(rally[3].a, rally[3].b);
  CHECK(logits.value().shape() == tensor::Shape{1, 10});
  CHECK_THROWS_AS(s.predict_next_shot(rally[3].a, rally[3].b), StateError);
  s.commit_shot(ShotType::kLob);
  CHECK(s.graph().nodes().size() == 10);
  CHECK(s.graph().edges().size() == 12);
  CHECK(s.cursor() == 5);
  const auto striker = s.graph().node(Side::kB, 4);
  std::size_t lob = 0;
  for (const auto& e : s.graph().edges())
    if (e.relation == graph::shot_relation(ShotType::kLob) && (e.from == striker || e.to == striker))
      ++lob;
  CHECK(lob == 1);
  for (int t = 1; t <= 5; ++t)
    for (auto side : {Side::kA, Side::kB}) CHECK(s.fused(side, t).value().size() == 4);

  for (std::size_t horizon : {1, 3, 7}) {
    const auto r = eval::rollout(s, {rally[4].a, rally[4].b}, horizon, nullptr);
    CHECK(r.shots.size() == horizon);
    CHECK(r.logits.size() == horizon);
    CHECK(r.gaussians_a.size() == horizon);
    CHECK(r.gaussians_b.size() == horizon);
    CHECK(r.locations.size() == horizon);
  }
  CHECK(s.cursor() == 5);

  CHECK_THROWS_AS(Session(net, std::span(rally).first(1), {}), ContractError);
  CHECK_THROWS_AS(Session(net, std::span(rally).first(3), {3, 0, nullptr}), ContractError);
}

TEST_CASE("encoder is deterministic bitwise") {
  Rng rng(9);
  const auto rally = random_strokes(6, rng);
  const auto c = small("full", 5);
  const auto p = init_parameters(c, 3, 4);
  auto run = [&] {
    tensor::Tape tape;
    Network net(tape, p, c, false);
    Session s(net, rally, {1, 2, nullptr});
    std::vector<Vec> out;
    for (int t = 1; t <= 6; ++t)
      for (auto side : {Side::kA, Side::kB}) out.push_back(row_of(s.fused(side, t)));
    return out;
  };
  CHECK(run() == run());
}

TEST_CASE("baseline fused embedding is the last relational layer") {
  Rng rng(10);
  const auto c = small("rgcnPmBaseline", 3);
  auto p = init_parameters(c, 3, 0);
  fill_random(p, rng);
  const auto rally = random_strokes(5, rng);
  tensor::Tape tape;
  Network net(tape, p, c, false);
  Session s(net, rally, {1, 2, nullptr});
  for (int t = 1; t <= 5; ++t)
    for (auto side : {Side::kA, Side::kB})
      for (double v : s.fused(side, t).value().values()) {
        CHECK(v > 0.0);  // sigmoid range
        CHECK(v < 1.0);
      }
}

TEST_CASE("teacher-forced loss equals a by-hand sum") {
  Rng rng(11);
  for (auto name : {"full", "completeGraph"}) {
    const auto c = small(name, 4);
    auto p = init_parameters(c, 3, 5);
    fill_random(p, rng, 0.8);
    data::Rally rally{"m", "r", "x", "y", random_strokes(7, rng)};
    const std::size_t tau = 3;

    tensor::Tape t1;
    Network n1(t1, p, c, false);
    const auto tf = teacher_forced_loss(n1, rally, tau, {1, 2, nullptr});

    tensor::Tape t2;
    Network n2(t2, p, c, false);
    Session s(n2, std::span(rally.strokes).first(tau), {1, 2, nullptr});
    double shot = 0, la = 0, lb = 0;
    std::size_t correct = 0;
    for (std::size_t k = tau + 1; k <= rally.size(); ++k) {
      const auto& prev = rally.strokes[k - 2];
      const auto& cur = rally.strokes[k - 1];
      const auto logits = row_of(s.predict_next_shot(prev.a, prev.b));
      const auto mask = shot_mask(static_cast<int>(k - 1));
      const auto target = data::shot_index(prev.shot);
      shot -= masked_log_softmax(logits, mask, target);
      correct += masked_argmax(logits, mask) == target;
      const auto heads = s.commit_shot(prev.shot);
      la += density_nll(to_gaussian(heads.a.value().values()), cur.a.x, cur.a.y);
      lb += density_nll(to_gaussian(heads.b.value().values()), cur.b.x, cur.b.y);
    }
    CHECK(tf.predictions == rally.size() - tau);
    CHECK(tf.correct_shots == correct);
    CHECK(std::abs(tf.shot_loss.value()[0] - shot) < 1e-10);
    CHECK(std::abs(tf.loc_a_loss.value()[0] - la) < 1e-10);
    CHECK(std::abs(tf.loc_b_loss.value()[0] - lb) < 1e-10);
    CHECK(std::abs(tf.loss.value()[0] - (shot + 0.5 * la + 0.5 * lb)) < 1e-10);
  }
  const auto c = small("full", 4);
  const auto p = init_parameters(c, 3, 0);
  tensor::Tape tape;
  Network net(tape, p, c, false);
  Rng r2(1);
  data::Rally short_rally{"m", "r", "x", "y", random_strokes(4, r2)};
  CHECK_THROWS_AS(teacher_forced_loss(net, short_rally, 4, {}), ContractError);
}

TEST_CASE("uniform shot logits") {
  Rng rng(12);
  const std::size_t n = 7;
  {
    tensor::Tape tape;
    std::vector<Var> shots, locs;
    for (std::size_t i = 0; i < n; ++i) {
      const auto logits = tape.constant(Tensor({1, 10}));
      shots.push_back(tensor::scale(tensor::pick(tensor::log_softmax(logits), 0, rng.below(10)), -1.0));
      locs.push_back(tape.constant(Tensor::scalar(0.0)));
    }
    const auto loss = total_loss(shots, locs, locs);
    CHECK(std::abs(loss.value()[0] - n * std::log(10.0)) < 1e-12);
  }
  // Inside the model serves are masked after stroke 1, leaving 8 classes.
  const auto c = small("full", 3);
  auto p = init_parameters(c, 3, 0);
  for (auto& v : mut(p, "head.W_s").values()) v = 0.0;
  data::Rally rally{"m", "r", "x", "y", random_strokes(2 + n, rng)};
  tensor::Tape tape;
  Network net(tape, p, c, false);
  const auto tf = teacher_forced_loss(net, rally, 2, {1, 2, nullptr});
  CHECK(std::abs(tf.shot_loss.value()[0] - n * std::log(8.0)) < 1e-12);
}

TEST_CASE("total loss weighting and alignment") {
  Rng rng(13);
  tensor::Tape tape;
  std::vector<Var> s, a, a2, b;
  double sa = 0.0;
  for (int i = 0; i < 5; ++i) {
    s.push_back(tape.constant(Tensor::scalar(rng.uniform(0, 3))));
    const double v = rng.uniform(-2, 2);
    sa += v;
    a.push_back(tape.constant(Tensor::scalar(v)));
    a2.push_back(tape.constant(Tensor::scalar(2 * v)));
    b.push_back(tape.constant(Tensor::scalar(rng.uniform(-2, 2))));
  }
  const double base = total_loss(s, a, b).value()[0];
  const double doubled = total_loss(s, a2, b).value()[0];
  CHECK(std::abs(doubled - base - 0.5 * sa) < 1e-12);
  CHECK_THROWS_AS(total_loss(s, std::span(a).first(4), b), ContractError);
  CHECK_THROWS_AS(total_loss({}, {}, {}), ContractError);
}

TEST_CASE("dropout masks come only from the given stream") {
  Rng rng(14);
  const auto rally = random_strokes(5, rng);
  auto c = small("full", 6);
  c.dropout = 0.3;
  const auto p = init_parameters(c, 3, 0);
  auto run = [&](std::optional<std::uint64_t> seed) {
    tensor::Tape tape;
    Network net(tape, p, c, false);
    Rng drop(seed.value_or(0));
    Session s(net, rally, {1, 2, seed ? &drop : nullptr});
    return row_of(s.fused(Side::kA, 5));
  };
  CHECK(run(std::nullopt) == run(std::nullopt));
  CHECK(run(1) == run(1));
  CHECK(run(1) != run(std::nullopt));
  CHECK(run(1) != run(2));
}

TEST_CASE("full-model gradient check") {
  const auto report = train::gradcheck_model({});
  CAPTURE(report.worst_parameter);
  CHECK(report.result.max_relative_error < 1e-4);
  CHECK(report.parameter_count > 500);
  CHECK(std::isfinite(report.loss));
}

TEST_CASE("checkpoint round-trips exactly") {
  Rng rng(15);
  Checkpoint ck;
  ck.config = ModelConfig::variant("noStyleWeight");
  ck.config.node_dim = 5;
  ck.vocabulary = data::Vocabulary({"Chou", "Lin", "Momota"});
  ck.norm_stats = {6.123456789012345, 3.1, 1.0 / 3.0, 2.0 / 7.0};
  ck.params = init_parameters(ck.config, ck.vocabulary.player_count(), 77);
  for (auto& e : ck.params.entries())
    for (auto& v : e.value.values()) v = rng.uniform(-1, 1) * std::pow(10.0, rng.uniform(-8, 3));
  ck.training = {77, 4, 10, 32, 1e-3, 12};

  const auto text = to_json(ck).dump();
  const auto back = checkpoint_from_json(nlohmann::json::parse(text));
  CHECK(back == ck);

  const auto path = std::filesystem::temp_directory_path() / "rallycast_model_test.json";
  save_checkpoint(ck, path);
  CHECK(load_checkpoint(path) == ck);
  std::filesystem::remove(path);

  auto broken = [&](auto edit) {
    auto j = to_json(ck);
    edit(j);
    CHECK_THROWS_AS(checkpoint_from_json(j), ConfigError);
  };
  broken([](nlohmann::json& j) { j["format_version"] = 99; });
  broken([](nlohmann::json& j) { j.erase("parameters"); });
  broken([](nlohmann::json& j) { j["parameters"]["embed.W_L"] = nlohmann::json::array(); });
  broken([](nlohmann::json& j) { j["parameters"].erase("head.W_s"); });
  broken([](nlohmann::json& j) { j["vocabulary"] = "nope"; });
  broken([](nlohmann::json& j) { j["config"]["kernel_size"] = 4; });
  CHECK_THROWS_AS(load_checkpoint("/nonexistent/ck.json"), Error);
}
