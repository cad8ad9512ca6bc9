#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "rallycast/autodiff.hpp"
#include "rallycast/optim.hpp"
#include "rallycast/pm_graph.hpp"
#include "rallycast/rally.hpp"
#include "rallycast/rng.hpp"

namespace rallycast::model {

using tensor::ParameterSet;
using tensor::Tape;
using tensor::Tensor;
using tensor::Var;

struct ModelConfig {
  std::size_t location_dim = 16;
  std::size_t player_dim = 16;
  std::size_t node_dim = 16;
  std::size_t gnn_layers = 2;
  std::size_t basis_count = 3;
  std::size_t kernel_size = 3;
  std::size_t lstm_layers = 1;
  double dropout = 0.1;

  bool no_dynamic = false;
  bool no_player_player = false;
  bool no_rally_weight = false;
  bool no_style_weight = false;
  bool complete_graph = false;
  bool rgcn_pm_baseline = false;

  // Throws ConfigError on invalid combinations.
  void check() const;
  // Relations with weights: 12, or 13 with the dummy relation.
  std::size_t relation_count() const;
  // "full", "noDynamic", ... ; "custom" when flags match no named variant.
  std::string variant_name() const;

  static ModelConfig variant(std::string_view name);
  // Same dimensions for every width (gradient checks use d = 4).
  static ModelConfig with_dims(std::size_t d);

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

const std::array<std::string_view, 7>& variant_names();

// Xavier-uniform matrices, zero biases. Every parameter is named; the set
// fully determines a model together with the config.
ParameterSet init_parameters(const ModelConfig& config, std::size_t player_count,
                             std::uint64_t seed);

// Shape check of a loaded parameter set against the config.
void check_parameters(const ModelConfig& config, std::size_t player_count,
                      const ParameterSet& params);

struct Gaussian {
  double mu_x = 0.0;
  double mu_y = 0.0;
  double sigma_x = 1.0;
  double sigma_y = 1.0;
  double rho = 0.0;
};

// Maps the 5 raw head outputs to a valid distribution.
Gaussian to_gaussian(std::span<const double> raw);
double gaussian_nll(const Gaussian& g, double x, double y);
data::Point sample(const Gaussian& g, Rng& rng);

// Parameters bound to one tape. Leaves when gradients are wanted. Derived
// views (transposes, composed relation weights) are recorded once here.
class Network {
 public:
  Network(Tape& tape, const ParameterSet& params, const ModelConfig& config, bool trainable);

  const ModelConfig& config() const noexcept { return config_; }
  Tape& tape() const noexcept { return *tape_; }
  std::size_t player_count() const noexcept { return player_count_; }
  const Var& param(std::string_view name) const;
  // Gradients of every parameter after tape.backward().
  ParameterSet gradients() const;

  struct Layer {
    std::vector<Var> relation_t;  // W^r transposed, one per relation
    Var self_t;
  };
  struct Bound {
    Var loc_t;     // W^L^T
    Var player;    // W^p
    Var embed_t;   // W^e^T
    std::vector<Layer> layers;
    Var dyn_in_t;  // W^n^T
    Var conv_weight;
    Var conv_bias;
    tensor::LstmWeights lstm;
    Var gcn_t;  // plain GCN weight when the dynamic pipeline is off
    Var co_d, co_a_t, co_b_t;
    Var w_ha, w_hb, w_ahat, w_bhat;  // d x 1
    Var w_style, w_rally;            // d x 1
    Var shot_t;
    Var loc_head_t;
  };
  const Bound& bound() const noexcept { return bound_; }

 private:
  Tape* tape_;
  const ParameterSet* params_;
  ModelConfig config_;
  std::size_t player_count_ = 0;
  std::vector<Var> vars_;
  Bound bound_;
};

struct SessionOptions {
  std::size_t player_a = data::Vocabulary::kUnknownPlayer;
  std::size_t player_b = data::Vocabulary::kUnknownPlayer;
  // Dropout masks are drawn from here when set; inference leaves it empty.
  Rng* dropout = nullptr;
};

struct LocationHeads {
  Var a;  // 1 x 5 raw parameters
  Var b;
};

// Incremental encode/decode over one rally. Locations are standardized.
// Copies share the tape and may branch into independent rollouts.
class Session {
 public:
  // Runs the encoder over a prefix of at least two strokes.
  Session(const Network& net, std::span<const data::Stroke> prefix, SessionOptions options);

  // Decoder steps 1 and 2. `last_a` / `last_b` are the locations at the
  // current cursor. Returns raw shot logits (1 x 10) for the stroke at the
  // cursor.
  Var predict_next_shot(data::Point last_a, data::Point last_b);
  // Decoder steps 3 to 5: commit the shot and predict both locations at the
  // new cursor.
  LocationHeads commit_shot(data::ShotType shot);

  const graph::PMGraph& graph() const noexcept { return graph_; }
  int cursor() const noexcept { return graph_.cursor(); }
  // Fused embedding of a node; empty Var until it has been computed.
  const Var& fused(graph::Side side, int t) const;
  const Var& initial(graph::Side side, int t) const;
  std::size_t player_index(graph::Side side) const;

 private:
  Var embed(std::span<const data::Point> locations, std::span<const std::size_t> players) const;
  Var embed_node(graph::Side side, data::Point location) const;
  Var relational(const Var& first_layer) const;
  Var dynamic_side(const Var& inputs, graph::Side side) const;
  std::pair<Var, Var> player_player(const Var& da, const Var& db) const;
  Var player_rally(const Var& d_prime, const Var& z) const;
  Var dropout(const Var& v) const;
  Var first_layer_states() const;
  // Rows for steps 1..t of one side, e-hat where available if `fused`.
  Var sequence(graph::Side side, int t, bool fused) const;
  // Recomputes e-hat of both sides at the given steps from sequences over
  // 1..upto.
  void fuse(const Var& z, int upto, std::span<const int> steps, bool use_fused);

  const Network* net_;
  SessionOptions options_;
  graph::PMGraph graph_;
  std::vector<Var> initial_;  // e per node id
  std::vector<Var> fused_;    // e-hat per node id
  data::Point last_a_;
  data::Point last_b_;
};

// Cross-entropy mask: serves are excluded for strokes after the first.
std::array<bool, data::kShotTypeCount> shot_mask(int stroke);
// First index of the largest unmasked logit.
std::size_t masked_argmax(std::span<const double> logits, std::span<const bool> mask);

struct TeacherForced {
  Var loss;
  Var shot_loss;
  Var loc_a_loss;
  Var loc_b_loss;
  std::size_t predictions = 0;
  std::size_t correct_shots = 0;
};

// Total loss over decoder iterations tau+1..|R| with ground truth fed
// back. Requires |R| >= tau + 1.
TeacherForced teacher_forced_loss(const Network& net, const data::Rally& rally, std::size_t tau,
                                  SessionOptions options);

// L = sum(shot) + 0.5 sum(loc_a) + 0.5 sum(loc_b). Term lists must align.
Var total_loss(std::span<const Var> shot_terms, std::span<const Var> loc_a_terms,
               std::span<const Var> loc_b_terms);

}  // namespace rallycast::model
