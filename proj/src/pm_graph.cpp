#include "rallycast/pm_graph.hpp"

#include <algorithm>
#include <limits>
#include <sstream>

#include "rallycast/errors.hpp"

namespace rallycast::graph {
namespace {

constexpr std::size_t kAbsent = std::numeric_limits<std::size_t>::max();

std::size_t side_slot(Side s) { return s == Side::kA ? 0 : 1; }

}  // namespace

Side hitter(int t) {
  if (t < 1) throw ContractError("time steps are 1-based, got " + std::to_string(t));
  return t % 2 == 1 ? Side::kA : Side::kB;
}

char side_char(Side s) { return s == Side::kA ? 'A' : 'B'; }

std::optional<data::ShotType> relation_shot(Relation r) {
  const auto i = relation_index(r);
  if (i < data::kShotTypeCount) return data::shot_from_index(i);
  return std::nullopt;
}

Relation relation_from_index(std::size_t index) {
  if (index >= kRelationCountWithDummy) {
    throw ContractError("relation index " + std::to_string(index) + " out of range");
  }
  return static_cast<Relation>(index);
}

std::string relation_slug(Relation r) {
  switch (r) {
    case Relation::kDefend:
      return "defend";
    case Relation::kReturn:
      return "return";
    case Relation::kDummy:
      return "dummy";
    default:
      break;
  }
  std::string s(data::shot_name(*relation_shot(r)));
  for (auto& c : s)
    if (c == ' ' || c == '/') c = '_';
  return s;
}

std::optional<Relation> parse_relation(std::string_view slug) {
  for (std::size_t i = 0; i < kRelationCountWithDummy; ++i) {
    const auto r = static_cast<Relation>(i);
    if (relation_slug(r) == slug) return r;
  }
  return std::nullopt;
}

std::string_view phase_name(Phase p) {
  switch (p) {
    case Phase::kEncoderComplete:
      return "encoder-complete";
    case Phase::kDecoderStep1:
      return "decoder-step-1";
    case Phase::kDecoderStep3:
      return "decoder-step-3";
    case Phase::kDecoderComplete:
      return "decoder-complete";
  }
  return "?";
}

std::size_t PMGraph::add_node(Side side, int t) {
  if (t < 1) throw ContractError("node time step must be >= 1");
  const auto ts = static_cast<std::size_t>(t);
  if (slot_.size() < ts) slot_.resize(ts, {kAbsent, kAbsent});
  auto& slot = slot_[ts - 1][side_slot(side)];
  if (slot != kAbsent) {
    throw ContractError(std::string("duplicate node (") + side_char(side) + ", " +
                        std::to_string(t) + ")");
  }
  const auto id = nodes_.size();
  nodes_.push_back({id, side, t});
  slot = id;
  for (auto& lists : adjacency_) lists.emplace_back();
  return id;
}

void PMGraph::add_edge(std::size_t from, Relation r, std::size_t to) {
  if (from == to) throw ContractError("self-loop edges are not stored");
  edges_.push_back({from, r, to});
  auto& lists = adjacency_[relation_index(r)];
  lists[from].push_back(to);
  lists[to].push_back(from);
  if (r == Relation::kDummy) has_dummy_ = true;
}

PMGraph PMGraph::build_encoder(std::span<const data::Stroke> prefix) {
  if (prefix.empty()) throw ContractError("encoder graph needs at least one stroke");
  PMGraph g;
  g.add_node(Side::kA, 1);
  g.add_node(Side::kB, 1);
  for (int t = 2; t <= static_cast<int>(prefix.size()); ++t) {
    const auto striker = hitter(t - 1);
    const auto receiver = hitter(t);
    g.add_node(Side::kA, t);
    g.add_node(Side::kB, t);
    const auto shot = prefix[static_cast<std::size_t>(t - 2)].shot;
    g.add_edge(g.node(striker, t - 1), shot_relation(shot), g.node(receiver, t));
    g.add_edge(g.node(striker, t - 1), Relation::kDefend, g.node(striker, t));
    g.add_edge(g.node(receiver, t - 1), Relation::kReturn, g.node(receiver, t));
  }
  g.cursor_ = static_cast<int>(prefix.size());
  g.phase_ = Phase::kEncoderComplete;
  return g;
}

std::size_t PMGraph::begin_decoder_step() {
  if (phase_ != Phase::kEncoderComplete && phase_ != Phase::kDecoderComplete) {
    throw StateError("begin_decoder_step in phase " + std::string(phase_name(phase_)));
  }
  const int k = cursor_ + 1;
  const auto receiver = hitter(k);
  const auto id = add_node(receiver, k);
  add_edge(node(receiver, k - 1), Relation::kReturn, id);
  cursor_ = k;
  phase_ = Phase::kDecoderStep1;
  return id;
}

std::size_t PMGraph::commit_shot(data::ShotType predicted) {
  if (phase_ != Phase::kDecoderStep1) {
    throw StateError("commit_shot in phase " + std::string(phase_name(phase_)));
  }
  const int k = cursor_;
  // The shot committed here is s^{k-1}; only stroke 1 may be a serve.
  if (data::is_serve(predicted) != (k - 1 == 1)) {
    throw ContractError("shot '" + std::string(data::shot_name(predicted)) +
                        "' is not allowed for stroke " + std::to_string(k - 1));
  }
  const auto striker = hitter(k - 1);
  const auto id = add_node(striker, k);
  add_edge(node(striker, k - 1), Relation::kDefend, id);
  add_edge(node(striker, k - 1), shot_relation(predicted), node(hitter(k), k));
  phase_ = Phase::kDecoderStep3;
  return id;
}

std::size_t PMGraph::commit_shot(Relation predicted) {
  const auto shot = relation_shot(predicted);
  if (!shot) {
    throw ContractError("relation '" + relation_slug(predicted) + "' is not a shot type");
  }
  return commit_shot(*shot);
}

void PMGraph::finish_step() {
  if (phase_ != Phase::kDecoderStep3) {
    throw StateError("finish_step in phase " + std::string(phase_name(phase_)));
  }
  phase_ = Phase::kDecoderComplete;
}

std::optional<std::size_t> PMGraph::find(Side side, int t) const {
  if (t < 1 || static_cast<std::size_t>(t) > slot_.size()) return std::nullopt;
  const auto id = slot_[static_cast<std::size_t>(t) - 1][side_slot(side)];
  if (id == kAbsent) return std::nullopt;
  return id;
}

std::size_t PMGraph::node(Side side, int t) const {
  const auto id = find(side, t);
  if (!id) {
    throw ContractError(std::string("no node (") + side_char(side) + ", " + std::to_string(t) +
                        ")");
  }
  return *id;
}

const NeighborLists& PMGraph::adjacency(Relation r) const {
  return adjacency_.at(relation_index(r));
}

std::size_t PMGraph::edge_count(Relation r) const {
  return static_cast<std::size_t>(std::count_if(
      edges_.begin(), edges_.end(), [r](const Edge& e) { return e.relation == r; }));
}

PMGraph PMGraph::completed() const {
  PMGraph g = *this;
  const auto n = nodes_.size();
  std::vector<std::vector<bool>> adjacent(n, std::vector<bool>(n, false));
  for (const auto& e : edges_) adjacent[e.from][e.to] = adjacent[e.to][e.from] = true;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (!adjacent[i][j]) g.add_edge(i, Relation::kDummy, j);
  g.has_dummy_ = true;
  return g;
}

std::string PMGraph::to_debug_text() const {
  std::ostringstream out;
  for (const auto& n : nodes_) out << "node " << side_char(n.side) << ' ' << n.t << '\n';
  for (const auto& e : edges_)
    out << "edge " << e.from << ' ' << relation_slug(e.relation) << ' ' << e.to << '\n';
  return out.str();
}

PMGraph PMGraph::from_debug_text(std::string_view text) {
  PMGraph g;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  int max_t = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "node") {
      char side = 0;
      int t = 0;
      if (!(ls >> side >> t) || (side != 'A' && side != 'B')) {
        throw ParseError("bad node line '" + line + "'", line_no);
      }
      g.add_node(side == 'A' ? Side::kA : Side::kB, t);
      max_t = std::max(max_t, t);
    } else if (kind == "edge") {
      std::size_t i = 0, j = 0;
      std::string rel;
      if (!(ls >> i >> rel >> j) || i >= g.nodes_.size() || j >= g.nodes_.size()) {
        throw ParseError("bad edge line '" + line + "'", line_no);
      }
      const auto r = parse_relation(rel);
      if (!r) throw ParseError("unknown relation '" + rel + "'", line_no);
      g.add_edge(i, *r, j);
    } else {
      throw ParseError("unknown record '" + kind + "'", line_no);
    }
  }
  g.cursor_ = max_t;
  // Complete steps read back as a finished decoder step.
  g.phase_ = Phase::kDecoderComplete;
  return g;
}

}  // namespace rallycast::graph
