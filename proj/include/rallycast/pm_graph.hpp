#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rallycast/rally.hpp"

namespace rallycast::graph {

enum class Side : std::uint8_t { kA, kB };

// Player striking the shuttle at step t; A serves.
Side hitter(int t);
constexpr Side other(Side s) { return s == Side::kA ? Side::kB : Side::kA; }
char side_char(Side s);

// The ten shot types share their class index; Defend and Return follow.
// Dummy only exists in completed graphs.
enum class Relation : std::uint8_t {
  kDefend = 10,
  kReturn = 11,
  kDummy = 12,
};

inline constexpr std::size_t kRelationCount = 12;
inline constexpr std::size_t kRelationCountWithDummy = 13;

constexpr Relation shot_relation(data::ShotType s) {
  return static_cast<Relation>(data::shot_index(s));
}
constexpr std::size_t relation_index(Relation r) { return static_cast<std::size_t>(r); }
std::optional<data::ShotType> relation_shot(Relation r);
Relation relation_from_index(std::size_t index);
// Whitespace-free name, e.g. "net_shot", "defend".
std::string relation_slug(Relation r);
std::optional<Relation> parse_relation(std::string_view slug);

struct Node {
  std::size_t id;
  Side side;
  int t;
};

struct Edge {
  std::size_t from;
  Relation relation;
  std::size_t to;
};

enum class Phase { kEncoderComplete, kDecoderStep1, kDecoderStep3, kDecoderComplete };

// Neighbour lists per node for one relation.
using NeighborLists = std::vector<std::vector<std::size_t>>;

// Undirected Player-Movements multigraph over (side, step) location nodes.
class PMGraph {
 public:
  // Two nodes for step 1, then per step t two nodes plus the shot edge of
  // s^{t-1}, a Defend edge for its hitter and a Return edge for the
  // receiver.
  static PMGraph build_encoder(std::span<const data::Stroke> prefix);

  // Decoder step 1: advance to k = cursor + 1 and add (hitter(k), k) with a
  // Return edge from (hitter(k), k-1). Returns the new node id.
  std::size_t begin_decoder_step();
  // Decoder step 3: add (hitter(k-1), k) with a Defend edge and the shot
  // edge (hitter(k-1), k-1) -- (hitter(k), k). Returns the new node id.
  std::size_t commit_shot(data::ShotType predicted);
  // Same, for a relation value; Defend, Return and Dummy are rejected.
  std::size_t commit_shot(Relation predicted);
  // Decoder step 5: node embeddings are updated; ready for the next begin.
  void finish_step();

  const std::vector<Node>& nodes() const noexcept { return nodes_; }
  const std::vector<Edge>& edges() const noexcept { return edges_; }
  int cursor() const noexcept { return cursor_; }
  Phase phase() const noexcept { return phase_; }
  std::optional<std::size_t> find(Side side, int t) const;
  std::size_t node(Side side, int t) const;

  // N^i_r for every node i; lists are symmetric.
  const NeighborLists& adjacency(Relation r) const;
  std::size_t edge_count(Relation r) const;
  bool uses_dummy() const noexcept { return has_dummy_; }

  // Copy with a Dummy edge between every pair that is not already adjacent.
  PMGraph completed() const;

  // `node <side> <t>` / `edge <i> <relation> <j>` lines.
  std::string to_debug_text() const;
  static PMGraph from_debug_text(std::string_view text);

 private:
  std::size_t add_node(Side side, int t);
  void add_edge(std::size_t from, Relation r, std::size_t to);

  std::vector<Node> nodes_;
  std::vector<Edge> edges_;
  std::array<NeighborLists, kRelationCountWithDummy> adjacency_{};
  std::vector<std::array<std::size_t, 2>> slot_;  // (A, B) node id per step, npos if absent
  int cursor_ = 0;
  Phase phase_ = Phase::kEncoderComplete;
  bool has_dummy_ = false;
};

std::string_view phase_name(Phase p);

}  // namespace rallycast::graph
