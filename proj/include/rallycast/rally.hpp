#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace rallycast::data {

inline constexpr std::size_t kShotTypeCount = 10;
inline constexpr std::size_t kMaxRallyLength = 35;
inline constexpr double kCourtWidth = 6.1;
inline constexpr double kCourtLength = 13.4;

// Order fixes the class index of each shot type.
enum class ShotType : std::uint8_t {
  kNetShot,
  kLob,
  kDefensiveShot,
  kSmash,
  kDrop,
  kPushRush,
  kShortService,
  kClear,
  kDrive,
  kLongService,
};

std::string_view shot_name(ShotType shot);
std::optional<ShotType> parse_shot(std::string_view name);
bool is_serve(ShotType shot);
constexpr std::size_t shot_index(ShotType shot) { return static_cast<std::size_t>(shot); }
ShotType shot_from_index(std::size_t index);
const std::array<ShotType, kShotTypeCount>& all_shots();

struct Point {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point&, const Point&) = default;
};

// One hit: where both players stand when it is played, and the shot itself.
struct Stroke {
  int t = 1;  // 1-based ball round
  Point a;
  Point b;
  ShotType shot = ShotType::kShortService;
  friend bool operator==(const Stroke&, const Stroke&) = default;
};

// player_a always serves, so stroke t is hit by A when t is odd.
struct Rally {
  std::string match_id;
  std::string rally_id;
  std::string player_a;
  std::string player_b;
  std::vector<Stroke> strokes;

  std::size_t size() const noexcept { return strokes.size(); }
  friend bool operator==(const Rally&, const Rally&) = default;
};

// Throws ValidationError naming the rally when alternation (t = 1..n in
// order), the length bound, the serve rule or finiteness is violated.
void validate(const Rally& rally);

struct ParseResult {
  std::vector<Rally> rallies;
  std::vector<std::string> warnings;
};

// Header: match_id,rally_id,ball_round,player_a_id,player_b_id,shot_type,
//         player_a_x,player_a_y,player_b_x,player_b_y
// Rallies keep first-appearance order; strokes are sorted by ball_round.
// Rallies with an empty field are dropped with a warning; longer rallies are
// truncated to 35 strokes.
ParseResult parse_rallies(std::istream& in);
ParseResult parse_rallies(const std::filesystem::path& path);

void write_rallies(std::ostream& out, std::span<const Rally> rallies);
void write_rallies(const std::filesystem::path& path, std::span<const Rally> rallies);

struct Split {
  std::vector<Rally> train;
  std::vector<Rally> test;
};

// Per match, in file order: the first ceil(0.8 n) rallies train, the rest
// test.
Split split_train_test(std::span<const Rally> rallies);

// Dense player index. Index 0 is reserved for players unseen in training.
class Vocabulary {
 public:
  static constexpr std::size_t kUnknownPlayer = 0;
  static constexpr std::string_view kUnknownName = "<unknown>";

  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> players);
  static Vocabulary build(std::span<const Rally> train);

  std::size_t player_count() const noexcept { return players_.size() + 1; }
  std::optional<std::size_t> find(std::string_view player) const;
  std::size_t index(std::string_view player) const;
  const std::string& name(std::size_t index) const;
  // Known players, lexicographic.
  const std::vector<std::string>& players() const noexcept { return players_; }

  friend bool operator==(const Vocabulary&, const Vocabulary&) = default;

 private:
  std::vector<std::string> players_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

// z-score statistics pooled over both players' coordinates.
struct NormStats {
  double mean_x = 0.0;
  double mean_y = 0.0;
  double std_x = 1.0;
  double std_y = 1.0;

  static NormStats compute(std::span<const Rally> train);
  void check() const;
  Point normalize(Point p) const;
  Point denormalize(Point p) const;

  friend bool operator==(const NormStats&, const NormStats&) = default;
};

Rally normalize(const Rally& rally, const NormStats& stats);
Rally denormalize(const Rally& rally, const NormStats& stats);

struct SyntheticOptions {
  std::uint64_t seed = 0;
  std::size_t rallies = 16;
  std::size_t min_length = 6;
  std::size_t max_length = 12;
  std::size_t players = 4;
  std::size_t rallies_per_match = 8;
};

// Deterministic rallies whose shot choice and movements follow simple
// court-zone rules, so the structure is learnable.
std::vector<Rally> generate_synthetic(const SyntheticOptions& options);

}  // namespace rallycast::data
