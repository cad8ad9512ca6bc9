#include "rallycast/rally.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>
#include <utility>

#include "rallycast/errors.hpp"
#include "rallycast/rng.hpp"

namespace rallycast::data {
namespace {

constexpr std::array<std::string_view, kShotTypeCount> kShotNames = {
    "net shot", "lob",           "defensive shot", "smash", "drop",
    "push/rush", "short service", "clear",          "drive", "long service",
};

constexpr std::array<std::string_view, 10> kColumns = {
    "match_id",   "rally_id",   "ball_round", "player_a_id", "player_b_id",
    "shot_type",  "player_a_x", "player_a_y", "player_b_x",  "player_b_y",
};

enum Column : std::size_t {
  kMatch,
  kRallyId,
  kRound,
  kPlayerA,
  kPlayerB,
  kShot,
  kAx,
  kAy,
  kBx,
  kBy,
};

std::string rally_label(const Rally& r) {
  return "rally " + r.match_id + "/" + r.rally_id;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

// Splits one CSV record; double quotes may wrap a field and "" escapes a
// quote inside it.
std::vector<std::string> split_record(std::string_view line, std::size_t line_no) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (quoted) throw ParseError("unterminated quoted field", line_no);
  fields.push_back(trim(cur));
  return fields;
}

double parse_number(const std::string& field, std::string_view column, std::size_t line_no) {
  double v = 0.0;
  const auto* first = field.data();
  const auto* last = field.data() + field.size();
  if (!field.empty() && *first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last || !std::isfinite(v)) {
    throw ParseError("column " + std::string(column) + ": '" + field + "' is not a finite number",
                     line_no);
  }
  return v;
}

int parse_round(const std::string& field, std::size_t line_no) {
  int v = 0;
  const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
  if (ec != std::errc() || ptr != field.data() + field.size() || v < 1) {
    throw ParseError("column ball_round: '" + field + "' is not a positive integer", line_no);
  }
  return v;
}

std::string format_number(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

}  // namespace

std::string_view shot_name(ShotType shot) { return kShotNames.at(shot_index(shot)); }

std::optional<ShotType> parse_shot(std::string_view name) {
  std::string norm;
  norm.reserve(name.size());
  for (char c : name) {
    if (c == '_') c = ' ';
    norm += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  }
  if (norm == "push rush") norm = "push/rush";
  for (std::size_t i = 0; i < kShotNames.size(); ++i)
    if (kShotNames[i] == norm) return static_cast<ShotType>(i);
  return std::nullopt;
}

bool is_serve(ShotType shot) {
  return shot == ShotType::kShortService || shot == ShotType::kLongService;
}

ShotType shot_from_index(std::size_t index) {
  if (index >= kShotTypeCount) throw ContractError("shot index out of range");
  return static_cast<ShotType>(index);
}

const std::array<ShotType, kShotTypeCount>& all_shots() {
  static const auto shots = [] {
    std::array<ShotType, kShotTypeCount> s{};
    for (std::size_t i = 0; i < kShotTypeCount; ++i) s[i] = static_cast<ShotType>(i);
    return s;
  }();
  return shots;
}

void validate(const Rally& rally) {
  const auto label = rally_label(rally);
  if (rally.strokes.empty()) throw ValidationError(label + ": no strokes");
  if (rally.strokes.size() > kMaxRallyLength) {
    throw ValidationError(label + ": " + std::to_string(rally.strokes.size()) +
                          " strokes exceeds the maximum of " + std::to_string(kMaxRallyLength));
  }
  for (std::size_t i = 0; i < rally.strokes.size(); ++i) {
    const auto& s = rally.strokes[i];
    if (s.t != static_cast<int>(i + 1)) {
      throw ValidationError(label + ": stroke " + std::to_string(i + 1) + " has ball_round " +
                            std::to_string(s.t) + "; hitters must alternate from the serve");
    }
    if (!std::isfinite(s.a.x) || !std::isfinite(s.a.y) || !std::isfinite(s.b.x) ||
        !std::isfinite(s.b.y)) {
      throw ValidationError(label + ": stroke " + std::to_string(s.t) + " has non-finite location");
    }
    if (s.t == 1 && !is_serve(s.shot)) {
      throw ValidationError(label + ": stroke 1 must be a serve, got " +
                            std::string(shot_name(s.shot)));
    }
    if (s.t > 1 && is_serve(s.shot)) {
      throw ValidationError(label + ": stroke " + std::to_string(s.t) + " is a serve (" +
                            std::string(shot_name(s.shot)) + ") after the first stroke");
    }
  }
}

ParseResult parse_rallies(std::istream& in) {
  ParseResult result;
  std::string line;
  std::size_t line_no = 0;

  if (!std::getline(in, line)) throw ParseError("missing header row", 1);
  ++line_no;
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line.erase(0, 3);  // BOM
  const auto header = split_record(line, line_no);
  std::array<std::size_t, kColumns.size()> col{};
  for (std::size_t c = 0; c < kColumns.size(); ++c) {
    const auto it = std::find(header.begin(), header.end(), kColumns[c]);
    if (it == header.end()) {
      throw ParseError("header is missing column '" + std::string(kColumns[c]) + "'", line_no);
    }
    col[c] = static_cast<std::size_t>(it - header.begin());
  }

  struct Pending {
    Rally rally;
    bool missing = false;
    std::size_t first_line = 0;
  };
  std::vector<Pending> pending;
  std::map<std::pair<std::string, std::string>, std::size_t> by_key;

  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto f = split_record(line, line_no);
    if (f.size() != header.size()) {
      throw ParseError("expected " + std::to_string(header.size()) + " fields, got " +
                       std::to_string(f.size()),
                       line_no);
    }
    const auto& match = f[col[kMatch]];
    const auto& rally_id = f[col[kRallyId]];
    const auto key = std::make_pair(match, rally_id);
    auto [it, inserted] = by_key.try_emplace(key, pending.size());
    if (inserted) {
      Pending p;
      p.rally.match_id = match;
      p.rally.rally_id = rally_id;
      p.first_line = line_no;
      pending.push_back(std::move(p));
    }
    auto& p = pending[it->second];

    bool any_empty = false;
    for (auto c : col) any_empty = any_empty || f[c].empty();
    if (any_empty) {
      if (!p.missing) {
        result.warnings.push_back("line " + std::to_string(line_no) + ": dropping " +
                                  rally_label(p.rally) + " (missing value)");
      }
      p.missing = true;
      continue;
    }

    Stroke s;
    s.t = parse_round(f[col[kRound]], line_no);
    const auto shot = parse_shot(f[col[kShot]]);
    if (!shot) throw ParseError("unknown shot type '" + f[col[kShot]] + "'", line_no);
    s.shot = *shot;
    s.a = {parse_number(f[col[kAx]], kColumns[kAx], line_no),
           parse_number(f[col[kAy]], kColumns[kAy], line_no)};
    s.b = {parse_number(f[col[kBx]], kColumns[kBx], line_no),
           parse_number(f[col[kBy]], kColumns[kBy], line_no)};

    const auto& pa = f[col[kPlayerA]];
    const auto& pb = f[col[kPlayerB]];
    if (p.rally.strokes.empty() && p.rally.player_a.empty()) {
      p.rally.player_a = pa;
      p.rally.player_b = pb;
    } else if (p.rally.player_a != pa || p.rally.player_b != pb) {
      throw ValidationError(rally_label(p.rally) + ": players change within the rally at line " +
                            std::to_string(line_no));
    }
    p.rally.strokes.push_back(s);
  }

  for (auto& p : pending) {
    if (p.missing) continue;
    auto& strokes = p.rally.strokes;
    std::stable_sort(strokes.begin(), strokes.end(),
                     [](const Stroke& a, const Stroke& b) { return a.t < b.t; });
    if (strokes.size() > kMaxRallyLength) strokes.resize(kMaxRallyLength);
    validate(p.rally);
    result.rallies.push_back(std::move(p.rally));
  }
  return result;
}

ParseResult parse_rallies(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  return parse_rallies(in);
}

void write_rallies(std::ostream& out, std::span<const Rally> rallies) {
  for (std::size_t c = 0; c < kColumns.size(); ++c) out << (c ? "," : "") << kColumns[c];
  out << '\n';
  for (const auto& r : rallies) {
    for (const auto& s : r.strokes) {
      out << csv_field(r.match_id) << ',' << csv_field(r.rally_id) << ',' << s.t << ','
          << csv_field(r.player_a) << ',' << csv_field(r.player_b) << ',' << shot_name(s.shot)
          << ',' << format_number(s.a.x) << ',' << format_number(s.a.y) << ','
          << format_number(s.b.x) << ',' << format_number(s.b.y) << '\n';
    }
  }
}

void write_rallies(const std::filesystem::path& path, std::span<const Rally> rallies) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  write_rallies(out, rallies);
}

Split split_train_test(std::span<const Rally> rallies) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<const Rally*>> by_match;
  for (const auto& r : rallies) {
    auto& group = by_match[r.match_id];
    if (group.empty()) order.push_back(r.match_id);
    group.push_back(&r);
  }
  Split split;
  for (const auto& m : order) {
    const auto& group = by_match[m];
    const auto n = group.size();
    const auto n_train = (4 * n + 4) / 5;  // ceil(0.8 n)
    for (std::size_t i = 0; i < n; ++i) (i < n_train ? split.train : split.test).push_back(*group[i]);
  }
  return split;
}

Vocabulary::Vocabulary(std::vector<std::string> players) : players_(std::move(players)) {
  std::sort(players_.begin(), players_.end());
  players_.erase(std::unique(players_.begin(), players_.end()), players_.end());
  for (std::size_t i = 0; i < players_.size(); ++i) index_.emplace(players_[i], i + 1);
}

Vocabulary Vocabulary::build(std::span<const Rally> train) {
  std::vector<std::string> players;
  for (const auto& r : train) {
    players.push_back(r.player_a);
    players.push_back(r.player_b);
  }
  return Vocabulary(std::move(players));
}

std::optional<std::size_t> Vocabulary::find(std::string_view player) const {
  const auto it = index_.find(player);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::size_t Vocabulary::index(std::string_view player) const {
  return find(player).value_or(kUnknownPlayer);
}

const std::string& Vocabulary::name(std::size_t index) const {
  static const std::string unknown(kUnknownName);
  if (index == kUnknownPlayer) return unknown;
  return players_.at(index - 1);
}

NormStats NormStats::compute(std::span<const Rally> train) {
  double sx = 0.0, sy = 0.0;
  std::size_t n = 0;
  for (const auto& r : train)
    for (const auto& s : r.strokes) {
      sx += s.a.x + s.b.x;
      sy += s.a.y + s.b.y;
      n += 2;
    }
  if (n == 0) throw ConfigError("normalisation statistics need at least one stroke");
  NormStats st;
  st.mean_x = sx / static_cast<double>(n);
  st.mean_y = sy / static_cast<double>(n);
  double vx = 0.0, vy = 0.0;
  for (const auto& r : train)
    for (const auto& s : r.strokes) {
      for (const auto& p : {s.a, s.b}) {
        vx += (p.x - st.mean_x) * (p.x - st.mean_x);
        vy += (p.y - st.mean_y) * (p.y - st.mean_y);
      }
    }
  st.std_x = std::sqrt(vx / static_cast<double>(n));
  st.std_y = std::sqrt(vy / static_cast<double>(n));
  st.check();
  return st;
}

void NormStats::check() const {
  if (!(std_x > 0.0) || !(std_y > 0.0) || !std::isfinite(std_x) || !std::isfinite(std_y) ||
      !std::isfinite(mean_x) || !std::isfinite(mean_y)) {
    throw ConfigError("degenerate normalisation statistics (std_x=" + format_number(std_x) +
                      ", std_y=" + format_number(std_y) + ")");
  }
}

Point NormStats::normalize(Point p) const {
  return {(p.x - mean_x) / std_x, (p.y - mean_y) / std_y};
}

Point NormStats::denormalize(Point p) const {
  return {p.x * std_x + mean_x, p.y * std_y + mean_y};
}

Rally normalize(const Rally& rally, const NormStats& stats) {
  stats.check();
  Rally out = rally;
  for (auto& s : out.strokes) {
    s.a = stats.normalize(s.a);
    s.b = stats.normalize(s.b);
  }
  return out;
}

Rally denormalize(const Rally& rally, const NormStats& stats) {
  stats.check();
  Rally out = rally;
  for (auto& s : out.strokes) {
    s.a = stats.denormalize(s.a);
    s.b = stats.denormalize(s.b);
  }
  return out;
}

// ---------------------------------------------------------------------------
// synthetic rallies

namespace {

constexpr double kNetY = kCourtLength / 2.0;
constexpr std::array<double, 3> kLanes = {1.0, 3.05, 5.1};
constexpr double kFrontDepth = 1.4;
constexpr double kMidDepth = 3.4;
constexpr double kBackDepth = 5.6;
constexpr double kRecoverDepth = 3.2;
constexpr double kJitter = 0.2;

enum class Zone { kFront, kMid, kBack };

Zone landing_zone(ShotType shot) {
  switch (shot) {
    case ShotType::kNetShot:
    case ShotType::kDrop:
    case ShotType::kShortService:
      return Zone::kFront;
    case ShotType::kLob:
    case ShotType::kClear:
    case ShotType::kLongService:
      return Zone::kBack;
    default:
      return Zone::kMid;
  }
}

double zone_depth(Zone z) {
  switch (z) {
    case Zone::kFront:
      return kFrontDepth;
    case Zone::kMid:
      return kMidDepth;
    case Zone::kBack:
      return kBackDepth;
  }
  return kMidDepth;
}

// Reply chosen by the hitter's zone and the opponent's lane. "Mirrored"
// players flip the lane preference.
ShotType reply(Zone zone, std::size_t opponent_lane, bool mirrored) {
  static constexpr ShotType kFront[] = {ShotType::kNetShot, ShotType::kLob, ShotType::kPushRush};
  static constexpr ShotType kMid[] = {ShotType::kDrive, ShotType::kDefensiveShot,
                                      ShotType::kSmash};
  static constexpr ShotType kBack[] = {ShotType::kClear, ShotType::kDrop, ShotType::kSmash};
  const auto lane = mirrored ? 2 - opponent_lane : opponent_lane;
  switch (zone) {
    case Zone::kFront:
      return kFront[lane];
    case Zone::kMid:
      return kMid[lane];
    case Zone::kBack:
      return kBack[lane];
  }
  return ShotType::kClear;
}

double round_cm(double v) { return std::round(v * 100.0) / 100.0; }

Point place(bool near_side, double depth, double lane_x, Rng& rng) {
  double x = lane_x + kJitter * rng.normal();
  double y = near_side ? kNetY - depth : kNetY + depth;
  y += kJitter * rng.normal();
  x = std::clamp(x, 0.05, kCourtWidth - 0.05);
  y = std::clamp(y, 0.05, kCourtLength - 0.05);
  return {round_cm(x), round_cm(y)};
}

}  // namespace

std::vector<Rally> generate_synthetic(const SyntheticOptions& options) {
  if (options.min_length < 2 || options.max_length > kMaxRallyLength ||
      options.min_length > options.max_length) {
    throw ConfigError("synthetic length range [" + std::to_string(options.min_length) + ", " +
                      std::to_string(options.max_length) + "] must lie within [2, 35]");
  }
  if (options.players < 2) throw ConfigError("synthetic data needs at least 2 players");
  if (options.rallies_per_match == 0) throw ConfigError("rallies_per_match must be positive");

  const Rng root = Rng(options.seed).substream("synthetic");
  std::vector<Rally> rallies;
  rallies.reserve(options.rallies);
  for (std::size_t i = 0; i < options.rallies; ++i) {
    Rng rng = root.substream(i);
    const auto match = i / options.rallies_per_match;
    const auto within = i % options.rallies_per_match;
    const auto p0 = match % options.players;
    const auto p1 = (match + 1) % options.players;
    const auto server = within % 2 == 0 ? p0 : p1;
    const auto receiver = server == p0 ? p1 : p0;

    Rally r;
    r.match_id = "M" + std::to_string(match + 1);
    r.rally_id = std::to_string(within + 1);
    r.player_a = "P" + std::to_string(server + 1);
    r.player_b = "P" + std::to_string(receiver + 1);
    const bool mirrored[2] = {server % 2 == 1, receiver % 2 == 1};

    const auto length =
        options.min_length + rng.below(options.max_length - options.min_length + 1);

    Stroke first;
    first.t = 1;
    first.a = place(true, 2.2, kLanes[rng.below(3)], rng);
    first.b = place(false, 2.8, kLanes[rng.below(3)], rng);
    first.shot = rng.bernoulli(0.5) ? ShotType::kShortService : ShotType::kLongService;
    r.strokes.push_back(first);

    for (std::size_t t = 2; t <= length; ++t) {
      const auto& prev = r.strokes.back();
      // Hitter of the previous stroke: A on odd rounds.
      const bool prev_hitter_a = (prev.t % 2) == 1;
      const auto receiver_lane = rng.below(3);
      const auto recover_lane = rng.below(3);
      const auto depth = zone_depth(landing_zone(prev.shot));
      Stroke s;
      s.t = static_cast<int>(t);
      if (prev_hitter_a) {
        s.a = place(true, kRecoverDepth, kLanes[recover_lane], rng);
        s.b = place(false, depth, kLanes[receiver_lane], rng);
      } else {
        s.b = place(false, kRecoverDepth, kLanes[recover_lane], rng);
        s.a = place(true, depth, kLanes[receiver_lane], rng);
      }
      // The receiver now hits, reading the opponent's recovery lane.
      const bool hitter_is_a = !prev_hitter_a;
      s.shot = reply(landing_zone(prev.shot), recover_lane, mirrored[hitter_is_a ? 0 : 1]);
      r.strokes.push_back(s);
    }
    validate(r);
    rallies.push_back(std::move(r));
  }
  return rallies;
}

}  // namespace rallycast::data
