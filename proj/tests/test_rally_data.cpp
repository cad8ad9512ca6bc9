#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <set>
#include <sstream>

#include "rallycast/errors.hpp"
#include "rallycast/rally.hpp"
#include "rallycast/rng.hpp"

using namespace rallycast;
using namespace rallycast::data;

namespace {

const char* kHeader =
    "match_id,rally_id,ball_round,player_a_id,player_b_id,shot_type,player_a_x,player_a_y,"
    "player_b_x,player_b_y\n";

std::string row(const std::string& match, const std::string& rally, int t,
                const std::string& shot, double ax = 1, double ay = 2, double bx = 3,
                double by = 11) {
  std::ostringstream o;
  o << match << ',' << rally << ',' << t << ",PA,PB," << shot << ',' << ax << ',' << ay << ','
    << bx << ',' << by << '\n';
  return o.str();
}

std::string shot_for(int t) { return t == 1 ? "short service" : (t % 2 ? "clear" : "lob"); }

std::string rally_csv(const std::string& match, const std::string& rally, int n) {
  std::string s;
  for (int t = 1; t <= n; ++t) s += row(match, rally, t, shot_for(t), t, t + 0.5, 6 - t * 0.1, 12);
  return s;
}

ParseResult parse(const std::string& body) {
  std::istringstream in(std::string(kHeader) + body);
  return parse_rallies(in);
}

Rally make_rally(std::string match, std::string id, std::size_t n) {
  Rally r{std::move(match), std::move(id), "PA", "PB", {}};
  for (std::size_t t = 1; t <= n; ++t)
    r.strokes.push_back({static_cast<int>(t), {double(t), 1.0}, {2.0, double(t) * 2},
                         t == 1 ? ShotType::kLongService : ShotType::kDrop});
  return r;
}

}  // namespace

TEST_CASE("shot vocabulary is the closed list of ten") {
  const std::vector<std::string> names = {"net shot", "lob",   "defensive shot", "smash",
                                          "drop",     "push/rush", "short service", "clear",
                                          "drive",    "long service"};
  REQUIRE(all_shots().size() == names.size());
  for (std::size_t i = 0; i < names.size(); ++i) {
    CHECK(shot_name(shot_from_index(i)) == names[i]);
    CHECK(parse_shot(names[i]) == shot_from_index(i));
    CHECK(shot_index(shot_from_index(i)) == i);
  }
  CHECK(parse_shot("Defend") == std::nullopt);
  CHECK(is_serve(ShotType::kShortService));
  CHECK(is_serve(ShotType::kLongService));
  CHECK_FALSE(is_serve(ShotType::kSmash));
}

TEST_CASE("parse one 4-stroke rally") {
  const auto r = parse(rally_csv("M1", "1", 4));
  REQUIRE(r.rallies.size() == 1);
  CHECK(r.rallies[0].size() == 4);
  CHECK(r.rallies[0].player_a == "PA");
  CHECK(r.rallies[0].strokes[3].shot == ShotType::kLob);
  CHECK(r.warnings.empty());
}

TEST_CASE("rows with an empty field drop their rally with a warning") {
  auto body = rally_csv("M1", "1", 3);
  body += "M1,2,1,PA,PB,,1,2,3,4\n";
  body += row("M1", "2", 2, "lob");
  const auto r = parse(body);
  CHECK(r.rallies.size() == 1);
  CHECK(r.warnings.size() == 1);
}

TEST_CASE("long rallies are truncated to 35 strokes") {
  const auto r = parse(rally_csv("M1", "1", 40));
  REQUIRE(r.rallies.size() == 1);
  CHECK(r.rallies[0].size() == 35);
}

TEST_CASE("strokes are ordered by ball_round and grouped by rally") {
  const auto body = row("M1", "1", 2, "lob") + row("M2", "1", 1, "long service") +
                    row("M1", "1", 1, "short service") + row("M2", "1", 2, "drive");
  const auto r = parse(body);
  REQUIRE(r.rallies.size() == 2);
  CHECK(r.rallies[0].match_id == "M1");
  CHECK(r.rallies[0].strokes[0].t == 1);
  CHECK(r.rallies[0].strokes[1].t == 2);
}

TEST_CASE("malformed rows report their line number") {
  try {
    parse(rally_csv("M1", "1", 2) + "M1,1,3,PA,PB,lob,1,2,3\n");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.line() == 4);
  }
  CHECK_THROWS_AS(parse(row("M1", "1", 1, "short service", 1) + "M1,1,2,PA,PB,lob,abc,2,3,4\n"),
                  ParseError);
  CHECK_THROWS_AS(parse(row("M1", "1", 1, "teleport")), ParseError);
  std::istringstream no_header("match_id,rally_id\n");
  CHECK_THROWS_AS(parse_rallies(no_header), ParseError);
}

TEST_CASE("alternation violations name the rally") {
  const auto body = row("M9", "R4", 1, "short service") + row("M9", "R4", 3, "lob");
  try {
    parse(body);
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("R4") != std::string::npos);
  }
  CHECK_THROWS_AS(parse(row("M1", "1", 1, "clear")), ValidationError);
  CHECK_THROWS_AS(parse(row("M1", "1", 1, "short service") + row("M1", "1", 2, "long service")),
                  ValidationError);
}

TEST_CASE("write then parse round-trips exactly") {
  SyntheticOptions o;
  o.seed = 3;
  const auto rallies = generate_synthetic(o);
  std::stringstream buf;
  write_rallies(buf, rallies);
  const auto back = parse_rallies(buf);
  CHECK(back.rallies == rallies);
}

TEST_CASE("split examples") {
  std::vector<Rally> ten;
  for (int i = 0; i < 10; ++i) ten.push_back(make_rally("M1", std::to_string(i), 3));
  auto s = split_train_test(ten);
  CHECK(s.train.size() == 8);
  CHECK(s.test.size() == 2);

  s = split_train_test(std::vector<Rally>{make_rally("M1", "1", 3)});
  CHECK(s.train.size() == 1);
  CHECK(s.test.empty());

  std::vector<Rally> two;
  for (int i = 0; i < 5; ++i) two.push_back(make_rally("A", std::to_string(i), 3));
  for (int i = 0; i < 5; ++i) two.push_back(make_rally("B", std::to_string(i), 3));
  s = split_train_test(two);
  CHECK(s.train.size() == 8);
  CHECK(s.test.size() == 2);
  CHECK(s.test[0].match_id == "A");
  CHECK(s.test[0].rally_id == "4");
  CHECK(s.test[1].match_id == "B");
}

TEST_CASE("split is an order-preserving partition") {
  Rng rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Rally> rallies;
    const auto n = rng.below(30);
    for (std::size_t i = 0; i < n; ++i)
      rallies.push_back(make_rally("M" + std::to_string(rng.below(4)), std::to_string(i), 2));
    const auto s = split_train_test(rallies);
    CHECK(s.train.size() + s.test.size() == rallies.size());
    std::multiset<std::string> in, out;
    for (const auto& r : rallies) in.insert(r.rally_id);
    for (const auto& r : s.train) out.insert(r.rally_id);
    for (const auto& r : s.test) out.insert(r.rally_id);
    CHECK(in == out);
    // Within each match, every train rally precedes every test rally in file order.
    for (const auto& t : s.test)
      for (const auto& tr : s.train)
        if (tr.match_id == t.match_id) CHECK(std::stoi(tr.rally_id) < std::stoi(t.rally_id));
  }
}

TEST_CASE("vocabulary reserves index 0 for unknown players") {
  std::vector<Rally> rs = {make_rally("M", "1", 2)};
  rs[0].player_a = "zed";
  rs[0].player_b = "amy";
  const auto v = Vocabulary::build(rs);
  CHECK(v.player_count() == 3);
  CHECK(v.players() == std::vector<std::string>{"amy", "zed"});
  CHECK(v.index("amy") == 1);
  CHECK(v.index("zed") == 2);
  CHECK(v.index("nobody") == Vocabulary::kUnknownPlayer);
  CHECK(v.name(0) == Vocabulary::kUnknownName);
  CHECK(v.name(2) == "zed");
}

TEST_CASE("normalize examples") {
  const NormStats s{2.0, 5.0, 2.0, 4.0};
  CHECK(s.normalize({2.0, 5.0}) == Point{0.0, 0.0});
  CHECK(s.normalize({4.0, 9.0}) == Point{1.0, 1.0});
  CHECK_THROWS_AS((NormStats{0, 0, 0.0, 1.0}.check()), ConfigError);

  Rng rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    auto r = make_rally("M", "1", 1 + rng.below(20));
    for (auto& st : r.strokes) {
      st.a = {rng.uniform(-3, 9), rng.uniform(-3, 16)};
      st.b = {rng.uniform(-3, 9), rng.uniform(-3, 16)};
    }
    const NormStats stats{rng.uniform(0, 6), rng.uniform(0, 13), rng.uniform(0.1, 3),
                          rng.uniform(0.1, 5)};
    const auto back = denormalize(normalize(r, stats), stats);
    for (std::size_t i = 0; i < r.size(); ++i) {
      CHECK(std::abs(back.strokes[i].a.x - r.strokes[i].a.x) < 1e-12);
      CHECK(std::abs(back.strokes[i].a.y - r.strokes[i].a.y) < 1e-12);
      CHECK(std::abs(back.strokes[i].b.x - r.strokes[i].b.x) < 1e-12);
      CHECK(std::abs(back.strokes[i].b.y - r.strokes[i].b.y) < 1e-12);
    }
  }
}

TEST_CASE("norm stats pool both players and ignore the test split") {
  std::vector<Rally> rs = {make_rally("M", "1", 1)};
  rs[0].strokes[0].a = {1.0, 2.0};
  rs[0].strokes[0].b = {3.0, 6.0};
  const auto s = NormStats::compute(rs);
  CHECK(s.mean_x == 2.0);
  CHECK(s.mean_y == 4.0);

  SyntheticOptions o;
  o.seed = 1;
  o.rallies = 20;
  const auto all = generate_synthetic(o);
  const auto split = split_train_test(all);
  const auto train_only = NormStats::compute(split.train);
  auto perturbed = split;
  for (auto& r : perturbed.test)
    for (auto& st : r.strokes) st.a.x += 100.0;
  CHECK(NormStats::compute(perturbed.train) == train_only);
  CHECK_FALSE(NormStats::compute(all) == train_only);
}

TEST_CASE("synthetic generator") {
  SyntheticOptions o;
  o.seed = 42;
  const auto a = generate_synthetic(o);
  const auto b = generate_synthetic(o);
  CHECK(a == b);
  std::stringstream sa, sb;
  write_rallies(sa, a);
  write_rallies(sb, b);
  CHECK(sa.str() == sb.str());

  REQUIRE(a.size() == 16);
  for (const auto& r : a) {
    CHECK_NOTHROW(validate(r));
    CHECK(r.size() >= 6);
    CHECK(r.size() <= 12);
    for (const auto& s : r.strokes) {
      CHECK(s.a.x >= 0.0);
      CHECK(s.a.x <= kCourtWidth);
      CHECK(s.b.y >= 0.0);
      CHECK(s.b.y <= kCourtLength);
    }
  }
  o.seed = 43;
  CHECK_FALSE(generate_synthetic(o) == a);

  o.min_length = 1;
  CHECK_THROWS_AS(generate_synthetic(o), ConfigError);
  o.min_length = 8;
  o.max_length = 6;
  CHECK_THROWS_AS(generate_synthetic(o), ConfigError);
  o.min_length = 2;
  o.max_length = 36;
  CHECK_THROWS_AS(generate_synthetic(o), ConfigError);
}

TEST_CASE("synthetic rallies respect alternation across seeds and ranges") {
  Rng rng(99);
  for (int trial = 0; trial < 50; ++trial) {
    SyntheticOptions o;
    o.seed = rng.next_u64();
    o.rallies = 1 + rng.below(10);
    o.min_length = 2 + rng.below(10);
    o.max_length = o.min_length + rng.below(35 - o.min_length + 1);
    for (const auto& r : generate_synthetic(o)) {
      CHECK_NOTHROW(validate(r));
      CHECK(r.size() >= o.min_length);
      CHECK(r.size() <= o.max_length);
    }
  }
}
