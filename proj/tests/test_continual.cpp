#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "doctest.h"
#include "gemcl/continual.hpp"
#include "gemcl/error.hpp"

using namespace gemcl;
namespace fs = std::filesystem;

namespace {

AccuracyMatrix hand_matrix(std::vector<std::vector<double>> rows, std::size_t checkpoints) {
  AccuracyMatrix m;
  m.increment = 1;
  m.checkpoints = checkpoints;
  m.episodes = 1;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    WordRow r;
    r.word = "w" + std::to_string(i);
    r.introduced_at = checkpoints - rows[i].size();
    r.accuracy = std::move(rows[i]);
    m.rows.push_back(std::move(r));
  }
  return m;
}

// Exact two-sided p by listing every way to choose which pooled ranks belong
// to the first sample.
double brute_force_p(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> pooled = a;
  pooled.insert(pooled.end(), b.begin(), b.end());
  std::sort(pooled.begin(), pooled.end());
  auto u_of = [&](const std::vector<double>& first) {
    double u = 0;
    for (double x : first)
      for (double y : pooled)
        if (y < x && std::find(first.begin(), first.end(), y) == first.end()) u += 1;
    return u;
  };
  const double observed = u_of(a);
  const std::size_t n = pooled.size();
  std::size_t lower = 0, upper = 0, total = 0;
  for (unsigned mask = 0; mask < (1u << n); ++mask) {
    if (static_cast<std::size_t>(__builtin_popcount(mask)) != a.size()) continue;
    std::vector<double> pick;
    for (std::size_t i = 0; i < n; ++i)
      if (mask >> i & 1u) pick.push_back(pooled[i]);
    const double u = u_of(pick);
    ++total;
    lower += u <= observed;
    upper += u >= observed;
  }
  return std::min(1.0, 2.0 * static_cast<double>(std::min(lower, upper)) / static_cast<double>(total));
}

std::vector<Tensor> random_blocks(std::size_t count, std::size_t rows, std::size_t dim, std::mt19937_64& rng,
                                  double spread) {
  std::normal_distribution<double> n;
  std::vector<Tensor> out;
  for (std::size_t c = 0; c < count; ++c) {
    Tensor t(Shape{rows, dim});
    for (double& v : t.data()) v = spread * n(rng);
    out.push_back(std::move(t));
  }
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, sep)) out.push_back(cell);
  if (!line.empty() && line.back() == sep) out.push_back("");
  return out;
}

Model vector_model(std::size_t latent) {
  EncoderConfig enc;
  enc.input_mode = InputMode::Vector;
  enc.input_features = latent;
  enc.hidden_dims = {16};
  enc.embed_dim = 8;
  enc.seed = 4;
  return Model::initial(enc);
}

}  // namespace

TEST_CASE("protocol config validation") {
  ProtocolConfig c;
  CHECK_NOTHROW(c.validate());
  CHECK(c.checkpoints() == 8);
  c.increment = 30;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("not divisible"), ConfigError);
  c.increment = 300;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("exceeds"), ConfigError);
  c.increment = 1;
  c.max_classes = 1;
  CHECK_NOTHROW(c.validate());
  c.episodes = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("volatility of hand-built matrices") {
  const Volatility flat = per_word_volatility(hand_matrix({{60, 60, 60}, {100, 100}}, 3));
  CHECK(flat.mean == 0.0);
  CHECK(flat.std == 0.0);
  CHECK(flat.pairs == 3);

  const Volatility flip = per_word_volatility(hand_matrix({{100, 0, 100}}, 3));
  CHECK(flip.mean == 100.0);
  CHECK(flip.std == 0.0);

  const Volatility two = per_word_volatility(hand_matrix({{80, 60, 60}, {100, 100, 80}}, 3));
  CHECK(two.mean == 10.0);
  CHECK(two.std == 10.0);
  CHECK(two.pairs == 4);

  CHECK_THROWS_WITH(per_word_volatility(hand_matrix({{80}, {20}}, 1)), doctest::Contains("two consecutive"));
}

TEST_CASE("curve confidence interval") {
  AccuracyMatrix m;
  m.increment = 2;
  m.checkpoints = 1;
  m.episodes = 3;
  const std::vector<std::vector<double>> acc = {{40, 60}, {80, 100}, {20, 20}};
  for (std::size_t e = 0; e < 3; ++e)
    for (double a : acc[e]) m.rows.push_back({e, "w", 0, {a}, {}});
  const auto curve = accuracy_curve(m);
  REQUIRE(curve.size() == 1);
  // Episode means 50, 90, 20; sample std sqrt(1233.33...).
  const double sd = std::sqrt(((50.0 - 160.0 / 3) * (50.0 - 160.0 / 3) + (90.0 - 160.0 / 3) * (90.0 - 160.0 / 3) +
                               (20.0 - 160.0 / 3) * (20.0 - 160.0 / 3)) /
                              2.0);
  CHECK(curve[0].classes == 2);
  CHECK(curve[0].mean_accuracy == doctest::Approx(160.0 / 3).epsilon(1e-15));
  CHECK(curve[0].ci_high - curve[0].mean_accuracy == doctest::Approx(1.96 * sd / std::sqrt(3.0)).epsilon(1e-14));
  CHECK(curve[0].mean_accuracy - curve[0].ci_low == doctest::Approx(1.96 * sd / std::sqrt(3.0)).epsilon(1e-14));

  m.episodes = 1;
  m.rows.resize(2);
  const auto single = accuracy_curve(m);
  CHECK(single[0].ci_low == single[0].mean_accuracy);
  CHECK(single[0].ci_high == single[0].mean_accuracy);
}

TEST_CASE("Mann-Whitney examples") {
  const std::vector<double> a{1, 2, 3}, b{4, 5, 6};
  const MannWhitney r = mann_whitney_u(a, b);
  CHECK(r.u == 0.0);
  CHECK(r.exact);
  CHECK(r.p_two_sided == doctest::Approx(0.1).epsilon(1e-15));
  const MannWhitney swapped = mann_whitney_u(b, a);
  CHECK(swapped.u == 9.0);
  CHECK(swapped.p_two_sided == r.p_two_sided);

  CHECK(mann_whitney_u(a, a).p_two_sided == doctest::Approx(1.0).epsilon(1e-12));
  const std::vector<double> same{2, 2, 2};
  CHECK(mann_whitney_u(same, same).p_two_sided == 1.0);
  CHECK(mann_whitney_u(same, same, PValueMethod::Normal).p_two_sided == 1.0);

  CHECK_THROWS_AS(mann_whitney_u(std::vector<double>{}, b), Error);
  CHECK_THROWS_WITH(mann_whitney_u(same, b, PValueMethod::Exact), doctest::Contains("ties"));
}

TEST_CASE("Mann-Whitney against reference values") {
  // Reference values from an established statistics package.
  const std::vector<double> a{1, 2, 2, 3, 5, 7, 7, 9, 10}, b{2, 4, 6, 6, 8, 11, 12, 13, 14, 15};
  const MannWhitney tied = mann_whitney_u(a, b);
  CHECK_FALSE(tied.exact);
  CHECK(tied.u == 22.0);
  CHECK(tied.p_two_sided == doctest::Approx(0.06547939280895006).epsilon(1e-12));

  std::vector<double> c, d;
  for (int i = 0; i < 10; ++i) c.push_back(i + 0.5);
  for (int i = 1; i <= 12; ++i) d.push_back(i);
  const MannWhitney big = mann_whitney_u(c, d);
  CHECK(big.u == 45.0);
  CHECK(big.p_two_sided == doctest::Approx(0.33902086286986766).epsilon(1e-12));

  const MannWhitney exact = mann_whitney_u(std::vector<double>{1, 3, 5, 7, 9}, std::vector<double>{2, 4, 6, 8, 10, 12, 14});
  CHECK(exact.exact);
  CHECK(exact.u == 10.0);
  CHECK(exact.p_two_sided == doctest::Approx(0.26767676767676774).epsilon(1e-13));
}

TEST_CASE("exact p matches enumeration for small samples") {
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<int> size(1, 5);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<double> pool(20);
    std::iota(pool.begin(), pool.end(), 0.0);
    std::shuffle(pool.begin(), pool.end(), rng);
    const int n1 = size(rng), n2 = size(rng);
    const std::vector<double> a(pool.begin(), pool.begin() + n1), b(pool.begin() + n1, pool.begin() + n1 + n2);
    const MannWhitney r = mann_whitney_u(a, b);
    REQUIRE(r.exact);
    CHECK(r.p_two_sided == brute_force_p(a, b));
  }
}

TEST_CASE("exact null distribution with a large second sample") {
  std::vector<double> a, b;
  for (int i = 0; i < 8; ++i) a.push_back(3.0 * i + 0.25);
  for (int i = 0; i < 150; ++i) b.push_back(0.5 * i);
  const MannWhitney e = mann_whitney_u(a, b, PValueMethod::Exact);
  const MannWhitney n = mann_whitney_u(a, b, PValueMethod::Normal);
  CHECK(e.u == n.u);
  CHECK(e.p_two_sided == doctest::Approx(n.p_two_sided).epsilon(0.05));
}

TEST_CASE("running argmax agrees with predict and heads persist") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t words = 12, increment = 3, dim = 4;
    const auto centers = random_blocks(words, 1, dim, rng, 1.0);
    auto support = random_blocks(words, 3, dim, rng, 0.8);
    auto query = random_blocks(words, 4, dim, rng, 0.8);
    for (std::size_t w = 0; w < words; ++w) {
      for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t j = 0; j < dim; ++j) support[w].row(r)[j] += centers[w].row(0)[j];
      for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t j = 0; j < dim; ++j) query[w].row(r)[j] += centers[w].row(0)[j];
    }
    const PriorParams prior{0.3, -0.2};
    std::vector<std::vector<std::uint8_t>> via_predict(words * 4);
    std::vector<ClassPosterior> earlier;
    std::size_t persisted = 0;
    const EpisodeTrace trace = evaluate_episode(prior, support, query, increment, [&](std::size_t c, const HeadState& head) {
      REQUIRE(head.size() == (c + 1) * increment);
      for (std::size_t k = 0; k < earlier.size(); ++k) {
        CHECK(head.classes()[k] == earlier[k]);
        ++persisted;
      }
      earlier = head.classes();
      for (std::size_t w = 0; w < head.size(); ++w)
        for (std::size_t q = 0; q < 4; ++q)
          via_predict[w * 4 + q].push_back(predict(head, query[w].row(q)) == std::to_string(w));
    });
    CHECK(persisted == 3 + 6 + 9);
    for (std::size_t w = 0; w < words; ++w) {
      REQUIRE(trace.correct[w].size() == 4 - w / increment);
      for (std::size_t c = 0; c < trace.correct[w].size(); ++c)
        for (std::size_t q = 0; q < 4; ++q) CHECK(trace.correct[w][c][q] == via_predict[w * 4 + q][c]);
    }
  }
}

TEST_CASE("correctness never returns once lost") {
  std::mt19937_64 rng(11);
  std::size_t flips = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const auto support = random_blocks(40, 2, 3, rng, 1.0);
    const auto query = random_blocks(40, 3, 3, rng, 1.0);
    const EpisodeTrace t = evaluate_episode({}, support, query, 5);
    for (const auto& word : t.correct) {
      for (std::size_t c = 1; c < word.size(); ++c) {
        for (std::size_t q = 0; q < word[c].size(); ++q) {
          CHECK_FALSE((!word[c - 1][q] && word[c][q]));
          flips += word[c - 1][q] && !word[c][q];
        }
      }
    }
  }
  CHECK(flips > 0);
}

TEST_CASE("a single class is always right") {
  std::mt19937_64 rng(1);
  const EpisodeTrace t = evaluate_episode({}, random_blocks(1, 5, 3, rng, 1.0), random_blocks(1, 5, 3, rng, 5.0), 1);
  REQUIRE(t.correct.size() == 1);
  CHECK(t.correct[0] == std::vector<std::vector<std::uint8_t>>{{1, 1, 1, 1, 1}});
}

TEST_CASE("protocol run shape, determinism and report files") {
  SynthTaskConfig synth;
  synth.latent_dim = 6;
  const SampleRegistry reg = synth_registry(synth, 60, 10, 17);
  const Model model = vector_model(6);
  ProtocolConfig cfg;
  cfg.max_classes = 50;
  cfg.increment = 25;
  cfg.episodes = 3;
  cfg.seed = 5;
  const ProtocolResult r = run_protocol(model, reg, cfg);
  CHECK(r.report.curve.size() == 2);
  CHECK(r.report.curve[0].classes == 25);
  CHECK(r.report.curve[1].classes == 50);
  CHECK(r.matrix.rows.size() == 150);
  for (const WordRow& row : r.matrix.rows) {
    CHECK(row.accuracy.size() == (row.introduced_at == 0 ? 2u : 1u));
    for (double a : row.accuracy) CHECK(std::fmod(a, 20.0) == 0.0);
  }
  CHECK(r.report.monotonicity_violations == 0);
  REQUIRE(r.report.volatility);
  CHECK(r.report.volatility->pairs == 75);
  for (const WordRow& row : r.matrix.rows)
    if (row.accuracy.size() == 2) CHECK(row.accuracy[1] <= row.accuracy[0]);

  cfg.workers = 3;
  const ProtocolResult again = run_protocol(model, reg, cfg);
  const fs::path dir = fs::path(GEMCL_TEST_DATA_DIR) / "continual_tmp";
  fs::remove_all(dir);
  emit_report(dir / "a", r.report, r.matrix);
  emit_report(dir / "b", again.report, again.matrix);
  for (const char* f : {"curve.csv", "volatility.csv", "per_word.csv"}) CHECK(slurp(dir / "a" / f) == slurp(dir / "b" / f));

  const std::string curve = slurp(dir / "a" / "curve.csv");
  CHECK(curve.starts_with("checkpoint_classes,mean_accuracy,ci_low,ci_high\n"));
  CHECK(std::count(curve.begin(), curve.end(), '\n') == 3);

  // Recompute volatility from per_word.csv alone.
  std::istringstream words(slurp(dir / "a" / "per_word.csv"));
  std::string line;
  std::getline(words, line);
  CHECK(line == "episode,word,introduced_at,acc_25,acc_50");
  std::vector<double> diffs;
  while (std::getline(words, line)) {
    const auto cells = split(line, ',');
    REQUIRE(cells.size() == 5);
    for (std::size_t i = 4; i < cells.size(); ++i)
      if (!cells[i - 1].empty() && !cells[i].empty()) diffs.push_back(std::fabs(std::stod(cells[i]) - std::stod(cells[i - 1])));
  }
  double mean = 0;
  for (double d : diffs) mean += d / static_cast<double>(diffs.size());
  CHECK(mean == doctest::Approx(r.report.volatility->mean).epsilon(1e-12));

  cfg.max_classes = 75;
  CHECK_THROWS_WITH(run_protocol(model, reg, cfg), doctest::Contains("protocol needs 75 classes, registry has 60"));
  cfg.max_classes = 50;
  cfg.shots = 8;
  CHECK_THROWS_WITH(run_protocol(model, reg, cfg), doctest::Contains("has 10 samples, protocol needs 13"));
}
