#include "gemcl/continual.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <limits>
#include <numeric>

#include "bytes.hpp"
#include "gemcl/error.hpp"

namespace gemcl {
namespace {

struct ProtocolEpisode {
  std::vector<ClassId> order;
  std::vector<std::vector<const Sample*>> support;
  std::vector<std::vector<const Sample*>> query;
};

ProtocolEpisode sample_protocol_episode(const SampleRegistry& registry, const std::vector<ClassId>& ids,
                                        const ProtocolConfig& cfg, Rng& rng) {
  ProtocolEpisode ep;
  const std::size_t per_class = cfg.shots + cfg.query_shots;
  for (std::size_t c : sample_without_replacement(ids.size(), cfg.max_classes, rng)) {
    const auto& pool = registry.samples(ids[c]);
    const auto picks = sample_without_replacement(pool.size(), per_class, rng);
    ep.order.push_back(ids[c]);
    auto& sup = ep.support.emplace_back();
    auto& qry = ep.query.emplace_back();
    for (std::size_t i = 0; i < per_class; ++i) (i < cfg.shots ? sup : qry).push_back(&pool[picks[i]]);
  }
  return ep;
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

double percent(const std::vector<std::uint8_t>& correct) {
  const auto hits = std::count(correct.begin(), correct.end(), std::uint8_t{1});
  return 100.0 * static_cast<double>(hits) / static_cast<double>(correct.size());
}

}  // namespace

void ProtocolConfig::validate() const {
  if (increment < 1) throw ConfigError("increment must be >= 1");
  if (max_classes < 1) throw ConfigError("max_classes must be >= 1");
  if (increment > max_classes) {
    throw ConfigError("increment (" + std::to_string(increment) + ") exceeds max_classes (" +
                      std::to_string(max_classes) + ")");
  }
  if (max_classes % increment != 0) {
    throw ConfigError("max_classes (" + std::to_string(max_classes) + ") is not divisible by increment (" +
                      std::to_string(increment) + ")");
  }
  if (shots < 1) throw ConfigError("shots must be >= 1");
  if (query_shots < 1) throw ConfigError("query_shots must be >= 1");
  if (episodes < 1) throw ConfigError("episodes must be >= 1");
}

EpisodeTrace evaluate_episode(const PriorParams& prior, const std::vector<Tensor>& support,
                              const std::vector<Tensor>& query, std::size_t increment,
                              const std::function<void(std::size_t, const HeadState&)>& on_checkpoint) {
  if (support.size() != query.size()) throw Error("support and query class counts differ");
  if (increment < 1 || support.empty() || support.size() % increment != 0) {
    throw ConfigError("class count must be a positive multiple of the increment");
  }
  const std::size_t words = support.size();
  const std::size_t checkpoints = words / increment;

  constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  struct Best {
    double score = -std::numeric_limits<double>::infinity();
    std::size_t cls = kNone;
  };
  std::vector<std::vector<Best>> best(words);
  for (std::size_t w = 0; w < words; ++w) best[w].resize(query[w].rows());

  EpisodeTrace trace;
  trace.correct.resize(words);
  HeadState head(prior);
  for (std::size_t c = 0; c < checkpoints; ++c) {
    const std::size_t first = c * increment;
    const std::size_t last = first + increment;
    for (std::size_t k = first; k < last; ++k) head.add_class(posterior_from_batch(support[k], std::to_string(k)));
    if (on_checkpoint) on_checkpoint(c, head);
    // Every query, introduced or not, meets each new class once.
    for (std::size_t w = 0; w < words; ++w) {
      for (std::size_t q = 0; q < query[w].rows(); ++q) {
        Best& b = best[w][q];
        for (std::size_t k = first; k < last; ++k) {
          const double s = log_predictive(head.classes()[k], prior, query[w].row(q));
          if (b.cls == kNone || s > b.score) b = {s, k};
        }
      }
    }
    for (std::size_t w = 0; w < last; ++w) {
      auto& row = trace.correct[w].emplace_back(query[w].rows());
      for (std::size_t q = 0; q < row.size(); ++q) row[q] = best[w][q].cls == w;
    }
  }
  return trace;
}

ProtocolResult run_protocol(const Model& model, const SampleRegistry& test_classes, const ProtocolConfig& cfg) {
  cfg.validate();
  const std::vector<ClassId> ids = test_classes.class_ids();
  if (ids.size() < cfg.max_classes) {
    throw Error("protocol needs " + std::to_string(cfg.max_classes) + " classes, registry has " +
                std::to_string(ids.size()));
  }
  const std::size_t per_class = cfg.shots + cfg.query_shots;
  for (const ClassId& id : ids) {
    const std::size_t have = test_classes.samples(id).size();
    if (have < per_class) {
      throw Error("class '" + id + "' has " + std::to_string(have) + " samples, protocol needs " +
                  std::to_string(per_class));
    }
  }

  Rng rng(cfg.seed);
  std::vector<ProtocolEpisode> episodes;
  for (std::size_t e = 0; e < cfg.episodes; ++e) episodes.push_back(sample_protocol_episode(test_classes, ids, cfg, rng));

  std::vector<std::vector<Tensor>> support(cfg.episodes), query(cfg.episodes);
  auto start = std::chrono::steady_clock::now();
  parallel_for(cfg.episodes, cfg.workers, [&](std::size_t e) {
    for (std::size_t w = 0; w < cfg.max_classes; ++w) {
      support[e].push_back(embed_samples(model, episodes[e].support[w]));
      query[e].push_back(embed_samples(model, episodes[e].query[w]));
    }
  });
  PhaseTimes times;
  times.embed_seconds = seconds_since(start);

  start = std::chrono::steady_clock::now();
  std::vector<EpisodeTrace> traces(cfg.episodes);
  parallel_for(cfg.episodes, cfg.workers, [&](std::size_t e) {
    traces[e] = evaluate_episode(model.prior, support[e], query[e], cfg.increment);
  });
  times.evaluate_seconds = seconds_since(start);

  ProtocolResult out;
  AccuracyMatrix& m = out.matrix;
  m.increment = cfg.increment;
  m.checkpoints = cfg.checkpoints();
  m.episodes = cfg.episodes;
  for (std::size_t e = 0; e < cfg.episodes; ++e) {
    for (std::size_t w = 0; w < cfg.max_classes; ++w) {
      WordRow row;
      row.episode = e;
      row.word = episodes[e].order[w];
      row.introduced_at = w / cfg.increment;
      row.correct = std::move(traces[e].correct[w]);
      for (const auto& c : row.correct) row.accuracy.push_back(percent(c));
      m.rows.push_back(std::move(row));
    }
  }
  EvalReport& r = out.report;
  r.config = cfg;
  r.curve = accuracy_curve(m);
  if (m.checkpoints >= 2) r.volatility = per_word_volatility(m);
  r.monotonicity_violations = count_monotonicity_violations(m);
  r.runtime = times;
  return out;
}

std::vector<CurvePoint> accuracy_curve(const AccuracyMatrix& matrix) {
  if (matrix.episodes < 1 || matrix.checkpoints < 1) throw Error("accuracy matrix is empty");
  // Sum and count of word accuracies per (episode, checkpoint).
  std::vector<std::vector<double>> sum(matrix.episodes, std::vector<double>(matrix.checkpoints, 0.0));
  std::vector<std::vector<std::size_t>> count(matrix.episodes, std::vector<std::size_t>(matrix.checkpoints, 0));
  for (const WordRow& row : matrix.rows) {
    if (row.episode >= matrix.episodes || row.introduced_at + row.accuracy.size() > matrix.checkpoints) {
      throw Error("accuracy row for '" + row.word + "' lies outside the matrix");
    }
    for (std::size_t i = 0; i < row.accuracy.size(); ++i) {
      sum[row.episode][row.introduced_at + i] += row.accuracy[i];
      ++count[row.episode][row.introduced_at + i];
    }
  }
  std::vector<CurvePoint> curve;
  const double episodes = static_cast<double>(matrix.episodes);
  for (std::size_t c = 0; c < matrix.checkpoints; ++c) {
    std::vector<double> means;
    for (std::size_t e = 0; e < matrix.episodes; ++e) {
      if (count[e][c] == 0) throw Error("checkpoint " + std::to_string(c) + " has no words in episode " + std::to_string(e));
      means.push_back(sum[e][c] / static_cast<double>(count[e][c]));
    }
    const double mean = std::accumulate(means.begin(), means.end(), 0.0) / episodes;
    double half = 0.0;
    if (means.size() > 1) {
      double ss = 0.0;
      for (double v : means) ss += (v - mean) * (v - mean);
      half = 1.96 * std::sqrt(ss / (episodes - 1.0)) / std::sqrt(episodes);
    }
    curve.push_back({(c + 1) * matrix.increment, mean, mean - half, mean + half});
  }
  return curve;
}

Volatility per_word_volatility(const AccuracyMatrix& matrix) {
  std::vector<double> diffs;
  for (const WordRow& row : matrix.rows) {
    for (std::size_t i = 1; i < row.accuracy.size(); ++i) diffs.push_back(std::fabs(row.accuracy[i] - row.accuracy[i - 1]));
  }
  if (diffs.empty()) throw Error("volatility needs a word evaluated at two consecutive checkpoints");
  const double n = static_cast<double>(diffs.size());
  const double mean = std::accumulate(diffs.begin(), diffs.end(), 0.0) / n;
  double ss = 0.0;
  for (double d : diffs) ss += (d - mean) * (d - mean);
  return {mean, std::sqrt(ss / n), diffs.size()};
}

std::size_t count_monotonicity_violations(const AccuracyMatrix& matrix) {
  std::size_t violations = 0;
  for (const WordRow& row : matrix.rows) {
    for (std::size_t c = 1; c < row.correct.size(); ++c) {
      for (std::size_t q = 0; q < row.correct[c].size(); ++q) violations += !row.correct[c - 1][q] && row.correct[c][q];
    }
  }
  return violations;
}

namespace {

// Null frequency of each U value for sample sizes (n1, n2). An arrangement is
// a multiset of n1 levels in [0, n2] (second-sample items ranked below each
// first-sample item) and U is the sum of the levels.
std::vector<double> exact_null_counts(std::size_t n1, std::size_t n2) {
  const std::size_t max_u = n1 * n2;
  std::vector<std::vector<double>> ways(n1 + 1, std::vector<double>(max_u + 1, 0.0));
  ways[0][0] = 1.0;
  for (std::size_t level = 0; level <= n2; ++level) {
    for (std::size_t i = 1; i <= n1; ++i) {
      for (std::size_t u = level; u <= max_u; ++u) ways[i][u] += ways[i - 1][u - level];
    }
  }
  return ways[n1];
}

double normal_two_sided(double u, double n1, double n2, const std::vector<double>& pooled) {
  const double n = n1 + n2;
  double tie_term = 0.0;
  for (std::size_t i = 0; i < pooled.size();) {
    std::size_t j = i;
    while (j < pooled.size() && pooled[j] == pooled[i]) ++j;
    const double t = static_cast<double>(j - i);
    tie_term += t * t * t - t;
    i = j;
  }
  const double var = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
  if (!(var > 0.0)) return 1.0;
  const double dev = std::max(std::fabs(u - n1 * n2 / 2.0) - 0.5, 0.0);
  return std::min(1.0, std::erfc(dev / std::sqrt(var) / std::sqrt(2.0)));
}

}  // namespace

MannWhitney mann_whitney_u(std::span<const double> a, std::span<const double> b, PValueMethod method) {
  if (a.empty() || b.empty()) throw Error("Mann-Whitney U needs two non-empty samples");
  for (double v : a)
    if (!std::isfinite(v)) throw Error("Mann-Whitney U got a non-finite value");
  for (double v : b)
    if (!std::isfinite(v)) throw Error("Mann-Whitney U got a non-finite value");

  std::vector<std::pair<double, bool>> pooled;  // (value, from a)
  for (double v : a) pooled.push_back({v, true});
  for (double v : b) pooled.push_back({v, false});
  std::sort(pooled.begin(), pooled.end(), [](const auto& x, const auto& y) { return x.first < y.first; });
  double rank_sum_a = 0.0;
  bool ties = false;
  for (std::size_t i = 0; i < pooled.size();) {
    std::size_t j = i;
    while (j < pooled.size() && pooled[j].first == pooled[i].first) ++j;
    if (j - i > 1) ties = true;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k)
      if (pooled[k].second) rank_sum_a += midrank;
    i = j;
  }
  const double n1 = static_cast<double>(a.size());
  const double n2 = static_cast<double>(b.size());
  MannWhitney out;
  out.u = rank_sum_a - n1 * (n1 + 1.0) / 2.0;

  const bool small = std::min(a.size(), b.size()) <= 8;
  if (method == PValueMethod::Exact && ties) throw Error("exact Mann-Whitney p-value needs samples without ties");
  const bool exact = method == PValueMethod::Exact || (method == PValueMethod::Auto && small && !ties);
  if (exact) {
    const std::vector<double> counts = exact_null_counts(a.size(), b.size());
    const double total = std::accumulate(counts.begin(), counts.end(), 0.0);
    const auto u = static_cast<std::size_t>(std::llround(out.u));
    double lower = 0.0, upper = 0.0;
    for (std::size_t k = 0; k < counts.size(); ++k) {
      if (k <= u) lower += counts[k];
      if (k >= u) upper += counts[k];
    }
    out.p_two_sided = std::min(1.0, 2.0 * std::min(lower, upper) / total);
    out.exact = true;
    return out;
  }
  std::vector<double> values;
  for (const auto& [v, from_a] : pooled) values.push_back(v);
  out.p_two_sided = normal_two_sided(out.u, n1, n2, values);
  return out;
}

nlohmann::json to_json(const ProtocolConfig& c) {
  return {{"increment", c.increment}, {"max_classes", c.max_classes}, {"shots", c.shots},
          {"query_shots", c.query_shots}, {"episodes", c.episodes},       {"seed", c.seed}};
}

void emit_report(const std::filesystem::path& out_dir, const EvalReport& report, const AccuracyMatrix& matrix,
                 const nlohmann::json& extra) {
  namespace fs = std::filesystem;
  using bytes::format_double;
  fs::create_directories(out_dir);

  std::string curve = "checkpoint_classes,mean_accuracy,ci_low,ci_high\n";
  for (const CurvePoint& p : report.curve) {
    curve += std::to_string(p.classes) + "," + format_double(p.mean_accuracy) + "," + format_double(p.ci_low) + "," +
             format_double(p.ci_high) + "\n";
  }
  bytes::write_text((out_dir / "curve.csv").string(), curve);

  std::string vol = "mean,std,n_pairs\n";
  if (report.volatility) {
    vol += format_double(report.volatility->mean) + "," + format_double(report.volatility->std) + "," +
           std::to_string(report.volatility->pairs) + "\n";
  }
  bytes::write_text((out_dir / "volatility.csv").string(), vol);

  std::string words = "episode,word,introduced_at";
  for (std::size_t c = 0; c < matrix.checkpoints; ++c) words += ",acc_" + std::to_string((c + 1) * matrix.increment);
  words += "\n";
  for (const WordRow& row : matrix.rows) {
    words += std::to_string(row.episode) + "," + row.word + "," +
             std::to_string((row.introduced_at + 1) * matrix.increment);
    for (std::size_t c = 0; c < matrix.checkpoints; ++c) {
      words += ",";
      if (c >= row.introduced_at) words += format_double(row.accuracy[c - row.introduced_at]);
    }
    words += "\n";
  }
  bytes::write_text((out_dir / "per_word.csv").string(), words);

  nlohmann::json summary;
  summary["protocol"] = to_json(report.config);
  nlohmann::json curve_json = nlohmann::json::array();
  for (const CurvePoint& p : report.curve) {
    curve_json.push_back({{"classes", p.classes}, {"mean_accuracy", p.mean_accuracy}, {"ci_low", p.ci_low},
                          {"ci_high", p.ci_high}});
  }
  summary["curve"] = curve_json;
  summary["ci_method"] = "mean +- 1.96 * sample std of episode means / sqrt(episodes)";
  if (report.volatility) {
    summary["volatility"] = {{"mean", report.volatility->mean},
                             {"std", report.volatility->std},
                             {"n_pairs", report.volatility->pairs},
                             {"definition",
                              "|accuracy change| between consecutive checkpoints, pooled over episodes, words and "
                              "checkpoint pairs; std is the population std of the pooled values"}};
  } else {
    summary["volatility"] = nullptr;
  }
  summary["monotonicity_violations"] = report.monotonicity_violations;
  nlohmann::json order = nlohmann::json::array();
  for (std::size_t e = 0; e < matrix.episodes; ++e) {
    nlohmann::json ep = nlohmann::json::array();
    for (const WordRow& row : matrix.rows)
      if (row.episode == e) ep.push_back(row.word);
    order.push_back(ep);
  }
  summary["introduction_order"] = order;
  summary["runtime_seconds"] = {{"embed", report.runtime.embed_seconds},
                                {"evaluate", report.runtime.evaluate_seconds}};
  if (!extra.empty()) summary["source"] = extra;
  bytes::write_text((out_dir / "summary.json").string(), summary.dump(2) + "\n");
}

}  // namespace gemcl
