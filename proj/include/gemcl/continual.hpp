#pragma once

// Class-incremental evaluation: classes arrive `increment` at a time, every
// introduced word's queries are scored after each arrival.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "gemcl/episodes.hpp"
#include "gemcl/head.hpp"
#include "gemcl/trainer.hpp"
#include "json.hpp"

namespace gemcl {

struct ProtocolConfig {
  std::size_t increment = 25;
  std::size_t max_classes = 200;
  std::size_t shots = 5;
  std::size_t query_shots = 5;
  std::size_t episodes = 10;
  std::uint64_t seed = 0;
  std::size_t workers = 1;

  void validate() const;
  std::size_t checkpoints() const { return max_classes / increment; }
};

// Per-query correctness of one protocol episode. correct[w][c][q] is query q
// of the w-th introduced word at the c-th checkpoint since its introduction.
struct EpisodeTrace {
  std::vector<std::vector<std::vector<std::uint8_t>>> correct;
};

// Runs one episode on precomputed embeddings. support[w] is (shots, d),
// query[w] is (query_shots, d), both in introduction order. Each query is
// scored against each class exactly once; the running argmax keeps the
// earliest class on ties, matching predict(). `on_checkpoint` sees the head
// after each batch of classes is added.
EpisodeTrace evaluate_episode(const PriorParams& prior, const std::vector<Tensor>& support,
                              const std::vector<Tensor>& query, std::size_t increment,
                              const std::function<void(std::size_t, const HeadState&)>& on_checkpoint = {});

struct WordRow {
  std::size_t episode = 0;
  ClassId word;
  std::size_t introduced_at = 0;  // checkpoint index, 0-based
  // Percent correct at checkpoints introduced_at, introduced_at + 1, ...
  std::vector<double> accuracy;
  // [checkpoint since introduction][query]
  std::vector<std::vector<std::uint8_t>> correct;
};

struct AccuracyMatrix {
  std::size_t increment = 0;
  std::size_t checkpoints = 0;
  std::size_t episodes = 0;
  std::vector<WordRow> rows;  // by episode, then introduction order
};

struct CurvePoint {
  std::size_t classes = 0;
  double mean_accuracy = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
};

struct Volatility {
  double mean = 0.0;
  double std = 0.0;
  std::size_t pairs = 0;
};

struct PhaseTimes {
  double embed_seconds = 0.0;
  double evaluate_seconds = 0.0;
};

struct EvalReport {
  ProtocolConfig config;
  std::vector<CurvePoint> curve;
  std::optional<Volatility> volatility;  // absent with a single checkpoint
  std::size_t monotonicity_violations = 0;
  PhaseTimes runtime;
};

struct ProtocolResult {
  AccuracyMatrix matrix;
  EvalReport report;
};

ProtocolResult run_protocol(const Model& model, const SampleRegistry& test_classes, const ProtocolConfig& cfg);

// Mean episode accuracy per checkpoint with mean +- 1.96 s / sqrt(episodes),
// s the sample std of episode means.
std::vector<CurvePoint> accuracy_curve(const AccuracyMatrix& matrix);

// Mean and population std of |a(t+1) - a(t)| pooled over every episode, word
// and consecutive checkpoint pair.
Volatility per_word_volatility(const AccuracyMatrix& matrix);

// Number of (word, query, checkpoint) steps where an incorrect query becomes correct.
std::size_t count_monotonicity_violations(const AccuracyMatrix& matrix);

enum class PValueMethod { Auto, Exact, Normal };

struct MannWhitney {
  double u = 0.0;  // for the first sample
  double p_two_sided = 1.0;
  bool exact = false;
};

// Auto uses the exact null distribution when min(|a|, |b|) <= 8 and there are
// no ties, otherwise the tie-corrected normal approximation with continuity
// correction. p = 1 when every value is identical.
MannWhitney mann_whitney_u(std::span<const double> a, std::span<const double> b,
                           PValueMethod method = PValueMethod::Auto);

// curve.csv, volatility.csv, per_word.csv and summary.json.
void emit_report(const std::filesystem::path& out_dir, const EvalReport& report, const AccuracyMatrix& matrix,
                 const nlohmann::json& extra = nlohmann::json::object());

nlohmann::json to_json(const ProtocolConfig& c);

}  // namespace gemcl
