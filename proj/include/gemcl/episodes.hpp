#pragma once

// Class-indexed sample registries, class splits, N-way-K-shot episode
// sampling and synthetic Gaussian tasks.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "gemcl/head.hpp"
#include "gemcl/tensor.hpp"

namespace gemcl {

using Rng = std::mt19937_64;

struct Sample {
  std::string ref;  // unique within a registry: a file path or a synthetic name
  std::shared_ptr<const Tensor> features;
};

class SampleRegistry {
 public:
  explicit SampleRegistry(std::string source = {}) : source_(std::move(source)) {}

  // Rejects a ref already present in the registry.
  void add(const ClassId& id, Sample sample);

  const std::string& source() const { return source_; }
  std::size_t num_classes() const { return classes_.size(); }
  std::size_t num_samples() const;
  bool contains(const ClassId& id) const { return classes_.contains(id); }
  // Sorted by id.
  std::vector<ClassId> class_ids() const;
  const std::vector<Sample>& samples(const ClassId& id) const;

  // Registry restricted to `ids`; every id must be present.
  SampleRegistry subset(const std::vector<ClassId>& ids) const;

 private:
  std::string source_;
  std::map<ClassId, std::vector<Sample>> classes_;
  std::map<std::string, ClassId> refs_;
};

struct EpisodeSpec {
  std::size_t ways = 10;
  std::size_t shots = 5;
  std::size_t query_shots = 5;

  void validate() const;  // ways >= 2, shots >= 1, query_shots >= 1
  std::size_t total_queries() const { return ways * query_shots; }
};

struct EpisodeItem {
  std::size_t label;  // index into Episode::class_ids
  Sample sample;
};

// Support rows are grouped by class (K per class in class order), as are the
// query rows (Q per class).
struct Episode {
  std::vector<ClassId> class_ids;
  std::vector<EpisodeItem> support;
  std::vector<EpisodeItem> query;

  std::vector<std::size_t> support_labels() const;
  std::vector<std::size_t> query_labels() const;
};

// Deterministic shuffled split of the sorted ids; the first
// round(ratio * total) go to meta-training.
std::pair<std::vector<ClassId>, std::vector<ClassId>> split_classes(std::vector<ClassId> ids, double ratio,
                                                                    std::uint64_t seed);

Episode sample_episode(const SampleRegistry& registry, const EpisodeSpec& spec, Rng& rng);

// Draws `count` distinct indices from [0, n) in random order.
std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t count, Rng& rng);

enum class SynthMode { RawVector, PseudoMfcc };
const char* to_string(SynthMode m);
SynthMode parse_synth_mode(const std::string& s);

struct SynthTaskConfig {
  std::size_t latent_dim = 16;
  double class_sep = 1.0;    // std of the class means
  double within_std = 0.1;   // std of samples around their class mean
  SynthMode mode = SynthMode::RawVector;
  std::size_t frames = 8;    // pseudo-mfcc only

  void validate() const;
  // Shape of one observation: (latent_dim) or (frames, 13).
  Shape sample_shape() const;

  friend bool operator==(const SynthTaskConfig&, const SynthTaskConfig&) = default;
};

inline constexpr std::size_t kPseudoMfccCeps = 13;

// Observation for a latent vector: the vector itself, or a frames x 13
// matrix whose entry (t, j) is latent[(13 t + j) mod latent_dim].
Tensor observe_latent(const SynthTaskConfig& cfg, const std::vector<double>& latent);

// One episode over N freshly drawn classes.
Episode synth_task(const SynthTaskConfig& cfg, const EpisodeSpec& spec, Rng& rng);

// Class i of a universe drawn with `seed` is the same whatever num_classes is,
// and its first s samples do not depend on samples_per_class.
SampleRegistry synth_registry(const SynthTaskConfig& cfg, std::size_t num_classes, std::size_t samples_per_class,
                              std::uint64_t seed);
std::string synth_class_id(std::size_t index);

// Newline-delimited JSON records {"word", "path", "split"}; split is "train"
// or "test". Blank lines are skipped.
struct ManifestEntry {
  std::string word;
  std::string path;
  std::string split;
  std::size_t line = 0;
};
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries);

// Location of the cached MFCC dump for a manifest path.
std::filesystem::path feature_path(const std::filesystem::path& features_dir, const std::string& audio_path);

// Loads the feature dumps of the entries in `split` belonging to `words`
// (all words when empty).
SampleRegistry load_registry(const std::vector<ManifestEntry>& entries, const std::filesystem::path& features_dir,
                             const std::string& split, const std::vector<ClassId>& words = {});

}  // namespace gemcl
