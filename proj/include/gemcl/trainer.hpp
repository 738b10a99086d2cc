#pragma once

// Episodic meta-training of the encoder and the prior, Adam, checkpoints.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "gemcl/encoder.hpp"
#include "gemcl/episodes.hpp"
#include "gemcl/head.hpp"
#include "json.hpp"

namespace gemcl {

// Everything needed to embed samples and classify them.
struct Model {
  EncoderConfig encoder;
  EncoderParams params;
  PriorParams prior;

  static Model initial(const EncoderConfig& encoder);
  // Encoder parameters plus kRhoAlpha / kRhoBeta.
  NamedTensors meta_parameters() const;
  void set_meta_parameters(const NamedTensors& all);
};

// (batch, d) embeddings, forward only.
Tensor embed_samples(const Model& model, std::span<const Sample* const> samples);
Tensor embed_items(const Model& model, const std::vector<EpisodeItem>& items);
// Fraction of queries whose predicted class (via HeadState) is their own.
double episode_accuracy(const Model& model, const Episode& episode);

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptState {
  NamedTensors first_moment;
  NamedTensors second_moment;
  std::uint64_t step = 0;
};

// One bias-corrected Adam update of every tensor in `params`. Throws when a
// gradient is missing, mis-shaped or non-finite (naming the parameter).
void adam_step(NamedTensors& params, const NamedTensors& grads, OptState& state, const AdamConfig& hyper);

struct ValidationPoint {
  std::size_t step;  // 1-based count of completed updates
  double accuracy;

  friend bool operator==(const ValidationPoint&, const ValidationPoint&) = default;
};

struct TrainConfig {
  std::size_t steps = 2000;
  std::size_t batch_episodes = 4;
  EpisodeSpec spec{};
  AdamConfig adam{};
  std::uint64_t seed = 0;
  std::size_t validation_every = 100;
  std::size_t validation_episodes = 20;
  double max_grad_norm = 0.0;  // 0 disables clipping
  std::size_t workers = 1;
  // When set: final.ckpt, best.ckpt and train_log.csv are written here.
  std::filesystem::path checkpoint_dir;
  // Called after every validation with the point and that step's batch loss.
  std::function<void(const ValidationPoint&, double)> on_validation;

  void validate() const;
};

struct TrainHistory {
  std::vector<double> loss;  // mean batch loss of each step, before its update
  std::vector<ValidationPoint> validation;

  friend bool operator==(const TrainHistory&, const TrainHistory&) = default;
};

struct TrainResult {
  Model final_model;
  Model best_model;
  std::size_t best_step = 0;
  double best_accuracy = 0.0;
  TrainHistory history;
};

// Mean episode_loss over `episodes` and its gradient w.r.t. every meta
// parameter. Per-episode gradients are summed in episode order.
struct BatchGradient {
  double loss = 0.0;
  NamedTensors grads;
};
BatchGradient batch_gradient(const Model& model, const std::vector<Episode>& episodes, std::size_t workers = 1);

// Meta-trains on episodes drawn from `train_classes`; validates on a fixed set
// of episodes drawn from `validation_classes`. `data_info` is stored verbatim
// in every checkpoint written.
TrainResult train(const TrainConfig& cfg, const SampleRegistry& train_classes,
                  const SampleRegistry& validation_classes, const EncoderConfig& encoder,
                  const nlohmann::json& data_info = nlohmann::json::object());

struct Checkpoint {
  Model model;
  nlohmann::json info = nlohmann::json::object();  // training and data provenance
};

inline constexpr const char* kCheckpointKind = "checkpoint";

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
// Throws ParseError/ChecksumError on damaged files, ShapeError when tensors do
// not match the stored encoder configuration.
Checkpoint load_checkpoint(const std::filesystem::path& path);
// Additionally throws ShapeError unless the stored encoder matches `expected`.
Checkpoint load_checkpoint(const std::filesystem::path& path, const EncoderConfig& expected);

nlohmann::json to_json(const EncoderConfig& c);
EncoderConfig encoder_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TrainConfig& c);
nlohmann::json to_json(const SynthTaskConfig& c);
SynthTaskConfig synth_config_from_json(const nlohmann::json& j);

// Runs fn(i) for i in [0, n) on up to `workers` threads.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn);

}  // namespace gemcl
