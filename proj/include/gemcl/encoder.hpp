#pragma once

// Differentiable encoders mapping one sample (an MFCC matrix, or a plain
// feature vector for synthetic tasks) to a d-dimensional embedding.
//
//   stats-mlp:      [mean over frames, std over frames] -> MLP
//   attention-mlp:  frames + sinusoidal positions -> single-head
//                   self-attention -> mean over frames -> MLP
//
// The MLP uses softplus on hidden layers and a linear output layer.
// Parameters live in a NamedTensors map and enter a Graph as named inputs,
// so the same graph can be re-evaluated at perturbed parameters.

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "gemcl/autodiff.hpp"
#include "gemcl/tensor.hpp"

namespace gemcl {

enum class Architecture { StatsMlp, AttentionMlp };
// Frames: samples are T x input_features matrices. Vector: samples are
// input_features vectors fed straight to the MLP.
enum class InputMode { Frames, Vector };

const char* to_string(Architecture a);
const char* to_string(InputMode m);
Architecture parse_architecture(const std::string& s);
InputMode parse_input_mode(const std::string& s);

struct EncoderConfig {
  Architecture architecture = Architecture::StatsMlp;
  InputMode input_mode = InputMode::Frames;
  std::size_t input_features = 13;
  std::size_t embed_dim = 64;
  std::vector<std::size_t> hidden_dims{128, 128};
  std::size_t attention_dim = 32;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t mlp_input_dim() const;

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

using EncoderParams = NamedTensors;
using ParamVars = std::map<std::string, ad::Var>;

// Glorot-uniform weights, zero biases, deterministic in config.seed.
EncoderParams init_params(const EncoderConfig& config);
std::size_t parameter_count(const NamedTensors& params);
// Throws ShapeError when params do not match the config's architecture.
void check_params(const EncoderConfig& config, const EncoderParams& params);

// One graph input per tensor, named after the map key.
ParamVars bind_params(ad::Graph& graph, const NamedTensors& params);

// Frame statistics for stats-mlp: per-column mean then population std.
Tensor frame_statistics(const Tensor& frames);

ad::Var embed(ad::Graph& graph, const EncoderConfig& config, const ParamVars& params,
              const Tensor& sample);
// (batch, d); row i is the embedding of samples[i].
ad::Var embed_batch(ad::Graph& graph, const EncoderConfig& config, const ParamVars& params,
                    std::span<const Tensor* const> samples);

// Forward-only convenience: builds a throwaway graph and returns (batch, d).
Tensor embed_values(const EncoderConfig& config, const EncoderParams& params,
                    std::span<const Tensor* const> samples);

}  // namespace gemcl
