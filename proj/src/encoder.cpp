#include "gemcl/encoder.hpp"

#include <cmath>
#include <random>

#include "gemcl/error.hpp"

namespace gemcl {
namespace {

std::string layer_name(std::size_t i, const char* what) {
  return "encoder.mlp" + std::to_string(i) + "." + what;
}

std::vector<std::size_t> mlp_widths(const EncoderConfig& c) {
  std::vector<std::size_t> w{c.mlp_input_dim()};
  w.insert(w.end(), c.hidden_dims.begin(), c.hidden_dims.end());
  w.push_back(c.embed_dim);
  return w;
}

Tensor glorot(std::mt19937_64& rng, std::size_t fan_in, std::size_t fan_out) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> u(-a, a);
  Tensor w(Shape{fan_in, fan_out});
  for (double& v : w.data()) v = u(rng);
  return w;
}

Tensor positional_encoding(std::size_t frames, std::size_t dim) {
  Tensor pe(Shape{frames, dim});
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t i = 0; i < dim; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(dim));
      const double angle = static_cast<double>(t) * rate;
      pe.at(t, i) = i % 2 == 0 ? std::sin(angle) : std::cos(angle);
    }
  }
  return pe;
}

const ad::Var& param(const ParamVars& params, const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw ShapeError("encoder parameter '" + name + "' is missing");
  return it->second;
}

void check_sample(const EncoderConfig& c, const Tensor& s) {
  if (c.input_mode == InputMode::Vector) {
    const bool ok = (s.rank() == 1 && s.dim(0) == c.input_features) ||
                    (s.rank() == 2 && s.rows() == 1 && s.cols() == c.input_features);
    if (!ok) {
      throw ShapeError("vector encoder expects " + std::to_string(c.input_features) +
                       " features, got shape " + shape_string(s.shape()));
    }
    return;
  }
  if (s.rank() != 2 || s.cols() != c.input_features) {
    throw ShapeError("frame encoder expects (T, " + std::to_string(c.input_features) +
                     ") input, got shape " + shape_string(s.shape()));
  }
}

ad::Var mlp(ad::Graph& g, const EncoderConfig& c, const ParamVars& params, ad::Var x) {
  const std::size_t layers = c.hidden_dims.size() + 1;
  for (std::size_t i = 0; i < layers; ++i) {
    x = g.matmul(x, param(params, layer_name(i, "weight"))) + param(params, layer_name(i, "bias"));
    if (i + 1 < layers) x = g.softplus(x);
  }
  return x;
}

// (1, attention_dim) pooled attention output for one T x F sample.
ad::Var attend(ad::Graph& g, const EncoderConfig& c, const ParamVars& params, const Tensor& frames) {
  const Tensor pe = positional_encoding(frames.rows(), frames.cols());
  Tensor h(frames.shape());
  for (std::size_t i = 0; i < h.size(); ++i) h[i] = frames[i] + pe[i];
  const ad::Var x = g.constant(std::move(h));
  const ad::Var q = g.matmul(x, param(params, "encoder.attn.wq"));
  const ad::Var k = g.matmul(x, param(params, "encoder.attn.wk"));
  const ad::Var v = g.matmul(x, param(params, "encoder.attn.wv"));
  ad::Var scores = g.matmul(q, g.transpose(k)) / std::sqrt(static_cast<double>(c.attention_dim));
  scores = scores - g.max(scores, 1, true);
  const ad::Var e = g.exp(scores);
  const ad::Var weights = e / g.sum(e, 1, true);
  return g.mean(g.matmul(weights, v), 0, true);
}

}  // namespace

const char* to_string(Architecture a) {
  return a == Architecture::StatsMlp ? "stats-mlp" : "attention-mlp";
}

const char* to_string(InputMode m) { return m == InputMode::Frames ? "frames" : "vector"; }

Architecture parse_architecture(const std::string& s) {
  if (s == "stats-mlp") return Architecture::StatsMlp;
  if (s == "attention-mlp") return Architecture::AttentionMlp;
  throw ConfigError("unknown encoder architecture '" + s + "'");
}

InputMode parse_input_mode(const std::string& s) {
  if (s == "frames") return InputMode::Frames;
  if (s == "vector") return InputMode::Vector;
  throw ConfigError("unknown encoder input mode '" + s + "'");
}

void EncoderConfig::validate() const {
  if (embed_dim < 1) throw ConfigError("embed_dim must be >= 1");
  if (hidden_dims.empty()) throw ConfigError("hidden_dims must not be empty");
  for (std::size_t h : hidden_dims) {
    if (h < 1) throw ConfigError("hidden layer widths must be >= 1");
  }
  if (input_features < 1) throw ConfigError("input_features must be >= 1");
  if (architecture == Architecture::AttentionMlp) {
    if (input_mode != InputMode::Frames) throw ConfigError("attention-mlp needs frame inputs");
    if (attention_dim < 1) throw ConfigError("attention_dim must be >= 1");
  }
}

std::size_t EncoderConfig::mlp_input_dim() const {
  if (input_mode == InputMode::Vector) return input_features;
  return architecture == Architecture::StatsMlp ? 2 * input_features : attention_dim;
}

EncoderParams init_params(const EncoderConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  EncoderParams params;
  if (config.architecture == Architecture::AttentionMlp) {
    for (const char* name : {"wq", "wk", "wv"}) {
      params[std::string("encoder.attn.") + name] = glorot(rng, config.input_features, config.attention_dim);
    }
  }
  const auto widths = mlp_widths(config);
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    params[layer_name(i, "weight")] = glorot(rng, widths[i], widths[i + 1]);
    params[layer_name(i, "bias")] = Tensor(Shape{widths[i + 1]});
  }
  return params;
}

std::size_t parameter_count(const NamedTensors& params) {
  std::size_t n = 0;
  for (const auto& [name, t] : params) n += t.size();
  return n;
}

void check_params(const EncoderConfig& config, const EncoderParams& params) {
  const EncoderParams expected = init_params(config);
  for (const auto& [name, t] : expected) {
    auto it = params.find(name);
    if (it == params.end()) throw ShapeError("encoder parameter '" + name + "' is missing");
    if (it->second.shape() != t.shape()) {
      throw ShapeError("encoder parameter '" + name + "' has shape " +
                       shape_string(it->second.shape()) + ", expected " + shape_string(t.shape()));
    }
  }
  for (const auto& [name, t] : params) {
    if (name.rfind("encoder.", 0) == 0 && !expected.contains(name)) {
      throw ShapeError("unexpected encoder parameter '" + name + "' for " +
                       to_string(config.architecture));
    }
  }
}

ParamVars bind_params(ad::Graph& graph, const NamedTensors& params) {
  ParamVars vars;
  for (const auto& [name, t] : params) vars.emplace(name, graph.input(name));
  return vars;
}

Tensor frame_statistics(const Tensor& frames) {
  const std::size_t t = frames.rows();
  const std::size_t c = frames.cols();
  Tensor stats(Shape{2 * c});
  for (std::size_t j = 0; j < c; ++j) {
    double mean = 0.0;
    for (std::size_t r = 0; r < t; ++r) mean += frames.at(r, j);
    mean /= static_cast<double>(t);
    double var = 0.0;
    for (std::size_t r = 0; r < t; ++r) {
      const double d = frames.at(r, j) - mean;
      var += d * d;
    }
    stats[j] = mean;
    stats[c + j] = std::sqrt(var / static_cast<double>(t));
  }
  return stats;
}

ad::Var embed(ad::Graph& graph, const EncoderConfig& config, const ParamVars& params,
              const Tensor& sample) {
  const Tensor* one[] = {&sample};
  return graph.reshape(embed_batch(graph, config, params, one), {config.embed_dim});
}

ad::Var embed_batch(ad::Graph& graph, const EncoderConfig& config, const ParamVars& params,
                    std::span<const Tensor* const> samples) {
  if (samples.empty()) throw Error("embed_batch needs at least one sample");
  for (const Tensor* s : samples) check_sample(config, *s);

  ad::Var inputs;
  if (config.architecture == Architecture::AttentionMlp) {
    std::vector<ad::Var> pooled;
    pooled.reserve(samples.size());
    for (const Tensor* s : samples) pooled.push_back(attend(graph, config, params, *s));
    inputs = pooled.size() == 1 ? pooled.front() : graph.concat(pooled, 0);
  } else {
    const std::size_t width = config.mlp_input_dim();
    Tensor batch(Shape{samples.size(), width});
    for (std::size_t i = 0; i < samples.size(); ++i) {
      if (config.input_mode == InputMode::Vector) {
        std::copy(samples[i]->data().begin(), samples[i]->data().end(), batch.row(i).begin());
      } else {
        const Tensor stats = frame_statistics(*samples[i]);
        std::copy(stats.data().begin(), stats.data().end(), batch.row(i).begin());
      }
    }
    inputs = graph.constant(std::move(batch));
  }
  return mlp(graph, config, params, inputs);
}

Tensor embed_values(const EncoderConfig& config, const EncoderParams& params,
                    std::span<const Tensor* const> samples) {
  ad::Graph graph;
  const ParamVars vars = bind_params(graph, params);
  const ad::Var out = embed_batch(graph, config, vars, samples);
  graph.forward(params);
  return graph.value(out);
}

}  // namespace gemcl
