#include "gemcl/trainer.hpp"

#include <atomic>
#include <cmath>
#include <exception>
#include <thread>

#include "bytes.hpp"
#include "gemcl/container.hpp"
#include "gemcl/error.hpp"

namespace gemcl {
namespace {

std::vector<const Tensor*> features_of(const std::vector<EpisodeItem>& items) {
  std::vector<const Tensor*> out;
  out.reserve(items.size());
  for (const EpisodeItem& it : items) out.push_back(it.sample.features.get());
  return out;
}

struct EpisodeGradient {
  double loss = 0.0;
  NamedTensors grads;
};

EpisodeGradient episode_gradient(const Model& model, const Episode& ep) {
  ad::Graph g;
  const ParamVars vars = bind_params(g, model.params);
  const ad::Var rho_alpha = g.input(kRhoAlpha);
  const ad::Var rho_beta = g.input(kRhoBeta);
  const auto support = features_of(ep.support);
  const auto query = features_of(ep.query);
  const ad::Var s = embed_batch(g, model.encoder, vars, support);
  const ad::Var q = embed_batch(g, model.encoder, vars, query);
  const ad::Var loss = episode_loss(g, s, ep.support_labels(), ep.class_ids.size(), q, ep.query_labels(),
                                    rho_alpha, rho_beta);
  g.forward(model.meta_parameters());
  EpisodeGradient out;
  out.loss = g.value(loss).item();
  out.grads = g.backward(loss, Tensor::scalar(1.0));
  return out;
}

void clip_global_norm(NamedTensors& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, g] : grads)
    for (double v : g.data()) sq += v * v;
  const double norm = std::sqrt(sq);
  if (norm <= max_norm) return;
  const double scale = max_norm / norm;
  for (auto& [name, g] : grads)
    for (double& v : g.data()) v *= scale;
}

}  // namespace

Model Model::initial(const EncoderConfig& encoder) { return {encoder, init_params(encoder), PriorParams{}}; }

NamedTensors Model::meta_parameters() const {
  NamedTensors all = params;
  all.merge(prior.to_tensors());
  return all;
}

void Model::set_meta_parameters(const NamedTensors& all) {
  prior = PriorParams::from_tensors(all);
  for (auto& [name, t] : params) {
    auto it = all.find(name);
    if (it == all.end()) throw ShapeError("meta parameter '" + name + "' is missing");
    if (it->second.shape() != t.shape()) throw ShapeError("meta parameter '" + name + "' changed shape");
    t = it->second;
  }
}

Tensor embed_samples(const Model& model, std::span<const Sample* const> samples) {
  std::vector<const Tensor*> feats;
  feats.reserve(samples.size());
  for (const Sample* s : samples) feats.push_back(s->features.get());
  return embed_values(model.encoder, model.params, feats);
}

Tensor embed_items(const Model& model, const std::vector<EpisodeItem>& items) {
  return embed_values(model.encoder, model.params, features_of(items));
}

double episode_accuracy(const Model& model, const Episode& episode) {
  const Tensor support = embed_items(model, episode.support);
  const Tensor query = embed_items(model, episode.query);
  std::vector<ClassPosterior> posts;
  for (const ClassId& id : episode.class_ids) posts.emplace_back(id, support.cols());
  for (std::size_t r = 0; r < episode.support.size(); ++r) posts[episode.support[r].label].update(support.row(r));
  HeadState head(model.prior);
  for (ClassPosterior& p : posts) head.add_class(std::move(p));
  std::size_t correct = 0;
  for (std::size_t r = 0; r < episode.query.size(); ++r) {
    correct += predict(head, query.row(r)) == episode.class_ids[episode.query[r].label];
  }
  return static_cast<double>(correct) / static_cast<double>(episode.query.size());
}

void adam_step(NamedTensors& params, const NamedTensors& grads, OptState& state, const AdamConfig& hyper) {
  for (const auto& [name, p] : params) {
    auto it = grads.find(name);
    if (it == grads.end()) throw Error("no gradient for parameter '" + name + "'");
    if (it->second.shape() != p.shape()) {
      throw ShapeError("gradient for '" + name + "' has shape " + shape_string(it->second.shape()) +
                       ", parameter has " + shape_string(p.shape()));
    }
    if (!it->second.all_finite()) throw Error("non-finite gradient for parameter '" + name + "'");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(hyper.beta1, t);
  const double c2 = 1.0 - std::pow(hyper.beta2, t);
  for (auto& [name, p] : params) {
    const Tensor& g = grads.at(name);
    Tensor& m = state.first_moment.try_emplace(name, p.shape()).first->second;
    Tensor& v = state.second_moment.try_emplace(name, p.shape()).first->second;
    if (m.shape() != p.shape() || v.shape() != p.shape()) throw ShapeError("optimizer state for '" + name + "' is mis-shaped");
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g[i];
      v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      p[i] -= hyper.learning_rate * m_hat / (std::sqrt(v_hat) + hyper.eps);
    }
  }
}

void TrainConfig::validate() const {
  if (steps < 1) throw ConfigError("steps must be >= 1");
  if (batch_episodes < 1) throw ConfigError("batch_episodes must be >= 1");
  if (validation_every < 1) throw ConfigError("validation_every must be >= 1");
  if (validation_episodes < 1) throw ConfigError("validation_episodes must be >= 1");
  if (!(adam.learning_rate > 0.0)) throw ConfigError("learning rate must be > 0");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
    throw ConfigError("Adam betas must lie in [0, 1)");
  }
  if (!(adam.eps > 0.0)) throw ConfigError("Adam eps must be > 0");
  if (!(max_grad_norm >= 0.0)) throw ConfigError("max_grad_norm must be >= 0");
  if (workers < 1) throw ConfigError("workers must be >= 1");
  spec.validate();
}

void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (std::thread& t : pool) t.join();
  // Report the lowest failing index so errors do not depend on scheduling.
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

BatchGradient batch_gradient(const Model& model, const std::vector<Episode>& episodes, std::size_t workers) {
  if (episodes.empty()) throw Error("batch has no episodes");
  std::vector<EpisodeGradient> parts(episodes.size());
  parallel_for(episodes.size(), workers, [&](std::size_t i) { parts[i] = episode_gradient(model, episodes[i]); });
  BatchGradient out;
  const double scale = 1.0 / static_cast<double>(episodes.size());
  out.grads = std::move(parts.front().grads);
  out.loss = parts.front().loss;
  for (std::size_t i = 1; i < parts.size(); ++i) {
    out.loss += parts[i].loss;
    for (auto& [name, g] : out.grads) {
      const Tensor& add = parts[i].grads.at(name);
      for (std::size_t k = 0; k < g.size(); ++k) g[k] += add[k];
    }
  }
  out.loss *= scale;
  for (auto& [name, g] : out.grads)
    for (double& v : g.data()) v *= scale;
  return out;
}

TrainResult train(const TrainConfig& cfg, const SampleRegistry& train_classes,
                  const SampleRegistry& validation_classes, const EncoderConfig& encoder,
                  const nlohmann::json& data_info) {
  cfg.validate();
  encoder.validate();

  Rng rng(cfg.seed);
  // Validation episodes come from their own stream so they stay fixed however
  // long training runs.
  Rng val_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<Episode> validation;
  for (std::size_t i = 0; i < cfg.validation_episodes; ++i) {
    validation.push_back(sample_episode(validation_classes, cfg.spec, val_rng));
  }

  TrainResult result;
  Model model = Model::initial(encoder);
  OptState opt;
  const bool write = !cfg.checkpoint_dir.empty();
  if (write) std::filesystem::create_directories(cfg.checkpoint_dir);

  auto checkpoint = [&](const Model& m, std::size_t step, double accuracy) {
    Checkpoint c{m, {{"train", to_json(cfg)}, {"step", step}, {"val_accuracy", accuracy}, {"data", data_info}}};
    return c;
  };

  bool have_best = false;
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    std::vector<Episode> batch;
    for (std::size_t e = 0; e < cfg.batch_episodes; ++e) batch.push_back(sample_episode(train_classes, cfg.spec, rng));
    BatchGradient bg;
    try {
      bg = batch_gradient(model, batch, cfg.workers);
      if (!std::isfinite(bg.loss)) throw Error("loss is not finite");
    } catch (const Error& e) {
      throw Error("training aborted at step " + std::to_string(step) + ": " + e.what());
    }
    result.history.loss.push_back(bg.loss);
    if (cfg.max_grad_norm > 0.0) clip_global_norm(bg.grads, cfg.max_grad_norm);
    NamedTensors params = model.meta_parameters();
    try {
      adam_step(params, bg.grads, opt, cfg.adam);
    } catch (const Error& e) {
      throw Error("training aborted at step " + std::to_string(step) + ": " + e.what());
    }
    model.set_meta_parameters(params);

    if (step % cfg.validation_every == 0 || step == cfg.steps) {
      std::vector<double> acc(validation.size());
      parallel_for(validation.size(), cfg.workers, [&](std::size_t i) { acc[i] = episode_accuracy(model, validation[i]); });
      double mean = 0.0;
      for (double a : acc) mean += a;
      mean /= static_cast<double>(acc.size());
      result.history.validation.push_back({step, mean});
      if (cfg.on_validation) cfg.on_validation(result.history.validation.back(), bg.loss);
      if (!have_best || mean > result.best_accuracy) {
        have_best = true;
        result.best_accuracy = mean;
        result.best_step = step;
        result.best_model = model;
        if (write) save_checkpoint(cfg.checkpoint_dir / "best.ckpt", checkpoint(model, step, mean));
      }
    }
  }
  result.final_model = model;

  if (write) {
    save_checkpoint(cfg.checkpoint_dir / "final.ckpt",
                    checkpoint(model, cfg.steps, result.history.validation.back().accuracy));
    std::string log = "step,loss,val_accuracy\n";
    std::size_t v = 0;
    for (std::size_t s = 0; s < result.history.loss.size(); ++s) {
      log += std::to_string(s + 1) + "," + bytes::format_double(result.history.loss[s]) + ",";
      if (v < result.history.validation.size() && result.history.validation[v].step == s + 1) {
        log += bytes::format_double(result.history.validation[v++].accuracy);
      }
      log += "\n";
    }
    bytes::write_text((cfg.checkpoint_dir / "train_log.csv").string(), log);
  }
  return result;
}

nlohmann::json to_json(const EncoderConfig& c) {
  return {{"architecture", to_string(c.architecture)},
          {"input_mode", to_string(c.input_mode)},
          {"input_features", c.input_features},
          {"embed_dim", c.embed_dim},
          {"hidden_dims", c.hidden_dims},
          {"attention_dim", c.attention_dim},
          {"seed", c.seed}};
}

EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
  EncoderConfig c;
  c.architecture = parse_architecture(j.at("architecture").get<std::string>());
  c.input_mode = parse_input_mode(j.at("input_mode").get<std::string>());
  c.input_features = j.at("input_features").get<std::size_t>();
  c.embed_dim = j.at("embed_dim").get<std::size_t>();
  c.hidden_dims = j.at("hidden_dims").get<std::vector<std::size_t>>();
  c.attention_dim = j.at("attention_dim").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.validate();
  return c;
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"steps", c.steps},
          {"batch_episodes", c.batch_episodes},
          {"ways", c.spec.ways},
          {"shots", c.spec.shots},
          {"query_shots", c.spec.query_shots},
          {"learning_rate", c.adam.learning_rate},
          {"adam_beta1", c.adam.beta1},
          {"adam_beta2", c.adam.beta2},
          {"adam_eps", c.adam.eps},
          {"seed", c.seed},
          {"validation_every", c.validation_every},
          {"validation_episodes", c.validation_episodes},
          {"max_grad_norm", c.max_grad_norm}};
}

nlohmann::json to_json(const SynthTaskConfig& c) {
  return {{"latent_dim", c.latent_dim},
          {"class_sep", c.class_sep},
          {"within_std", c.within_std},
          {"mode", to_string(c.mode)},
          {"frames", c.frames}};
}

SynthTaskConfig synth_config_from_json(const nlohmann::json& j) {
  SynthTaskConfig c;
  c.latent_dim = j.at("latent_dim").get<std::size_t>();
  c.class_sep = j.at("class_sep").get<double>();
  c.within_std = j.at("within_std").get<double>();
  c.mode = parse_synth_mode(j.at("mode").get<std::string>());
  c.frames = j.at("frames").get<std::size_t>();
  c.validate();
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  check_params(ckpt.model.encoder, ckpt.model.params);
  container::Document doc;
  doc.kind = kCheckpointKind;
  doc.meta = {{"encoder", to_json(ckpt.model.encoder)}, {"info", ckpt.info}};
  doc.tensors = ckpt.model.meta_parameters();
  container::write(path, doc);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  container::Document doc = container::read(path, kCheckpointKind);
  Checkpoint ckpt;
  try {
    ckpt.model.encoder = encoder_config_from_json(doc.meta.at("encoder"));
    ckpt.info = doc.meta.at("info");
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": malformed checkpoint metadata: " + e.what());
  } catch (const ConfigError& e) {
    throw ParseError(path.string() + ": invalid encoder configuration: " + e.what());
  }
  ckpt.model.prior = PriorParams::from_tensors(doc.tensors);
  doc.tensors.erase(kRhoAlpha);
  doc.tensors.erase(kRhoBeta);
  ckpt.model.params = std::move(doc.tensors);
  for (const auto& [name, t] : ckpt.model.params) {
    if (name.rfind("encoder.", 0) != 0) throw ShapeError(path.string() + ": unexpected tensor '" + name + "'");
  }
  check_params(ckpt.model.encoder, ckpt.model.params);
  return ckpt;
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const EncoderConfig& expected) {
  Checkpoint ckpt = load_checkpoint(path);
  const EncoderConfig& got = ckpt.model.encoder;
  if (got.architecture != expected.architecture) {
    throw ShapeError(path.string() + ": checkpoint holds a " + to_string(got.architecture) + " encoder, expected " +
                     to_string(expected.architecture));
  }
  try {
    check_params(expected, ckpt.model.params);
  } catch (const ShapeError& e) {
    throw ShapeError(path.string() + ": " + e.what());
  }
  return ckpt;
}

}  // namespace gemcl
