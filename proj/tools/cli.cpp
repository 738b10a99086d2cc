#include "cli.hpp"

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "gemcl/audio.hpp"
#include "gemcl/continual.hpp"
#include "gemcl/error.hpp"
#include "gemcl/trainer.hpp"
#include "json.hpp"

namespace gemcl::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct EpisodeFlags {
  std::size_t ways = 10;
  std::size_t shots = 5;
  std::size_t query_shots = 5;
};

struct TrainFlags {
  EpisodeFlags episode;
  std::size_t steps = 2000;
  std::size_t batch_episodes = 4;
  double learning_rate = 1e-3;
  std::size_t validation_every = 100;
  std::size_t validation_episodes = 20;
  double max_grad_norm = 0.0;
  double train_ratio = 0.7;
  std::string encoder = "stats-mlp";
  std::size_t embed_dim = 64;
  std::size_t attention_dim = 32;
  std::vector<std::size_t> hidden_dims{128, 128};
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  fs::path out;
};

struct ProtocolFlags {
  std::size_t increment = 25;
  std::size_t max_classes = 200;
  std::size_t shots = 5;
  std::size_t query_shots = 5;
  std::size_t episodes = 10;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  fs::path ckpt;
  fs::path out;
  std::optional<std::string> encoder;
  std::optional<std::size_t> embed_dim;
};

struct SynthFlags {
  std::size_t latent_dim = 16;
  double class_sep = 1.0;
  double within_std = 0.1;
  std::string mode = "raw-vector";
  std::size_t frames = 8;
  std::size_t universe = 700;
  std::size_t samples_per_class = 20;
};

struct DataFlags {
  fs::path manifest;
  fs::path features_dir;
};

struct PrepareFlags {
  DataFlags data;
  fs::path audio_root;
  std::size_t shots = 5;
  std::size_t query_shots = 5;
  std::size_t workers = 1;
};

class Log {
 public:
  Log(std::ostream& err, std::string command) : err_(err), prefix_("gemcl " + std::move(command) + ": ") {}
  void operator()(const std::string& line) const { err_ << prefix_ << line << '\n'; }

 private:
  std::ostream& err_;
  std::string prefix_;
};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

void add_data_flags(CLI::App* app, DataFlags& f) {
  app->add_option("--manifest", f.manifest, "Newline-delimited JSON manifest (word, path, split)")->required();
  app->add_option("--features-dir", f.features_dir, "Directory of cached MFCC dumps")->required();
}

void add_train_flags(CLI::App* app, TrainFlags& f) {
  app->add_option("--out", f.out, "Output directory for checkpoints and train_log.csv")->required();
  app->add_option("--seed", f.seed, "Random seed")->capture_default_str();
  app->add_option("--steps", f.steps, "Meta-training steps")->capture_default_str();
  app->add_option("--ways", f.episode.ways, "Classes per training episode")->capture_default_str();
  app->add_option("--shots", f.episode.shots, "Support samples per class")->capture_default_str();
  app->add_option("--query-shots", f.episode.query_shots, "Query samples per class")->capture_default_str();
  app->add_option("--batch-episodes", f.batch_episodes, "Episodes per optimizer step")->capture_default_str();
  app->add_option("--workers", f.workers, "Threads for per-episode gradients")->capture_default_str();
  app->add_option("--encoder", f.encoder, "Encoder architecture")
      ->check(CLI::IsMember({"stats-mlp", "attention-mlp"}))
      ->capture_default_str();
  app->add_option("--embed-dim", f.embed_dim, "Embedding dimension")->capture_default_str();
  app->add_option("--hidden-dims", f.hidden_dims, "Hidden layer widths of the MLP")->capture_default_str();
  app->add_option("--attention-dim", f.attention_dim, "Attention projection width")->capture_default_str();
  app->add_option("--lr", f.learning_rate, "Adam learning rate")->capture_default_str();
  app->add_option("--validation-every", f.validation_every, "Steps between validations")->capture_default_str();
  app->add_option("--validation-episodes", f.validation_episodes, "Held-out-class episodes per validation")
      ->capture_default_str();
  app->add_option("--max-grad-norm", f.max_grad_norm, "Global gradient norm clip (0 disables)")
      ->capture_default_str();
  app->add_option("--train-ratio", f.train_ratio, "Fraction of classes used for meta-training")
      ->capture_default_str();
}

void add_protocol_flags(CLI::App* app, ProtocolFlags& f) {
  app->add_option("--ckpt", f.ckpt, "Checkpoint file, or a training directory (uses best.ckpt)")->required();
  app->add_option("--out", f.out, "Report directory")->required();
  app->add_option("--seed", f.seed, "Random seed")->capture_default_str();
  app->add_option("--increment", f.increment, "Classes added per checkpoint")->capture_default_str();
  app->add_option("--max-classes", f.max_classes, "Total classes introduced")->capture_default_str();
  app->add_option("--episodes", f.episodes, "Independent class orderings")->capture_default_str();
  app->add_option("--shots", f.shots, "Support samples per class")->capture_default_str();
  app->add_option("--query-shots", f.query_shots, "Query samples per class")->capture_default_str();
  app->add_option("--workers", f.workers, "Threads across episodes")->capture_default_str();
  app->add_option("--encoder", f.encoder, "Expected encoder architecture (checked against the checkpoint)")
      ->check(CLI::IsMember({"stats-mlp", "attention-mlp"}));
  app->add_option("--embed-dim", f.embed_dim, "Expected embedding dimension (checked against the checkpoint)");
}

void add_synth_flags(CLI::App* app, SynthFlags& f) {
  app->add_option("--latent-dim", f.latent_dim, "Latent dimension of synthetic classes")->capture_default_str();
  app->add_option("--class-sep", f.class_sep, "Std of class means")->capture_default_str();
  app->add_option("--within-std", f.within_std, "Std of samples around their class mean")->capture_default_str();
  app->add_option("--mode", f.mode, "Observation mode")
      ->check(CLI::IsMember({"raw-vector", "pseudo-mfcc"}))
      ->capture_default_str();
  app->add_option("--frames", f.frames, "Frames per pseudo-mfcc sample")->capture_default_str();
  app->add_option("--universe", f.universe, "Number of synthetic classes")->capture_default_str();
  app->add_option("--samples-per-class", f.samples_per_class, "Samples generated per class")->capture_default_str();
}

EncoderConfig encoder_from(const TrainFlags& f, InputMode mode, std::size_t input_features) {
  EncoderConfig enc;
  enc.architecture = parse_architecture(f.encoder);
  enc.input_mode = mode;
  enc.input_features = input_features;
  enc.embed_dim = f.embed_dim;
  enc.hidden_dims = f.hidden_dims;
  enc.attention_dim = f.attention_dim;
  enc.seed = f.seed;
  enc.validate();
  return enc;
}

TrainConfig train_config_from(const TrainFlags& f, const Log& log) {
  TrainConfig cfg;
  cfg.steps = f.steps;
  cfg.batch_episodes = f.batch_episodes;
  cfg.spec = {f.episode.ways, f.episode.shots, f.episode.query_shots};
  cfg.adam.learning_rate = f.learning_rate;
  cfg.seed = f.seed;
  cfg.validation_every = f.validation_every;
  cfg.validation_episodes = f.validation_episodes;
  cfg.max_grad_norm = f.max_grad_norm;
  cfg.workers = f.workers;
  cfg.checkpoint_dir = f.out;
  cfg.on_validation = [log](const ValidationPoint& p, double loss) {
    log("step " + std::to_string(p.step) + " loss " + fmt(loss) + " val_accuracy " + fmt(p.accuracy));
  };
  cfg.validate();
  return cfg;
}

ProtocolConfig protocol_config_from(const ProtocolFlags& f) {
  ProtocolConfig cfg;
  cfg.increment = f.increment;
  cfg.max_classes = f.max_classes;
  cfg.shots = f.shots;
  cfg.query_shots = f.query_shots;
  cfg.episodes = f.episodes;
  cfg.seed = f.seed;
  cfg.workers = f.workers;
  cfg.validate();
  return cfg;
}

void report_training(const TrainResult& r, const Log& log) {
  log("best val_accuracy " + fmt(r.best_accuracy) + " at step " + std::to_string(r.best_step));
}

Checkpoint load_for_eval(const ProtocolFlags& f, const Log& log) {
  const fs::path path = fs::is_directory(f.ckpt) ? f.ckpt / "best.ckpt" : f.ckpt;
  Checkpoint ckpt = load_checkpoint(path);
  if (f.encoder || f.embed_dim) {
    EncoderConfig expected = ckpt.model.encoder;
    if (f.encoder) expected.architecture = parse_architecture(*f.encoder);
    if (f.embed_dim) expected.embed_dim = *f.embed_dim;
    ckpt = load_checkpoint(path, expected);
  }
  log("loaded " + path.string() + " (" + to_string(ckpt.model.encoder.architecture) + ", step " +
      ckpt.info.value("step", json(0)).dump() + ")");
  return ckpt;
}

void finish_protocol(const ProtocolResult& r, const ProtocolFlags& f, const Checkpoint& ckpt, const Log& log) {
  json source = {{"checkpoint_step", ckpt.info.value("step", json(nullptr))},
                 {"checkpoint_val_accuracy", ckpt.info.value("val_accuracy", json(nullptr))},
                 {"encoder", to_json(ckpt.model.encoder)}};
  emit_report(f.out, r.report, r.matrix, source);
  for (const CurvePoint& p : r.report.curve) {
    log(std::to_string(p.classes) + " classes: mean accuracy " + fmt(p.mean_accuracy) + " [" + fmt(p.ci_low) + ", " +
        fmt(p.ci_high) + "]");
  }
  if (r.report.volatility) {
    log("per-word volatility " + fmt(r.report.volatility->mean) + " +- " + fmt(r.report.volatility->std));
  }
  log("report written to " + f.out.string());
}

// prepare -------------------------------------------------------------------

int cmd_prepare(const PrepareFlags& f, std::ostream& out, const Log& log) {
  const std::vector<ManifestEntry> entries = read_manifest(f.data.manifest);
  const fs::path root = f.audio_root.empty() ? f.data.manifest.parent_path() : f.audio_root;
  const std::size_t need = f.shots + f.query_shots;
  if (f.shots < 1 || f.query_shots < 1) throw ConfigError("shots and query-shots must be >= 1");

  std::map<std::string, std::map<std::string, std::size_t>> counts;
  for (const ManifestEntry& e : entries) ++counts[e.word][e.split];
  std::set<std::string> kept;
  for (const auto& [word, per_split] : counts) {
    const std::size_t train = per_split.contains("train") ? per_split.at("train") : 0;
    const std::size_t test = per_split.contains("test") ? per_split.at("test") : 0;
    if (train < need || test < need) {
      log("rejecting word '" + word + "': " + std::to_string(train) + " train / " + std::to_string(test) +
          " test samples, need " + std::to_string(need) + " in each split");
    } else {
      kept.insert(word);
    }
  }
  if (kept.empty()) throw Error("no word in " + f.data.manifest.string() + " has enough samples");

  std::vector<ManifestEntry> selected;
  for (const ManifestEntry& e : entries)
    if (kept.contains(e.word)) selected.push_back(e);
  for (const ManifestEntry& e : selected) fs::create_directories(feature_path(f.data.features_dir, e.path).parent_path());

  std::atomic<std::size_t> cached{0};
  parallel_for(selected.size(), f.workers, [&](std::size_t i) {
    const ManifestEntry& e = selected[i];
    const fs::path dump = feature_path(f.data.features_dir, e.path);
    if (fs::exists(dump)) {
      try {
        audio::read_feature_dump(dump);
        ++cached;
        return;
      } catch (const Error&) {
        // unreadable cache entry: extract again
      }
    }
    const fs::path wav = root / e.path;
    try {
      audio::write_feature_dump(dump, audio::extract_mfcc(audio::load_wav(wav)));
    } catch (const Error& err) {
      throw Error(f.data.manifest.string() + ":" + std::to_string(e.line) + ": " + err.what());
    }
  });
  const fs::path validated = f.data.features_dir / "manifest.jsonl";
  write_manifest(validated, selected);
  log(std::to_string(kept.size()) + " words kept, " + std::to_string(counts.size() - kept.size()) + " rejected; " +
      std::to_string(selected.size() - cached) + " clips extracted, " + std::to_string(cached.load()) + " cached");
  out << validated.string() << '\n';
  return 0;
}

// train / eval on a prepared manifest ------------------------------------------

int cmd_train(const DataFlags& data, const TrainFlags& f, const Log& log) {
  const TrainConfig cfg = train_config_from(f, log);
  if (!(f.train_ratio > 0.0 && f.train_ratio < 1.0)) throw ConfigError("train-ratio must lie in (0, 1)");
  const std::vector<ManifestEntry> entries = read_manifest(data.manifest);
  std::set<std::string> words;
  for (const ManifestEntry& e : entries) words.insert(e.word);
  const auto [train_words, test_words] = split_classes({words.begin(), words.end()}, f.train_ratio, f.seed);
  log(std::to_string(train_words.size()) + " meta-train words, " + std::to_string(test_words.size()) +
      " meta-test words");
  const SampleRegistry train_reg = load_registry(entries, data.features_dir, "train", train_words);
  const SampleRegistry val_reg = load_registry(entries, data.features_dir, "train", test_words);
  const EncoderConfig enc = encoder_from(f, InputMode::Frames, audio::MfccConfig{}.n_ceps);
  const json info = {{"kind", "manifest"},
                     {"train_ratio", f.train_ratio},
                     {"split_seed", f.seed},
                     {"meta_train_words", train_words},
                     {"meta_test_words", test_words}};
  report_training(train(cfg, train_reg, val_reg, enc, info), log);
  return 0;
}

int cmd_eval(const DataFlags& data, const ProtocolFlags& f, const Log& log) {
  const ProtocolConfig cfg = protocol_config_from(f);
  const Checkpoint ckpt = load_for_eval(f, log);
  const json& info = ckpt.info.at("data");
  if (info.value("kind", "") != "manifest") throw Error("checkpoint was not trained on a manifest; use synth-eval");
  const auto words = info.at("meta_test_words").get<std::vector<std::string>>();
  const SampleRegistry test_reg = load_registry(read_manifest(data.manifest), data.features_dir, "test", words);
  finish_protocol(run_protocol(ckpt.model, test_reg, cfg), f, ckpt, log);
  return 0;
}

// synthetic workflows ---------------------------------------------------------

SynthTaskConfig synth_config_from(const SynthFlags& f) {
  SynthTaskConfig c;
  c.latent_dim = f.latent_dim;
  c.class_sep = f.class_sep;
  c.within_std = f.within_std;
  c.mode = parse_synth_mode(f.mode);
  c.frames = f.frames;
  c.validate();
  return c;
}

int cmd_synth_train(const SynthFlags& s, const TrainFlags& f, const Log& log) {
  const TrainConfig cfg = train_config_from(f, log);
  const SynthTaskConfig synth = synth_config_from(s);
  if (!(f.train_ratio > 0.0 && f.train_ratio < 1.0)) throw ConfigError("train-ratio must lie in (0, 1)");
  const SampleRegistry universe = synth_registry(synth, s.universe, s.samples_per_class, f.seed);
  const auto [train_ids, test_ids] = split_classes(universe.class_ids(), f.train_ratio, f.seed);
  log(std::to_string(train_ids.size()) + " meta-train classes, " + std::to_string(test_ids.size()) +
      " meta-test classes");
  const EncoderConfig enc = synth.mode == SynthMode::RawVector
                                ? encoder_from(f, InputMode::Vector, synth.latent_dim)
                                : encoder_from(f, InputMode::Frames, kPseudoMfccCeps);
  const json info = {{"kind", "synthetic"},
                     {"synth", to_json(synth)},
                     {"universe", s.universe},
                     {"samples_per_class", s.samples_per_class},
                     {"universe_seed", f.seed},
                     {"train_ratio", f.train_ratio},
                     {"meta_test_classes", test_ids}};
  report_training(train(cfg, universe.subset(train_ids), universe.subset(test_ids), enc, info), log);
  return 0;
}

int cmd_synth_eval(const ProtocolFlags& f, const Log& log) {
  const ProtocolConfig cfg = protocol_config_from(f);
  const Checkpoint ckpt = load_for_eval(f, log);
  const json& info = ckpt.info.at("data");
  if (info.value("kind", "") != "synthetic") throw Error("checkpoint was not trained on synthetic tasks; use eval");
  const SampleRegistry universe =
      synth_registry(synth_config_from_json(info.at("synth")), info.at("universe").get<std::size_t>(),
                     info.at("samples_per_class").get<std::size_t>(), info.at("universe_seed").get<std::uint64_t>());
  const SampleRegistry test_reg = universe.subset(info.at("meta_test_classes").get<std::vector<std::string>>());
  finish_protocol(run_protocol(ckpt.model, test_reg, cfg), f, ckpt, log);
  return 0;
}

int cmd_inspect(const fs::path& path, std::ostream& out) {
  const Checkpoint ckpt = load_checkpoint(fs::is_directory(path) ? path / "best.ckpt" : path);
  const json doc = {{"encoder", to_json(ckpt.model.encoder)},
                    {"parameter_count", parameter_count(ckpt.model.params)},
                    {"prior",
                     {{"alpha0", ckpt.model.prior.alpha0()},
                      {"beta0", ckpt.model.prior.beta0()},
                      {"rho_alpha", ckpt.model.prior.rho_alpha},
                      {"rho_beta", ckpt.model.prior.rho_beta}}},
                    {"info", ckpt.info}};
  out << doc.dump(2) << '\n';
  return 0;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Few-shot keyword classifier with a closed-form Bayesian head", "gemcl"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");

  auto* version = app.add_subcommand("version", "Print the version");

  PrepareFlags prepare_flags;
  auto* prepare = app.add_subcommand("prepare", "Extract MFCC dumps for a manifest and validate word counts");
  add_data_flags(prepare, prepare_flags.data);
  prepare->add_option("--audio-root", prepare_flags.audio_root, "Root for relative audio paths (default: manifest dir)");
  prepare->add_option("--shots", prepare_flags.shots, "Support samples per class")->capture_default_str();
  prepare->add_option("--query-shots", prepare_flags.query_shots, "Query samples per class")->capture_default_str();
  prepare->add_option("--workers", prepare_flags.workers, "Feature extraction threads")->capture_default_str();

  DataFlags train_data;
  TrainFlags train_flags;
  auto* train_cmd = app.add_subcommand("train", "Meta-train on a prepared manifest");
  add_data_flags(train_cmd, train_data);
  add_train_flags(train_cmd, train_flags);

  DataFlags eval_data;
  ProtocolFlags eval_flags;
  auto* eval = app.add_subcommand("eval", "Class-incremental evaluation on a prepared manifest");
  add_data_flags(eval, eval_data);
  add_protocol_flags(eval, eval_flags);

  SynthFlags synth_flags;
  TrainFlags synth_train_flags;
  auto* synth_train = app.add_subcommand("synth-train", "Meta-train on synthetic Gaussian classes");
  add_train_flags(synth_train, synth_train_flags);
  add_synth_flags(synth_train, synth_flags);

  ProtocolFlags synth_eval_flags;
  auto* synth_eval = app.add_subcommand("synth-eval", "Class-incremental evaluation on held-out synthetic classes");
  add_protocol_flags(synth_eval, synth_eval_flags);

  fs::path inspect_path;
  auto* inspect = app.add_subcommand("inspect-checkpoint", "Print a checkpoint's configuration as JSON");
  inspect->add_option("--ckpt", inspect_path, "Checkpoint file or training directory")->required();

  app.set_config("--config", "", "TOML/INI file; keys are long flag names under a [subcommand] section");
  app.allow_config_extras(CLI::config_extras_mode::error);
  for (CLI::App* sub : {prepare, train_cmd, eval, synth_train, synth_eval}) {
    sub->fallthrough();
    sub->footer("Flag values may also come from --config FILE (TOML/INI, long flag names under a [" +
                sub->get_name() + "] section). Explicit flags take precedence.");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    if (code == 0) return 0;
    const auto chosen = app.get_subcommands();
    err << (chosen.empty() ? app.help() : chosen.front()->help());
    return 2;
  }

  CLI::App* chosen = app.get_subcommands().front();
  const Log log(err, chosen->get_name());
  try {
    if (chosen == version) {
      out << "gemcl " << kVersion << '\n';
      return 0;
    }
    if (chosen == prepare) return cmd_prepare(prepare_flags, out, log);
    if (chosen == train_cmd) return cmd_train(train_data, train_flags, log);
    if (chosen == eval) return cmd_eval(eval_data, eval_flags, log);
    if (chosen == synth_train) return cmd_synth_train(synth_flags, synth_train_flags, log);
    if (chosen == synth_eval) return cmd_synth_eval(synth_eval_flags, log);
    if (chosen == inspect) return cmd_inspect(inspect_path, out);
  } catch (const ConfigError& e) {
    log(std::string("invalid configuration: ") + e.what());
    return 2;
  } catch (const std::exception& e) {
    log(std::string("error: ") + e.what());
    return 1;
  }
  return 2;
}

}  // namespace gemcl::cli
