#include "gemcl/episodes.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include "gemcl/audio.hpp"
#include "gemcl/error.hpp"
#include "json.hpp"

namespace gemcl {

void SampleRegistry::add(const ClassId& id, Sample sample) {
  if (!sample.features) throw Error("sample '" + sample.ref + "' has no features");
  auto [it, fresh] = refs_.emplace(sample.ref, id);
  if (!fresh) throw Error("sample '" + sample.ref + "' is already registered");
  classes_[id].push_back(std::move(sample));
}

std::size_t SampleRegistry::num_samples() const { return refs_.size(); }

std::vector<ClassId> SampleRegistry::class_ids() const {
  std::vector<ClassId> ids;
  ids.reserve(classes_.size());
  for (const auto& [id, samples] : classes_) ids.push_back(id);
  return ids;
}

const std::vector<Sample>& SampleRegistry::samples(const ClassId& id) const {
  auto it = classes_.find(id);
  if (it == classes_.end()) throw Error("registry has no class '" + id + "'");
  return it->second;
}

SampleRegistry SampleRegistry::subset(const std::vector<ClassId>& ids) const {
  SampleRegistry out(source_);
  for (const ClassId& id : ids) {
    for (const Sample& s : samples(id)) out.add(id, s);
  }
  return out;
}

void EpisodeSpec::validate() const {
  if (ways < 2) throw ConfigError("episodes need at least 2 ways");
  if (shots < 1) throw ConfigError("episodes need at least 1 support shot");
  if (query_shots < 1) throw ConfigError("episodes need at least 1 query shot");
}

std::vector<std::size_t> Episode::support_labels() const {
  std::vector<std::size_t> out;
  out.reserve(support.size());
  for (const EpisodeItem& it : support) out.push_back(it.label);
  return out;
}

std::vector<std::size_t> Episode::query_labels() const {
  std::vector<std::size_t> out;
  out.reserve(query.size());
  for (const EpisodeItem& it : query) out.push_back(it.label);
  return out;
}

std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t count, Rng& rng) {
  if (count > n) throw Error("cannot draw " + std::to_string(count) + " of " + std::to_string(n) + " items");
  std::vector<std::size_t> pool(n);
  for (std::size_t i = 0; i < n; ++i) pool[i] = i;
  // Partial Fisher-Yates.
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(count);
  return pool;
}

std::pair<std::vector<ClassId>, std::vector<ClassId>> split_classes(std::vector<ClassId> ids, double ratio,
                                                                    std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("split ratio must lie strictly between 0 and 1");
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) throw Error("duplicate class ids in split");
  if (ids.size() < 2) throw Error("need at least 2 classes to split, got " + std::to_string(ids.size()));
  const auto train_count = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(ids.size())));
  if (train_count == 0 || train_count == ids.size()) {
    throw ConfigError("split ratio leaves one side empty for " + std::to_string(ids.size()) + " classes");
  }
  Rng rng(seed);
  const auto order = sample_without_replacement(ids.size(), ids.size(), rng);
  std::vector<ClassId> train, test;
  for (std::size_t i = 0; i < order.size(); ++i) (i < train_count ? train : test).push_back(ids[order[i]]);
  return {std::move(train), std::move(test)};
}

Episode sample_episode(const SampleRegistry& registry, const EpisodeSpec& spec, Rng& rng) {
  spec.validate();
  const auto ids = registry.class_ids();
  if (ids.size() < spec.ways) {
    throw Error("episode needs " + std::to_string(spec.ways) + " classes, registry has " +
                std::to_string(ids.size()));
  }
  const std::size_t per_class = spec.shots + spec.query_shots;
  for (const ClassId& id : ids) {
    const std::size_t have = registry.samples(id).size();
    if (have < per_class) {
      throw Error("class '" + id + "' has " + std::to_string(have) + " samples, episode needs " +
                  std::to_string(per_class) + " (" + std::to_string(spec.shots) + " support + " +
                  std::to_string(spec.query_shots) + " query)");
    }
  }
  Episode ep;
  for (std::size_t c : sample_without_replacement(ids.size(), spec.ways, rng)) ep.class_ids.push_back(ids[c]);
  for (std::size_t label = 0; label < spec.ways; ++label) {
    const auto& pool = registry.samples(ep.class_ids[label]);
    const auto picks = sample_without_replacement(pool.size(), per_class, rng);
    for (std::size_t i = 0; i < per_class; ++i) {
      (i < spec.shots ? ep.support : ep.query).push_back({label, pool[picks[i]]});
    }
  }
  return ep;
}

const char* to_string(SynthMode m) { return m == SynthMode::RawVector ? "raw-vector" : "pseudo-mfcc"; }

SynthMode parse_synth_mode(const std::string& s) {
  if (s == "raw-vector") return SynthMode::RawVector;
  if (s == "pseudo-mfcc") return SynthMode::PseudoMfcc;
  throw ConfigError("unknown synthetic observation mode '" + s + "'");
}

void SynthTaskConfig::validate() const {
  if (latent_dim < 1) throw ConfigError("latent_dim must be >= 1");
  if (!(class_sep > 0.0) || !std::isfinite(class_sep)) throw ConfigError("class_sep must be > 0");
  if (!(within_std >= 0.0) || !std::isfinite(within_std)) throw ConfigError("within_std must be >= 0");
  if (mode == SynthMode::PseudoMfcc && frames < 1) throw ConfigError("pseudo-mfcc needs at least 1 frame");
}

Shape SynthTaskConfig::sample_shape() const {
  if (mode == SynthMode::RawVector) return {latent_dim};
  return {frames, kPseudoMfccCeps};
}

Tensor observe_latent(const SynthTaskConfig& cfg, const std::vector<double>& latent) {
  if (latent.size() != cfg.latent_dim) throw ShapeError("latent vector has the wrong dimension");
  if (cfg.mode == SynthMode::RawVector) return Tensor(Shape{cfg.latent_dim}, latent);
  Tensor m(Shape{cfg.frames, kPseudoMfccCeps});
  for (std::size_t t = 0; t < cfg.frames; ++t)
    for (std::size_t j = 0; j < kPseudoMfccCeps; ++j) m.at(t, j) = latent[(kPseudoMfccCeps * t + j) % cfg.latent_dim];
  return m;
}

namespace {

std::vector<double> draw_vector(std::size_t dim, double center_scale, const std::vector<double>* around, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(dim);
  for (std::size_t i = 0; i < dim; ++i) {
    const double x = n(rng) * center_scale;
    v[i] = around ? (*around)[i] + x : x;
  }
  return v;
}

Sample synth_sample(const SynthTaskConfig& cfg, const std::string& ref, const std::vector<double>& mean, Rng& rng) {
  const auto latent = draw_vector(cfg.latent_dim, cfg.within_std, &mean, rng);
  return {ref, std::make_shared<const Tensor>(observe_latent(cfg, latent))};
}

}  // namespace

Episode synth_task(const SynthTaskConfig& cfg, const EpisodeSpec& spec, Rng& rng) {
  cfg.validate();
  spec.validate();
  Episode ep;
  for (std::size_t c = 0; c < spec.ways; ++c) {
    ep.class_ids.push_back("task-class-" + std::to_string(c));
    const auto mean = draw_vector(cfg.latent_dim, cfg.class_sep, nullptr, rng);
    for (std::size_t i = 0; i < spec.shots + spec.query_shots; ++i) {
      Sample s = synth_sample(cfg, ep.class_ids.back() + "/" + std::to_string(i), mean, rng);
      (i < spec.shots ? ep.support : ep.query).push_back({c, std::move(s)});
    }
  }
  return ep;
}

std::string synth_class_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "synth-%05zu", index);
  return buf;
}

SampleRegistry synth_registry(const SynthTaskConfig& cfg, std::size_t num_classes, std::size_t samples_per_class,
                              std::uint64_t seed) {
  cfg.validate();
  SampleRegistry reg("synthetic(seed=" + std::to_string(seed) + ")");
  for (std::size_t c = 0; c < num_classes; ++c) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(c), static_cast<std::uint32_t>(c >> 32)};
    Rng rng(seq);
    const ClassId id = synth_class_id(c);
    const auto mean = draw_vector(cfg.latent_dim, cfg.class_sep, nullptr, rng);
    for (std::size_t i = 0; i < samples_per_class; ++i) reg.add(id, synth_sample(cfg, id + "/" + std::to_string(i), mean, rng));
  }
  return reg;
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open manifest '" + path.string() + "'");
  std::vector<ManifestEntry> entries;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(line) + ": ";
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception&) {
      throw ParseError(where + "not a JSON object");
    }
    if (!rec.is_object()) throw ParseError(where + "not a JSON object");
    ManifestEntry e;
    e.line = line;
    for (auto [field, dest] : {std::pair{"word", &e.word}, std::pair{"path", &e.path}, std::pair{"split", &e.split}}) {
      auto it = rec.find(field);
      if (it == rec.end() || !it->is_string()) throw ParseError(where + "missing string field '" + field + "'");
      *dest = it->get<std::string>();
    }
    if (e.word.empty()) throw ParseError(where + "empty word");
    if (e.path.empty()) throw ParseError(where + "empty path");
    if (e.split != "train" && e.split != "test") {
      throw ParseError(where + "split must be \"train\" or \"test\", got \"" + e.split + "\"");
    }
    entries.push_back(std::move(e));
  }
  if (entries.empty()) throw ParseError("manifest '" + path.string() + "' has no records");
  return entries;
}

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries) {
  std::string text;
  for (const ManifestEntry& e : entries) {
    text += nlohmann::json{{"word", e.word}, {"path", e.path}, {"split", e.split}}.dump() + "\n";
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw Error("write to '" + path.string() + "' failed");
}

std::filesystem::path feature_path(const std::filesystem::path& features_dir, const std::string& audio_path) {
  std::filesystem::path rel = std::filesystem::path(audio_path).relative_path();
  rel.replace_extension(".mfcc");
  return features_dir / rel;
}

SampleRegistry load_registry(const std::vector<ManifestEntry>& entries, const std::filesystem::path& features_dir,
                             const std::string& split, const std::vector<ClassId>& words) {
  const std::set<ClassId> wanted(words.begin(), words.end());
  SampleRegistry reg(features_dir.string() + " [" + split + "]");
  for (const ManifestEntry& e : entries) {
    if (e.split != split || (!wanted.empty() && !wanted.contains(e.word))) continue;
    auto mfcc = audio::read_feature_dump(feature_path(features_dir, e.path));
    reg.add(e.word, {e.path, std::make_shared<const Tensor>(std::move(mfcc.frames))});
  }
  return reg;
}

}  // namespace gemcl
