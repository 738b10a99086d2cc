#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "gemcl/audio.hpp"
#include "gemcl/episodes.hpp"
#include "gemcl/error.hpp"

using namespace gemcl;
namespace fs = std::filesystem;

namespace {

SampleRegistry counting_registry(std::size_t classes, std::size_t per_class) {
  SampleRegistry reg("test");
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t i = 0; i < per_class; ++i) {
      const std::string ref = "c" + std::to_string(c) + "/" + std::to_string(i);
      reg.add("c" + std::to_string(c), {ref, std::make_shared<const Tensor>(Tensor::vector({double(c), double(i)}))});
    }
  }
  return reg;
}

double nearest_mean_accuracy(const Episode& ep) {
  const std::size_t d = ep.support.front().sample.features->size();
  std::vector<std::vector<double>> means(ep.class_ids.size(), std::vector<double>(d, 0.0));
  std::vector<double> counts(ep.class_ids.size(), 0.0);
  for (const EpisodeItem& it : ep.support) {
    for (std::size_t i = 0; i < d; ++i) means[it.label][i] += (*it.sample.features)[i];
    counts[it.label] += 1;
  }
  for (std::size_t c = 0; c < means.size(); ++c)
    for (double& v : means[c]) v /= counts[c];
  std::size_t correct = 0;
  for (const EpisodeItem& it : ep.query) {
    std::size_t best = 0;
    double best_d = INFINITY;
    for (std::size_t c = 0; c < means.size(); ++c) {
      double s = 0;
      for (std::size_t i = 0; i < d; ++i) s += std::pow((*it.sample.features)[i] - means[c][i], 2);
      if (s < best_d) {
        best_d = s;
        best = c;
      }
    }
    correct += best == it.label;
  }
  return static_cast<double>(correct) / static_cast<double>(ep.query.size());
}

}  // namespace

TEST_CASE("split_classes") {
  std::vector<ClassId> ids;
  for (int i = 0; i < 10; ++i) ids.push_back("w" + std::to_string(i));
  const auto [train, test] = split_classes(ids, 0.7, 42);
  CHECK(train.size() == 7);
  CHECK(test.size() == 3);
  std::set<ClassId> all(train.begin(), train.end());
  all.insert(test.begin(), test.end());
  CHECK(all == std::set<ClassId>(ids.begin(), ids.end()));
  CHECK(all.size() == 10);
  CHECK(split_classes(ids, 0.7, 42) == std::pair{train, test});
  std::vector<ClassId> reversed(ids.rbegin(), ids.rend());
  CHECK(split_classes(reversed, 0.7, 42) == std::pair{train, test});
  CHECK(split_classes(ids, 0.7, 43) != std::pair{train, test});
  CHECK_THROWS_WITH(split_classes({"only"}, 0.7, 1), doctest::Contains("at least 2 classes"));
  CHECK_THROWS_AS(split_classes(ids, 1.0, 1), ConfigError);
  CHECK_THROWS_AS(split_classes(ids, 0.0, 1), ConfigError);
}

TEST_CASE("sample_episode geometry") {
  const SampleRegistry reg = counting_registry(30, 12);
  Rng rng(1);
  const Episode ep = sample_episode(reg, {25, 5, 5}, rng);
  CHECK(ep.class_ids.size() == 25);
  CHECK(ep.support.size() == 125);
  CHECK(ep.query.size() == 125);
  CHECK(std::set<ClassId>(ep.class_ids.begin(), ep.class_ids.end()).size() == 25);
  std::set<std::string> refs;
  for (const auto* part : {&ep.support, &ep.query}) {
    for (const EpisodeItem& it : *part) {
      CHECK(refs.insert(it.sample.ref).second);
      // The item belongs to the class it is labelled with.
      CHECK(it.sample.ref.starts_with(ep.class_ids[it.label] + "/"));
    }
  }
  const auto s_labels = ep.support_labels();
  const auto q_labels = ep.query_labels();
  for (std::size_t c = 0; c < 25; ++c) {
    CHECK(std::count(s_labels.begin(), s_labels.end(), c) == 5);
    CHECK(std::count(q_labels.begin(), q_labels.end(), c) == 5);
  }
}

TEST_CASE("registry with exactly N classes uses them all in shuffled order") {
  const SampleRegistry reg = counting_registry(6, 4);
  Rng rng(3);
  bool reordered = false;
  for (int trial = 0; trial < 20; ++trial) {
    const Episode ep = sample_episode(reg, {6, 2, 2}, rng);
    auto sorted = ep.class_ids;
    std::sort(sorted.begin(), sorted.end());
    CHECK(sorted == reg.class_ids());
    reordered |= ep.class_ids != reg.class_ids();
  }
  CHECK(reordered);
}

TEST_CASE("sample_episode deficits") {
  Rng rng(5);
  CHECK_THROWS_WITH(sample_episode(counting_registry(3, 20), {5, 1, 1}, rng),
                    doctest::Contains("needs 5 classes, registry has 3"));
  CHECK_THROWS_WITH(sample_episode(counting_registry(8, 6), {5, 5, 5}, rng),
                    doctest::Contains("has 6 samples, episode needs 10"));
  CHECK_THROWS_AS(sample_episode(counting_registry(8, 6), {1, 1, 1}, rng), ConfigError);
  CHECK_THROWS_AS(sample_episode(counting_registry(8, 6), {2, 0, 1}, rng), ConfigError);
}

TEST_CASE("class marginals over 10000 episodes") {
  const SampleRegistry reg = counting_registry(100, 3);
  Rng rng(2024);
  const std::size_t ways = 10, episodes = 10000;
  std::map<ClassId, double> counts;
  for (std::size_t e = 0; e < episodes; ++e) {
    for (const ClassId& id : sample_episode(reg, {ways, 1, 1}, rng).class_ids) counts[id] += 1;
  }
  const double p = static_cast<double>(ways) / 100.0;
  const double expected = p * episodes;
  const double se = std::sqrt(episodes * p * (1 - p));
  double chi2 = 0.0;
  std::size_t outside = 0;
  for (const ClassId& id : reg.class_ids()) {
    const double o = counts[id];
    outside += std::abs(o - expected) > 3 * se;
    chi2 += (o - expected) * (o - expected) / expected;
  }
  CHECK(outside == 0);
  // 99.9th percentile of chi-square with 99 degrees of freedom is about 148.2.
  CHECK(chi2 < 148.2);
}

TEST_CASE("synthetic tasks") {
  SynthTaskConfig cfg;
  const EpisodeSpec spec{10, 5, 5};
  SUBCASE("zero spread gives identical samples and perfect nearest mean") {
    cfg.within_std = 0.0;
    Rng rng(1);
    const Episode ep = synth_task(cfg, spec, rng);
    for (const auto* part : {&ep.support, &ep.query}) {
      for (const EpisodeItem& it : *part) CHECK(*it.sample.features == *ep.support[it.label * 5].sample.features);
    }
    CHECK(nearest_mean_accuracy(ep) == 1.0);
  }
  SUBCASE("separation 20 is perfectly separable") {
    cfg.class_sep = 1.0;
    cfg.within_std = 0.05;
    Rng rng(2);
    for (int e = 0; e < 100; ++e) CHECK(nearest_mean_accuracy(synth_task(cfg, spec, rng)) == 1.0);
  }
  SUBCASE("same seed, same episode") {
    Rng a(9), b(9);
    const Episode x = synth_task(cfg, spec, a), y = synth_task(cfg, spec, b);
    for (std::size_t i = 0; i < x.support.size(); ++i) CHECK(*x.support[i].sample.features == *y.support[i].sample.features);
    for (std::size_t i = 0; i < x.query.size(); ++i) CHECK(*x.query[i].sample.features == *y.query[i].sample.features);
  }
  SUBCASE("config validation") {
    cfg.class_sep = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.class_sep = 1.0;
    cfg.within_std = -1.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  }
}

TEST_CASE("pseudo-mfcc tiling") {
  SynthTaskConfig cfg;
  cfg.mode = SynthMode::PseudoMfcc;
  cfg.latent_dim = 5;
  cfg.frames = 3;
  const Tensor m = observe_latent(cfg, {10, 11, 12, 13, 14});
  REQUIRE(m.shape() == Shape{3, 13});
  CHECK(m.at(0, 0) == 10);
  CHECK(m.at(0, 7) == 12);   // 7 mod 5
  CHECK(m.at(1, 0) == 13);   // 13 mod 5
  CHECK(m.at(2, 12) == 13);  // 38 mod 5
  CHECK(cfg.sample_shape() == Shape{3, 13});
}

TEST_CASE("synthetic registry classes are stable under resizing") {
  SynthTaskConfig cfg;
  const SampleRegistry small = synth_registry(cfg, 5, 4, 77);
  const SampleRegistry large = synth_registry(cfg, 9, 12, 77);
  CHECK(small.num_classes() == 5);
  CHECK(small.num_samples() == 20);
  for (const ClassId& id : small.class_ids()) {
    for (std::size_t i = 0; i < 4; ++i) CHECK(*small.samples(id)[i].features == *large.samples(id)[i].features);
  }
  CHECK(*synth_registry(cfg, 5, 4, 78).samples(synth_class_id(0))[0].features != *small.samples(synth_class_id(0))[0].features);
  CHECK(small.subset({synth_class_id(3)}).num_samples() == 4);
  CHECK_THROWS(small.subset({"nope"}));
}

TEST_CASE("registry rejects duplicate sample refs") {
  SampleRegistry reg;
  auto t = std::make_shared<const Tensor>(Tensor::vector({1.0}));
  reg.add("a", {"x.wav", t});
  CHECK_THROWS_WITH(reg.add("b", {"x.wav", t}), doctest::Contains("already registered"));
}

TEST_CASE("manifest parsing") {
  const fs::path dir = fs::path(GEMCL_TEST_DATA_DIR) / "episodes_tmp";
  fs::create_directories(dir);
  auto write = [&](const char* name, const std::string& text) {
    std::ofstream(dir / name) << text;
    return dir / name;
  };
  const auto good = write("good.jsonl",
                          "{\"word\": \"cat\", \"path\": \"en/cat/1.wav\", \"split\": \"train\"}\n\n"
                          "{\"word\": \"dog\", \"path\": \"en/dog/1.wav\", \"split\": \"test\"}\n");
  const auto entries = read_manifest(good);
  REQUIRE(entries.size() == 2);
  CHECK(entries[1].word == "dog");
  CHECK(entries[1].line == 3);
  write_manifest(dir / "copy.jsonl", entries);
  const auto again = read_manifest(dir / "copy.jsonl");
  CHECK(again[1].path == "en/dog/1.wav");

  CHECK_THROWS_WITH_AS(read_manifest(write("bad.jsonl", "{\"word\": \"a\", \"path\": \"p\", \"split\": \"train\"}\n"
                                                         "{\"word\": \"b\", \"path\": \n")),
                       doctest::Contains("bad.jsonl:2"), ParseError);
  CHECK_THROWS_WITH(read_manifest(write("split.jsonl", "{\"word\": \"a\", \"path\": \"p\", \"split\": \"dev\"}\n")),
                    doctest::Contains("split must be"));
  CHECK_THROWS_WITH(read_manifest(write("missing.jsonl", "{\"word\": \"a\", \"split\": \"train\"}\n")),
                    doctest::Contains("'path'"));
  CHECK_THROWS_WITH(read_manifest(write("empty.jsonl", "\n\n")), doctest::Contains("no records"));
  CHECK(feature_path("/f", "en/cat/1.wav") == fs::path("/f/en/cat/1.mfcc"));
  CHECK(feature_path("/f", "/abs/cat.wav") == fs::path("/f/abs/cat.mfcc"));
}

TEST_CASE("load_registry reads feature dumps per split") {
  const fs::path dir = fs::path(GEMCL_TEST_DATA_DIR) / "episodes_feat";
  std::vector<ManifestEntry> entries;
  for (int i = 0; i < 4; ++i) {
    for (const char* split : {"train", "test"}) {
      ManifestEntry e{"w" + std::to_string(i % 2), std::string(split) + "/" + std::to_string(i) + ".wav", split, 0};
      const fs::path out = feature_path(dir, e.path);
      fs::create_directories(out.parent_path());
      audio::write_feature_dump(out, {Tensor(Shape{2, 13}, static_cast<double>(i))});
      entries.push_back(e);
    }
  }
  const SampleRegistry train = load_registry(entries, dir, "train");
  CHECK(train.num_classes() == 2);
  CHECK(train.num_samples() == 4);
  CHECK(load_registry(entries, dir, "test", {"w1"}).num_samples() == 2);
  CHECK(load_registry(entries, dir, "test", {"w1"}).samples("w1")[1].features->at(0, 0) == 3.0);
}
