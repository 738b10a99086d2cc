#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "cli.hpp"
#include "doctest.h"
#include "gemcl/audio.hpp"
#include "json.hpp"

namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome run(std::vector<std::string> args) {
  args.insert(args.begin(), "gemcl");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = gemcl::cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path fresh(const std::string& name) {
  const fs::path dir = fs::path(GEMCL_TEST_DATA_DIR) / "cli_tmp" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

// Tiny dataset of tones: `counts` gives (train, test) clips per word.
fs::path write_tone_dataset(const fs::path& root, const std::vector<std::pair<std::size_t, std::size_t>>& counts) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> noise(0.0, 0.01);
  std::ofstream manifest(root / "manifest.jsonl");
  for (std::size_t w = 0; w < counts.size(); ++w) {
    const std::string word = "word" + std::to_string(w);
    fs::create_directories(root / "clips" / word);
    for (const char* split : {"train", "test"}) {
      const std::size_t n = std::string(split) == "train" ? counts[w].first : counts[w].second;
      for (std::size_t i = 0; i < n; ++i) {
        gemcl::audio::Waveform wave;
        const double freq = 200.0 + 150.0 * static_cast<double>(w);
        for (std::size_t t = 0; t < 3200; ++t)
          wave.samples.push_back(0.3 * std::sin(2 * M_PI * freq * static_cast<double>(t) / 16000.0) + noise(rng));
        const std::string rel = "clips/" + word + "/" + split + std::to_string(i) + ".wav";
        gemcl::audio::save_wav(root / rel, wave);
        manifest << nlohmann::json{{"word", word}, {"path", rel}, {"split", split}}.dump() << "\n";
      }
    }
  }
  return root / "manifest.jsonl";
}

}  // namespace

TEST_CASE("version and usage errors") {
  const Outcome v = run({"version"});
  CHECK(v.code == 0);
  CHECK(v.out == std::string("gemcl ") + gemcl::cli::kVersion + "\n");

  const Outcome unknown = run({"synth-train", "--out", "x", "--bogus", "1"});
  CHECK(unknown.code == 2);
  CHECK(unknown.err.find("--bogus") != std::string::npos);
  CHECK(unknown.err.find("Usage") != std::string::npos);

  CHECK(run({}).code == 2);
  CHECK(run({"frobnicate"}).code == 2);
  CHECK(run({"synth-eval", "--out", "x"}).code == 2);
  CHECK(run({"synth-train", "--out", "x", "--encoder", "transformer"}).code == 2);
  CHECK(run({"synth-train", "--out", "x", "--steps", "ten"}).code == 2);
}

TEST_CASE("help documents every flag of every subcommand") {
  const std::vector<std::pair<std::string, std::vector<std::string>>> expected = {
      {"prepare", {"--manifest", "--features-dir", "--audio-root", "--shots", "--query-shots", "--workers"}},
      {"train",
       {"--manifest", "--features-dir", "--out", "--seed", "--steps", "--ways", "--shots", "--query-shots",
        "--batch-episodes", "--workers", "--encoder", "--embed-dim", "--config"}},
      {"eval",
       {"--manifest", "--features-dir", "--ckpt", "--out", "--seed", "--increment", "--max-classes", "--episodes",
        "--shots", "--query-shots", "--workers", "--encoder", "--embed-dim"}},
      {"synth-train", {"--out", "--seed", "--steps", "--latent-dim", "--class-sep", "--within-std", "--mode"}},
      {"synth-eval", {"--ckpt", "--out", "--increment", "--max-classes", "--episodes"}},
      {"inspect-checkpoint", {"--ckpt"}},
      {"version", {}},
  };
  for (const auto& [cmd, flags] : expected) {
    const Outcome h = run({cmd, "--help"});
    CHECK(h.code == 0);
    for (const auto& flag : flags) {
      INFO(cmd << " " << flag);
      CHECK(h.out.find(flag) != std::string::npos);
    }
  }
}

TEST_CASE("synthetic smoke pipeline is reproducible") {
  const fs::path dir = fresh("smoke");
  auto pipeline = [&](const std::string& tag) {
    const std::string ckpt = (dir / ("ckpt_" + tag)).string();
    const std::string report = (dir / ("report_" + tag)).string();
    const Outcome t = run({"synth-train", "--steps", "200", "--ways", "5", "--shots", "5", "--seed", "1", "--out",
                           ckpt, "--embed-dim", "16", "--hidden-dims", "32"});
    REQUIRE_MESSAGE(t.code == 0, t.err);
    const Outcome e = run({"synth-eval", "--ckpt", ckpt, "--max-classes", "50", "--increment", "25", "--out", report,
                           "--seed", "1", "--episodes", "3"});
    REQUIRE_MESSAGE(e.code == 0, e.err);
  };
  pipeline("a");
  pipeline("b");
  const std::string curve = slurp(dir / "report_a" / "curve.csv");
  CHECK(lines(curve) == 3);
  for (const char* f : {"best.ckpt", "final.ckpt", "train_log.csv"})
    CHECK(slurp(dir / "ckpt_a" / f) == slurp(dir / "ckpt_b" / f));
  for (const char* f : {"curve.csv", "volatility.csv", "per_word.csv"})
    CHECK(slurp(dir / "report_a" / f) == slurp(dir / "report_b" / f));

  const Outcome mismatch = run({"synth-eval", "--ckpt", (dir / "ckpt_a").string(), "--out",
                                (dir / "r").string(), "--encoder", "attention-mlp", "--max-classes", "50"});
  CHECK(mismatch.code == 1);
  CHECK(mismatch.err.find("expected attention-mlp") != std::string::npos);

  const Outcome bad = run({"synth-eval", "--ckpt", (dir / "ckpt_a").string(), "--out", (dir / "r").string(),
                           "--max-classes", "50", "--increment", "20"});
  CHECK(bad.code == 2);
  CHECK(bad.err.find("divisible") != std::string::npos);

  const Outcome too_many = run({"synth-eval", "--ckpt", (dir / "ckpt_a").string(), "--out", (dir / "r").string(),
                                "--max-classes", "250"});
  CHECK(too_many.code == 1);
  CHECK(too_many.err.find("protocol needs 250 classes, registry has 210") != std::string::npos);

  const Outcome inspect = run({"inspect-checkpoint", "--ckpt", (dir / "ckpt_a" / "final.ckpt").string()});
  REQUIRE(inspect.code == 0);
  const auto doc = nlohmann::json::parse(inspect.out);
  CHECK(doc.at("info").at("step") == 200);
  CHECK(doc.at("encoder").at("embed_dim") == 16);

  std::string raw = slurp(dir / "ckpt_a" / "final.ckpt");
  raw[raw.size() - 3] ^= 0x40;
  std::ofstream(dir / "broken.ckpt", std::ios::binary) << raw;
  const Outcome broken = run({"inspect-checkpoint", "--ckpt", (dir / "broken.ckpt").string()});
  CHECK(broken.code == 1);
  CHECK(broken.err.find("checksum") != std::string::npos);
}

TEST_CASE("config file values yield to flags") {
  const fs::path dir = fresh("config");
  std::ofstream(dir / "run.toml")
      << "[synth-train]\nsteps = 3\nways = 4\nembed-dim = 8\nhidden-dims = [16]\nvalidation-every = 1\n";
  const Outcome t = run({"synth-train", "--config", (dir / "run.toml").string(), "--steps", "5", "--out",
                         (dir / "ckpt").string()});
  REQUIRE_MESSAGE(t.code == 0, t.err);
  CHECK(lines(slurp(dir / "ckpt" / "train_log.csv")) == 6);
  const auto doc = nlohmann::json::parse(run({"inspect-checkpoint", "--ckpt", (dir / "ckpt" / "final.ckpt").string()}).out);
  CHECK(doc.at("info").at("train").at("ways") == 4);
  CHECK(doc.at("info").at("train").at("steps") == 5);
  CHECK(doc.at("encoder").at("embed_dim") == 8);

  std::ofstream(dir / "stray.toml") << "steps = 3\n";
  CHECK(run({"synth-train", "--config", (dir / "stray.toml").string(), "--out", (dir / "x").string()}).code == 2);
}

TEST_CASE("prepare, train and eval on audio") {
  const fs::path dir = fresh("audio");
  std::vector<std::pair<std::size_t, std::size_t>> counts(7, {6, 5});
  counts.push_back({3, 6});  // too few train clips
  const fs::path manifest = write_tone_dataset(dir, counts);
  const std::string features = (dir / "features").string();

  const Outcome p = run({"prepare", "--manifest", manifest.string(), "--features-dir", features, "--shots", "3",
                         "--query-shots", "2", "--workers", "3"});
  REQUIRE_MESSAGE(p.code == 0, p.err);
  CHECK(p.err.find("rejecting word 'word7': 3 train / 6 test samples, need 5 in each split") != std::string::npos);
  CHECK(p.err.find("77 clips extracted, 0 cached") != std::string::npos);
  const std::string validated = slurp(dir / "features" / "manifest.jsonl");
  CHECK(validated.find("word7") == std::string::npos);
  CHECK(lines(validated) == 77);
  const std::string dump = slurp(dir / "features" / "clips" / "word0" / "train0.mfcc");
  CHECK(dump.size() == 16 + 18 * 13 * 8);

  const Outcome again = run({"prepare", "--manifest", manifest.string(), "--features-dir", features, "--shots", "3",
                             "--query-shots", "2"});
  REQUIRE(again.code == 0);
  CHECK(again.err.find("0 clips extracted, 77 cached") != std::string::npos);
  CHECK(slurp(dir / "features" / "manifest.jsonl") == validated);
  CHECK(slurp(dir / "features" / "clips" / "word0" / "train0.mfcc") == dump);

  const std::string ckpt = (dir / "ckpt").string();
  const Outcome t = run({"train", "--manifest", (dir / "features" / "manifest.jsonl").string(), "--features-dir",
                         features, "--out", ckpt, "--steps", "20", "--ways", "2", "--shots", "3", "--query-shots",
                         "2", "--embed-dim", "8", "--hidden-dims", "16", "--validation-every", "10"});
  REQUIRE_MESSAGE(t.code == 0, t.err);
  CHECK(t.err.find("5 meta-train words, 2 meta-test words") != std::string::npos);
  const Outcome e = run({"eval", "--manifest", (dir / "features" / "manifest.jsonl").string(), "--features-dir",
                         features, "--ckpt", ckpt, "--out", (dir / "report").string(), "--max-classes", "2",
                         "--increment", "1", "--shots", "3", "--query-shots", "2", "--episodes", "4"});
  REQUIRE_MESSAGE(e.code == 0, e.err);
  CHECK(lines(slurp(dir / "report" / "curve.csv")) == 3);

  const Outcome wrong = run({"synth-eval", "--ckpt", ckpt, "--out", (dir / "r2").string()});
  CHECK(wrong.code == 1);
  CHECK(wrong.err.find("use eval") != std::string::npos);
}

TEST_CASE("prepare rejects broken manifests") {
  const fs::path dir = fresh("broken");
  std::ofstream(dir / "empty.jsonl") << "\n";
  const Outcome empty = run({"prepare", "--manifest", (dir / "empty.jsonl").string(), "--features-dir",
                             (dir / "f").string()});
  CHECK(empty.code == 1);
  CHECK(empty.err.find("no records") != std::string::npos);

  std::ofstream(dir / "bad.jsonl") << R"({"word": "a", "path": "x.wav", "split": "train"})" << "\n\n"
                                   << R"({"word": "a", "path": )" << "\n";
  const Outcome bad = run({"prepare", "--manifest", (dir / "bad.jsonl").string(), "--features-dir",
                           (dir / "f").string()});
  CHECK(bad.code == 1);
  CHECK(bad.err.find("bad.jsonl:3:") != std::string::npos);

  const Outcome missing = run({"prepare", "--manifest", (dir / "nope.jsonl").string(), "--features-dir",
                               (dir / "f").string()});
  CHECK(missing.code == 1);
}
