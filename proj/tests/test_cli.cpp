#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <map>
#include <set>
#include <sstream>

#include "slicehier/commands.hpp"
#include "slicehier/error.hpp"
#include "slicehier/volume_io.hpp"
#include "support.hpp"

using namespace slicehier;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = 0;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  args.insert(args.begin(), "slicehier");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Run r;
  r.code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

/// Flags for a corpus and model small enough to train in well under a second.
std::vector<std::string> small(std::vector<std::string> args) {
  const std::vector<std::string> extra{"--corpus.raw_slices", "10",         "--corpus.raw_height", "16",
                                       "--corpus.raw_width",  "16",         "--corpus.simple_radius", "2,3",
                                       "--corpus.complicated_radius", "3,4", "--corpus.aux_cases", "4",
                                       "--preprocess.slice_count", "8",     "--preprocess.target_height", "8",
                                       "--preprocess.target_width", "8",    "--model.feature_dim", "4",
                                       "--model.conv1_channels", "2",       "--model.conv2_channels", "3",
                                       "--quiet"};
  args.insert(args.end(), extra.begin(), extra.end());
  return args;
}

using Digest = std::map<std::string, std::string>;

Digest dir_digest(const fs::path& dir) {
  Digest d;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) d[fs::relative(e.path(), dir).string()] = testing::read_file(e.path());
  return d;
}

/// Names of files that differ between two digests; empty when identical.
std::string digest_diff(const Digest& a, const Digest& b) {
  std::string out;
  for (const auto& [name, bytes] : a)
    if (!b.contains(name) || b.at(name) != bytes) out += name + " ";
  for (const auto& [name, bytes] : b)
    if (!a.contains(name)) out += name + " ";
  return out;
}

}  // namespace

TEST_CASE("config: defaults, file, then flags") {
  const auto dir = testing::temp_dir("cli_precedence");
  const auto file = dir / "run.cfg";
  testing::write_file(file, "# comment\nseed = 3\ngradcheck.h=2e-5\n");

  CHECK(cli({"gradcheck", "--out", (dir / "a").string(), "--quiet"}).code == 0);
  CHECK(testing::read_file(dir / "a" / "config.gradcheck.txt").find("\nseed=7\n") != std::string::npos);

  CHECK(cli({"gradcheck", "--config", file.string(), "--out", (dir / "b").string(), "--quiet"}).code == 0);
  const auto b = testing::read_file(dir / "b" / "config.gradcheck.txt");
  CHECK(b.find("\nseed=3\n") != std::string::npos);
  CHECK(b.find("\ngradcheck.h=2e-5\n") != std::string::npos);

  CHECK(cli({"gradcheck", "--config", file.string(), "--seed", "5", "--gradcheck.h", "3e-5", "--out",
             (dir / "c").string(), "--quiet"})
            .code == 0);
  const auto c = testing::read_file(dir / "c" / "config.gradcheck.txt");
  CHECK(c.find("\nseed=5\n") != std::string::npos);
  CHECK(c.find("\ngradcheck.h=3e-5\n") != std::string::npos);
}

TEST_CASE("config: snapshot lists every known key") {
  Config c;
  const auto snap = c.snapshot();
  for (const auto& k : config_keys()) CHECK(snap.find("\n" + std::string(k.key) + "=") != std::string::npos);
  CHECK_THROWS_AS(c.set("no.such_key", "1"), Error);
}

TEST_CASE("cli: usage and configuration errors exit with 1") {
  CHECK(cli({}).code == 1);
  CHECK(cli({"frobnicate"}).code == 1);
  const auto unknown = cli({"gradcheck", "--loss.nonsense", "1"});
  CHECK(unknown.code == 1);
  CHECK(unknown.err.find("loss.nonsense") != std::string::npos);

  const auto dir = testing::temp_dir("cli_mix");
  const auto mix = cli({"synth", "--out", (dir / "c").string(), "--mix", "0.5,0.3,0.1", "--quiet"});
  CHECK(mix.code == 1);
  CHECK(mix.err.find("corpus.class_mix") != std::string::npos);

  CHECK(cli({"gradcheck", "--gradcheck.slices", "9", "--quiet"}).code == 1);
  CHECK(cli({"gradcheck", "--loss.alpha", "abc", "--quiet"}).code == 1);
}

TEST_CASE("cli: gradcheck passes, names every term and catches a corrupted gradient") {
  const auto ok = cli({"gradcheck"});
  CHECK(ok.code == 0);
  for (const char* term : {"L_app", "L_type", "L_center", "L_coherence", "L_2D", "L_total"})
    CHECK(ok.out.find(term) != std::string::npos);

  const auto bad = cli({"gradcheck", "--gradcheck.corrupt", "coherence"});
  CHECK(bad.code == 2);
  CHECK((bad.out + bad.err).find("coherence") != std::string::npos);
}

TEST_CASE("cli: synth is deterministic, refuses a non-empty directory and honours --force") {
  const auto dir = testing::temp_dir("cli_synth");
  const auto a = dir / "a";
  REQUIRE(cli(small({"synth", "--out", a.string(), "--cases", "10", "--seed", "7", "--force"})).code == 0);
  const auto first = dir_digest(a);
  REQUIRE(cli(small({"synth", "--out", a.string(), "--cases", "10", "--seed", "7", "--force"})).code == 0);
  CHECK(digest_diff(dir_digest(a), first) == "");

  const auto corpus = load_corpus(a);
  std::array<int, 3> counts{};
  for (const auto& v : corpus.volumes) ++counts[static_cast<int>(case_class(v.y_app, v.y_type))];
  CHECK(counts == std::array<int, 3>{5, 3, 2});

  CHECK(cli(small({"synth", "--out", a.string(), "--cases", "10"})).code == 1);
  CHECK(cli(small({"synth", "--out", a.string(), "--cases", "12", "--force"})).code == 0);
  CHECK(load_corpus(a).volumes.size() == 12);
}

TEST_CASE("cli: train, calibrate and eval round trip") {
  const auto dir = testing::temp_dir("cli_pipeline");
  const auto corpus = dir / "corpus", run = dir / "run";
  REQUIRE(cli(small({"synth", "--out", corpus.string(), "--cases", "24"})).code == 0);
  const auto corpus_before = dir_digest(corpus);

  const auto missing = cli(small({"train", "--corpus", (dir / "nope").string(), "--out", run.string()}));
  CHECK(missing.code == 2);
  CHECK(missing.err.find("synth") != std::string::npos);

  const auto train = small({"train", "--corpus", corpus.string(), "--out", run.string(), "--epochs", "2", "--lr",
                            "1e-3"});
  REQUIRE(cli(train).code == 0);
  CHECK(fs::exists(run / "checkpoint.bin"));
  CHECK(fs::exists(run / "history.csv"));
  CHECK(fs::exists(run / "config.train.txt"));
  const auto history = testing::read_file(run / "history.csv");
  CHECK(std::count(history.begin(), history.end(), '\n') == 3);

  const auto no_thresholds = cli(small({"eval", "--corpus", corpus.string(), "--out", run.string()}));
  CHECK(no_thresholds.code != 0);
  CHECK(no_thresholds.err.find("calibrate") != std::string::npos);

  REQUIRE(cli(small({"calibrate", "--corpus", corpus.string(), "--out", run.string()})).code == 0);
  const auto th = thresholds_from_json(testing::read_file(run / "thresholds.json"));
  CHECK(th.target_sens_app == 0.9);
  CHECK(th.target_sens_type == 0.8);
  REQUIRE(cli(small({"calibrate", "--corpus", corpus.string(), "--out", run.string()})).code == 0);
  const auto again = thresholds_from_json(testing::read_file(run / "thresholds.json"));
  CHECK(again.tau_app == th.tau_app);
  CHECK(again.tau_type == th.tau_type);

  const auto ev = cli(small({"eval", "--corpus", corpus.string(), "--out", run.string(), "--split", "val", "--roc"}));
  CHECK(ev.code == 0);
  const auto metrics = testing::read_file(run / "metrics.json");
  CHECK(metrics.find("\"appendicitis\"") != std::string::npos);
  CHECK(metrics.find("\"type\"") != std::string::npos);
  CHECK(fs::exists(run / "roc_app.csv"));
  CHECK(fs::exists(run / "roc_type.csv"));

  CHECK(digest_diff(dir_digest(corpus), corpus_before) == "");
}

TEST_CASE("cli: full recall target puts tau_app at or below the lowest positive score") {
  const auto dir = testing::temp_dir("cli_recall");
  const auto corpus = dir / "corpus", run = dir / "run";
  REQUIRE(cli(small({"synth", "--out", corpus.string(), "--cases", "24"})).code == 0);
  REQUIRE(cli(small({"train", "--corpus", corpus.string(), "--out", run.string(), "--epochs", "1"})).code == 0);
  REQUIRE(cli(small({"calibrate", "--corpus", corpus.string(), "--out", run.string(), "--target-sens-app", "1.0"}))
              .code == 0);
  const auto th = thresholds_from_json(testing::read_file(run / "thresholds.json"));

  Config c;
  for (const auto& [k, v] : std::vector<std::pair<std::string, std::string>>{
           {"run.corpus", corpus.string()}, {"corpus.aux_cases", "4"}, {"preprocess.slice_count", "8"},
           {"preprocess.target_height", "8"}, {"preprocess.target_width", "8"}})
    c.set(k, v);
  const auto ds = load_dataset(c);
  const auto model = load_checkpoint(run / "checkpoint.bin").model;
  const auto scored = score_volumes(model, ds.val);
  double min_pos = 1.0;
  for (std::size_t i = 0; i < scored.size(); ++i)
    if (scored.y_app[i] == 1) min_pos = std::min(min_pos, scored.p_app[i]);
  CHECK(th.tau_app <= min_pos);
}

TEST_CASE("cli: ablate writes three variants over one split") {
  const auto dir = testing::temp_dir("cli_ablate");
  const auto corpus = dir / "corpus", run = dir / "run";
  REQUIRE(cli(small({"synth", "--out", corpus.string(), "--cases", "24"})).code == 0);
  REQUIRE(cli(small({"ablate", "--corpus", corpus.string(), "--out", run.string(), "--epochs", "1"})).code == 0);
  const auto csv = testing::read_file(run / "ablation.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
  CHECK(csv.find("\nbase,") != std::string::npos);
  CHECK(csv.find("\nbase+hierarchy,") != std::string::npos);
  CHECK(csv.find("\nbase+hierarchy+2D,") != std::string::npos);
  CHECK(fs::exists(run / "ablation.md"));

  std::set<std::string> hashes;
  std::istringstream lines(csv);
  std::string line;
  std::getline(lines, line);
  while (std::getline(lines, line)) hashes.insert(line.substr(line.rfind(',') + 1));
  CHECK(hashes.size() == 1);

  bool type_attention = false;
  load_checkpoint(run / "base" / "checkpoint.bin")
      .model.params.visit([&](const std::string& name, const Tensor<float>&) {
        type_attention |= name.starts_with("attention.type");
      });
  CHECK_FALSE(type_attention);
}
