// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "mvnmt/cli.hpp"
#include "support/tempdir.hpp"

using namespace mvnmt;
using mvnmt::testing::TempDir;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

void spit(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

std::size_t line_count(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

/// One-line JSON error with the given kind.
void check_error(const Result& r, int code, const std::string& kind) {
  CHECK(r.code == code);
  REQUIRE(line_count(r.err) == 1);
  const auto j = nlohmann::json::parse(r.err);
  CHECK(j.at("error") == kind);
  CHECK(j.at("message").is_string());
}

const char* kTinyConfig = R"(; tiny copy-task run
[model]
encoder_layers = 2
aux_layer = 1
decoder_layers = 1
d_model = 16
d_ffn = 32
heads = 2

[train]
max_updates = 12
warmup_steps = 4
batch_tokens = 160
checkpoint_every = 4
keep_last_k = 2

[data]
vocab_size = 12
max_len = 6
train_size = 120
valid_size = 8
)";

/// Trains the tiny configuration once per process.
struct Trained {
  TempDir tmp;
  fs::path cfg = tmp.path() / "run.cfg";
  fs::path dir = tmp.path() / "run";
  Result result;
  Trained() {
    setenv("MVNMT_LOG_LEVEL", "warn", 1);
    spit(cfg, kTinyConfig);
    result = run({"train", "--config", cfg.string(), "--output-dir", dir.string()});
  }
};

const Trained& trained() {
  static Trained t;
  return t;
}

}  // namespace

TEST_CASE("configuration precedence and strictness") {
  TempDir tmp;
  const auto path = tmp.path() / "a.cfg";
  spit(path, "[train]\nbase_lr = 0.002\nwarmup_steps = 7\n[loss]\ndark_mode = gold_only\n");
  cli::RunConfig cfg;
  cfg.merge_file(path);
  CHECK(cfg.train.base_lr == 0.002);
  CHECK(cfg.train.warmup_steps == 7);
  CHECK(cfg.train.max_updates == TrainConfig{}.max_updates);
  CHECK(cfg.loss.dark.str() == "gold_only");
  cfg.set("train.base_lr", "0.005");
  CHECK(cfg.train.base_lr == 0.005);

  CHECK_THROWS_AS(cfg.set("train.bogus", "1"), ConfigError);
  CHECK_THROWS_AS(cfg.set("bogus.key", "1"), ConfigError);
  CHECK_THROWS_AS(cfg.set("nodot", "1"), ConfigError);
  CHECK_THROWS_AS(cfg.set("model.d_model", "abc"), ConfigError);
  CHECK_THROWS_AS(cfg.set("decode.view", "sideways"), ConfigError);

  spit(path, "[train]\nbase_lr = 0.002\nunknown = 1\n");
  CHECK_THROWS_AS(cli::RunConfig{}.merge_file(path), ConfigError);
  spit(path, "[nosuch]\nkey = 1\n");
  CHECK_THROWS_AS(cli::RunConfig{}.merge_file(path), ConfigError);
  spit(path, "orphan = 1\n[train]\nseed = 2\n");
  CHECK_THROWS_AS(cli::RunConfig{}.merge_file(path), ConfigError);
  CHECK_THROWS_AS(cli::RunConfig{}.merge_file(tmp.path() / "missing.cfg"), ConfigError);
}

TEST_CASE("resolved configuration text round-trips every field") {
  cli::RunConfig cfg;
  cfg.model.d_model = 24;
  cfg.model.norm_style = NormStyle::postnorm;
  cfg.train.base_lr = 0.1 + 0.2;  // not a short decimal
  cfg.train.adam_eps = 1e-9;
  cfg.loss.alpha = 1.0 / 3.0;
  cfg.loss.dark = DarkMode::parse("gold_only");
  cfg.decode.view = View::auxiliary;
  cfg.data.task = "reverse";
  cfg.data.train_src = "";
  cfg.experiment.metric = "bleu";
  cfg.output.dir = "some/dir";
  TempDir tmp;
  spit(tmp.path() / "r.cfg", cfg.to_ini());
  cli::RunConfig back;
  back.merge_file(tmp.path() / "r.cfg");
  CHECK(back == cfg);
  CHECK(back.to_ini() == cfg.to_ini());
}

TEST_CASE("usage errors exit 2, runtime errors exit 1, one JSON line each") {
  check_error(run({}), 2, "usage");
  check_error(run({"frobnicate"}), 2, "usage");
  check_error(run({"train", "--no-such-flag"}), 2, "usage");
  check_error(run({"decode", "--input", "x.txt"}), 2, "usage");  // --ckpt missing
  check_error(run({"experiment"}), 2, "usage");
  check_error(run({"train", "--set", "model.nope=1", "--output-dir", "x"}), 2, "usage");
  check_error(run({"train", "--set", "train.base_lr=1"}), 2, "usage");  // no output directory

  TempDir tmp;
  check_error(run({"decode", "--ckpt", (tmp.path() / "none.ckpt").string(), "--input", "x"}), 1, "io");
  spit(tmp.path() / "h.txt", "a b\n");
  spit(tmp.path() / "r.txt", "a b\nc d\n");
  check_error(run({"eval-bleu", "--hyp", (tmp.path() / "h.txt").string(), "--ref", (tmp.path() / "r.txt").string()}),
              1, "data");

  setenv("MVNMT_LOG_LEVEL", "shouty", 1);
  check_error(run({"eval-bleu", "--hyp", (tmp.path() / "h.txt").string(), "--ref", (tmp.path() / "h.txt").string()}),
              2, "usage");
  setenv("MVNMT_LOG_LEVEL", "warn", 1);
}

TEST_CASE("every subcommand has --help") {
  const std::vector<std::vector<std::string>> commands = {
      {"train"},
      {"decode"},
      {"eval-bleu"},
      {"strip"},
      {"average-ckpt"},
      {"experiment"},
      {"experiment", "noise-sweep"},
      {"experiment", "sweep"},
      {"experiment", "layer-similarity"},
      {"experiment", "seq-kd"}};
  for (auto args : commands) {
    args.push_back("--help");
    const auto r = run(args);
    CHECK(r.code == 0);
    CHECK(r.out.find("Usage: " + args[args.size() - 2]) != std::string::npos);
  }
  CHECK(run({"--help"}).code == 0);
}

TEST_CASE("eval-bleu reports corpus BLEU") {
  TempDir tmp;
  spit(tmp.path() / "h.txt", "a b c d\n");
  spit(tmp.path() / "r.txt", "a b c d e\n");
  const auto r = run({"eval-bleu", "--hyp", (tmp.path() / "h.txt").string(), "--ref", (tmp.path() / "r.txt").string()});
  REQUIRE(r.code == 0);
  CHECK(std::abs(nlohmann::json::parse(r.out).at("bleu").get<double>() - 77.88) <= 0.01);
}

TEST_CASE("train writes checkpoints, loss log and resolved configuration") {
  const auto& t = trained();
  REQUIRE(t.result.code == 0);
  CHECK(fs::exists(t.dir / "last.ckpt"));
  CHECK(fs::exists(t.dir / "checkpoint_12.ckpt"));
  CHECK(fs::exists(t.dir / "checkpoint_8.ckpt"));
  CHECK_FALSE(fs::exists(t.dir / "checkpoint_4.ckpt"));  // keep_last_k = 2
  const auto log = slurp(t.dir / "loss.csv");
  CHECK(log.rfind("step,lr,nll_pri,nll_aux,cr,total\n", 0) == 0);
  CHECK(line_count(log) == 13);
  const auto report = nlohmann::json::parse(t.result.out);
  CHECK(report.at("steps") == 12);
  CHECK(report.at("valid").contains("auxiliary"));

  cli::RunConfig resolved;
  resolved.merge_file(t.dir / "resolved.cfg");
  CHECK(resolved.model.src_vocab == 12);  // bound to the data vocabulary
  CHECK(resolved.output.dir == t.dir.string());

  // Collisions need --force.
  check_error(run({"train", "--config", t.cfg.string(), "--output-dir", t.dir.string()}), 1, "output-exists");
}

TEST_CASE("re-running the resolved configuration reproduces the losses bitwise") {
  const auto& t = trained();
  REQUIRE(t.result.code == 0);
  TempDir tmp;
  const auto r = run({"train", "--config", (t.dir / "resolved.cfg").string(), "--output-dir", tmp.path().string(),
                      "--force"});
  REQUIRE(r.code == 0);
  CHECK(slurp(tmp.path() / "loss.csv") == slurp(t.dir / "loss.csv"));
  CHECK(slurp(tmp.path() / "last.ckpt") == slurp(t.dir / "last.ckpt"));

  // A flag overrides the file.
  const auto r2 = run({"train", "--config", (t.dir / "resolved.cfg").string(), "--output-dir", tmp.path().string(),
                       "--force", "--set", "train.max_updates=3"});
  REQUIRE(r2.code == 0);
  CHECK(line_count(slurp(tmp.path() / "loss.csv")) == 4);
}

TEST_CASE("decode writes one output line per input line") {
  const auto& t = trained();
  REQUIRE(t.result.code == 0);
  TempDir tmp;
  const auto input = tmp.path() / "src.txt";
  spit(input, "5 9 7\n\n4 11 6 8\n");
  const auto r = run({"decode", "--ckpt", (t.dir / "last.ckpt").string(), "--view", "auxiliary", "--input",
                      input.string()});
  REQUIRE(r.code == 0);
  const auto out_path = tmp.path() / "src.txt.auxiliary.hyp";
  const auto text = slurp(out_path);
  CHECK(line_count(text) == 3);
  CHECK(text.find("\n\n") != std::string::npos);  // the empty line stays empty
  CHECK(fs::exists(out_path.string() + ".cfg"));

  check_error(run({"decode", "--ckpt", (t.dir / "last.ckpt").string(), "--input", input.string(), "--output",
                   out_path.string()}),
              1, "output-exists");
  check_error(run({"decode", "--ckpt", (t.dir / "last.ckpt").string(), "--view", "sideways", "--input",
                   input.string()}),
              2, "usage");

  // Ensemble of two checkpoints.
  const auto e = run({"decode", "--ckpt", (t.dir / "last.ckpt").string(), "--ckpt",
                      (t.dir / "checkpoint_8.ckpt").string(), "--input", input.string(), "--output",
                      (tmp.path() / "ens.txt").string(), "--beam", "2"});
  REQUIRE(e.code == 0);
  CHECK(line_count(slurp(tmp.path() / "ens.txt")) == 3);

  // The stripped checkpoint decodes exactly as the full model does.
  const auto stripped = tmp.path() / "aux.ckpt";
  REQUIRE(run({"strip", "--ckpt", (t.dir / "last.ckpt").string(), "--view", "auxiliary", "--output",
               stripped.string()})
              .code == 0);
  REQUIRE(run({"decode", "--ckpt", stripped.string(), "--input", input.string(), "--output",
               (tmp.path() / "s.txt").string()})
              .code == 0);
  CHECK(slurp(tmp.path() / "s.txt") == text);
}

TEST_CASE("noise sweep rows: eps count times views") {
  const auto& t = trained();
  REQUIRE(t.result.code == 0);
  TempDir tmp;
  const auto stripped = tmp.path() / "pri.ckpt";
  REQUIRE(run({"strip", "--ckpt", (t.dir / "last.ckpt").string(), "--view", "primary", "--output",
               stripped.string()})
              .code == 0);
  const auto csv_rows = [&](const std::vector<std::string>& ckpts) {
    std::vector<std::string> args{"experiment", "noise-sweep", "--config",     t.cfg.string(),
                                  "--eps",      "0,0.2,0.4",   "--output-dir", (tmp.path() / "ns").string(),
                                  "--force"};
    for (const auto& c : ckpts) args.insert(args.end(), {"--ckpt", c});
    const auto r = run(args);
    REQUIRE(r.code == 0);
    const auto csv = slurp(tmp.path() / "ns" / "sweep.csv");
    CHECK(csv.rfind("axis,value,model,view,metric,seed,config_digest\n", 0) == 0);
    return line_count(csv) - 1;
  };
  CHECK(csv_rows({(t.dir / "last.ckpt").string()}) == 6);
  CHECK(csv_rows({stripped.string()}) == 3);
  CHECK(csv_rows({(t.dir / "last.ckpt").string(), stripped.string()}) == 9);
  check_error(run({"experiment", "noise-sweep", "--config", t.cfg.string(), "--ckpt", (t.dir / "last.ckpt").string(),
                   "--eps", "0,x", "--output-dir", (tmp.path() / "bad").string()}),
              2, "usage");
}

TEST_CASE("strip and average-ckpt outputs") {
  const auto& t = trained();
  REQUIRE(t.result.code == 0);
  TempDir tmp;
  const auto out = tmp.path() / "p.ckpt";
  REQUIRE(run({"strip", "--ckpt", (t.dir / "last.ckpt").string(), "--view", "primary", "--output", out.string()})
              .code == 0);
  const auto full = load_checkpoint(t.dir / "last.ckpt");
  const auto stripped = load_checkpoint(out);
  CHECK_FALSE(stripped.config.multi_view);
  CHECK(stripped.params.element_count() == full.model().strip_to_view(View::primary).parameter_count());
  CHECK(stripped.vocab == full.vocab);
  CHECK(fs::exists(out.string() + ".cfg"));
  check_error(run({"strip", "--ckpt", out.string(), "--view", "primary", "--output", out.string(), "--force"}), 1,
              "config");

  const auto avg = tmp.path() / "avg.ckpt";
  REQUIRE(run({"average-ckpt", "--inputs", (t.dir / "last.ckpt").string(), (t.dir / "last.ckpt").string(),
               "--output", avg.string()})
              .code == 0);
  const auto a = load_checkpoint(avg);
  CHECK_FALSE(a.optimizer.has_value());
  for (const auto& [name, tensor] : a.params) {
    const auto x = tensor.data();
    const auto y = full.params.get(name).data();
    CHECK(std::equal(x.begin(), x.end(), y.begin(), y.end()));
  }
  check_error(run({"average-ckpt", "--inputs", (t.dir / "last.ckpt").string(), "--output", avg.string()}), 1,
              "output-exists");
}

TEST_CASE("experiment sweep, layer-similarity and seq-kd outputs") {
  const auto& t = trained();
  REQUIRE(t.result.code == 0);
  TempDir tmp;
  const auto sweep = run({"experiment", "sweep", "--config", t.cfg.string(), "--set", "train.max_updates=4",
                          "--axis", "alpha", "--values", "0,0.4", "--output-dir", (tmp.path() / "sw").string()});
  REQUIRE(sweep.code == 0);
  CHECK(line_count(slurp(tmp.path() / "sw" / "sweep.csv")) == 5);
  CHECK(line_count(slurp(tmp.path() / "sw" / "loss_1_0.4.csv")) == 5);
  check_error(run({"experiment", "sweep", "--config", t.cfg.string(), "--axis", "detach", "--values", "maybe",
                   "--output-dir", (tmp.path() / "sw2").string()}),
              1, "config");

  const auto sim = run({"experiment", "layer-similarity", "--config", t.cfg.string(), "--ckpt",
                        (t.dir / "last.ckpt").string(), "--output-dir", (tmp.path() / "ls").string()});
  REQUIRE(sim.code == 0);
  const auto j = nlohmann::json::parse(sim.out);
  CHECK(j.at("profile").size() == 3);
  CHECK(j.at("profile").back() == 1.0);
  CHECK(line_count(slurp(tmp.path() / "ls" / "similarity.csv")) == 4);

  const auto kd = run({"experiment", "seq-kd", "--config", t.cfg.string(), "--set", "train.max_updates=3",
                       "--teacher", (t.dir / "last.ckpt").string(), "--output-dir", (tmp.path() / "kd").string()});
  REQUIRE(kd.code == 0);
  for (const char* f : {"distilled.src", "distilled.tgt", "loss.csv", "resolved.cfg", "student.ckpt", "sweep.csv"}) {
    CHECK(fs::exists(tmp.path() / "kd" / f));
  }
  CHECK(line_count(slurp(tmp.path() / "kd" / "distilled.src")) == 120);
}
