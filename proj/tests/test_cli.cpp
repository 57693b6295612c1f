#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "nupix/pipeline.hpp"

using namespace nupix;

namespace {

ExperimentConfig tiny_config() {
  ExperimentConfig cfg;
  cfg.seed = 9;
  cfg.dataset.n_events = 48;
  cfg.dataset.geometry.image_size = 16;
  cfg.dataset.calibration_events = 48;
  cfg.train.learning_rate = 1e-3;
  cfg.train.batch_size = 8;
  cfg.train.max_epochs = 2;
  cfg.train.patience = 3;
  cfg.train.train_fraction = 0.75;
  cfg.train.val_fraction = 0.125;
  cfg.train.test_fraction = 0.125;
  return cfg;
}

std::filesystem::path fresh_dir(const std::string& tag) {
  const auto p = std::filesystem::temp_directory_path() / ("nupix_cli_" + tag);
  std::filesystem::remove_all(p);
  return p;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int run_cmd(const std::string& cmd) {
  const int status = std::system((cmd + " >/dev/null 2>&1").c_str());
  REQUIRE(status != -1);
  return WIFEXITED(status) ? WEXITSTATUS(status) : -2;
}

}  // namespace

TEST_CASE("an empty config resolves to the desk experiment") {
  const ExperimentConfig cfg = experiment_config_from_json_obj(parse_json_text("{}", "inline"));
  CHECK(cfg.seed == 1);
  CHECK(cfg.dataset.n_events == 3600);
  CHECK(cfg.dataset.geometry.image_size == 64);
  CHECK(cfg.train.learning_rate == 1e-3);
  CHECK(cfg.train.max_epochs == 300);
  CHECK(cfg.decode.temperature == 5.0);
  CHECK(cfg.decode.beam_width == 3);
  CHECK(cfg.eval.downsample_factors == std::vector<int>{1, 2});
  CHECK_NOTHROW(cfg.validate());

  const auto sizes = detail::apportion({cfg.train.train_fraction * 3600,
                                        cfg.train.val_fraction * 3600,
                                        cfg.train.test_fraction * 3600},
                                       3600);
  CHECK(sizes == std::vector<std::size_t>{3000, 300, 300});
}

TEST_CASE("experiment configs round trip through json with a stable hash") {
  ExperimentConfig cfg = tiny_config();
  const auto j = experiment_config_to_json(cfg);
  const ExperimentConfig back = experiment_config_from_json_obj(j);
  CHECK(experiment_hash(back) == experiment_hash(cfg));
  CHECK(back.dataset.n_events == 48);
  CHECK(back.train.batch_size == 8);

  ExperimentConfig other = cfg;
  other.seed = 10;
  CHECK(experiment_hash(other) != experiment_hash(cfg));
  CHECK(run_directory_name(cfg) ==
        "run-s9-" + hex_hash(experiment_hash(cfg)));
}

TEST_CASE("unknown keys are rejected at every level") {
  const auto parse = [](const std::string& text) {
    return experiment_config_from_json_obj(parse_json_text(text, "inline"));
  };
  CHECK_THROWS_WITH(parse(R"({"sed": 1})"), Catch::Matchers::ContainsSubstring("sed"));
  CHECK_THROWS_WITH(parse(R"({"dataset": {"event": 10}})"),
                    Catch::Matchers::ContainsSubstring("event"));
  CHECK_THROWS_WITH(parse(R"({"dataset": {"geometry": {"extent_q": 1}}})"),
                    Catch::Matchers::ContainsSubstring("extent_q"));
  CHECK_THROWS_WITH(parse(R"({"train": {"lr": 0.1}})"),
                    Catch::Matchers::ContainsSubstring("lr"));
  CHECK_THROWS_WITH(parse(R"({"decode": {"temp": 5}})"),
                    Catch::Matchers::ContainsSubstring("temp"));
  CHECK_THROWS_WITH(parse(R"({"eval": {"factors": [1]}})"),
                    Catch::Matchers::ContainsSubstring("factors"));
  CHECK_THROWS_AS(parse(R"({"seed": "abc"})"), ConfigError);
  CHECK_THROWS_AS(parse(R"({"dataset": {"classes": ["nue_cc", "tau"]}})"), ConfigError);
}

TEST_CASE("parse errors carry line numbers") {
  CHECK_THROWS_WITH(parse_json_text("{\n  \"seed\": ,\n}", "cfg.json"),
                    Catch::Matchers::ContainsSubstring("line 2") &&
                        Catch::Matchers::ContainsSubstring("cfg.json"));
}

TEST_CASE("validation lists every violation at once") {
  ExperimentConfig cfg = tiny_config();
  cfg.dataset.priors = {0, 0, 0};
  cfg.train.learning_rate = -1;
  cfg.decode.temperature = 0;
  cfg.decode.beam_width = 0;
  cfg.eval.downsample_factors = {7};
  try {
    cfg.validate();
    FAIL("expected a ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("dataset.priors must sum to a positive value") != std::string::npos);
    CHECK(msg.find("train.learning_rate must be > 0") != std::string::npos);
    CHECK(msg.find("decode.temperature must be > 0") != std::string::npos);
    CHECK(msg.find("decode.beam_width must be >= 1") != std::string::npos);
    CHECK(msg.find("7 does not divide image size 16") != std::string::npos);
    std::size_t items = 0;
    for (std::size_t pos = msg.find("\n  - "); pos != std::string::npos;
         pos = msg.find("\n  - ", pos + 1))
      ++items;
    CHECK(items >= 5);
  }
}

TEST_CASE("tiny splits are caught before anything runs") {
  ExperimentConfig cfg = tiny_config();
  cfg.dataset.n_events = 5;
  cfg.train.train_fraction = 0.98;
  cfg.train.val_fraction = 0.01;
  cfg.train.test_fraction = 0.01;
  CHECK_THROWS_WITH(cfg.validate(), Catch::Matchers::ContainsSubstring("split would be empty"));
}

TEST_CASE("describe reports the plan without creating artifacts") {
  const auto root = fresh_dir("describe_root");
  const ExperimentConfig cfg = tiny_config();
  const std::string plan = describe_experiment(cfg, root);
  CHECK(plan.find("splits: train 36, val 6, test 6") != std::string::npos);
  CHECK(plan.find("input 16x16") != std::string::npos);
  CHECK(plan.find("45819 parameters") != std::string::npos);
  CHECK(plan.find(run_directory_name(cfg)) != std::string::npos);
  CHECK_FALSE(std::filesystem::exists(root));

  ExperimentConfig bigger = cfg;
  bigger.dataset.geometry.image_size = 32;
  bigger.eval.downsample_factors = {1, 2, 4};
  CHECK(describe_experiment(bigger, root).find("input 32x32") != std::string::npos);
}

TEST_CASE("invalid configs never create artifact directories") {
  const auto root = fresh_dir("failfast_root");
  ExperimentConfig cfg = tiny_config();
  cfg.dataset.priors = {0, 0, 0};
  CHECK_THROWS_AS(run_pipeline(cfg, root, 1), ConfigError);
  CHECK_FALSE(std::filesystem::exists(root));
}

TEST_CASE("stage failures name the failing stage") {
  const auto root = fresh_dir("stagefail_root");
  const ExperimentConfig cfg = tiny_config();
  const auto run_dir = root / run_directory_name(cfg);
  std::filesystem::create_directories(run_dir);
  std::ofstream(run_dir / "data").put('x');  // a file where gen wants a directory
  CHECK_THROWS_WITH(run_pipeline(cfg, root, 1),
                    Catch::Matchers::ContainsSubstring("stage gen"));
}

TEST_CASE("the pipeline writes every artifact set and reruns identically") {
  const auto root = fresh_dir("run_root");
  const ExperimentConfig cfg = tiny_config();

  std::ostringstream log;
  const PipelineResult first = run_pipeline(cfg, root, 2, &log);
  const auto rd = first.run_dir;
  for (const char* name :
       {"config.json", "data/manifest.txt", "model.ckpt", "history.txt", "scores.txt",
        "summary.txt", "eval-f1/report.txt", "eval-f1/metrics.csv", "eval-f2/metrics.csv",
        "eval-f2/roc_nc.csv"})
    CHECK(std::filesystem::exists(rd / name));
  REQUIRE(first.reports.size() == 2);
  CHECK(first.reports[0].first == 1);
  CHECK(first.reports[1].first == 2);
  CHECK(first.reports[1].second.downsample_factor == 2);
  CHECK(slurp(rd / "summary.txt").find("delta_accuracy_vs_f1") != std::string::npos);
  CHECK(log.str().find("stage") == std::string::npos);  // no failures logged
  CHECK(first.history.epochs.size() == 2);

  const std::string ckpt = slurp(rd / "model.ckpt");
  const std::string manifest = slurp(rd / "data/manifest.txt");
  const std::string metrics = slurp(rd / "eval-f1/metrics.csv");

  // Rerun with a different thread count into the same directory.
  const PipelineResult second = run_pipeline(cfg, root, 1);
  CHECK(second.run_dir == rd);
  CHECK(slurp(rd / "model.ckpt") == ckpt);
  CHECK(slurp(rd / "data/manifest.txt") == manifest);
  CHECK(slurp(rd / "eval-f1/metrics.csv") == metrics);
  for (std::size_t r = 0; r < 2; ++r) {
    const auto a = first.reports[r].second.scalar_values();
    const auto b = second.reports[r].second.scalar_values();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
  }
}

TEST_CASE("the output root env var overrides the default") {
  unsetenv("NUPIX_OUT_ROOT");
  CHECK(output_root() == std::filesystem::path("runs"));
  setenv("NUPIX_OUT_ROOT", "/tmp/nupix_custom_root", 1);
  CHECK(output_root() == std::filesystem::path("/tmp/nupix_custom_root"));
  setenv("NUPIX_OUT_ROOT", "", 1);
  CHECK(output_root() == std::filesystem::path("runs"));
  unsetenv("NUPIX_OUT_ROOT");
}

TEST_CASE("the installed binary handles the documented subcommands") {
  const std::string bin = NUPIX_BIN;
  REQUIRE(std::filesystem::exists(bin));
  const auto root = fresh_dir("bin_root");
  std::filesystem::create_directories(root);

  CHECK(run_cmd(bin + " gen --seed 5 --events 9 --image-size 16 --out " +
                (root / "data").string()) == 0);
  CHECK(std::filesystem::exists(root / "data" / "manifest.txt"));

  {
    std::ofstream cfg(root / "tiny.json");
    cfg << R"({"seed": 3, "dataset": {"events": 48, "image_size": 16},
               "train": {"max_epochs": 1, "batch_size": 8, "train_fraction": 0.75,
                         "val_fraction": 0.125, "test_fraction": 0.125}})";
  }
  CHECK(run_cmd(bin + " describe --config " + (root / "tiny.json").string()) == 0);
  CHECK(run_cmd("NUPIX_OUT_ROOT=" + (root / "out").string() + " " + bin + " run --config " +
                (root / "tiny.json").string()) == 0);
  CHECK(std::filesystem::exists(root / "out"));

  CHECK(run_cmd(bin + " decode --model missing.ckpt --data nowhere --out x") != 0);
  CHECK(run_cmd(bin + " describe --config " + (root / "absent.json").string()) != 0);
  CHECK(run_cmd(bin + " frobnicate") != 0);
  {
    std::ofstream bad(root / "bad.json");
    bad << "{\"seed\": }";
  }
  CHECK(run_cmd(bin + " run --config " + (root / "bad.json").string()) != 0);
}
