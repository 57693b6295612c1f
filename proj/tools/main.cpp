// nupix command-line interface: dataset generation, training, constrained
// decoding, evaluation, and whole-experiment runs from a config file.
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "nupix/dataset.hpp"
#include "nupix/decode.hpp"
#include "nupix/metrics.hpp"
#include "nupix/model.hpp"
#include "nupix/pipeline.hpp"
#include "nupix/trainer.hpp"

namespace {

using namespace nupix;

std::vector<ClassLabel> parse_classes(const std::vector<std::string>& names) {
  std::vector<ClassLabel> out;
  for (const auto& n : names) out.push_back(class_from_name(n));
  return out;
}

int cmd_gen(std::uint64_t seed, std::size_t events, const std::vector<std::string>& classes,
            const std::vector<double>& priors, int image_size, const std::string& out,
            unsigned threads) {
  DatasetConfig cfg;
  cfg.seed = seed;
  cfg.n_events = events;
  cfg.classes = parse_classes(classes);
  cfg.priors = priors;
  cfg.geometry.image_size = image_size;
  const auto summary = generate_dataset(cfg, out, threads);
  std::printf("wrote %zu events to %s (norm scale %.6f)\n", summary.n_events, out.c_str(),
              summary.norm_scale);
  return 0;
}

int cmd_train(const std::string& data, const std::string& arch, double lr, int batch,
              int max_epochs, int patience, std::uint64_t seed, const std::string& out,
              unsigned threads) {
  const Dataset ds = read_dataset(data);
  if (ds.records.empty()) throw DomainError("dataset at " + data + " has no events");

  ModelConfig mc;
  if (arch.empty()) {
    mc = ModelConfig::desk_reference(ds.load_xz(0).width);
  } else {
    std::ifstream in(arch, std::ios::binary);
    if (!in) throw IoError("cannot open architecture file " + arch);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    mc = model_config_from_json(text);
  }

  TrainConfig tcfg;
  tcfg.learning_rate = lr;
  tcfg.batch_size = batch;
  tcfg.max_epochs = max_epochs;
  tcfg.patience = patience;
  tcfg.seed = seed;

  const auto samples = load_samples(ds, threads);
  const SplitIndices split = split_dataset(ds, tcfg);
  Model model = build_model(mc, seed);
  std::printf("split train=%zu val=%zu test=%zu params=%zu\n", split.train.size(),
              split.val.size(), split.test.size(), model.param_count());
  TrainResult r = train(std::move(model), samples, split, tcfg, threads, [](const EpochStats& e) {
    std::printf("epoch=%d train_loss=%.6f val_loss=%.6f val_accuracy=%.4f seconds=%.1f\n",
                e.epoch, e.train_loss, e.val_loss, e.val_accuracy, e.seconds);
    std::fflush(stdout);
  });
  save_checkpoint(r.model, out);
  std::printf("best epoch %d (val loss %.6f); checkpoint written to %s\n", r.history.best_epoch,
              r.history.best_val_loss, out.c_str());
  return 0;
}

int cmd_decode(const std::string& model_path, const std::string& data, double temperature,
               int beam, const std::string& out, unsigned threads) {
  const Model model = load_checkpoint(model_path);
  const Dataset ds = read_dataset(data);
  const auto outcomes = decode_dataset(model, ds, temperature, beam, threads);
  write_scores(outcomes, out);
  std::size_t correct = 0;
  for (const auto& o : outcomes) correct += o.predicted == o.truth ? 1 : 0;
  std::printf("decoded %zu events (%zu correct) -> %s\n", outcomes.size(), correct, out.c_str());
  return 0;
}

int cmd_eval(const std::string& model_path, const std::string& data, int factor,
             const std::string& mode_name, const std::string& out, unsigned threads) {
  const Model model = load_checkpoint(model_path);
  const Dataset ds = read_dataset(data);
  GeneralizationMode mode;
  if (mode_name == "pixelate")
    mode = GeneralizationMode::Pixelate;
  else if (mode_name == "pool")
    mode = GeneralizationMode::Pool;
  else
    throw ConfigError("unknown mode '" + mode_name + "' (expected pixelate or pool)");
  const auto records =
      predict_dataset(model, ds, 5.0, 3, factor, mode, threads);
  MetricsReport rep = aggregate_metrics(records);
  rep.downsample_factor = factor;
  emit_report(rep, records, out);
  std::printf("factor=%d accuracy=%.6f macro_auc=%.6f -> %s\n", factor, rep.accuracy,
              rep.macro_auc, out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"nupix: desk-scale neutrino event classification pipeline"};
  app.require_subcommand(1);
  unsigned threads = 0;
  app.add_option("--threads", threads, "cap worker threads everywhere (0 = all cores)")
      ->capture_default_str();

  auto* gen = app.add_subcommand("gen", "simulate events and write a dataset");
  gen->fallthrough();
  std::uint64_t g_seed = 1;
  std::size_t g_events = 1000;
  std::vector<std::string> g_classes = {"nue_cc", "numu_cc", "nc"};
  std::vector<double> g_priors = {1, 1, 1};
  int g_image = 64;
  std::string g_out;
  gen->add_option("--seed", g_seed, "generation seed")->capture_default_str();
  gen->add_option("--events", g_events, "number of events")->capture_default_str();
  gen->add_option("--classes", g_classes, "class names")
      ->delimiter(',')
      ->capture_default_str();
  gen->add_option("--priors", g_priors, "relative class priors")
      ->delimiter(',')
      ->capture_default_str();
  gen->add_option("--image-size", g_image, "pixel map side length")->capture_default_str();
  gen->add_option("--out", g_out, "output dataset directory")->required();

  auto* train_cmd = app.add_subcommand("train", "train the classifier on a dataset");
  train_cmd->fallthrough();
  std::string t_data, t_arch, t_out;
  double t_lr = 1e-3;
  int t_batch = 16, t_max_epochs = 300, t_patience = 10;
  std::uint64_t t_seed = 1;
  train_cmd->add_option("--data", t_data, "dataset directory")->required();
  train_cmd->add_option("--arch", t_arch, "architecture config JSON (default: desk reference)");
  train_cmd->add_option("--lr", t_lr, "Adam learning rate")->capture_default_str();
  train_cmd->add_option("--batch", t_batch, "batch size")->capture_default_str();
  train_cmd->add_option("--max-epochs", t_max_epochs, "epoch cap")->capture_default_str();
  train_cmd->add_option("--patience", t_patience, "early stopping patience")
      ->capture_default_str();
  train_cmd->add_option("--seed", t_seed, "split/shuffle/init seed")->capture_default_str();
  train_cmd->add_option("--out", t_out, "checkpoint path")->required();

  auto* dec = app.add_subcommand("decode", "constrained generation over a dataset");
  dec->fallthrough();
  std::string d_model, d_data, d_out;
  double d_temp = 5.0;
  int d_beam = 3;
  dec->add_option("--model", d_model, "checkpoint path")->required();
  dec->add_option("--data", d_data, "dataset directory")->required();
  dec->add_option("--temperature", d_temp, "confidence temperature")->capture_default_str();
  dec->add_option("--beam", d_beam, "beam width")->capture_default_str();
  dec->add_option("--out", d_out, "scores file")->required();

  auto* ev = app.add_subcommand("eval", "metric suite, optionally on degraded inputs");
  ev->fallthrough();
  std::string e_model, e_data, e_out;
  int e_factor = 1;
  std::string e_mode = "pixelate";
  ev->add_option("--model", e_model, "checkpoint path")->required();
  ev->add_option("--data", e_data, "dataset directory")->required();
  ev->add_option("--downsample", e_factor, "mean-pool factor")->capture_default_str();
  ev->add_option("--mode", e_mode, "pixelate (keep size) or pool (shrink)")
      ->capture_default_str();
  ev->add_option("--out", e_out, "report directory")->required();

  auto* run = app.add_subcommand("run", "full experiment from a config file");
  run->fallthrough();
  std::string r_config;
  run->add_option("--config", r_config, "experiment config JSON")->required();

  auto* desc = app.add_subcommand("describe", "print the resolved experiment plan");
  desc->fallthrough();
  std::string s_config;
  desc->add_option("--config", s_config, "experiment config JSON")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed())
      return cmd_gen(g_seed, g_events, g_classes, g_priors, g_image, g_out, threads);
    if (train_cmd->parsed())
      return cmd_train(t_data, t_arch, t_lr, t_batch, t_max_epochs, t_patience, t_seed, t_out,
                       threads);
    if (dec->parsed()) return cmd_decode(d_model, d_data, d_temp, d_beam, d_out, threads);
    if (ev->parsed()) return cmd_eval(e_model, e_data, e_factor, e_mode, e_out, threads);
    if (run->parsed()) {
      const ExperimentConfig cfg = load_experiment_config(r_config);
      const PipelineResult result = run_pipeline(cfg, output_root(), threads, &std::cout);
      std::printf("artifacts in %s\n", result.run_dir.c_str());
      return 0;
    }
    if (desc->parsed()) {
      const ExperimentConfig cfg = load_experiment_config(s_config);
      std::fputs(describe_experiment(cfg, output_root()).c_str(), stdout);
      return 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
