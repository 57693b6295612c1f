#pragma once

#include <array>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "nupix/common.hpp"
#include "nupix/dataset.hpp"
#include "nupix/decode.hpp"
#include "nupix/metrics.hpp"
#include "nupix/model.hpp"
#include "nupix/trainer.hpp"

// Experiment plumbing: a single strict config file drives gen -> train ->
// decode -> eval into one reproducible, hash-named output directory.
namespace nupix {

struct DecodeSettings {
  double temperature = 5.0;
  int beam_width = 3;
};

struct EvalSettings {
  std::vector<int> downsample_factors = {1, 2};
};

// The one global seed feeds dataset generation, model init and training;
// section seeds are overwritten by it when the pipeline runs.
struct ExperimentConfig {
  std::uint64_t seed = 1;
  DatasetConfig dataset;
  TrainConfig train;
  DecodeSettings decode;
  EvalSettings eval;

  // Defaults describe the desk experiment: 3,600 balanced 64x64 events,
  // 3000/300/300 split, constant-rate Adam with early stopping.
  ExperimentConfig() {
    dataset.n_events = 3600;
    dataset.geometry.image_size = 64;
    train.learning_rate = 1e-3;
    train.train_fraction = 5.0 / 6.0;
    train.val_fraction = 1.0 / 12.0;
    train.test_fraction = 1.0 / 12.0;
  }

  void validate() const {
    std::vector<std::string> problems;
    if (dataset.n_events < 1) problems.push_back("dataset.events must be >= 1");
    if (dataset.classes.empty()) problems.push_back("dataset.classes must not be empty");
    if (dataset.priors.size() != dataset.classes.size())
      problems.push_back("dataset.priors must have one entry per class");
    double prior_sum = 0;
    for (double p : dataset.priors) {
      if (p < 0) problems.push_back("dataset.priors entries must be >= 0");
      prior_sum += p;
    }
    if (!(prior_sum > 0)) problems.push_back("dataset.priors must sum to a positive value");
    try {
      dataset.geometry.validate();
    } catch (const ConfigError& e) {
      problems.push_back(std::string("dataset.geometry: ") + e.what());
    }
    try {
      train.validate();
    } catch (const ConfigError& e) {
      std::string msg = e.what();  // strip the header line, keep the items
      std::size_t pos = msg.find("\n  - ");
      while (pos != std::string::npos) {
        const std::size_t end = msg.find("\n  - ", pos + 1);
        problems.push_back("train." + msg.substr(pos + 5, end == std::string::npos
                                                              ? std::string::npos
                                                              : end - pos - 5));
        pos = end;
      }
    }
    if (!(decode.temperature > 0)) problems.push_back("decode.temperature must be > 0");
    if (decode.beam_width < 1) problems.push_back("decode.beam_width must be >= 1");
    if (eval.downsample_factors.empty())
      problems.push_back("eval.downsample_factors must not be empty");
    for (int f : eval.downsample_factors) {
      if (f < 1)
        problems.push_back("eval.downsample_factors entries must be >= 1");
      else if (dataset.geometry.image_size % f != 0)
        problems.push_back("eval.downsample_factors: " + std::to_string(f) +
                           " does not divide image size " +
                           std::to_string(dataset.geometry.image_size));
    }
    if (dataset.n_events >= 1) {
      const auto sizes = detail::apportion(
          {train.train_fraction * static_cast<double>(dataset.n_events),
           train.val_fraction * static_cast<double>(dataset.n_events),
           train.test_fraction * static_cast<double>(dataset.n_events)},
          dataset.n_events);
      const char* names[] = {"train", "val", "test"};
      for (int s = 0; s < 3; ++s)
        if (sizes[static_cast<std::size_t>(s)] == 0)
          problems.push_back(std::string("dataset.events too small: the ") + names[s] +
                             " split would be empty");
    }
    if (!problems.empty()) {
      std::string msg = "invalid experiment config:";
      for (const auto& p : problems) msg += "\n  - " + p;
      throw ConfigError(msg);
    }
  }
};

// --- strict JSON form -------------------------------------------------------------

namespace detail {

inline nlohmann::ordered_json geometry_to_json(const DetectorGeometry& g) {
  nlohmann::ordered_json j;
  j["extent_x"] = g.extent_x;
  j["extent_y"] = g.extent_y;
  j["extent_z"] = g.extent_z;
  j["anode_x"] = g.anode_x;
  j["cathode_x"] = g.cathode_x;
  j["voxel_pitch_mm"] = g.voxel_pitch_mm;
  j["pixel_pitch_mm"] = g.pixel_pitch_mm;
  return j;
}

template <class Json>
DetectorGeometry geometry_from_json(const Json& j, const DetectorGeometry& base,
                                    const std::string& where) {
  reject_unknown_keys(j,
                      {"extent_x", "extent_y", "extent_z", "anode_x", "cathode_x",
                       "voxel_pitch_mm", "pixel_pitch_mm"},
                      where);
  DetectorGeometry g = base;
  read_key(j, "extent_x", g.extent_x, where);
  read_key(j, "extent_y", g.extent_y, where);
  read_key(j, "extent_z", g.extent_z, where);
  read_key(j, "anode_x", g.anode_x, where);
  read_key(j, "cathode_x", g.cathode_x, where);
  read_key(j, "voxel_pitch_mm", g.voxel_pitch_mm, where);
  read_key(j, "pixel_pitch_mm", g.pixel_pitch_mm, where);
  return g;
}

}  // namespace detail

inline nlohmann::ordered_json experiment_config_to_json(const ExperimentConfig& c) {
  nlohmann::ordered_json j;
  j["seed"] = c.seed;
  nlohmann::ordered_json ds;
  ds["events"] = c.dataset.n_events;
  std::vector<std::string> classes;
  for (ClassLabel cl : c.dataset.classes) classes.push_back(class_name(cl));
  ds["classes"] = classes;
  ds["priors"] = c.dataset.priors;
  ds["image_size"] = c.dataset.geometry.image_size;
  ds["geometry"] = detail::geometry_to_json(c.dataset.geometry);
  j["dataset"] = std::move(ds);
  nlohmann::ordered_json tr;
  tr["learning_rate"] = c.train.learning_rate;
  tr["batch_size"] = c.train.batch_size;
  tr["max_epochs"] = c.train.max_epochs;
  tr["patience"] = c.train.patience;
  tr["train_fraction"] = c.train.train_fraction;
  tr["val_fraction"] = c.train.val_fraction;
  tr["test_fraction"] = c.train.test_fraction;
  j["train"] = std::move(tr);
  nlohmann::ordered_json dec;
  dec["temperature"] = c.decode.temperature;
  dec["beam_width"] = c.decode.beam_width;
  j["decode"] = std::move(dec);
  nlohmann::ordered_json ev;
  ev["downsample_factors"] = c.eval.downsample_factors;
  j["eval"] = std::move(ev);
  return j;
}

template <class Json>
ExperimentConfig experiment_config_from_json_obj(const Json& j) {
  if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
  detail::reject_unknown_keys(j, {"seed", "dataset", "train", "decode", "eval"},
                              "experiment config");
  ExperimentConfig c;
  detail::read_key(j, "seed", c.seed, "experiment config");
  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    detail::reject_unknown_keys(
        d, {"events", "classes", "priors", "image_size", "geometry"}, "dataset");
    detail::read_key(d, "events", c.dataset.n_events, "dataset");
    if (d.contains("classes")) {
      std::vector<std::string> names;
      detail::read_key(d, "classes", names, "dataset");
      c.dataset.classes.clear();
      for (const auto& n : names) c.dataset.classes.push_back(class_from_name(n));
    }
    detail::read_key(d, "priors", c.dataset.priors, "dataset");
    if (d.contains("geometry"))
      c.dataset.geometry =
          detail::geometry_from_json(d.at("geometry"), c.dataset.geometry, "dataset.geometry");
    detail::read_key(d, "image_size", c.dataset.geometry.image_size, "dataset");
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    detail::reject_unknown_keys(t,
                                {"learning_rate", "batch_size", "max_epochs", "patience",
                                 "train_fraction", "val_fraction", "test_fraction"},
                                "train");
    detail::read_key(t, "learning_rate", c.train.learning_rate, "train");
    detail::read_key(t, "batch_size", c.train.batch_size, "train");
    detail::read_key(t, "max_epochs", c.train.max_epochs, "train");
    detail::read_key(t, "patience", c.train.patience, "train");
    detail::read_key(t, "train_fraction", c.train.train_fraction, "train");
    detail::read_key(t, "val_fraction", c.train.val_fraction, "train");
    detail::read_key(t, "test_fraction", c.train.test_fraction, "train");
  }
  if (j.contains("decode")) {
    const auto& d = j.at("decode");
    detail::reject_unknown_keys(d, {"temperature", "beam_width"}, "decode");
    detail::read_key(d, "temperature", c.decode.temperature, "decode");
    detail::read_key(d, "beam_width", c.decode.beam_width, "decode");
  }
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    detail::reject_unknown_keys(e, {"downsample_factors"}, "eval");
    detail::read_key(e, "downsample_factors", c.eval.downsample_factors, "eval");
  }
  return c;
}

// Parse JSON text; parse errors carry nlohmann's line/column diagnostics
// prefixed with the origin (usually the config file path).
inline nlohmann::ordered_json parse_json_text(const std::string& text, const std::string& origin) {
  try {
    return nlohmann::ordered_json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(origin + ": " + e.what());
  }
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config file " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return experiment_config_from_json_obj(parse_json_text(text, path.string()));
}

// Identity of the whole experiment (seed included), used to name the run
// directory: one config, one directory.
inline std::uint64_t experiment_hash(const ExperimentConfig& c) {
  return fnv1a64(experiment_config_to_json(c).dump());
}

// Output root for run directories; overridable through NUPIX_OUT_ROOT only.
inline std::filesystem::path output_root() {
  if (const char* env = std::getenv("NUPIX_OUT_ROOT"))
    if (*env) return env;
  return "runs";
}

inline std::string run_directory_name(const ExperimentConfig& c) {
  return "run-s" + std::to_string(c.seed) + "-" + hex_hash(experiment_hash(c));
}

// --- describe ---------------------------------------------------------------------

// Resolved plan: defaults filled in, derived sizes and parameter counts
// computed, nothing executed.
inline std::string describe_experiment(const ExperimentConfig& cfg,
                                       const std::filesystem::path& out_root) {
  cfg.validate();
  const ModelConfig mc = ModelConfig::desk_reference(cfg.dataset.geometry.image_size);
  std::size_t params = 0;
  for (const auto& spec : param_specs(mc)) {
    std::size_t n = 1;
    for (std::size_t d : spec.shape) n *= d;
    params += n;
  }
  const auto sizes = detail::apportion(
      {cfg.train.train_fraction * static_cast<double>(cfg.dataset.n_events),
       cfg.train.val_fraction * static_cast<double>(cfg.dataset.n_events),
       cfg.train.test_fraction * static_cast<double>(cfg.dataset.n_events)},
      cfg.dataset.n_events);

  std::string s = "experiment " + hex_hash(experiment_hash(cfg)) + "\n";
  s += "run directory: " + (out_root / run_directory_name(cfg)).string() + "\n\n";
  char buf[256];
  std::string classes, priors;
  for (std::size_t i = 0; i < cfg.dataset.classes.size(); ++i)
    classes += (i ? "," : "") + class_name(cfg.dataset.classes[i]);
  for (std::size_t i = 0; i < cfg.dataset.priors.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%g", cfg.dataset.priors[i]);
    priors += (i ? "," : "") + std::string(buf);
  }
  std::snprintf(buf, sizeof(buf), "dataset: %zu events, %dx%d images, classes %s, priors %s\n",
                cfg.dataset.n_events, cfg.dataset.geometry.image_size,
                cfg.dataset.geometry.image_size, classes.c_str(), priors.c_str());
  s += buf;
  std::snprintf(buf, sizeof(buf), "splits: train %zu, val %zu, test %zu\n", sizes[0], sizes[1],
                sizes[2]);
  s += buf;
  std::snprintf(buf, sizeof(buf),
                "model: siamese cnn, input %dx%d, %zu parameters, config hash %s\n",
                mc.image_size, mc.image_size, params, hex_hash(config_hash(mc)).c_str());
  s += buf;
  std::snprintf(buf, sizeof(buf),
                "train: lr %g, batch %d, max %d epochs, patience %d, seed %llu\n",
                cfg.train.learning_rate, cfg.train.batch_size, cfg.train.max_epochs,
                cfg.train.patience, static_cast<unsigned long long>(cfg.seed));
  s += buf;
  std::snprintf(buf, sizeof(buf), "decode: temperature %g, beam width %d\n",
                cfg.decode.temperature, cfg.decode.beam_width);
  s += buf;
  std::string factors;
  for (std::size_t i = 0; i < cfg.eval.downsample_factors.size(); ++i)
    factors += (i ? "," : "") + std::to_string(cfg.eval.downsample_factors[i]);
  s += "eval: downsample factors " + factors + "\n";
  s += "\nresolved config:\n" + experiment_config_to_json(cfg).dump(2) + "\n";
  return s;
}

// --- run --------------------------------------------------------------------------

struct PipelineResult {
  std::filesystem::path run_dir;
  TrainHistory history;
  std::vector<std::pair<int, MetricsReport>> reports;  // (factor, report)
};

namespace detail {

template <class Fn>
auto pipeline_stage(const char* name, Fn&& fn) {
  try {
    return fn();
  } catch (const std::exception& e) {
    throw PipelineError(std::string("stage ") + name + " failed: " + e.what());
  }
}

inline void write_text_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot open " + p.string() + " for writing");
  out << text;
  out.flush();
  if (!out) throw IoError("failed while writing " + p.string());
}

}  // namespace detail

inline void write_scores(const std::vector<DecodeOutcome>& outcomes,
                         const std::filesystem::path& path) {
  std::string s;
  for (const auto& o : outcomes) {
    s += "event=" + std::to_string(o.event_id);
    s += " truth=" + class_name(o.truth);
    s += " predicted=" + class_name(o.predicted);
    static const char* keys[3] = {"nue_cc", "numu_cc", "nc"};
    for (int i = 0; i < 3; ++i)
      s += " p_" + std::string(keys[i]) + "=" +
           detail::fmt_full(o.confidence.probabilities[static_cast<std::size_t>(i)]);
    for (int i = 0; i < 3; ++i)
      s += " lp_" + std::string(keys[i]) + "=" +
           detail::fmt_full(o.confidence.raw_log_probs[static_cast<std::size_t>(i)]);
    s += "\n";
  }
  detail::write_text_file(path, s);
}

// gen -> train -> decode -> eval under out_root/<run name>. Validation happens
// before anything is created; rerunning the same config overwrites the same
// directory with identical artifacts.
inline PipelineResult run_pipeline(const ExperimentConfig& cfg,
                                   const std::filesystem::path& out_root, unsigned threads = 0,
                                   std::ostream* log = nullptr) {
  cfg.validate();
  const auto t_start = std::chrono::steady_clock::now();
  const auto elapsed = [&t_start] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  };
  const auto say = [&](const std::string& line) {
    if (log) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "[%7.1fs] ", elapsed());
      (*log) << buf << line << "\n" << std::flush;
    }
  };

  PipelineResult result;
  result.run_dir = out_root / run_directory_name(cfg);
  std::error_code ec;
  std::filesystem::create_directories(result.run_dir, ec);
  if (ec)
    throw IoError("cannot create run directory " + result.run_dir.string() + ": " + ec.message());
  detail::write_text_file(result.run_dir / "config.json",
                          experiment_config_to_json(cfg).dump(2) + "\n");
  say("run directory " + result.run_dir.string());

  // gen
  Dataset ds = detail::pipeline_stage("gen", [&] {
    DatasetConfig dcfg = cfg.dataset;
    dcfg.seed = cfg.seed;
    const auto summary = generate_dataset(dcfg, result.run_dir / "data", threads);
    say("gen: " + std::to_string(summary.n_events) + " events, norm scale " +
        std::to_string(summary.norm_scale));
    return read_dataset(result.run_dir / "data");
  });

  // train
  TrainConfig tcfg = cfg.train;
  tcfg.seed = cfg.seed;
  SplitIndices split;
  Model model = detail::pipeline_stage("train", [&] {
    const auto samples = load_samples(ds, threads);
    split = split_dataset(ds, tcfg);
    say("train: split " + std::to_string(split.train.size()) + "/" +
        std::to_string(split.val.size()) + "/" + std::to_string(split.test.size()));
    Model m = build_model(ModelConfig::desk_reference(cfg.dataset.geometry.image_size), cfg.seed);
    std::string history_text;
    TrainResult r = train(std::move(m), samples, split, tcfg, threads, [&](const EpochStats& e) {
      char line[160];
      std::snprintf(line, sizeof(line),
                    "epoch=%d train_loss=%.6f val_loss=%.6f val_accuracy=%.4f seconds=%.1f",
                    e.epoch, e.train_loss, e.val_loss, e.val_accuracy, e.seconds);
      history_text += std::string(line) + "\n";
      say(line);
    });
    detail::write_text_file(result.run_dir / "history.txt", history_text);
    save_checkpoint(r.model, result.run_dir / "model.ckpt");
    say("train: best epoch " + std::to_string(r.history.best_epoch) + ", checkpoint saved");
    result.history = r.history;
    return std::move(r.model);
  });

  // decode (over the held-out test split; its records feed the reports)
  const Dataset test_ds = subset_dataset(ds, split.test);
  const std::vector<DecodeOutcome> outcomes = detail::pipeline_stage("decode", [&] {
    auto out = decode_dataset(model, test_ds, cfg.decode.temperature, cfg.decode.beam_width,
                              threads);
    write_scores(out, result.run_dir / "scores.txt");
    say("decode: " + std::to_string(out.size()) + " test events scored");
    return out;
  });

  // eval
  detail::pipeline_stage("eval", [&] {
    std::string summary;
    double f1_accuracy = std::numeric_limits<double>::quiet_NaN();
    for (int factor : cfg.eval.downsample_factors) {
      // Factor 1 is exactly the decode pass, so reuse its outcomes.
      const auto records =
          factor == 1 ? records_from_outcomes(outcomes)
                      : predict_dataset(model, test_ds, cfg.decode.temperature,
                                        cfg.decode.beam_width, factor,
                                        GeneralizationMode::Pixelate, threads);
      MetricsReport rep = aggregate_metrics(records);
      rep.downsample_factor = factor;
      emit_report(rep, records, result.run_dir / ("eval-f" + std::to_string(factor)));
      char line[160];
      if (factor == 1) f1_accuracy = rep.accuracy;
      if (factor != 1 && !std::isnan(f1_accuracy))
        std::snprintf(line, sizeof(line),
                      "factor=%d accuracy=%.6f macro_auc=%.6f delta_accuracy_vs_f1=%.6f", factor,
                      rep.accuracy, rep.macro_auc, rep.accuracy - f1_accuracy);
      else
        std::snprintf(line, sizeof(line), "factor=%d accuracy=%.6f macro_auc=%.6f", factor,
                      rep.accuracy, rep.macro_auc);
      summary += std::string(line) + "\n";
      say(std::string("eval: ") + line);
      result.reports.emplace_back(factor, std::move(rep));
    }
    detail::write_text_file(result.run_dir / "summary.txt", summary);
    return 0;
  });

  say("done");
  return result;
}

}  // namespace nupix
