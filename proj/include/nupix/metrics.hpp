#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "nupix/common.hpp"
#include "nupix/dataset.hpp"
#include "nupix/decode.hpp"
#include "nupix/detsim.hpp"
#include "nupix/model.hpp"
#include "nupix/threading.hpp"

// Evaluation suite: confusion matrices (truth- and prediction-normalized),
// micro/macro aggregates, one-vs-rest ROC/AUC per class, the reduced-detail
// generalization harness, and deterministic report files.
namespace nupix {

struct PredictionRecord {
  std::int64_t event_id = 0;
  ClassLabel truth = ClassLabel::NC;
  ClassLabel predicted = ClassLabel::NC;
  std::array<double, 3> scores{};  // P(class i); sums to 1 within 1e-6

  void validate() const {
    double sum = 0;
    for (double s : scores) {
      if (!std::isfinite(s) || s < 0) throw DomainError("prediction scores must be finite and >= 0");
      sum += s;
    }
    if (std::abs(sum - 1.0) > 1e-6)
      throw DomainError("prediction scores for event " + std::to_string(event_id) +
                        " sum to " + std::to_string(sum) + ", expected 1");
  }
};

struct ConfusionMatrices {
  std::array<std::array<double, 3>, 3> counts{};     // counts[truth][predicted]
  std::array<std::array<double, 3>, 3> recall{};     // rows normalized by truth counts
  std::array<std::array<double, 3>, 3> precision{};  // columns normalized by prediction counts
  std::array<bool, 3> truth_support{};               // class appears as a truth label
  std::array<bool, 3> prediction_support{};          // class appears as a prediction
};

// Count matrix plus its truth-normalized (efficiency) and prediction-normalized
// (purity) forms. Rows/columns without support stay all-zero and are flagged.
inline ConfusionMatrices confusion_matrices(const std::vector<PredictionRecord>& records) {
  if (records.empty()) throw DomainError("confusion matrices need at least one record");
  ConfusionMatrices out;
  for (const auto& r : records)
    out.counts[static_cast<std::size_t>(r.truth)][static_cast<std::size_t>(r.predicted)] += 1.0;
  for (int t = 0; t < 3; ++t) {
    double row = 0;
    for (int p = 0; p < 3; ++p) row += out.counts[t][p];
    out.truth_support[t] = row > 0;
    if (row > 0)
      for (int p = 0; p < 3; ++p) out.recall[t][p] = out.counts[t][p] / row;
  }
  for (int p = 0; p < 3; ++p) {
    double col = 0;
    for (int t = 0; t < 3; ++t) col += out.counts[t][p];
    out.prediction_support[p] = col > 0;
    if (col > 0)
      for (int t = 0; t < 3; ++t) out.precision[t][p] = out.counts[t][p] / col;
  }
  return out;
}

struct RocPoint {
  double fpr = 0;
  double tpr = 0;
  double threshold = 0;
};

struct RocCurve {
  ClassLabel target = ClassLabel::NC;
  std::vector<RocPoint> points;
  double auc = 0;
};

// One-vs-rest ROC on the target class's score. The sweep walks thresholds from
// +inf down through every distinct score to -inf; grouping tied scores and
// integrating with trapezoids makes the AUC equal the pairwise-ranking
// statistic with ties credited 0.5.
inline RocCurve roc_auc(const std::vector<PredictionRecord>& records, ClassLabel target) {
  std::vector<std::pair<double, bool>> scored;  // (score, is_positive), sorted descending
  scored.reserve(records.size());
  std::size_t n_pos = 0, n_neg = 0;
  for (const auto& r : records) {
    const bool pos = r.truth == target;
    scored.emplace_back(r.scores[static_cast<std::size_t>(target)], pos);
    (pos ? n_pos : n_neg) += 1;
  }
  if (n_pos == 0 || n_neg == 0)
    throw DomainError("ROC for class " + class_name(target) +
                      " is degenerate: needs both positive and negative records");
  std::sort(scored.begin(), scored.end(),
            [](const auto& a, const auto& b) { return a.first > b.first; });

  RocCurve curve;
  curve.target = target;
  const double inf = std::numeric_limits<double>::infinity();
  curve.points.push_back({0.0, 0.0, inf});

  double tp = 0, fp = 0, auc = 0;
  double prev_fpr = 0, prev_tpr = 0;
  std::size_t i = 0;
  while (i < scored.size()) {
    const double s = scored[i].first;
    while (i < scored.size() && scored[i].first == s) {
      (scored[i].second ? tp : fp) += 1;
      ++i;
    }
    const double fpr = fp / static_cast<double>(n_neg);
    const double tpr = tp / static_cast<double>(n_pos);
    auc += 0.5 * (tpr + prev_tpr) * (fpr - prev_fpr);
    curve.points.push_back({fpr, tpr, s});
    prev_fpr = fpr;
    prev_tpr = tpr;
  }
  curve.points.push_back({1.0, 1.0, -inf});
  curve.auc = auc;
  return curve;
}

struct MetricsReport {
  double accuracy = 0;
  double micro_precision = 0;
  double micro_recall = 0;
  double macro_precision = 0;
  double macro_recall = 0;
  std::array<double, 3> class_auc = {std::numeric_limits<double>::quiet_NaN(),
                                     std::numeric_limits<double>::quiet_NaN(),
                                     std::numeric_limits<double>::quiet_NaN()};
  double macro_auc = std::numeric_limits<double>::quiet_NaN();
  ConfusionMatrices confusion;
  std::array<RocCurve, 3> roc;
  int downsample_factor = 1;
  std::size_t n_records = 0;

  static std::vector<std::string> scalar_names() {
    return {"accuracy",   "micro_precision", "micro_recall", "macro_precision",
            "macro_recall", "auc_nue_cc",    "auc_numu_cc",  "auc_nc",
            "macro_auc",  "downsample_factor"};
  }

  std::vector<double> scalar_values() const {
    return {accuracy,     micro_precision, micro_recall, macro_precision,
            macro_recall, class_auc[0],    class_auc[1], class_auc[2],
            macro_auc,    static_cast<double>(downsample_factor)};
  }
};

// Full metric suite. Micro precision/recall pool true/false positives across
// classes; for single-label multiclass both pools reduce to the trace, so
// micro precision == micro recall == accuracy. Macro variants are unweighted
// class means, with unsupported classes contributing 0 (flagged in the
// confusion matrices). Set with_roc = false to skip the one-vs-rest curves,
// e.g. when some class has no positives or no negatives.
inline MetricsReport aggregate_metrics(const std::vector<PredictionRecord>& records,
                                       bool with_roc = true) {
  if (records.empty()) throw DomainError("metrics need at least one record");
  MetricsReport rep;
  rep.n_records = records.size();
  rep.confusion = confusion_matrices(records);

  double pooled_tp = 0, pooled_fp = 0, pooled_fn = 0;
  double macro_p = 0, macro_r = 0;
  for (int c = 0; c < 3; ++c) {
    const double tp = rep.confusion.counts[c][c];
    double truth_n = 0, pred_n = 0;
    for (int k = 0; k < 3; ++k) {
      truth_n += rep.confusion.counts[c][k];
      pred_n += rep.confusion.counts[k][c];
    }
    pooled_tp += tp;
    pooled_fp += pred_n - tp;
    pooled_fn += truth_n - tp;
    macro_p += pred_n > 0 ? tp / pred_n : 0.0;
    macro_r += truth_n > 0 ? tp / truth_n : 0.0;
  }
  rep.accuracy = pooled_tp / static_cast<double>(records.size());
  rep.micro_precision = pooled_tp / (pooled_tp + pooled_fp);
  rep.micro_recall = pooled_tp / (pooled_tp + pooled_fn);
  rep.macro_precision = macro_p / 3.0;
  rep.macro_recall = macro_r / 3.0;

  if (with_roc) {
    double auc_sum = 0;
    for (int c = 0; c < 3; ++c) {
      rep.roc[static_cast<std::size_t>(c)] = roc_auc(records, static_cast<ClassLabel>(c));
      rep.class_auc[static_cast<std::size_t>(c)] = rep.roc[static_cast<std::size_t>(c)].auc;
      auc_sum += rep.class_auc[static_cast<std::size_t>(c)];
    }
    rep.macro_auc = auc_sum / 3.0;
  }
  return rep;
}

// --- reduced spatial detail -----------------------------------------------------

// factor x factor mean pooling; the factor must divide both dimensions.
inline PixelMap downsample_pixelmap(const PixelMap& map, int factor) {
  if (factor < 1) throw ConfigError("downsample factor must be >= 1");
  if (map.width % factor != 0 || map.height % factor != 0)
    throw ShapeError("downsample factor " + std::to_string(factor) + " does not divide " +
                     std::to_string(map.width) + "x" + std::to_string(map.height));
  PixelMap out;
  out.view = map.view;
  out.width = map.width / factor;
  out.height = map.height / factor;
  out.raw_energy_total = map.raw_energy_total;
  out.intensities.assign(static_cast<std::size_t>(out.width) * out.height, 0.0f);
  const double inv = 1.0 / (static_cast<double>(factor) * factor);
  for (int r = 0; r < out.height; ++r)
    for (int c = 0; c < out.width; ++c) {
      double acc = 0;
      for (int dr = 0; dr < factor; ++dr)
        for (int dc = 0; dc < factor; ++dc) acc += map.at(r * factor + dr, c * factor + dc);
      out.intensities[static_cast<std::size_t>(r) * out.width + c] =
          static_cast<float>(acc * inv);
    }
  return out;
}

// Mean-pool by the factor, then replicate each pooled value back over its
// block: spatial detail drops while the image keeps its original size, so a
// fixed-input model can consume it.
inline PixelMap pixelate_pixelmap(const PixelMap& map, int factor) {
  const PixelMap small = downsample_pixelmap(map, factor);
  PixelMap out = map;
  for (int r = 0; r < map.height; ++r)
    for (int c = 0; c < map.width; ++c)
      out.intensities[static_cast<std::size_t>(r) * map.width + c] =
          small.at(r / factor, c / factor);
  return out;
}

// Pixelate keeps the rendered size and degrades detail (default); Pool shrinks
// the image, so the model's input size must match the pooled size.
enum class GeneralizationMode { Pixelate, Pool };

inline PixelMap degrade_pixelmap(const PixelMap& map, int factor, GeneralizationMode mode) {
  return mode == GeneralizationMode::Pool ? downsample_pixelmap(map, factor)
                                          : pixelate_pixelmap(map, factor);
}

inline std::vector<PredictionRecord> records_from_outcomes(
    const std::vector<DecodeOutcome>& outcomes) {
  std::vector<PredictionRecord> out(outcomes.size());
  for (std::size_t i = 0; i < outcomes.size(); ++i)
    out[i] = {outcomes[i].event_id, outcomes[i].truth, outcomes[i].predicted,
              outcomes[i].confidence.probabilities};
  return out;
}

// Run the constrained decoder over every event, optionally degrading the pixel
// maps first, and collect per-event prediction records.
inline std::vector<PredictionRecord> predict_dataset(
    const Model& model, const Dataset& ds, double temperature, int beam_width, int factor = 1,
    GeneralizationMode mode = GeneralizationMode::Pixelate, unsigned threads = 0) {
  if (ds.records.empty()) throw DomainError("dataset has no events");
  if (threads == 0) threads = default_thread_count();

  const PixelMap probe = ds.load_xz(0);
  if (probe.width % factor != 0)
    throw ShapeError("downsample factor " + std::to_string(factor) + " does not divide " +
                     std::to_string(probe.width) + "x" + std::to_string(probe.height));
  const int fed = mode == GeneralizationMode::Pool ? probe.width / factor : probe.width;
  if (fed != model.config.image_size)
    throw ShapeError("model expects " + std::to_string(model.config.image_size) + "x" +
                     std::to_string(model.config.image_size) + " inputs but would be fed " +
                     std::to_string(fed) + "x" + std::to_string(fed) +
                     (mode == GeneralizationMode::Pool ? " (pooled)" : ""));

  const Vocabulary vocab = default_vocabulary();
  const ConstraintSpec constraint = default_constraint(vocab);
  const std::vector<int> prompt = default_prompt(vocab);
  const ModelBackedProvider provider(model, vocab, constraint, prompt.size());
  std::vector<int> branch_context = prompt;
  branch_context.insert(branch_context.end(), constraint.prefix.begin(), constraint.prefix.end());

  std::vector<PredictionRecord> out(ds.records.size());
  parallel_for(ds.records.size(), threads, [&](std::size_t i) {
    const ImagePair pair{image_tensor(degrade_pixelmap(ds.load_xz(i), factor, mode)),
                         image_tensor(degrade_pixelmap(ds.load_yz(i), factor, mode))};
    const GenerationResult gen =
        constrained_generate(provider, prompt, constraint, beam_width, vocab.size(), &pair);
    const auto lp =
        first_token_class_logprobs(provider, branch_context, constraint, vocab.size(), &pair);
    out[i] = {ds.records[i].event_id, ds.records[i].truth_class, gen.chosen,
              class_confidence(lp, temperature).probabilities};
  });
  return out;
}

// Full metric suite on degraded inputs; the report carries the factor tag.
inline MetricsReport generalization_eval(const Model& model, const Dataset& ds,
                                         double temperature, int beam_width, int factor,
                                         GeneralizationMode mode = GeneralizationMode::Pixelate,
                                         unsigned threads = 0) {
  const auto records = predict_dataset(model, ds, temperature, beam_width, factor, mode, threads);
  MetricsReport rep = aggregate_metrics(records);
  rep.downsample_factor = factor;
  return rep;
}

// --- report files ----------------------------------------------------------------

namespace detail {

// Shortest round-trip decimal; infinities spelled so strtod can read them back.
inline std::string fmt_full(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string fmt_fixed(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%10.6f", v);
  return buf;
}

inline std::ofstream open_report_file(const std::filesystem::path& p) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot open " + p.string() + " for writing");
  return out;
}

inline void finish_report_file(std::ofstream& out, const std::filesystem::path& p) {
  out.flush();
  if (!out) throw IoError("failed while writing " + p.string());
}

inline void write_matrix(std::string& s, const std::array<std::array<double, 3>, 3>& m) {
  s += "            ";
  for (int c = 0; c < 3; ++c) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%10s", class_name(static_cast<ClassLabel>(c)).c_str());
    s += buf;
  }
  s += "\n";
  for (int t = 0; t < 3; ++t) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%-12s", class_name(static_cast<ClassLabel>(t)).c_str());
    s += buf;
    for (int p = 0; p < 3; ++p) s += fmt_fixed(m[static_cast<std::size_t>(t)][static_cast<std::size_t>(p)]);
    s += "\n";
  }
}

}  // namespace detail

// Write the report as deterministic files under `dir`:
//   report.txt       human-readable table (scalars + both matrices)
//   metrics.csv      header = scalar_names(), one full-precision value row
//   roc_<class>.csv  fpr,tpr,threshold triples per class (when curves exist)
//   records.csv      event_id,truth,predicted,score_nue_cc,score_numu_cc,score_nc
inline void emit_report(const MetricsReport& report, const std::vector<PredictionRecord>& records,
                        const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create report directory " + dir.string() + ": " + ec.message());

  {
    std::string s = "evaluation report\n";
    s += "records: " + std::to_string(report.n_records) + "\n";
    s += "downsample_factor: " + std::to_string(report.downsample_factor) + "\n\n";
    const auto names = MetricsReport::scalar_names();
    const auto values = report.scalar_values();
    for (std::size_t i = 0; i + 1 < names.size(); ++i) {  // factor already printed above
      char buf[24];
      std::snprintf(buf, sizeof(buf), "%-18s", (names[i] + ":").c_str());
      s += buf;
      s += detail::fmt_fixed(values[i]);
      s += "\n";
    }
    s += "\nrecall matrix (rows = truth, normalized by truth counts):\n";
    detail::write_matrix(s, report.confusion.recall);
    s += "\nprecision matrix (columns = predicted, normalized by prediction counts):\n";
    detail::write_matrix(s, report.confusion.precision);
    auto f = detail::open_report_file(dir / "report.txt");
    f << s;
    detail::finish_report_file(f, dir / "report.txt");
  }

  {
    auto f = detail::open_report_file(dir / "metrics.csv");
    const auto names = MetricsReport::scalar_names();
    const auto values = report.scalar_values();
    for (std::size_t i = 0; i < names.size(); ++i) f << (i ? "," : "") << names[i];
    f << "\n";
    for (std::size_t i = 0; i < values.size(); ++i)
      f << (i ? "," : "") << detail::fmt_full(values[i]);
    f << "\n";
    detail::finish_report_file(f, dir / "metrics.csv");
  }

  for (int c = 0; c < 3; ++c) {
    const RocCurve& curve = report.roc[static_cast<std::size_t>(c)];
    if (curve.points.empty()) continue;
    const auto path = dir / ("roc_" + class_name(static_cast<ClassLabel>(c)) + ".csv");
    auto f = detail::open_report_file(path);
    f << "fpr,tpr,threshold\n";
    for (const RocPoint& p : curve.points)
      f << detail::fmt_full(p.fpr) << "," << detail::fmt_full(p.tpr) << ","
        << detail::fmt_full(p.threshold) << "\n";
    detail::finish_report_file(f, path);
  }

  {
    auto f = detail::open_report_file(dir / "records.csv");
    f << "event_id,truth,predicted,score_nue_cc,score_numu_cc,score_nc\n";
    for (const auto& r : records) {
      f << r.event_id << "," << class_name(r.truth) << "," << class_name(r.predicted);
      for (double s : r.scores) f << "," << detail::fmt_full(s);
      f << "\n";
    }
    detail::finish_report_file(f, dir / "records.csv");
  }
}

}  // namespace nupix
