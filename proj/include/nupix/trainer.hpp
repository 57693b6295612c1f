#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "nupix/adam.hpp"
#include "nupix/autodiff.hpp"
#include "nupix/common.hpp"
#include "nupix/dataset.hpp"
#include "nupix/model.hpp"
#include "nupix/rng.hpp"
#include "nupix/threading.hpp"

// Training loop: stratified splits, Adam on mean cross-entropy, early
// stopping on validation loss, best-epoch checkpointing.
namespace nupix {

struct TrainConfig {
  double learning_rate = 1e-6;  // full-scale default; desk runs use 1e-3
  int batch_size = 16;
  int max_epochs = 300;
  int patience = 10;
  double train_fraction = 0.90;
  double val_fraction = 0.05;
  double test_fraction = 0.05;
  std::uint64_t seed = 1;

  void validate() const {
    std::vector<std::string> problems;
    if (!(learning_rate > 0)) problems.push_back("learning_rate must be > 0");
    if (batch_size < 1) problems.push_back("batch_size must be >= 1");
    if (max_epochs < 1) problems.push_back("max_epochs must be >= 1");
    if (patience < 1) problems.push_back("patience must be >= 1");
    for (auto [f, name] : {std::pair{train_fraction, "train_fraction"},
                           {val_fraction, "val_fraction"},
                           {test_fraction, "test_fraction"}})
      if (!(f > 0) || f >= 1) problems.push_back(std::string(name) + " must be in (0, 1)");
    if (std::abs(train_fraction + val_fraction + test_fraction - 1.0) > 1e-9)
      problems.push_back("split fractions must sum to 1");
    if (!problems.empty()) {
      std::string msg = "invalid train config:";
      for (const auto& p : problems) msg += "\n  - " + p;
      throw ConfigError(msg);
    }
  }
};

struct SplitIndices {
  std::vector<std::size_t> train, val, test;
};

namespace detail {

inline void fisher_yates(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i)
    std::swap(v[i - 1], v[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
}

// Largest-remainder rounding of `targets` to integers summing to `total`.
inline std::vector<std::size_t> apportion(const std::vector<double>& targets, std::size_t total) {
  std::vector<std::size_t> out(targets.size());
  std::vector<std::pair<double, std::size_t>> rema;
  std::size_t used = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    out[i] = static_cast<std::size_t>(std::floor(targets[i]));
    used += out[i];
    rema.push_back({targets[i] - std::floor(targets[i]), i});
  }
  std::stable_sort(rema.begin(), rema.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; used + k < total; ++k) out[rema[k % rema.size()].second] += 1;
  return out;
}

}  // namespace detail

// Deterministic class-stratified split. Split sizes follow the fractions by
// largest-remainder rounding; within each class the per-split cell counts are
// a controlled rounding of size_s * n_c / N, so every class lands within one
// event of its global share in every split.
inline SplitIndices split_dataset(const std::vector<ClassLabel>& labels, double train_fraction,
                                  double val_fraction, double test_fraction, std::uint64_t seed) {
  const std::size_t n = labels.size();
  if (n == 0) throw DomainError("split_dataset: empty dataset");
  if (!(train_fraction > 0) || !(val_fraction > 0) || !(test_fraction > 0) ||
      std::abs(train_fraction + val_fraction + test_fraction - 1.0) > 1e-9)
    throw ConfigError("split_dataset: fractions must be positive and sum to 1");

  const std::vector<std::size_t> sizes =
      detail::apportion({n * train_fraction, n * val_fraction, n * test_fraction}, n);
  static const char* split_names[3] = {"train", "val", "test"};
  for (int s = 0; s < 3; ++s)
    if (sizes[static_cast<std::size_t>(s)] == 0)
      throw DomainError(std::string("split_dataset: ") + split_names[s] +
                        " split is empty; need more events");

  constexpr int k = 3;  // classes
  std::size_t class_n[k] = {0, 0, 0};
  for (ClassLabel c : labels) class_n[static_cast<int>(c)] += 1;

  // Controlled rounding of the 3x3 target table: every cell is the floor or
  // ceiling of its target while rows sum to the class counts and columns to
  // the split sizes. 2^9 candidates, pick the one closest to the targets.
  double target[k][3];
  for (int c = 0; c < k; ++c)
    for (int s = 0; s < 3; ++s)
      target[c][s] = static_cast<double>(sizes[static_cast<std::size_t>(s)]) *
                     static_cast<double>(class_n[c]) / static_cast<double>(n);
  std::size_t cell[k][3] = {};
  double best_cost = std::numeric_limits<double>::infinity();
  bool found = false;
  for (int mask = 0; mask < (1 << 9); ++mask) {
    std::size_t cand[k][3];
    double cost = 0;
    for (int c = 0; c < k; ++c)
      for (int s = 0; s < 3; ++s) {
        const int bit = (mask >> (c * 3 + s)) & 1;
        cand[c][s] = static_cast<std::size_t>(std::floor(target[c][s])) +
                     static_cast<std::size_t>(bit);
        cost += std::abs(static_cast<double>(cand[c][s]) - target[c][s]);
      }
    bool ok = true;
    for (int c = 0; c < k && ok; ++c)
      ok = cand[c][0] + cand[c][1] + cand[c][2] == class_n[c];
    for (int s = 0; s < 3 && ok; ++s)
      ok = cand[0][s] + cand[1][s] + cand[2][s] == sizes[static_cast<std::size_t>(s)];
    if (ok && cost < best_cost) {
      best_cost = cost;
      std::memcpy(cell, cand, sizeof(cand));
      found = true;
    }
  }
  if (!found) throw DomainError("split_dataset: no feasible stratified rounding");

  SplitIndices out;
  for (int c = 0; c < k; ++c) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < n; ++i)
      if (static_cast<int>(labels[i]) == c) members.push_back(i);
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(c)));
    detail::fisher_yates(members, rng);
    std::size_t at = 0;
    for (int s = 0; s < 3; ++s) {
      auto& dst = s == 0 ? out.train : s == 1 ? out.val : out.test;
      for (std::size_t j = 0; j < cell[c][s]; ++j) dst.push_back(members[at++]);
    }
  }
  for (int s = 0; s < 3; ++s) {
    auto& dst = s == 0 ? out.train : s == 1 ? out.val : out.test;
    Rng rng(mix_seed(seed, 1000 + static_cast<std::uint64_t>(s)));
    detail::fisher_yates(dst, rng);
  }
  return out;
}

inline SplitIndices split_dataset(const Dataset& ds, const TrainConfig& cfg) {
  std::vector<ClassLabel> labels;
  labels.reserve(ds.records.size());
  for (const auto& r : ds.records) labels.push_back(r.truth_class);
  return split_dataset(labels, cfg.train_fraction, cfg.val_fraction, cfg.test_fraction, cfg.seed);
}

// Stops once the validation loss has gone `patience` consecutive epochs
// without improving on the best by more than 1e-6.
class EarlyStopMonitor {
 public:
  explicit EarlyStopMonitor(int patience) : patience_(patience) {
    if (patience < 1) throw ConfigError("EarlyStopMonitor: patience must be >= 1");
  }

  // Feed one epoch's validation loss; true means training should stop now.
  bool observe(double val_loss) {
    ++epoch_;
    if (val_loss < best_ - 1e-6) {
      best_ = val_loss;
      best_epoch_ = epoch_;
      stale_ = 0;
    } else {
      ++stale_;
    }
    return stale_ >= patience_;
  }

  bool improved_last() const { return epoch_ > 0 && stale_ == 0; }
  double best() const { return best_; }
  int best_epoch() const { return best_epoch_; }
  int epochs_seen() const { return epoch_; }

 private:
  int patience_;
  int epoch_ = 0;
  int stale_ = 0;
  int best_epoch_ = 0;
  double best_ = std::numeric_limits<double>::infinity();
};

struct TrainSample {
  Tensor<double> xz, yz;
  int label = 0;
};

inline std::vector<TrainSample> load_samples(const Dataset& ds, unsigned threads = 0) {
  if (threads == 0) threads = default_thread_count();
  std::vector<TrainSample> out(ds.records.size());
  parallel_for(ds.records.size(), threads, [&](std::size_t i) {
    out[i].xz = image_tensor(ds.load_xz(i));
    out[i].yz = image_tensor(ds.load_yz(i));
    out[i].label = static_cast<int>(ds.records[i].truth_class);
  });
  return out;
}

struct EpochStats {
  int epoch = 0;
  double train_loss = 0;
  double val_loss = 0;
  double val_accuracy = 0;
  double seconds = 0;
};

struct TrainHistory {
  std::vector<EpochStats> epochs;
  int best_epoch = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  int stopped_epoch = 0;
  bool early_stopped = false;
};

// Mean cross-entropy and accuracy over the indexed samples, eval mode.
inline std::pair<double, double> evaluate_samples(const Model& model,
                                                  const std::vector<TrainSample>& samples,
                                                  const std::vector<std::size_t>& indices,
                                                  unsigned threads = 0) {
  if (indices.empty()) throw DomainError("evaluate_samples: no samples");
  if (threads == 0) threads = default_thread_count();
  std::vector<double> losses(indices.size());
  std::vector<int> correct(indices.size());
  parallel_for(indices.size(), threads, [&](std::size_t i) {
    const TrainSample& s = samples[indices[i]];
    Tensor<double> probs = ad::softmax_rows(forward_eval(model, s.xz, s.yz));
    losses[i] = -std::log(std::max(probs.at2(0, s.label), 1e-300));
    int arg = 0;
    for (int j = 1; j < probs.dim(1); ++j)
      if (probs.at2(0, j) > probs.at2(0, arg)) arg = j;
    correct[i] = arg == s.label ? 1 : 0;
  });
  double loss = 0;
  long hits = 0;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    loss += losses[i];
    hits += correct[i];
  }
  return {loss / static_cast<double>(indices.size()),
          static_cast<double>(hits) / static_cast<double>(indices.size())};
}

struct TrainResult {
  Model model;
  TrainHistory history;
};

// One Adam run. Per-epoch shuffling, per-sample tapes merged in index order
// so results do not depend on the thread count, NaN losses abort.
inline TrainResult train(Model model, const std::vector<TrainSample>& samples,
                         const SplitIndices& split, const TrainConfig& cfg, unsigned threads = 0,
                         const std::function<void(const EpochStats&)>& on_epoch = {}) {
  cfg.validate();
  if (split.train.empty() || split.val.empty())
    throw DomainError("train: need nonempty train and val splits");
  for (std::size_t i : split.train)
    if (i >= samples.size()) throw DomainError("train: split index out of range");
  if (threads == 0) threads = default_thread_count();

  const std::size_t n_params = model.params.size();
  std::vector<std::size_t> sizes;
  for (const auto& p : model.params) sizes.push_back(p.value.numel());
  AdamState<double> adam(sizes);
  AdamConfig adam_cfg;
  adam_cfg.learning_rate = cfg.learning_rate;

  EarlyStopMonitor monitor(cfg.patience);
  TrainHistory history;
  std::vector<Tensor<double>> best_params;

  std::vector<std::size_t> order = split.train;
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng shuffle_rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch)));
    detail::fisher_yates(order, shuffle_rng);

    double loss_sum = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t bsz =
          std::min(static_cast<std::size_t>(cfg.batch_size), order.size() - b0);
      std::vector<double> losses(bsz);
      std::vector<std::vector<Tensor<double>>> grads(bsz);
      parallel_for(bsz, threads, [&](std::size_t i) {
        const TrainSample& s = samples[order[b0 + i]];
        Tape<double> tape;
        ForwardResult fr =
            forward_graph(model, tape, s.xz, s.yz, true,
                          mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch),
                                   static_cast<std::uint64_t>(b0 + i)),
                          true);
        Var<double> loss = ad::softmax_cross_entropy(fr.logits, {s.label});
        losses[i] = loss.value()[0];
        auto all = tape.backward(loss.id);
        grads[i].reserve(n_params);
        for (const auto& v : fr.param_vars)
          grads[i].push_back(std::move(all[static_cast<std::size_t>(v.id)]));
      });

      for (std::size_t i = 0; i < bsz; ++i) {
        if (!std::isfinite(losses[i]))
          throw DomainError("train: non-finite loss at epoch " + std::to_string(epoch) +
                            " (diverged; lower the learning rate)");
        loss_sum += losses[i];
      }

      // Deterministic in-order mean over the batch, then one Adam step.
      std::vector<Tensor<double>> acc = std::move(grads[0]);
      const double inv = 1.0 / static_cast<double>(bsz);
      for (std::size_t p = 0; p < n_params; ++p) {
        for (std::size_t i = 1; i < bsz; ++i) {
          const auto& g = grads[i][p];
          for (std::size_t j = 0; j < acc[p].numel(); ++j) acc[p][j] += g[j];
        }
        for (std::size_t j = 0; j < acc[p].numel(); ++j) acc[p][j] *= inv;
      }
      std::vector<Tensor<double>*> param_ptrs;
      std::vector<const Tensor<double>*> grad_ptrs;
      for (std::size_t p = 0; p < n_params; ++p) {
        param_ptrs.push_back(&model.params[p].value);
        grad_ptrs.push_back(&acc[p]);
      }
      adam.update(param_ptrs, grad_ptrs, adam_cfg);
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = loss_sum / static_cast<double>(order.size());
    std::tie(stats.val_loss, stats.val_accuracy) =
        evaluate_samples(model, samples, split.val, threads);
    stats.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    const bool stop = monitor.observe(stats.val_loss);
    if (monitor.improved_last()) {
      best_params.clear();
      for (const auto& p : model.params) best_params.push_back(p.value);
      history.best_epoch = epoch;
      history.best_val_loss = stats.val_loss;
    }
    history.epochs.push_back(stats);
    history.stopped_epoch = epoch;
    if (on_epoch) on_epoch(stats);
    if (stop) {
      history.early_stopped = true;
      break;
    }
  }

  if (!best_params.empty())
    for (std::size_t p = 0; p < n_params; ++p) model.params[p].value = std::move(best_params[p]);
  return {std::move(model), std::move(history)};
}

// --- checkpoints ------------------------------------------------------------
//
// Layout (little-endian): "NPCK", u32 version, u64 config hash, u32 config
// JSON length + bytes, u32 tensor count, then per tensor: u32 name length +
// bytes, u32 ndim, u32 dims..., f64 values as raw bit patterns.

namespace detail {

inline void put_u64le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

inline std::uint64_t double_bits(double d) {
  std::uint64_t u;
  std::memcpy(&u, &d, sizeof(u));
  return u;
}

inline double bits_double(std::uint64_t u) {
  double d;
  std::memcpy(&d, &u, sizeof(d));
  return d;
}

}  // namespace detail

inline constexpr char kCheckpointMagic[4] = {'N', 'P', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  std::string blob;
  blob.append(kCheckpointMagic, 4);
  detail::put_u32le(blob, kCheckpointVersion);
  detail::put_u64le(blob, config_hash(model.config));
  const std::string cfg_json = model_config_json(model.config);
  detail::put_u32le(blob, static_cast<std::uint32_t>(cfg_json.size()));
  blob += cfg_json;
  detail::put_u32le(blob, static_cast<std::uint32_t>(model.params.size()));
  for (const auto& p : model.params) {
    detail::put_u32le(blob, static_cast<std::uint32_t>(p.name.size()));
    blob += p.name;
    detail::put_u32le(blob, static_cast<std::uint32_t>(p.value.ndim()));
    for (int d = 0; d < p.value.ndim(); ++d)
      detail::put_u32le(blob, static_cast<std::uint32_t>(p.value.dim(d)));
    for (std::size_t j = 0; j < p.value.numel(); ++j)
      detail::put_u64le(blob, detail::double_bits(p.value[j]));
  }

  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint: " + tmp.string());
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw IoError("short write on checkpoint: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint: " + path.string());
  std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto* p = reinterpret_cast<const unsigned char*>(blob.data());
  std::size_t pos = 0;
  auto need = [&](std::size_t k, const char* what) {
    if (pos + k > blob.size())
      throw FormatError("checkpoint " + path.string() + ": truncated reading " + what);
  };

  need(4, "magic");
  if (std::memcmp(blob.data(), kCheckpointMagic, 4) != 0)
    throw FormatError("checkpoint " + path.string() + ": bad magic (want NPCK)");
  pos = 4;
  need(4, "version");
  const std::uint32_t version = detail::get_u32le(p + pos);
  pos += 4;
  if (version != kCheckpointVersion)
    throw VersionError("checkpoint " + path.string() + ": format version " +
                       std::to_string(version) + ", want " + std::to_string(kCheckpointVersion));
  need(8, "config hash");
  const std::uint64_t stored_hash = detail::get_u64le(p + pos);
  pos += 8;
  need(4, "config length");
  const std::uint32_t cfg_len = detail::get_u32le(p + pos);
  pos += 4;
  need(cfg_len, "config json");
  const std::string cfg_json = blob.substr(pos, cfg_len);
  pos += cfg_len;

  Model model;
  model.config = model_config_from_json(cfg_json);
  model.config.validate();
  if (config_hash(model.config) != stored_hash)
    throw VersionError("checkpoint " + path.string() + ": config hash mismatch");

  need(4, "tensor count");
  const std::uint32_t n_tensors = detail::get_u32le(p + pos);
  pos += 4;
  for (std::uint32_t t = 0; t < n_tensors; ++t) {
    need(4, "name length");
    const std::uint32_t name_len = detail::get_u32le(p + pos);
    pos += 4;
    need(name_len, "name");
    std::string name = blob.substr(pos, name_len);
    pos += name_len;
    need(4, "ndim");
    const std::uint32_t ndim = detail::get_u32le(p + pos);
    pos += 4;
    if (ndim == 0 || ndim > 8)
      throw FormatError("checkpoint " + path.string() + ": implausible rank for " + name);
    std::vector<int> shape;
    std::size_t count = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      need(4, "dim");
      const std::uint32_t dim = detail::get_u32le(p + pos);
      pos += 4;
      if (dim == 0 || dim > (1u << 24))
        throw FormatError("checkpoint " + path.string() + ": implausible dim for " + name);
      shape.push_back(static_cast<int>(dim));
      count *= dim;
      if (count > (1ull << 33))
        throw FormatError("checkpoint " + path.string() + ": implausible size for " + name);
    }
    Tensor<double> value(shape);
    need(8 * value.numel(), "values");
    for (std::size_t j = 0; j < value.numel(); ++j) {
      value[j] = detail::bits_double(detail::get_u64le(p + pos));
      pos += 8;
    }
    model.params.push_back({std::move(name), std::move(value)});
  }
  if (pos != blob.size())
    throw FormatError("checkpoint " + path.string() + ": trailing bytes");

  // The parameter list must be exactly what the embedded config implies.
  const auto specs = param_specs(model.config);
  if (specs.size() != model.params.size())
    throw FormatError("checkpoint " + path.string() + ": parameter list does not match config");
  for (std::size_t i = 0; i < specs.size(); ++i) {
    bool ok = specs[i].name == model.params[i].name &&
              static_cast<int>(specs[i].shape.size()) == model.params[i].value.ndim();
    for (std::size_t d = 0; ok && d < specs[i].shape.size(); ++d)
      ok = specs[i].shape[d] == model.params[i].value.dim(static_cast<int>(d));
    if (!ok)
      throw FormatError("checkpoint " + path.string() + ": parameter " + model.params[i].name +
                        " does not match config");
  }
  return model;
}

}  // namespace nupix
