#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "nupix/autodiff.hpp"
#include "nupix/common.hpp"
#include "nupix/dataset.hpp"
#include "nupix/geometry.hpp"
#include "nupix/model.hpp"
#include "nupix/threading.hpp"

// Inference mechanics over an abstract autoregressive token-probability
// provider: a forced prefix, a constrained beam search over three allowed
// label continuations, first-token class scoring, and temperature-sharpened
// class confidences.
namespace nupix {

class Vocabulary {
 public:
  int add(const std::string& token) {
    auto it = index_.find(token);
    if (it != index_.end()) return it->second;
    const int id = static_cast<int>(tokens_.size());
    tokens_.push_back(token);
    index_[token] = id;
    return id;
  }

  int id(const std::string& token) const {
    auto it = index_.find(token);
    if (it == index_.end()) throw ConfigError("vocabulary has no token '" + token + "'");
    return it->second;
  }

  const std::string& token(int id) const {
    if (id < 0 || id >= size()) throw DomainError("token id " + std::to_string(id) + " out of range");
    return tokens_[static_cast<std::size_t>(id)];
  }

  bool contains(const std::string& token) const { return index_.count(token) != 0; }
  int size() const { return static_cast<int>(tokens_.size()); }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

struct LabelSequence {
  ClassLabel label = ClassLabel::NC;
  std::vector<int> tokens;
};

struct ConstraintSpec {
  std::vector<int> prefix;                // forced verbatim before the branch
  std::array<LabelSequence, 3> labels;    // indexed by class id

  void validate() const {
    for (int i = 0; i < 3; ++i) {
      if (static_cast<int>(labels[static_cast<std::size_t>(i)].label) != i)
        throw ConfigError("constraint label slot " + std::to_string(i) +
                          " must carry class " + class_name(static_cast<ClassLabel>(i)));
      if (labels[static_cast<std::size_t>(i)].tokens.empty())
        throw ConfigError("constraint label sequence for " +
                          class_name(static_cast<ClassLabel>(i)) + " is empty");
    }
    for (int i = 0; i < 3; ++i)
      for (int j = i + 1; j < 3; ++j)
        if (first_token(static_cast<ClassLabel>(i)) == first_token(static_cast<ClassLabel>(j)))
          throw ConfigError("constraint first tokens must be pairwise distinct; " +
                            class_name(static_cast<ClassLabel>(i)) + " and " +
                            class_name(static_cast<ClassLabel>(j)) + " collide");
  }

  int first_token(ClassLabel c) const {
    return labels[static_cast<std::size_t>(static_cast<int>(c))].tokens.front();
  }
};

// One XZ/YZ pair, each (1, 1, H, W), handed through to providers that
// actually look at the event.
struct ImagePair {
  Tensor<double> xz, yz;
};

class LogProbProvider {
 public:
  virtual ~LogProbProvider() = default;
  // Full-vocabulary log-probabilities for the next token after `context`.
  // Must log-sum-exp to 0 within 1e-6.
  virtual std::vector<double> next_log_probs(const std::vector<int>& context,
                                             const ImagePair* images) const = 0;
};

// Adapter so tests and mocks can be written as lambdas.
class FunctionProvider : public LogProbProvider {
 public:
  using Fn = std::function<std::vector<double>(const std::vector<int>&, const ImagePair*)>;
  explicit FunctionProvider(Fn fn) : fn_(std::move(fn)) {}
  std::vector<double> next_log_probs(const std::vector<int>& context,
                                     const ImagePair* images) const override {
    return fn_(context, images);
  }

 private:
  Fn fn_;
};

// Query the provider and enforce its interface contract.
inline std::vector<double> checked_log_probs(const LogProbProvider& provider,
                                             const std::vector<int>& context,
                                             const ImagePair* images, int vocab_size) {
  std::vector<double> lp = provider.next_log_probs(context, images);
  if (static_cast<int>(lp.size()) != vocab_size)
    throw InterfaceError("provider returned " + std::to_string(lp.size()) +
                         " log-probs for a vocabulary of " + std::to_string(vocab_size));
  double m = -std::numeric_limits<double>::infinity();
  for (double v : lp) m = std::max(m, v);
  double s = 0;
  for (double v : lp) s += std::exp(v - m);
  const double lse = m + std::log(s);
  if (!(std::abs(lse) <= 1e-6))
    throw InterfaceError("provider distribution does not normalize (log-sum-exp = " +
                         std::to_string(lse) + ")");
  return lp;
}

// --- defaults ---------------------------------------------------------------

inline Vocabulary default_vocabulary() {
  Vocabulary v;
  for (const char* w : {"<system>", "<image:xz>", "<image:yz>", "<user>", "I", "classify", "the",
                        "pixel", "maps", "as", "nu_e", "nu_mu", "NC", "CC", "track", "shower",
                        "hadronic", "activity", "vertex", "event"})
    v.add(w);
  return v;
}

// Opaque stand-in for the system/user prompt and the image slots.
inline std::vector<int> default_prompt(const Vocabulary& v) {
  return {v.id("<system>"), v.id("<image:xz>"), v.id("<image:yz>"), v.id("<user>")};
}

inline ConstraintSpec default_constraint(const Vocabulary& v) {
  ConstraintSpec c;
  c.prefix = {v.id("I"), v.id("classify"), v.id("the"), v.id("pixel"), v.id("maps"), v.id("as")};
  c.labels[0] = {ClassLabel::NuE_CC, {v.id("nu_e"), v.id("CC")}};
  c.labels[1] = {ClassLabel::NuMu_CC, {v.id("nu_mu"), v.id("CC")}};
  c.labels[2] = {ClassLabel::NC, {v.id("NC")}};
  c.validate();
  return c;
}

// --- constrained beam search -------------------------------------------------

struct GenerationResult {
  ClassLabel chosen = ClassLabel::NC;
  std::vector<int> tokens;     // forced prefix + the winning label sequence
  double total_log_prob = 0;   // cumulative over all emitted tokens
};

// Beam search restricted to constraint-consistent paths: the prefix is forced
// token by token, then the beams fan out over the three label continuations.
// With beam_width >= 3 this is exhaustive over the allowed continuations.
inline GenerationResult constrained_generate(const LogProbProvider& provider,
                                             const std::vector<int>& prompt,
                                             const ConstraintSpec& constraint, int beam_width,
                                             int vocab_size, const ImagePair* images = nullptr) {
  if (beam_width < 1) throw ConfigError("beam width must be >= 1");
  constraint.validate();

  struct Beam {
    std::vector<int> emitted;
    double score = 0;
    int label = -1;  // -1 until the branch token is chosen
  };
  std::vector<Beam> live{Beam{}};
  std::vector<Beam> done;

  while (!live.empty()) {
    std::vector<Beam> grown;
    for (const Beam& b : live) {
      std::vector<int> context = prompt;
      context.insert(context.end(), b.emitted.begin(), b.emitted.end());
      const std::vector<double> lp = checked_log_probs(provider, context, images, vocab_size);

      auto extend = [&](int token, int label) {
        if (token < 0 || token >= vocab_size)
          throw ConfigError("constraint token " + std::to_string(token) +
                            " outside the vocabulary");
        Beam nb = b;
        nb.emitted.push_back(token);
        nb.score += lp[static_cast<std::size_t>(token)];
        nb.label = label;
        const auto& seq = constraint.labels[static_cast<std::size_t>(std::max(label, 0))].tokens;
        if (label >= 0 && nb.emitted.size() == constraint.prefix.size() + seq.size())
          done.push_back(std::move(nb));
        else
          grown.push_back(std::move(nb));
      };

      const std::size_t pos = b.emitted.size();
      if (pos < constraint.prefix.size()) {
        extend(constraint.prefix[pos], -1);
      } else if (b.label < 0) {
        for (int i = 0; i < 3; ++i)
          extend(constraint.labels[static_cast<std::size_t>(i)].tokens.front(), i);
      } else {
        const auto& seq = constraint.labels[static_cast<std::size_t>(b.label)].tokens;
        extend(seq[pos - constraint.prefix.size()], b.label);
      }
    }
    std::stable_sort(grown.begin(), grown.end(),
                     [](const Beam& a, const Beam& b) { return a.score > b.score; });
    if (static_cast<int>(grown.size()) > beam_width)
      grown.resize(static_cast<std::size_t>(beam_width));
    live = std::move(grown);
  }

  if (done.empty()) throw InterfaceError("beam search completed no path");
  const Beam* best = &done[0];
  for (const Beam& b : done)
    if (b.score > best->score) best = &b;
  return {constraint.labels[static_cast<std::size_t>(best->label)].label, best->emitted,
          best->score};
}

// Log-probabilities of the three canonical first label tokens at the branch
// position. `context` must already contain the prompt plus the forced prefix.
inline std::array<double, 3> first_token_class_logprobs(const LogProbProvider& provider,
                                                        const std::vector<int>& context,
                                                        const ConstraintSpec& constraint,
                                                        int vocab_size,
                                                        const ImagePair* images = nullptr) {
  constraint.validate();
  const std::vector<double> lp = checked_log_probs(provider, context, images, vocab_size);
  std::array<double, 3> out{};
  for (int i = 0; i < 3; ++i) {
    const int tok = constraint.first_token(static_cast<ClassLabel>(i));
    if (tok < 0 || tok >= vocab_size)
      throw ConfigError("constraint token " + std::to_string(tok) + " outside the vocabulary");
    out[static_cast<std::size_t>(i)] = lp[static_cast<std::size_t>(tok)];
  }
  return out;
}

// --- temperature-scaled confidence -------------------------------------------

struct ClassConfidence {
  std::array<double, 3> probabilities{};
  double temperature = 1;
  std::array<double, 3> raw_log_probs{};
};

// P(C_i) proportional to exp(T * log p_i) = p_i^T, computed with
// max-subtraction so large T stays stable.
inline ClassConfidence class_confidence(const std::array<double, 3>& log_probs,
                                        double temperature) {
  if (!(temperature > 0))
    throw DomainError("temperature must be > 0, got " + std::to_string(temperature));
  for (double lp : log_probs)
    if (!std::isfinite(lp))
      throw DomainError("class log-probs must be finite for confidence scaling");

  ClassConfidence out;
  out.temperature = temperature;
  out.raw_log_probs = log_probs;
  std::array<double, 3> scaled{};
  double m = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < 3; ++i) {
    scaled[static_cast<std::size_t>(i)] = temperature * log_probs[static_cast<std::size_t>(i)];
    m = std::max(m, scaled[static_cast<std::size_t>(i)]);
  }
  double sum = 0;
  for (int i = 0; i < 3; ++i) {
    out.probabilities[static_cast<std::size_t>(i)] =
        std::exp(scaled[static_cast<std::size_t>(i)] - m);
    sum += out.probabilities[static_cast<std::size_t>(i)];
  }
  for (int i = 0; i < 3; ++i) out.probabilities[static_cast<std::size_t>(i)] /= sum;
  return out;
}

// --- model-backed provider ----------------------------------------------------

inline constexpr double kResidualMass = 1e-6;

// Stands in for a vision-language model: deterministic near-delta
// distributions on the forced structure, and the Siamese CNN's class
// softmax spread over the three first label tokens at the branch position.
class ModelBackedProvider : public LogProbProvider {
 public:
  ModelBackedProvider(const Model& model, const Vocabulary& vocab, ConstraintSpec constraint,
                      std::size_t prompt_length)
      : model_(&model),
        vocab_size_(vocab.size()),
        constraint_(std::move(constraint)),
        prompt_length_(prompt_length) {
    constraint_.validate();
    if (vocab_size_ < 4)
      throw ConfigError("model-backed provider needs a vocabulary larger than the label set");
  }

  std::vector<double> next_log_probs(const std::vector<int>& context,
                                     const ImagePair* images) const override {
    if (context.size() < prompt_length_)
      throw InterfaceError("context is shorter than the prompt");
    const std::size_t pos = context.size() - prompt_length_;
    const std::size_t v = static_cast<std::size_t>(vocab_size_);
    std::vector<double> p(v, 0.0);

    if (pos < constraint_.prefix.size()) {
      near_delta(p, constraint_.prefix[pos]);
    } else if (pos == constraint_.prefix.size()) {
      // Branch position: CNN class probabilities, scaled by (1 - eps) onto
      // the three canonical first tokens, eps spread over everything else.
      if (!images) throw InterfaceError("branch position queried without an image pair");
      Tensor<double> probs = ad::softmax_rows(forward_eval(*model_, images->xz, images->yz));
      const double rest = kResidualMass / static_cast<double>(vocab_size_ - 3);
      for (std::size_t t = 0; t < v; ++t) p[t] = rest;
      for (int i = 0; i < 3; ++i)
        p[static_cast<std::size_t>(constraint_.first_token(static_cast<ClassLabel>(i)))] =
            probs.at2(0, i) * (1.0 - kResidualMass);
    } else {
      // Inside a label: near-certain continuation of whichever label the
      // context committed to at the branch token.
      const int branch_tok = context[prompt_length_ + constraint_.prefix.size()];
      int label = -1;
      for (int i = 0; i < 3; ++i)
        if (constraint_.first_token(static_cast<ClassLabel>(i)) == branch_tok) label = i;
      const std::size_t lpos = pos - constraint_.prefix.size();
      if (label >= 0 && lpos < constraint_.labels[static_cast<std::size_t>(label)].tokens.size()) {
        near_delta(p, constraint_.labels[static_cast<std::size_t>(label)].tokens[lpos]);
      } else {
        for (std::size_t t = 0; t < v; ++t) p[t] = 1.0 / static_cast<double>(vocab_size_);
      }
    }

    std::vector<double> lp(v);
    for (std::size_t t = 0; t < v; ++t) lp[t] = std::log(p[t]);
    return lp;
  }

 private:
  void near_delta(std::vector<double>& p, int token) const {
    const double rest = kResidualMass / static_cast<double>(vocab_size_ - 1);
    for (auto& x : p) x = rest;
    p[static_cast<std::size_t>(token)] = 1.0 - kResidualMass;
  }

  const Model* model_;
  int vocab_size_;
  ConstraintSpec constraint_;
  std::size_t prompt_length_;
};

// --- dataset-level driver -------------------------------------------------------

struct DecodeOutcome {
  std::int64_t event_id = 0;
  ClassLabel truth = ClassLabel::NC;
  ClassLabel predicted = ClassLabel::NC;
  ClassConfidence confidence;
  std::vector<int> tokens;
  double total_log_prob = 0;
};

inline std::vector<DecodeOutcome> decode_dataset(const Model& model, const Dataset& ds,
                                                 double temperature, int beam_width,
                                                 unsigned threads = 0) {
  if (threads == 0) threads = default_thread_count();
  const Vocabulary vocab = default_vocabulary();
  const ConstraintSpec constraint = default_constraint(vocab);
  const std::vector<int> prompt = default_prompt(vocab);
  const ModelBackedProvider provider(model, vocab, constraint, prompt.size());

  std::vector<int> branch_context = prompt;
  branch_context.insert(branch_context.end(), constraint.prefix.begin(), constraint.prefix.end());

  std::vector<DecodeOutcome> out(ds.records.size());
  parallel_for(ds.records.size(), threads, [&](std::size_t i) {
    const ImagePair pair{image_tensor(ds.load_xz(i)), image_tensor(ds.load_yz(i))};
    const GenerationResult gen =
        constrained_generate(provider, prompt, constraint, beam_width, vocab.size(), &pair);
    const auto lp =
        first_token_class_logprobs(provider, branch_context, constraint, vocab.size(), &pair);
    out[i].event_id = ds.records[i].event_id;
    out[i].truth = ds.records[i].truth_class;
    out[i].predicted = gen.chosen;
    out[i].confidence = class_confidence(lp, temperature);
    out[i].tokens = gen.tokens;
    out[i].total_log_prob = gen.total_log_prob;
  });
  return out;
}

}  // namespace nupix
