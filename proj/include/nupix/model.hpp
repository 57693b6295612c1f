#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "nupix/autodiff.hpp"
#include "nupix/common.hpp"
#include "nupix/detsim.hpp"
#include "nupix/rng.hpp"
#include "nupix/tensor.hpp"

// Siamese dual-branch CNN assembled from the autodiff primitives: a shared
// stem + inverted-residual branch per view, channel concatenation, post-merge
// stages, global average pooling and a dense head with dropout.
namespace nupix {

enum class Activation { Relu6, HardSwish };

inline std::string activation_name(Activation a) {
  return a == Activation::Relu6 ? "relu6" : "hard_swish";
}

inline Activation activation_from_name(const std::string& s) {
  if (s == "relu6") return Activation::Relu6;
  if (s == "hard_swish") return Activation::HardSwish;
  throw ConfigError("unknown activation '" + s + "' (want relu6 or hard_swish)");
}

// One inverted residual stage: 1x1 expand (omitted when expansion == 1),
// depthwise kernel x kernel at the given stride, optional SE gate, 1x1
// linear projection. Skip connection iff stride 1 and channels preserved.
struct StageSpec {
  int expansion = 1;
  int channels = 8;
  int kernel = 3;
  int stride = 1;
  bool use_se = false;
  Activation activation = Activation::Relu6;
};

struct ModelConfig {
  int image_size = 64;
  int stem_channels = 8;
  int stem_kernel = 3;
  int stem_stride = 1;
  std::vector<StageSpec> branch_stages;
  std::vector<StageSpec> merge_stages;
  std::vector<int> head_hidden;
  double dropout_rate = 0.2;
  int num_classes = 3;
  bool shared_branches = true;
  int se_reduction = 4;
  std::uint64_t init_seed = 1;

  void validate() const;

  // Small reference architecture for 64x64 desk runs.
  static ModelConfig desk_reference(int image_size = 64) {
    ModelConfig c;
    c.image_size = image_size;
    c.stem_channels = 8;
    c.stem_kernel = 3;
    c.stem_stride = 1;
    c.branch_stages = {
        {1, 8, 3, 2, false, Activation::Relu6},
        {4, 16, 3, 2, true, Activation::HardSwish},
        {4, 24, 3, 2, true, Activation::HardSwish},
    };
    c.merge_stages = {{4, 32, 3, 1, true, Activation::HardSwish}};
    c.head_hidden = {64};
    c.dropout_rate = 0.2;
    return c;
  }

  // Full-scale reference with the same block vocabulary, sized for 512x512
  // inputs. Parameter count is reported, not asserted against any target.
  static ModelConfig full_scale_reference() {
    ModelConfig c;
    c.image_size = 512;
    c.stem_channels = 16;
    c.stem_kernel = 3;
    c.stem_stride = 2;
    c.branch_stages = {
        {1, 16, 3, 2, false, Activation::Relu6},
        {4, 24, 3, 2, false, Activation::Relu6},
        {4, 40, 5, 2, true, Activation::HardSwish},
        {6, 80, 3, 2, true, Activation::HardSwish},
        {6, 112, 3, 1, true, Activation::HardSwish},
        {6, 160, 5, 2, true, Activation::HardSwish},
        {6, 160, 3, 1, true, Activation::HardSwish},
    };
    c.merge_stages = {{4, 256, 3, 1, true, Activation::HardSwish}};
    c.head_hidden = {1024};
    c.dropout_rate = 0.2;
    return c;
  }
};

namespace detail {

inline void check_stage(const StageSpec& s, int in_ch, int se_reduction, const std::string& where,
                        std::vector<std::string>& problems) {
  if (s.expansion < 1) problems.push_back(where + ": expansion must be >= 1");
  if (s.channels < 1) problems.push_back(where + ": channels must be >= 1");
  if (s.kernel < 1 || s.kernel % 2 == 0)
    problems.push_back(where + ": kernel must be a positive odd size");
  if (s.stride != 1 && s.stride != 2) problems.push_back(where + ": stride must be 1 or 2");
  if (s.use_se && s.expansion >= 1 && in_ch >= 1) {
    const int expanded = in_ch * s.expansion;
    if (expanded % se_reduction != 0)
      problems.push_back(where + ": SE needs expanded channels (" + std::to_string(expanded) +
                         ") divisible by se_reduction (" + std::to_string(se_reduction) + ")");
  }
}

}  // namespace detail

inline void ModelConfig::validate() const {
  std::vector<std::string> problems;
  if (image_size < 1) problems.push_back("image_size must be >= 1");
  if (stem_channels < 1) problems.push_back("stem_channels must be >= 1");
  if (stem_kernel < 1 || stem_kernel % 2 == 0)
    problems.push_back("stem_kernel must be a positive odd size");
  if (stem_stride != 1 && stem_stride != 2) problems.push_back("stem_stride must be 1 or 2");
  if (branch_stages.empty()) problems.push_back("branch_stages must not be empty");
  if (dropout_rate < 0 || dropout_rate >= 1) problems.push_back("dropout_rate must be in [0, 1)");
  if (num_classes != 3) problems.push_back("num_classes must be 3");
  if (se_reduction < 1) problems.push_back("se_reduction must be >= 1");
  for (size_t i = 0; i < head_hidden.size(); ++i)
    if (head_hidden[i] < 1)
      problems.push_back("head_hidden[" + std::to_string(i) + "] must be >= 1");

  int ch = stem_channels;
  int side = image_size > 0 ? (image_size - 1) / std::max(stem_stride, 1) + 1 : 0;
  for (size_t i = 0; i < branch_stages.size(); ++i) {
    detail::check_stage(branch_stages[i], ch, se_reduction,
                        "branch_stages[" + std::to_string(i) + "]", problems);
    ch = branch_stages[i].channels;
    if (branch_stages[i].stride == 2) side = (side - 1) / 2 + 1;
  }
  ch *= 2;  // channel concatenation of the two views
  for (size_t i = 0; i < merge_stages.size(); ++i) {
    detail::check_stage(merge_stages[i], ch, se_reduction,
                        "merge_stages[" + std::to_string(i) + "]", problems);
    ch = merge_stages[i].channels;
    if (merge_stages[i].stride == 2) side = (side - 1) / 2 + 1;
  }
  if (side < 1) problems.push_back("strides reduce the spatial size below 1 pixel");

  if (!problems.empty()) {
    std::string msg = "invalid model config:";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw ConfigError(msg);
  }
}

// --- config (de)serialization -------------------------------------------

inline nlohmann::ordered_json stage_to_json(const StageSpec& s) {
  return {{"expansion", s.expansion}, {"channels", s.channels},   {"kernel", s.kernel},
          {"stride", s.stride},       {"se", s.use_se},           {"activation", activation_name(s.activation)}};
}

inline nlohmann::ordered_json model_config_to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["image_size"] = c.image_size;
  j["stem_channels"] = c.stem_channels;
  j["stem_kernel"] = c.stem_kernel;
  j["stem_stride"] = c.stem_stride;
  j["branch_stages"] = nlohmann::ordered_json::array();
  for (const auto& s : c.branch_stages) j["branch_stages"].push_back(stage_to_json(s));
  j["merge_stages"] = nlohmann::ordered_json::array();
  for (const auto& s : c.merge_stages) j["merge_stages"].push_back(stage_to_json(s));
  j["head_hidden"] = c.head_hidden;
  j["dropout_rate"] = c.dropout_rate;
  j["num_classes"] = c.num_classes;
  j["shared_branches"] = c.shared_branches;
  j["se_reduction"] = c.se_reduction;
  j["init_seed"] = c.init_seed;
  return j;
}

inline std::string model_config_json(const ModelConfig& c) {
  return model_config_to_json(c).dump(2) + "\n";
}

namespace detail {

template <class Json>
void reject_unknown_keys(const Json& j, const std::vector<std::string>& known,
                         const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const auto& k : known)
      if (it.key() == k) {
        ok = true;
        break;
      }
    if (!ok) throw ConfigError(where + ": unknown key '" + it.key() + "'");
  }
}

template <class Json, class T>
void read_key(const Json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).template get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(where + ": bad value for '" + std::string(key) + "': " + e.what());
  }
}

template <class Json>
StageSpec stage_from_json(const Json& j, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": stage must be an object");
  reject_unknown_keys(j, {"expansion", "channels", "kernel", "stride", "se", "activation"}, where);
  StageSpec s;
  read_key(j, "expansion", s.expansion, where);
  read_key(j, "channels", s.channels, where);
  read_key(j, "kernel", s.kernel, where);
  read_key(j, "stride", s.stride, where);
  read_key(j, "se", s.use_se, where);
  if (j.contains("activation")) {
    std::string a;
    read_key(j, "activation", a, where);
    s.activation = activation_from_name(a);
  }
  return s;
}

}  // namespace detail

template <class Json>
ModelConfig model_config_from_json_obj(const Json& j, const std::string& where = "model config") {
  if (!j.is_object()) throw ConfigError(where + ": want a JSON object");
  detail::reject_unknown_keys(
      j,
      {"image_size", "stem_channels", "stem_kernel", "stem_stride", "branch_stages",
       "merge_stages", "head_hidden", "dropout_rate", "num_classes", "shared_branches",
       "se_reduction", "init_seed"},
      where);
  ModelConfig c = ModelConfig::desk_reference();
  detail::read_key(j, "image_size", c.image_size, where);
  detail::read_key(j, "stem_channels", c.stem_channels, where);
  detail::read_key(j, "stem_kernel", c.stem_kernel, where);
  detail::read_key(j, "stem_stride", c.stem_stride, where);
  if (j.contains("branch_stages")) {
    c.branch_stages.clear();
    for (const auto& sj : j.at("branch_stages"))
      c.branch_stages.push_back(detail::stage_from_json(sj, where + ".branch_stages"));
  }
  if (j.contains("merge_stages")) {
    c.merge_stages.clear();
    for (const auto& sj : j.at("merge_stages"))
      c.merge_stages.push_back(detail::stage_from_json(sj, where + ".merge_stages"));
  }
  detail::read_key(j, "head_hidden", c.head_hidden, where);
  detail::read_key(j, "dropout_rate", c.dropout_rate, where);
  detail::read_key(j, "num_classes", c.num_classes, where);
  detail::read_key(j, "shared_branches", c.shared_branches, where);
  detail::read_key(j, "se_reduction", c.se_reduction, where);
  detail::read_key(j, "init_seed", c.init_seed, where);
  return c;
}

inline ModelConfig model_config_from_json(const std::string& text) {
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  return model_config_from_json_obj(j);
}

// Architecture identity hash. The init seed is deliberately excluded so all
// models with the same structure share one hash regardless of initialization.
inline std::uint64_t config_hash(const ModelConfig& c) {
  nlohmann::ordered_json j = model_config_to_json(c);
  j.erase("init_seed");
  return fnv1a64(j.dump());
}

// --- parameter layout -----------------------------------------------------

struct ParamSpec {
  std::string name;
  std::vector<int> shape;
  int fan_in = 0;  // 0 means zero-initialized (biases)
};

namespace detail {

inline void stage_param_specs(const StageSpec& s, int in_ch, int se_reduction,
                              const std::string& prefix, std::vector<ParamSpec>& out) {
  const int exp_ch = in_ch * s.expansion;
  if (s.expansion > 1) {
    out.push_back({prefix + ".expand.weight", {exp_ch, in_ch, 1, 1}, in_ch});
    out.push_back({prefix + ".expand.bias", {exp_ch}, 0});
  }
  out.push_back({prefix + ".depthwise.weight", {exp_ch, 1, s.kernel, s.kernel},
                 s.kernel * s.kernel});
  out.push_back({prefix + ".depthwise.bias", {exp_ch}, 0});
  if (s.use_se) {
    const int mid = exp_ch / se_reduction;
    out.push_back({prefix + ".se.reduce.weight", {mid, exp_ch}, exp_ch});
    out.push_back({prefix + ".se.reduce.bias", {mid}, 0});
    out.push_back({prefix + ".se.expand.weight", {exp_ch, mid}, mid});
    out.push_back({prefix + ".se.expand.bias", {exp_ch}, 0});
  }
  out.push_back({prefix + ".project.weight", {s.channels, exp_ch, 1, 1}, exp_ch});
  out.push_back({prefix + ".project.bias", {s.channels}, 0});
}

inline void branch_param_specs(const ModelConfig& c, const std::string& prefix,
                               std::vector<ParamSpec>& out) {
  out.push_back({prefix + ".stem.weight", {c.stem_channels, 1, c.stem_kernel, c.stem_kernel},
                 c.stem_kernel * c.stem_kernel});
  out.push_back({prefix + ".stem.bias", {c.stem_channels}, 0});
  int ch = c.stem_channels;
  for (size_t i = 0; i < c.branch_stages.size(); ++i) {
    stage_param_specs(c.branch_stages[i], ch, c.se_reduction,
                      prefix + ".s" + std::to_string(i), out);
    ch = c.branch_stages[i].channels;
  }
}

}  // namespace detail

// Every tensor the model owns, in creation (= initialization) order.
inline std::vector<ParamSpec> param_specs(const ModelConfig& c) {
  std::vector<ParamSpec> out;
  if (c.shared_branches) {
    detail::branch_param_specs(c, "branch", out);
  } else {
    detail::branch_param_specs(c, "branch_xz", out);
    detail::branch_param_specs(c, "branch_yz", out);
  }
  int ch = (c.branch_stages.empty() ? c.stem_channels : c.branch_stages.back().channels) * 2;
  for (size_t i = 0; i < c.merge_stages.size(); ++i) {
    detail::stage_param_specs(c.merge_stages[i], ch, c.se_reduction,
                              "merge.s" + std::to_string(i), out);
    ch = c.merge_stages[i].channels;
  }
  int features = ch;
  for (size_t i = 0; i < c.head_hidden.size(); ++i) {
    out.push_back({"head.h" + std::to_string(i) + ".weight", {c.head_hidden[i], features},
                   features});
    out.push_back({"head.h" + std::to_string(i) + ".bias", {c.head_hidden[i]}, 0});
    features = c.head_hidden[i];
  }
  out.push_back({"head.logits.weight", {c.num_classes, features}, features});
  out.push_back({"head.logits.bias", {c.num_classes}, 0});
  return out;
}

struct NamedParam {
  std::string name;
  Tensor<double> value;
};

struct Model {
  ModelConfig config;
  std::vector<NamedParam> params;

  int find(const std::string& name) const {
    for (size_t i = 0; i < params.size(); ++i)
      if (params[i].name == name) return static_cast<int>(i);
    throw ConfigError("model has no parameter named '" + name + "'");
  }

  Tensor<double>& param(const std::string& name) { return params[static_cast<size_t>(find(name))].value; }
  const Tensor<double>& param(const std::string& name) const {
    return params[static_cast<size_t>(find(name))].value;
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.value.numel();
    return n;
  }
};

// He fan-in initialization from a single RNG stream in parameter order.
inline Model build_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Model m;
  m.config = config;
  Rng rng(seed);
  for (const auto& spec : param_specs(config)) {
    Tensor<double> t(spec.shape);
    if (spec.fan_in > 0) {
      const double sigma = std::sqrt(2.0 / spec.fan_in);
      for (auto& v : t.data()) v = rng.gauss(0.0, sigma);
    }
    m.params.push_back({spec.name, std::move(t)});
  }
  return m;
}

inline Model build_model(const ModelConfig& config) { return build_model(config, config.init_seed); }

// --- forward graph ---------------------------------------------------------

namespace detail {

inline Var<double> apply_activation(Var<double> v, Activation a) {
  return a == Activation::Relu6 ? ad::relu6(v) : ad::hard_swish(v);
}

struct ParamLookup {
  const Model* model;
  const std::vector<Var<double>>* vars;

  Var<double> operator()(const std::string& name) const {
    return (*vars)[static_cast<size_t>(model->find(name))];
  }
};

inline Var<double> run_stage(Var<double> x, const StageSpec& s, int in_ch,
                                 const std::string& prefix, const ParamLookup& p) {
  Var<double> h = x;
  if (s.expansion > 1) {
    h = ad::conv2d(h, p(prefix + ".expand.weight"), 1, 0);
    h = ad::bias_channels(h, p(prefix + ".expand.bias"));
    h = apply_activation(h, s.activation);
  }
  const int exp_ch = in_ch * s.expansion;
  h = ad::conv2d(h, p(prefix + ".depthwise.weight"), s.stride, s.kernel / 2, exp_ch);
  h = ad::bias_channels(h, p(prefix + ".depthwise.bias"));
  h = apply_activation(h, s.activation);
  if (s.use_se)
    h = ad::se_block(h, p(prefix + ".se.reduce.weight"), p(prefix + ".se.reduce.bias"),
                     p(prefix + ".se.expand.weight"), p(prefix + ".se.expand.bias"));
  h = ad::conv2d(h, p(prefix + ".project.weight"), 1, 0);
  h = ad::bias_channels(h, p(prefix + ".project.bias"));
  if (s.stride == 1 && s.channels == in_ch) h = ad::add(h, x);
  return h;
}

inline Var<double> run_branch(Var<double> x, const ModelConfig& c,
                                  const std::string& prefix, const ParamLookup& p) {
  Var<double> h = ad::conv2d(x, p(prefix + ".stem.weight"), c.stem_stride, c.stem_kernel / 2);
  h = ad::bias_channels(h, p(prefix + ".stem.bias"));
  h = ad::relu6(h);
  int ch = c.stem_channels;
  for (size_t i = 0; i < c.branch_stages.size(); ++i) {
    h = run_stage(h, c.branch_stages[i], ch, prefix + ".s" + std::to_string(i), p);
    ch = c.branch_stages[i].channels;
  }
  return h;
}

}  // namespace detail

struct ForwardResult {
  Var<double> logits;
  std::vector<Var<double>> param_vars;  // leaf per model parameter, same order
};

// Builds the full graph on the caller's tape. Inputs are NCHW with one
// channel; XZ is always the first branch. In training mode each dropout
// layer derives its mask stream from dropout_seed. params_need_grad can be
// forced on with dropout off for gradient checking.
inline ForwardResult forward_graph(const Model& m, Tape<double>& tape,
                                   const Tensor<double>& xz, const Tensor<double>& yz,
                                   bool training, std::uint64_t dropout_seed,
                                   bool params_need_grad) {
  const ModelConfig& c = m.config;
  for (const Tensor<double>* img : {&xz, &yz}) {
    if (img->ndim() != 4 || img->dim(1) != 1 || img->dim(2) != c.image_size ||
        img->dim(3) != c.image_size)
      throw ShapeError("forward: want [N, 1, " + std::to_string(c.image_size) + ", " +
                       std::to_string(c.image_size) + "] input, got " + shape_str(img->shape()));
  }
  if (xz.dim(0) != yz.dim(0))
    throw ShapeError("forward: view batches differ: " + shape_str(xz.shape()) + " vs " +
                     shape_str(yz.shape()));

  ForwardResult r{Var<double>{}, {}};
  r.param_vars.reserve(m.params.size());
  for (const auto& p : m.params) r.param_vars.push_back(make_leaf(tape, p.value, params_need_grad));
  detail::ParamLookup lookup{&m, &r.param_vars};

  Var<double> vx = make_leaf(tape, xz, false);
  Var<double> vy = make_leaf(tape, yz, false);
  Var<double> bx = detail::run_branch(vx, c, c.shared_branches ? "branch" : "branch_xz", lookup);
  Var<double> by = detail::run_branch(vy, c, c.shared_branches ? "branch" : "branch_yz", lookup);

  Var<double> h = ad::concat_channels(bx, by);
  int ch = (c.branch_stages.empty() ? c.stem_channels : c.branch_stages.back().channels) * 2;
  for (size_t i = 0; i < c.merge_stages.size(); ++i) {
    h = detail::run_stage(h, c.merge_stages[i], ch, "merge.s" + std::to_string(i), lookup);
    ch = c.merge_stages[i].channels;
  }

  h = ad::global_avg_pool(h);
  for (size_t i = 0; i < c.head_hidden.size(); ++i) {
    const std::string prefix = "head.h" + std::to_string(i);
    h = ad::dense(h, lookup(prefix + ".weight"), lookup(prefix + ".bias"));
    h = ad::hard_swish(h);
    if (c.dropout_rate > 0)
      h = ad::dropout(h, c.dropout_rate, training, mix_seed(dropout_seed, static_cast<std::uint64_t>(i)));
  }
  r.logits = ad::dense(h, lookup("head.logits.weight"), lookup("head.logits.bias"));
  return r;
}

inline ForwardResult forward_graph(const Model& m, Tape<double>& tape, const Tensor<double>& xz,
                                   const Tensor<double>& yz, bool training,
                                   std::uint64_t dropout_seed = 0) {
  return forward_graph(m, tape, xz, yz, training, dropout_seed, training);
}

// Deterministic inference: fresh tape, no gradients, dropout disabled.
inline Tensor<double> forward_eval(const Model& m, const Tensor<double>& xz,
                                   const Tensor<double>& yz) {
  Tape<double> tape;
  ForwardResult r = forward_graph(m, tape, xz, yz, false);
  return tape.value(r.logits.id);
}

// --- image plumbing ---------------------------------------------------------

inline Tensor<double> image_tensor(const PixelMap& map) {
  Tensor<double> t({1, 1, map.height, map.width});
  for (size_t i = 0; i < map.intensities.size(); ++i)
    t.data()[i] = static_cast<double>(map.intensities[i]);
  return t;
}

inline Tensor<double> stack_images(const std::vector<const PixelMap*>& maps) {
  if (maps.empty()) throw DomainError("stack_images: empty batch");
  const int h = maps[0]->height, w = maps[0]->width;
  Tensor<double> t({static_cast<int>(maps.size()), 1, h, w});
  for (size_t n = 0; n < maps.size(); ++n) {
    const PixelMap& m = *maps[n];
    if (m.height != h || m.width != w)
      throw ShapeError("stack_images: image " + std::to_string(n) + " is " +
                       std::to_string(m.width) + "x" + std::to_string(m.height) + ", want " +
                       std::to_string(w) + "x" + std::to_string(h));
    for (size_t i = 0; i < m.intensities.size(); ++i)
      t.data()[n * m.intensities.size() + i] = static_cast<double>(m.intensities[i]);
  }
  return t;
}

}  // namespace nupix
