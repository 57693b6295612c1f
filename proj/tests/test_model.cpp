#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "nupix/autodiff.hpp"
#include "nupix/model.hpp"
#include "nupix/rng.hpp"
#include "nupix/tensor.hpp"

using namespace nupix;
using Vd = Var<double>;

namespace {

Tensor<double> random_tensor(const std::vector<int>& shape, Rng& rng, double lo = -1.0,
                             double hi = 1.0) {
  Tensor<double> t(shape);
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// Closed-form scalar count of one inverted residual stage, written out from
// first principles as an oracle for the enumeration-based count.
std::size_t stage_scalar_count(int in_ch, const StageSpec& s, int reduction) {
  std::size_t n = 0;
  const std::size_t e = static_cast<std::size_t>(in_ch) * s.expansion;
  if (s.expansion > 1) n += e * in_ch + e;
  n += e * s.kernel * s.kernel + e;
  if (s.use_se) {
    const std::size_t mid = e / static_cast<std::size_t>(reduction);
    n += mid * e + mid;
    n += e * mid + e;
  }
  n += static_cast<std::size_t>(s.channels) * e + s.channels;
  return n;
}

std::size_t closed_form_count(const ModelConfig& c) {
  std::size_t branch = static_cast<std::size_t>(c.stem_channels) * c.stem_kernel * c.stem_kernel +
                       c.stem_channels;
  int ch = c.stem_channels;
  for (const auto& s : c.branch_stages) {
    branch += stage_scalar_count(ch, s, c.se_reduction);
    ch = s.channels;
  }
  std::size_t n = c.shared_branches ? branch : 2 * branch;
  ch *= 2;
  for (const auto& s : c.merge_stages) {
    n += stage_scalar_count(ch, s, c.se_reduction);
    ch = s.channels;
  }
  int features = ch;
  for (int hsz : c.head_hidden) {
    n += static_cast<std::size_t>(hsz) * features + hsz;
    features = hsz;
  }
  n += static_cast<std::size_t>(c.num_classes) * features + c.num_classes;
  return n;
}

double eval_ce_loss(const Model& m, const Tensor<double>& xz, const Tensor<double>& yz,
                    int label) {
  Tensor<double> p = ad::softmax_rows(forward_eval(m, xz, yz));
  return -std::log(p.at2(0, label));
}

}  // namespace

TEST_CASE("desk reference parameter count matches the closed form") {
  ModelConfig cfg = ModelConfig::desk_reference();
  Model m = build_model(cfg, 1);

  // Hand-derived total: stem 80, stages 152 + 1688 + 5416, merge 36176, head 2307.
  CHECK(closed_form_count(cfg) == 45819u);
  CHECK(m.param_count() == 45819u);

  std::size_t enumerated = 0;
  std::set<std::string> names;
  for (const auto& p : m.params) {
    enumerated += p.value.numel();
    names.insert(p.name);
  }
  CHECK(enumerated == closed_form_count(cfg));
  CHECK(names.size() == m.params.size());
}

TEST_CASE("expansion factor one omits the expand convolution") {
  ModelConfig cfg = ModelConfig::desk_reference();
  Model m = build_model(cfg, 1);
  CHECK_THROWS_AS(m.find("branch.s0.expand.weight"), ConfigError);
  CHECK(m.find("branch.s1.expand.weight") >= 0);
}

TEST_CASE("full-scale reference builds with a few million parameters") {
  ModelConfig cfg = ModelConfig::full_scale_reference();
  cfg.validate();
  Model m = build_model(cfg, 1);
  CHECK(m.param_count() == closed_form_count(cfg));
  CHECK(m.param_count() > 3000000u);
  CHECK(m.param_count() < 4000000u);
}

TEST_CASE("unshared branches double the branch parameters") {
  ModelConfig cfg = ModelConfig::desk_reference();
  cfg.shared_branches = false;
  Model m = build_model(cfg, 1);
  CHECK(m.param_count() == closed_form_count(cfg));
  const std::size_t branch_once = 80u + 152u + 1688u + 5416u;
  CHECK(m.param_count() == 45819u + branch_once);
  CHECK(m.find("branch_yz.stem.weight") >= 0);
}

TEST_CASE("same seed and config give bit-identical parameters") {
  ModelConfig cfg = ModelConfig::desk_reference(16);
  Model a = build_model(cfg, 42);
  Model b = build_model(cfg, 42);
  Model c = build_model(cfg, 43);
  REQUIRE(a.params.size() == b.params.size());
  bool identical = true;
  for (std::size_t i = 0; i < a.params.size(); ++i)
    for (std::size_t j = 0; j < a.params[i].value.numel(); ++j)
      identical = identical && a.params[i].value[j] == b.params[i].value[j];
  CHECK(identical);

  bool any_diff = false;
  for (std::size_t i = 0; i < a.params.size(); ++i)
    for (std::size_t j = 0; j < a.params[i].value.numel(); ++j)
      any_diff = any_diff || a.params[i].value[j] != c.params[i].value[j];
  CHECK(any_diff);
}

TEST_CASE("weights look He-initialized and biases start at zero") {
  Model m = build_model(ModelConfig::desk_reference(), 7);
  const Tensor<double>& w = m.param("merge.s0.expand.weight");  // fan_in 48, 9216 weights
  double sum = 0, sq = 0;
  for (std::size_t i = 0; i < w.numel(); ++i) {
    sum += w[i];
    sq += w[i] * w[i];
  }
  const double mean = sum / static_cast<double>(w.numel());
  const double var = sq / static_cast<double>(w.numel()) - mean * mean;
  CHECK(std::abs(mean) < 0.01);
  CHECK(var == Catch::Approx(2.0 / 48.0).epsilon(0.1));
  const Tensor<double>& b = m.param("merge.s0.expand.bias");
  for (std::size_t i = 0; i < b.numel(); ++i) CHECK(b[i] == 0.0);
}

TEST_CASE("eval forward is pure and emits three logits") {
  Model m = build_model(ModelConfig::desk_reference(16), 5);
  Rng rng(11);
  Tensor<double> a = random_tensor({1, 1, 16, 16}, rng, 0.0, 1.0);
  Tensor<double> b = random_tensor({1, 1, 16, 16}, rng, 0.0, 1.0);

  Tensor<double> l1 = forward_eval(m, a, b);
  Tensor<double> l2 = forward_eval(m, a, b);
  REQUIRE(l1.ndim() == 2);
  CHECK(l1.dim(0) == 1);
  CHECK(l1.dim(1) == 3);
  for (int j = 0; j < 3; ++j) {
    CHECK(l1.at2(0, j) == l2.at2(0, j));
    CHECK(std::isfinite(l1.at2(0, j)));
  }

  SECTION("constant zero input is deterministic too") {
    Tensor<double> z({1, 1, 16, 16});
    Tensor<double> z1 = forward_eval(m, z, z);
    Tensor<double> z2 = forward_eval(m, z, z);
    for (int j = 0; j < 3; ++j) {
      CHECK(z1.at2(0, j) == z2.at2(0, j));
      CHECK(std::isfinite(z1.at2(0, j)));
    }
  }
}

TEST_CASE("swapping the view order changes the logits") {
  Model m = build_model(ModelConfig::desk_reference(16), 9);
  Rng rng(13);
  Tensor<double> a = random_tensor({1, 1, 16, 16}, rng, 0.0, 1.0);
  Tensor<double> b = random_tensor({1, 1, 16, 16}, rng, 0.0, 1.0);
  Tensor<double> ab = forward_eval(m, a, b);
  Tensor<double> ba = forward_eval(m, b, a);
  bool differs = false;
  for (int j = 0; j < 3; ++j) differs = differs || ab.at2(0, j) != ba.at2(0, j);
  CHECK(differs);
}

TEST_CASE("batched eval equals independent single-pair forwards") {
  Model m = build_model(ModelConfig::desk_reference(16), 21);
  Rng rng(17);
  Tensor<double> xz = random_tensor({3, 1, 16, 16}, rng, 0.0, 1.0);
  Tensor<double> yz = random_tensor({3, 1, 16, 16}, rng, 0.0, 1.0);
  Tensor<double> batch = forward_eval(m, xz, yz);
  REQUIRE(batch.dim(0) == 3);

  for (int n = 0; n < 3; ++n) {
    Tensor<double> ax({1, 1, 16, 16}), ay({1, 1, 16, 16});
    for (int i = 0; i < 16 * 16; ++i) {
      ax.data()[static_cast<std::size_t>(i)] = xz.data()[static_cast<std::size_t>(n) * 256 + i];
      ay.data()[static_cast<std::size_t>(i)] = yz.data()[static_cast<std::size_t>(n) * 256 + i];
    }
    Tensor<double> single = forward_eval(m, ax, ay);
    for (int j = 0; j < 3; ++j) CHECK(single.at2(0, j) == batch.at2(n, j));
  }
}

TEST_CASE("input shape violations are reported") {
  Model m = build_model(ModelConfig::desk_reference(16), 3);
  Tensor<double> good({1, 1, 16, 16});
  Tensor<double> wrong({1, 1, 8, 8});
  Tensor<double> batch2({2, 1, 16, 16});
  CHECK_THROWS_AS(forward_eval(m, wrong, good), ShapeError);
  CHECK_THROWS_AS(forward_eval(m, good, wrong), ShapeError);
  CHECK_THROWS_AS(forward_eval(m, good, batch2), ShapeError);
}

TEST_CASE("skip connection reduces to identity when the projection is zeroed") {
  // Stage 0 of the desk branch runs at stride 1 here, so in/out channels match.
  ModelConfig cfg = ModelConfig::desk_reference(16);
  cfg.branch_stages[0].stride = 1;
  Model m = build_model(cfg, 31);
  m.param("branch.s0.project.weight").fill(0.0);
  m.param("branch.s0.project.bias").fill(0.0);

  Tape<double> tape;
  std::vector<Vd> vars;
  for (const auto& p : m.params) vars.push_back(make_leaf(tape, p.value, false));
  detail::ParamLookup lookup{&m, &vars};

  Rng rng(23);
  Tensor<double> x = random_tensor({1, 8, 6, 6}, rng);
  Vd vx = make_leaf(tape, x, false);
  Vd out = detail::run_stage(vx, cfg.branch_stages[0], 8, "branch.s0", lookup);
  REQUIRE(out.value().same_shape(x));
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(out.value()[i] == x[i]);
}

TEST_CASE("stride-two stages halve the spatial size and drop the skip") {
  ModelConfig cfg = ModelConfig::desk_reference(16);
  Model m = build_model(cfg, 31);
  Tape<double> tape;
  std::vector<Vd> vars;
  for (const auto& p : m.params) vars.push_back(make_leaf(tape, p.value, false));
  detail::ParamLookup lookup{&m, &vars};

  Rng rng(29);
  Tensor<double> x = random_tensor({1, 8, 6, 6}, rng);
  Vd vx = make_leaf(tape, x, false);
  Vd out = detail::run_stage(vx, cfg.branch_stages[1], 8, "branch.s1", lookup);
  CHECK(out.value().dim(1) == 16);
  CHECK(out.value().dim(2) == 3);
  CHECK(out.value().dim(3) == 3);
}

TEST_CASE("training dropout draws a reproducible mask stream") {
  ModelConfig cfg = ModelConfig::desk_reference(16);
  cfg.dropout_rate = 0.5;
  Model m = build_model(cfg, 8);
  Rng rng(37);
  Tensor<double> a = random_tensor({1, 1, 16, 16}, rng, 0.0, 1.0);
  Tensor<double> b = random_tensor({1, 1, 16, 16}, rng, 0.0, 1.0);

  auto run = [&](bool training, std::uint64_t seed) {
    Tape<double> tape;
    ForwardResult r = forward_graph(m, tape, a, b, training, seed);
    return tape.value(r.logits.id);
  };

  Tensor<double> t1 = run(true, 77);
  Tensor<double> t2 = run(true, 77);
  Tensor<double> t3 = run(true, 78);
  Tensor<double> ev = run(false, 77);
  bool same_seed_equal = true, diff_seed_differs = false, train_vs_eval_differs = false;
  for (int j = 0; j < 3; ++j) {
    same_seed_equal = same_seed_equal && t1.at2(0, j) == t2.at2(0, j);
    diff_seed_differs = diff_seed_differs || t1.at2(0, j) != t3.at2(0, j);
    train_vs_eval_differs = train_vs_eval_differs || t1.at2(0, j) != ev.at2(0, j);
  }
  CHECK(same_seed_equal);
  CHECK(diff_seed_differs);
  CHECK(train_vs_eval_differs);
}

TEST_CASE("shared branches accumulate both views' gradients into one weight set") {
  ModelConfig shared_cfg = ModelConfig::desk_reference(16);
  Model ms = build_model(shared_cfg, 4);

  ModelConfig split_cfg = shared_cfg;
  split_cfg.shared_branches = false;
  Model mn = build_model(split_cfg, 99);
  for (auto& p : mn.params) {
    std::string source = p.name;
    if (source.rfind("branch_xz.", 0) == 0) source = "branch." + source.substr(10);
    if (source.rfind("branch_yz.", 0) == 0) source = "branch." + source.substr(10);
    p.value = ms.param(source);
  }

  Rng rng(41);
  Tensor<double> a = random_tensor({1, 1, 16, 16}, rng, 0.0, 1.0);
  Tensor<double> b = random_tensor({1, 1, 16, 16}, rng, 0.0, 1.0);

  auto grads_of = [&](const Model& m) {
    Tape<double> tape;
    ForwardResult r = forward_graph(m, tape, a, b, false, 0, true);
    Vd loss = ad::softmax_cross_entropy(r.logits, {1});
    auto grads = tape.backward(loss.id);
    std::vector<Tensor<double>> by_param;
    for (const auto& v : r.param_vars) by_param.push_back(grads[static_cast<std::size_t>(v.id)]);
    return by_param;
  };

  auto gs = grads_of(ms);
  auto gn = grads_of(mn);

  double worst = 0.0;
  for (std::size_t i = 0; i < ms.params.size(); ++i) {
    const std::string& name = ms.params[i].name;
    if (name.rfind("branch.", 0) == 0) {
      const std::string suffix = name.substr(7);
      const auto& gx = gn[static_cast<std::size_t>(mn.find("branch_xz." + suffix))];
      const auto& gy = gn[static_cast<std::size_t>(mn.find("branch_yz." + suffix))];
      for (std::size_t j = 0; j < gs[i].numel(); ++j)
        worst = std::max(worst, std::abs(gs[i][j] - (gx[j] + gy[j])));
    } else {
      const auto& g2 = gn[static_cast<std::size_t>(mn.find(name))];
      for (std::size_t j = 0; j < gs[i].numel(); ++j)
        worst = std::max(worst, std::abs(gs[i][j] - g2[j]));
    }
  }
  CHECK(worst < 1e-10);
}

TEST_CASE("full desk model gradient agrees with finite differences") {
  Model m = build_model(ModelConfig::desk_reference(), 6);
  Rng rng(43);
  Tensor<double> a = random_tensor({1, 1, 64, 64}, rng, 0.0, 1.0);
  Tensor<double> b = random_tensor({1, 1, 64, 64}, rng, 0.0, 1.0);
  const int label = 2;

  Tape<double> tape;
  ForwardResult r = forward_graph(m, tape, a, b, false, 0, true);
  Vd loss = ad::softmax_cross_entropy(r.logits, {label});
  auto grads = tape.backward(loss.id);

  const double h = 1e-5;
  int checked = 0;
  double worst = 0.0;
  Rng pick(47);
  while (checked < 50) {
    const auto pi = static_cast<std::size_t>(
        pick.uniform_int(0, static_cast<std::int64_t>(m.params.size()) - 1));
    const auto ei = static_cast<std::size_t>(
        pick.uniform_int(0, static_cast<std::int64_t>(m.params[pi].value.numel()) - 1));
    const double an = grads[static_cast<std::size_t>(r.param_vars[pi].id)][ei];

    double& slot = m.params[pi].value.data()[ei];
    const double keep = slot;
    slot = keep + h;
    const double up = eval_ce_loss(m, a, b, label);
    slot = keep - h;
    const double dn = eval_ce_loss(m, a, b, label);
    slot = keep;
    const double fd = (up - dn) / (2.0 * h);
    if (std::abs(fd) < 1e-7 && std::abs(an) < 1e-7) continue;  // too flat to resolve

    worst = std::max(worst, std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-6}));
    ++checked;
  }
  CHECK(worst < 1e-3);
}

TEST_CASE("config json round-trips and rejects unknown keys") {
  ModelConfig cfg = ModelConfig::desk_reference();
  cfg.init_seed = 77;
  const std::string text = model_config_json(cfg);
  ModelConfig back = model_config_from_json(text);
  CHECK(model_config_json(back) == text);
  CHECK(back.init_seed == 77u);
  CHECK(back.branch_stages.size() == 3);
  CHECK(back.branch_stages[1].use_se);
  CHECK(back.branch_stages[1].activation == Activation::HardSwish);

  CHECK_THROWS_WITH(model_config_from_json(R"({"surprise": 1})"),
                    Catch::Matchers::ContainsSubstring("surprise"));
  CHECK_THROWS_WITH(model_config_from_json(R"({"branch_stages": [{"kernels": 3}]})"),
                    Catch::Matchers::ContainsSubstring("kernels"));
  CHECK_THROWS_WITH(model_config_from_json(R"({"branch_stages": [{"activation": "gelu"}]})"),
                    Catch::Matchers::ContainsSubstring("gelu"));
  CHECK_THROWS_AS(model_config_from_json("{nope"), ConfigError);
  CHECK_THROWS_AS(model_config_from_json(R"({"image_size": "big"})"), ConfigError);
}

TEST_CASE("config hash identifies the architecture, not the seed") {
  ModelConfig a = ModelConfig::desk_reference();
  ModelConfig b = a;
  b.init_seed = 12345;
  CHECK(config_hash(a) == config_hash(b));

  ModelConfig c = a;
  c.branch_stages[2].channels = 32;
  CHECK(config_hash(a) != config_hash(c));
  CHECK(config_hash(a) != config_hash(ModelConfig::full_scale_reference()));
}

TEST_CASE("invalid configs report every offending field") {
  ModelConfig cfg = ModelConfig::desk_reference();
  cfg.se_reduction = 3;  // stage 1 expands 8 -> 32, not divisible by 3
  CHECK_THROWS_WITH(cfg.validate(), Catch::Matchers::ContainsSubstring("se_reduction"));

  ModelConfig bad = ModelConfig::desk_reference();
  bad.dropout_rate = 1.0;
  bad.num_classes = 2;
  bad.branch_stages[0].kernel = 4;
  bad.branch_stages[0].stride = 3;
  try {
    bad.validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("dropout_rate") != std::string::npos);
    CHECK(msg.find("num_classes") != std::string::npos);
    CHECK(msg.find("kernel") != std::string::npos);
    CHECK(msg.find("stride") != std::string::npos);
  }

  ModelConfig empty = ModelConfig::desk_reference();
  empty.branch_stages.clear();
  CHECK_THROWS_AS(empty.validate(), ConfigError);
  CHECK_THROWS_AS(build_model(empty, 1), ConfigError);
}

TEST_CASE("unknown parameter lookups fail loudly") {
  Model m = build_model(ModelConfig::desk_reference(16), 1);
  CHECK_THROWS_WITH(m.find("branch.s9.project.weight"),
                    Catch::Matchers::ContainsSubstring("branch.s9.project.weight"));
}

TEST_CASE("pixel maps convert to tensors") {
  PixelMap map;
  map.view = View::XZ;
  map.width = 2;
  map.height = 2;
  map.intensities = {0.1f, 0.2f, 0.3f, 0.4f};

  Tensor<double> t = image_tensor(map);
  REQUIRE(t.ndim() == 4);
  CHECK(t.dim(0) == 1);
  CHECK(t.dim(1) == 1);
  CHECK(t.at4(0, 0, 0, 0) == Catch::Approx(0.1));
  CHECK(t.at4(0, 0, 1, 1) == Catch::Approx(0.4));

  PixelMap other = map;
  Tensor<double> s = stack_images({&map, &other});
  CHECK(s.dim(0) == 2);
  CHECK(s.at4(1, 0, 0, 1) == Catch::Approx(0.2));

  PixelMap wrong = map;
  wrong.width = 4;
  wrong.height = 1;
  CHECK_THROWS_AS(stack_images({&map, &wrong}), ShapeError);
  CHECK_THROWS_AS(stack_images({}), DomainError);
}
