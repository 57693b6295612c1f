#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <vector>

#include "nupix/autodiff.hpp"
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

// Push values away from activation kinks so central differences stay valid.
void avoid_kinks(Tensor<double>& t, const std::vector<double>& kinks, double margin = 0.05) {
  for (std::size_t i = 0; i < t.numel(); ++i)
    for (double k : kinks)
      if (std::abs(t[i] - k) < margin) t[i] = k + (t[i] >= k ? margin : -margin);
}

using GraphFn = std::function<Vd(Tape<double>&, std::vector<Vd>&)>;

double loss_value(const std::vector<Tensor<double>>& inputs, const GraphFn& fn) {
  Tape<double> tape;
  std::vector<Vd> vars;
  vars.reserve(inputs.size());
  for (const auto& t : inputs) vars.push_back(make_leaf(tape, t, true));
  return fn(tape, vars).value()[0];
}

// Worst relative error between tape gradients and central differences,
// taken over every element of every input.
double max_fd_rel_err(std::vector<Tensor<double>> inputs, const GraphFn& fn, double h = 1e-5) {
  Tape<double> tape;
  std::vector<Vd> vars;
  vars.reserve(inputs.size());
  for (const auto& t : inputs) vars.push_back(make_leaf(tape, t, true));
  Vd loss = fn(tape, vars);
  auto grads = tape.backward(loss.id);

  double worst = 0.0;
  for (std::size_t p = 0; p < inputs.size(); ++p) {
    for (std::size_t i = 0; i < inputs[p].numel(); ++i) {
      const double keep = inputs[p][i];
      inputs[p][i] = keep + h;
      const double up = loss_value(inputs, fn);
      inputs[p][i] = keep - h;
      const double dn = loss_value(inputs, fn);
      inputs[p][i] = keep;
      const double fd = (up - dn) / (2.0 * h);
      const double an = grads[static_cast<std::size_t>(vars[p].id)][i];
      const double denom = std::max({std::abs(fd), std::abs(an), 1e-8});
      worst = std::max(worst, std::abs(fd - an) / denom);
    }
  }
  return worst;
}

// Weight the output elements distinctly so every one feeds the scalar loss.
Vd weighted_sum(Tape<double>& tape, Vd out, Rng& rng) {
  Tensor<double> w(out.value().shape());
  for (std::size_t i = 0; i < w.numel(); ++i) w[i] = rng.uniform(0.5, 1.5);
  Vd wv = make_leaf(tape, w, false);
  return ad::sum(ad::mul(out, wv));
}

}  // namespace

TEST_CASE("add and mul forward values") {
  Tape<double> tape;
  Vd a = make_leaf(tape, Tensor<double>({3}, {1.0, 2.0, 3.0}), true);
  Vd b = make_leaf(tape, Tensor<double>({3}, {10.0, 20.0, 30.0}), true);
  Vd s = ad::add(a, b);
  Vd p = ad::mul(a, b);
  CHECK(s.value()[0] == 11.0);
  CHECK(s.value()[2] == 33.0);
  CHECK(p.value()[1] == 40.0);
}

TEST_CASE("elementwise op gradients match finite differences") {
  Rng rng(42);
  std::uint64_t wseed = 77;
  auto check = [&](const char* name, const GraphFn& fn, std::vector<Tensor<double>> inputs,
                   double tol = 1e-4) {
    INFO(name);
    CHECK(max_fd_rel_err(std::move(inputs), fn) < tol);
  };

  check("add", [&](Tape<double>& t, std::vector<Vd>& v) {
    Rng wr(wseed);
    return weighted_sum(t, ad::add(v[0], v[1]), wr);
  }, {random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)});

  check("mul", [&](Tape<double>& t, std::vector<Vd>& v) {
    Rng wr(wseed);
    return weighted_sum(t, ad::mul(v[0], v[1]), wr);
  }, {random_tensor({4}, rng), random_tensor({4}, rng)});

  check("scale", [&](Tape<double>& t, std::vector<Vd>& v) {
    Rng wr(wseed);
    return weighted_sum(t, ad::scale(v[0], -2.5), wr);
  }, {random_tensor({5}, rng)});

  check("sum", [&](Tape<double>&, std::vector<Vd>& v) { return ad::sum(v[0]); },
        {random_tensor({3, 2}, rng)});

  Tensor<double> relu_in = random_tensor({24}, rng, -3.0, 9.0);
  avoid_kinks(relu_in, {0.0, 6.0});
  check("relu6", [&](Tape<double>& t, std::vector<Vd>& v) {
    Rng wr(wseed);
    return weighted_sum(t, ad::relu6(v[0]), wr);
  }, {relu_in});

  Tensor<double> hs_in = random_tensor({24}, rng, -5.0, 5.0);
  avoid_kinks(hs_in, {-3.0, 3.0});
  check("hard_swish", [&](Tape<double>& t, std::vector<Vd>& v) {
    Rng wr(wseed);
    return weighted_sum(t, ad::hard_swish(v[0]), wr);
  }, {hs_in});

  check("sigmoid", [&](Tape<double>& t, std::vector<Vd>& v) {
    Rng wr(wseed);
    return weighted_sum(t, ad::sigmoid(v[0]), wr);
  }, {random_tensor({10}, rng, -4.0, 4.0)});
}

TEST_CASE("relu6 and hard_swish value tables") {
  Tape<double> tape;
  Vd x = make_leaf(tape, Tensor<double>({5}, {-1.0, 0.0, 3.0, 6.0, 7.5}), true);
  Vd r = ad::relu6(x);
  CHECK(r.value()[0] == 0.0);
  CHECK(r.value()[1] == 0.0);
  CHECK(r.value()[2] == 3.0);
  CHECK(r.value()[3] == 6.0);
  CHECK(r.value()[4] == 6.0);

  Vd h = make_leaf(tape, Tensor<double>({4}, {-4.0, -1.0, 0.5, 4.0}), true);
  Vd hs = ad::hard_swish(h);
  CHECK(hs.value()[0] == 0.0);
  CHECK(hs.value()[1] == Catch::Approx(-1.0 * 2.0 / 6.0));
  CHECK(hs.value()[2] == Catch::Approx(0.5 * 3.5 / 6.0));
  CHECK(hs.value()[3] == 4.0);
}

TEST_CASE("relu6 kink gradient is zero") {
  Tape<double> tape;
  Vd x = make_leaf(tape, Tensor<double>({2}, {0.0, 6.0}), true);
  Vd loss = ad::sum(ad::relu6(x));
  auto grads = tape.backward(loss.id);
  CHECK(grads[static_cast<std::size_t>(x.id)][0] == 0.0);
  CHECK(grads[static_cast<std::size_t>(x.id)][1] == 0.0);
}

TEST_CASE("conv2d forward matches a hand-worked example") {
  Tape<double> tape;
  Vd x = make_leaf(tape,
                   Tensor<double>({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9}), false);
  Vd w = make_leaf(tape, Tensor<double>({1, 1, 2, 2}, {1, 0, 0, 1}), false);
  Vd y = ad::conv2d(x, w, 1, 0);
  REQUIRE(y.value().shape() == std::vector<int>{1, 1, 2, 2});
  CHECK(y.value()[0] == 6.0);   // 1 + 5
  CHECK(y.value()[1] == 8.0);   // 2 + 6
  CHECK(y.value()[2] == 12.0);  // 4 + 8
  CHECK(y.value()[3] == 14.0);  // 5 + 9
}

TEST_CASE("conv2d with padding counts only in-bounds taps") {
  Tape<double> tape;
  Vd x = make_leaf(tape, Tensor<double>({1, 1, 2, 2}, {1, 2, 3, 4}), false);
  Vd w = make_leaf(tape, Tensor<double>({1, 1, 3, 3},
                                        {1, 1, 1, 1, 1, 1, 1, 1, 1}), false);
  Vd y = ad::conv2d(x, w, 1, 1);
  REQUIRE(y.value().shape() == std::vector<int>{1, 1, 2, 2});
  // Each output is the sum of the in-bounds 2x2 patch.
  CHECK(y.value()[0] == 10.0);
  CHECK(y.value()[3] == 10.0);
}

TEST_CASE("conv2d gradients match finite differences") {
  Rng rng(7);
  std::uint64_t wseed = 13;

  SECTION("dense convolution with stride and padding") {
    auto fn = [&](Tape<double>& t, std::vector<Vd>& v) {
      Rng wr(wseed);
      return weighted_sum(t, ad::conv2d(v[0], v[1], 2, 1), wr);
    };
    CHECK(max_fd_rel_err({random_tensor({2, 3, 5, 6}, rng), random_tensor({4, 3, 3, 3}, rng)},
                         fn) < 1e-4);
  }

  SECTION("grouped convolution") {
    auto fn = [&](Tape<double>& t, std::vector<Vd>& v) {
      Rng wr(wseed);
      return weighted_sum(t, ad::conv2d(v[0], v[1], 1, 1, 2), wr);
    };
    CHECK(max_fd_rel_err({random_tensor({1, 4, 4, 4}, rng), random_tensor({6, 2, 3, 3}, rng)},
                         fn) < 1e-4);
  }

  SECTION("depthwise convolution") {
    auto fn = [&](Tape<double>& t, std::vector<Vd>& v) {
      Rng wr(wseed);
      return weighted_sum(t, ad::conv2d(v[0], v[1], 1, 1, 3), wr);
    };
    CHECK(max_fd_rel_err({random_tensor({2, 3, 4, 4}, rng), random_tensor({3, 1, 3, 3}, rng)},
                         fn) < 1e-4);
  }

  SECTION("pointwise convolution") {
    auto fn = [&](Tape<double>& t, std::vector<Vd>& v) {
      Rng wr(wseed);
      return weighted_sum(t, ad::conv2d(v[0], v[1], 1, 0), wr);
    };
    CHECK(max_fd_rel_err({random_tensor({2, 5, 3, 3}, rng), random_tensor({4, 5, 1, 1}, rng)},
                         fn) < 1e-4);
  }
}

TEST_CASE("conv2d rejects mismatched shapes with both shapes named") {
  Tape<double> tape;
  Vd x = make_leaf(tape, Tensor<double>({1, 3, 4, 4}), false);
  Vd w = make_leaf(tape, Tensor<double>({2, 4, 3, 3}), false);
  try {
    ad::conv2d(x, w, 1, 0);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[1, 3, 4, 4]") != std::string::npos);
    CHECK(msg.find("[2, 4, 3, 3]") != std::string::npos);
  }
}

TEST_CASE("conv2d rejects kernels larger than the padded input") {
  Tape<double> tape;
  Vd x = make_leaf(tape, Tensor<double>({1, 1, 2, 2}), false);
  Vd w = make_leaf(tape, Tensor<double>({1, 1, 5, 5}), false);
  CHECK_THROWS_AS(ad::conv2d(x, w, 1, 0), ShapeError);
}

TEST_CASE("dense forward matches a hand-worked example") {
  Tape<double> tape;
  Vd x = make_leaf(tape, Tensor<double>({1, 3}, {1.0, 2.0, 3.0}), false);
  Vd w = make_leaf(tape, Tensor<double>({2, 3}, {1, 0, 0, 0, 1, 1}), false);
  Vd b = make_leaf(tape, Tensor<double>({2}, {0.5, -0.5}), false);
  Vd y = ad::dense(x, w, b);
  REQUIRE(y.value().shape() == std::vector<int>{1, 2});
  CHECK(y.value()[0] == 1.5);
  CHECK(y.value()[1] == 4.5);
}

TEST_CASE("structured op gradients match finite differences") {
  Rng rng(99);
  std::uint64_t wseed = 5;

  SECTION("dense") {
    auto fn = [&](Tape<double>& t, std::vector<Vd>& v) {
      Rng wr(wseed);
      return weighted_sum(t, ad::dense(v[0], v[1], v[2]), wr);
    };
    CHECK(max_fd_rel_err({random_tensor({3, 4}, rng), random_tensor({2, 4}, rng),
                          random_tensor({2}, rng)},
                         fn) < 1e-4);
  }

  SECTION("bias_channels on 4-d input") {
    auto fn = [&](Tape<double>& t, std::vector<Vd>& v) {
      Rng wr(wseed);
      return weighted_sum(t, ad::bias_channels(v[0], v[1]), wr);
    };
    CHECK(max_fd_rel_err({random_tensor({2, 3, 2, 2}, rng), random_tensor({3}, rng)}, fn) <
          1e-4);
  }

  SECTION("global_avg_pool") {
    auto fn = [&](Tape<double>& t, std::vector<Vd>& v) {
      Rng wr(wseed);
      return weighted_sum(t, ad::global_avg_pool(v[0]), wr);
    };
    CHECK(max_fd_rel_err({random_tensor({2, 3, 4, 5}, rng)}, fn) < 1e-4);
  }

  SECTION("concat_channels") {
    auto fn = [&](Tape<double>& t, std::vector<Vd>& v) {
      Rng wr(wseed);
      return weighted_sum(t, ad::concat_channels(v[0], v[1]), wr);
    };
    CHECK(max_fd_rel_err({random_tensor({2, 2, 3, 3}, rng), random_tensor({2, 3, 3, 3}, rng)},
                         fn) < 1e-4);
  }

  SECTION("scale_channels") {
    auto fn = [&](Tape<double>& t, std::vector<Vd>& v) {
      Rng wr(wseed);
      return weighted_sum(t, ad::scale_channels(v[0], v[1]), wr);
    };
    CHECK(max_fd_rel_err({random_tensor({2, 3, 2, 2}, rng), random_tensor({2, 3}, rng)}, fn) <
          1e-4);
  }

  SECTION("se_block end to end") {
    auto fn = [&](Tape<double>& t, std::vector<Vd>& v) {
      Rng wr(wseed);
      return weighted_sum(t, ad::se_block(v[0], v[1], v[2], v[3], v[4]), wr);
    };
    CHECK(max_fd_rel_err({random_tensor({1, 4, 3, 3}, rng), random_tensor({2, 4}, rng),
                          random_tensor({2}, rng), random_tensor({4, 2}, rng),
                          random_tensor({4}, rng)},
                         fn) < 1e-3);
  }
}

TEST_CASE("concat_channels keeps the first input's channels first") {
  Tape<double> tape;
  Tensor<double> a({1, 1, 1, 2}, {1.0, 2.0});
  Tensor<double> b({1, 2, 1, 2}, {10.0, 20.0, 30.0, 40.0});
  Vd out = ad::concat_channels(make_leaf(tape, a, false), make_leaf(tape, b, false));
  REQUIRE(out.value().shape() == std::vector<int>{1, 3, 1, 2});
  CHECK(out.value()[0] == 1.0);
  CHECK(out.value()[1] == 2.0);
  CHECK(out.value()[2] == 10.0);
  CHECK(out.value()[5] == 40.0);
}

TEST_CASE("dropout in eval mode is the identity") {
  Tape<double> tape;
  Rng rng(3);
  Tensor<double> x = random_tensor({50}, rng);
  Vd v = make_leaf(tape, x, true);
  Vd out = ad::dropout(v, 0.5, false, 123);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(out.value()[i] == x[i]);
}

TEST_CASE("dropout zeroes a fraction and rescales survivors") {
  Tape<double> tape;
  Tensor<double> x({10000});
  x.fill(1.0);
  Vd v = make_leaf(tape, x, true);
  const double rate = 0.3;
  Vd out = ad::dropout(v, rate, true, 555);
  int dropped = 0;
  double total = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double o = out.value()[i];
    if (o == 0.0) {
      ++dropped;
    } else {
      CHECK(o == Catch::Approx(1.0 / (1.0 - rate)));
      total += o;
    }
  }
  CHECK(std::abs(static_cast<double>(dropped) / 10000.0 - rate) < 0.02);
  // Inverted scaling keeps the expectation near the input sum.
  CHECK(total == Catch::Approx(10000.0).epsilon(0.03));
}

TEST_CASE("dropout mask is reproducible and differentiable") {
  std::uint64_t seed = 2468;
  auto fn = [seed](Tape<double>& t, std::vector<Vd>& v) {
    Rng wr(1);
    Vd d = ad::dropout(v[0], 0.4, true, seed);
    Tensor<double> w(d.value().shape());
    for (std::size_t i = 0; i < w.numel(); ++i) w[i] = wr.uniform(0.5, 1.5);
    return ad::sum(ad::mul(d, make_leaf(t, w, false)));
  };
  Rng rng(11);
  CHECK(max_fd_rel_err({random_tensor({40}, rng)}, fn) < 1e-4);

  Tape<double> t1, t2;
  Tensor<double> x = random_tensor({64}, rng);
  Vd o1 = ad::dropout(make_leaf(t1, x, false), 0.4, true, seed);
  Vd o2 = ad::dropout(make_leaf(t2, x, false), 0.4, true, seed);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(o1.value()[i] == o2.value()[i]);
}

TEST_CASE("dropout rejects rates outside the unit interval") {
  Tape<double> tape;
  Vd v = make_leaf(tape, Tensor<double>({4}), true);
  CHECK_THROWS_AS(ad::dropout(v, 1.0, true, 1), DomainError);
  CHECK_THROWS_AS(ad::dropout(v, -0.1, true, 1), DomainError);
}

TEST_CASE("softmax cross-entropy against a direct computation") {
  Tape<double> tape;
  Tensor<double> z({2, 3}, {1.0, 2.0, 0.5, -0.5, 0.0, 1.5});
  std::vector<int> labels{1, 2};
  Vd logits = make_leaf(tape, z, true);
  Vd loss = ad::softmax_cross_entropy(logits, labels);

  // Direct: -mean(log softmax[label]).
  double expect = 0.0;
  for (int i = 0; i < 2; ++i) {
    double denom = 0.0;
    for (int j = 0; j < 3; ++j) denom += std::exp(z.at2(i, j));
    expect -= std::log(std::exp(z.at2(i, labels[static_cast<std::size_t>(i)])) / denom);
  }
  expect /= 2.0;
  CHECK(loss.value()[0] == Catch::Approx(expect).epsilon(1e-12));

  // Analytic gradient is (softmax - onehot) / N.
  auto grads = tape.backward(loss.id);
  for (int i = 0; i < 2; ++i) {
    double denom = 0.0;
    for (int j = 0; j < 3; ++j) denom += std::exp(z.at2(i, j));
    for (int j = 0; j < 3; ++j) {
      const double p = std::exp(z.at2(i, j)) / denom;
      const double onehot = j == labels[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
      CHECK(grads[static_cast<std::size_t>(logits.id)].at2(i, j) ==
            Catch::Approx((p - onehot) / 2.0).epsilon(1e-10));
    }
  }
}

TEST_CASE("softmax cross-entropy gradients match finite differences") {
  Rng rng(17);
  std::vector<int> labels{0, 2, 1};
  auto fn = [&labels](Tape<double>&, std::vector<Vd>& v) {
    return ad::softmax_cross_entropy(v[0], labels);
  };
  CHECK(max_fd_rel_err({random_tensor({3, 3}, rng, -2.0, 2.0)}, fn) < 1e-4);
}

TEST_CASE("softmax cross-entropy is stable under large logit shifts") {
  Tape<double> tape;
  Tensor<double> z({1, 3}, {1000.0, 1001.0, 999.0});
  Vd loss = ad::softmax_cross_entropy(make_leaf(tape, z, true), std::vector<int>{1});
  // Same as softmax of (0, 1, -1) at label 1.
  const double denom = std::exp(-1.0) + 1.0 + std::exp(-2.0);
  CHECK(loss.value()[0] == Catch::Approx(-std::log(1.0 / denom)));
  CHECK(std::isfinite(loss.value()[0]));
}

TEST_CASE("softmax cross-entropy validates labels and shape") {
  Tape<double> tape;
  Vd ok = make_leaf(tape, Tensor<double>({2, 3}), true);
  CHECK_THROWS_AS(ad::softmax_cross_entropy(ok, std::vector<int>{0}), ShapeError);
  CHECK_THROWS_AS(ad::softmax_cross_entropy(ok, std::vector<int>{0, 3}), DomainError);
  Vd bad = make_leaf(tape, Tensor<double>({6}), true);
  CHECK_THROWS_AS(ad::softmax_cross_entropy(bad, std::vector<int>{0}), ShapeError);
}

TEST_CASE("backward demands a scalar loss") {
  Tape<double> tape;
  Vd v = make_leaf(tape, Tensor<double>({2, 2}), true);
  Vd doubled = ad::scale(v, 2.0);
  CHECK_THROWS_AS(tape.backward(doubled.id), ShapeError);
}

TEST_CASE("nodes off the loss path get zero gradients") {
  Tape<double> tape;
  Vd used = make_leaf(tape, Tensor<double>({3}, {1.0, 2.0, 3.0}), true);
  Vd unused = make_leaf(tape, Tensor<double>({2}, {5.0, 6.0}), true);
  Vd dangling = ad::scale(unused, 3.0);
  Vd loss = ad::sum(used);
  auto grads = tape.backward(loss.id);
  REQUIRE(grads[static_cast<std::size_t>(unused.id)].numel() == 2);
  CHECK(grads[static_cast<std::size_t>(unused.id)][0] == 0.0);
  CHECK(grads[static_cast<std::size_t>(unused.id)][1] == 0.0);
  CHECK(grads[static_cast<std::size_t>(dangling.id)][0] == 0.0);
  for (std::size_t i = 0; i < 3; ++i)
    CHECK(grads[static_cast<std::size_t>(used.id)][i] == 1.0);
}

TEST_CASE("needs_grad false blocks gradient flow but not values") {
  Tape<double> tape;
  Vd frozen = make_leaf(tape, Tensor<double>({2}, {2.0, 3.0}), false);
  Vd live = make_leaf(tape, Tensor<double>({2}, {4.0, 5.0}), true);
  Vd prod = ad::mul(frozen, live);
  Vd loss = ad::sum(prod);
  CHECK(loss.value()[0] == 23.0);
  auto grads = tape.backward(loss.id);
  CHECK(grads[static_cast<std::size_t>(frozen.id)][0] == 0.0);
  CHECK(grads[static_cast<std::size_t>(frozen.id)][1] == 0.0);
  CHECK(grads[static_cast<std::size_t>(live.id)][0] == 2.0);
  CHECK(grads[static_cast<std::size_t>(live.id)][1] == 3.0);
}

TEST_CASE("gradients accumulate across fan-out") {
  Tape<double> tape;
  Vd x = make_leaf(tape, Tensor<double>({1}, {3.0}), true);
  // loss = x*x + 2x: d/dx = 2x + 2 = 8 at x=3.
  Vd loss = ad::sum(ad::add(ad::mul(x, x), ad::scale(x, 2.0)));
  CHECK(loss.value()[0] == 15.0);
  auto grads = tape.backward(loss.id);
  CHECK(grads[static_cast<std::size_t>(x.id)][0] == 8.0);
}

TEST_CASE("replaying a graph is bit-identical") {
  Rng rng(1234);
  Tensor<double> x = random_tensor({1, 2, 4, 4}, rng);
  Tensor<double> w = random_tensor({3, 2, 3, 3}, rng);
  auto run = [&](std::vector<double>& grad_out) {
    Tape<double> tape;
    Vd xv = make_leaf(tape, x, true);
    Vd wv = make_leaf(tape, w, true);
    Vd loss = ad::sum(ad::hard_swish(ad::conv2d(xv, wv, 1, 1)));
    auto grads = tape.backward(loss.id);
    grad_out = grads[static_cast<std::size_t>(wv.id)].data();
    return loss.value()[0];
  };
  std::vector<double> g1, g2;
  const double l1 = run(g1);
  const double l2 = run(g2);
  CHECK(l1 == l2);
  REQUIRE(g1.size() == g2.size());
  for (std::size_t i = 0; i < g1.size(); ++i) CHECK(g1[i] == g2[i]);
}

TEST_CASE("softmax_rows normalizes and orders like the logits") {
  Tensor<double> z({2, 3}, {0.0, 1.0, -1.0, 5.0, 5.0, 5.0});
  auto p = ad::softmax_rows(z);
  double row0 = p.at2(0, 0) + p.at2(0, 1) + p.at2(0, 2);
  CHECK(row0 == Catch::Approx(1.0).epsilon(1e-12));
  CHECK(p.at2(0, 1) > p.at2(0, 0));
  CHECK(p.at2(0, 0) > p.at2(0, 2));
  CHECK(p.at2(1, 0) == Catch::Approx(1.0 / 3.0));
}
