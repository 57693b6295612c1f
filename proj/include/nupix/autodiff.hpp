#pragma once

// Reverse-mode automatic differentiation over a tape of primitive operations.
// Nodes are recorded in construction order, which is already a topological
// order, so backward is a single reverse sweep visiting each node once.
// Forward and backward use plain serial loops: replaying a tape on the same
// inputs is bit-identical run to run.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "nupix/common.hpp"
#include "nupix/rng.hpp"
#include "nupix/tensor.hpp"

namespace nupix {

template <class T = double>
class Tape {
 public:
  // Backward closures see their own node id so they can read the stored
  // output value (handy for sigmoid, softmax, dropout masks kept implicit).
  using BackwardFn = std::function<void(int self, const Tensor<T>& grad_out, Tape<T>& tape,
                                        std::vector<Tensor<T>>& grads)>;

  struct Node {
    Tensor<T> value;
    BackwardFn backward;  // empty for leaves
    bool needs_grad = false;
  };

  int leaf(Tensor<T> value, bool requires_grad) {
    nodes_.push_back({std::move(value), nullptr, requires_grad});
    return static_cast<int>(nodes_.size()) - 1;
  }

  int record(Tensor<T> value, bool needs_grad, BackwardFn backward) {
    nodes_.push_back({std::move(value), std::move(backward), needs_grad});
    return static_cast<int>(nodes_.size()) - 1;
  }

  const Tensor<T>& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Add `delta` into the gradient slot of node `id`, allocating zeros first
  // if this is the first contribution.
  void accumulate(std::vector<Tensor<T>>& grads, int id, const std::vector<T>& delta) const {
    auto& g = grads[static_cast<std::size_t>(id)];
    if (g.empty()) g = Tensor<T>(value(id).shape());
    if (g.numel() != delta.size())
      throw ShapeError("gradient accumulation size mismatch for node " + std::to_string(id));
    for (std::size_t i = 0; i < delta.size(); ++i) g[i] += delta[i];
  }

  // Gradients of a scalar loss with respect to every node. Nodes that do not
  // influence the loss (or sit behind needs_grad = false) get zero tensors.
  std::vector<Tensor<T>> backward(int loss_id) {
    const auto& loss = value(loss_id);
    if (loss.numel() != 1)
      throw ShapeError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    std::vector<Tensor<T>> grads(nodes_.size());
    grads[static_cast<std::size_t>(loss_id)] = Tensor<T>::scalar(T(1));
    for (int id = loss_id; id >= 0; --id) {
      auto& node = nodes_[static_cast<std::size_t>(id)];
      auto& g = grads[static_cast<std::size_t>(id)];
      if (g.empty() || !node.backward || !node.needs_grad) continue;
      node.backward(id, g, *this, grads);
    }
    for (std::size_t id = 0; id < nodes_.size(); ++id)
      if (grads[id].empty()) grads[id] = Tensor<T>(nodes_[id].value.shape());
    return grads;
  }

 private:
  std::vector<Node> nodes_;
};

// Lightweight handle for graph building; copies are cheap.
template <class T = double>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;
  const Tensor<T>& value() const { return tape->value(id); }
  bool needs_grad() const { return tape->needs_grad(id); }
};

template <class T>
Var<T> make_leaf(Tape<T>& tape, Tensor<T> value, bool requires_grad) {
  return {&tape, tape.leaf(std::move(value), requires_grad)};
}

namespace ad {

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  if (!a.value().same_shape(b.value()))
    throw ShapeError("add: shape mismatch " + shape_str(a.value().shape()) + " vs " +
                     shape_str(b.value().shape()));
  Tensor<T> out(a.value().shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + b.value()[i];
  const int pa = a.id, pb = b.id;
  return {a.tape,
          a.tape->record(std::move(out), a.needs_grad() || b.needs_grad(),
                         [pa, pb](int, const Tensor<T>& g, Tape<T>& t,
                                  std::vector<Tensor<T>>& grads) {
                           if (t.needs_grad(pa)) t.accumulate(grads, pa, g.data());
                           if (t.needs_grad(pb)) t.accumulate(grads, pb, g.data());
                         })};
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  if (!a.value().same_shape(b.value()))
    throw ShapeError("mul: shape mismatch " + shape_str(a.value().shape()) + " vs " +
                     shape_str(b.value().shape()));
  Tensor<T> out(a.value().shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
  const int pa = a.id, pb = b.id;
  return {a.tape,
          a.tape->record(std::move(out), a.needs_grad() || b.needs_grad(),
                         [pa, pb](int, const Tensor<T>& g, Tape<T>& t,
                                  std::vector<Tensor<T>>& grads) {
                           const auto& va = t.value(pa);
                           const auto& vb = t.value(pb);
                           if (t.needs_grad(pa)) {
                             std::vector<T> d(g.numel());
                             for (std::size_t i = 0; i < d.size(); ++i) d[i] = g[i] * vb[i];
                             t.accumulate(grads, pa, d);
                           }
                           if (t.needs_grad(pb)) {
                             std::vector<T> d(g.numel());
                             for (std::size_t i = 0; i < d.size(); ++i) d[i] = g[i] * va[i];
                             t.accumulate(grads, pb, d);
                           }
                         })};
}

template <class T>
Var<T> scale(Var<T> a, T k) {
  Tensor<T> out(a.value().shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * k;
  const int pa = a.id;
  return {a.tape, a.tape->record(
                      std::move(out), a.needs_grad(),
                      [pa, k](int, const Tensor<T>& g, Tape<T>& t, std::vector<Tensor<T>>& grads) {
                        if (!t.needs_grad(pa)) return;
                        std::vector<T> d(g.numel());
                        for (std::size_t i = 0; i < d.size(); ++i) d[i] = g[i] * k;
                        t.accumulate(grads, pa, d);
                      })};
}

template <class T>
Var<T> sum(Var<T> a) {
  T total = 0;
  for (std::size_t i = 0; i < a.value().numel(); ++i) total += a.value()[i];
  const int pa = a.id;
  return {a.tape, a.tape->record(
                      Tensor<T>::scalar(total), a.needs_grad(),
                      [pa](int, const Tensor<T>& g, Tape<T>& t, std::vector<Tensor<T>>& grads) {
                        if (!t.needs_grad(pa)) return;
                        std::vector<T> d(t.value(pa).numel(), g[0]);
                        t.accumulate(grads, pa, d);
                      })};
}

// Elementwise activations. Kink subgradients take the value 0 at the relu6
// corners; hard_swish uses the derivative of the open middle interval.

template <class T>
Var<T> relu6(Var<T> a) {
  Tensor<T> out(a.value().shape());
  for (std::size_t i = 0; i < out.numel(); ++i)
    out[i] = std::min<T>(std::max<T>(a.value()[i], T(0)), T(6));
  const int pa = a.id;
  return {a.tape, a.tape->record(
                      std::move(out), a.needs_grad(),
                      [pa](int, const Tensor<T>& g, Tape<T>& t, std::vector<Tensor<T>>& grads) {
                        if (!t.needs_grad(pa)) return;
                        const auto& x = t.value(pa);
                        std::vector<T> d(g.numel());
                        for (std::size_t i = 0; i < d.size(); ++i)
                          d[i] = (x[i] > T(0) && x[i] < T(6)) ? g[i] : T(0);
                        t.accumulate(grads, pa, d);
                      })};
}

// hard_swish(v) = v * relu6(v + 3) / 6
template <class T>
Var<T> hard_swish(Var<T> a) {
  Tensor<T> out(a.value().shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const T v = a.value()[i];
    out[i] = v * std::min<T>(std::max<T>(v + T(3), T(0)), T(6)) / T(6);
  }
  const int pa = a.id;
  return {a.tape, a.tape->record(
                      std::move(out), a.needs_grad(),
                      [pa](int, const Tensor<T>& g, Tape<T>& t, std::vector<Tensor<T>>& grads) {
                        if (!t.needs_grad(pa)) return;
                        const auto& x = t.value(pa);
                        std::vector<T> d(g.numel());
                        for (std::size_t i = 0; i < d.size(); ++i) {
                          const T v = x[i];
                          T dv;
                          if (v <= T(-3))
                            dv = T(0);
                          else if (v < T(3))
                            dv = (T(2) * v + T(3)) / T(6);
                          else
                            dv = T(1);
                          d[i] = g[i] * dv;
                        }
                        t.accumulate(grads, pa, d);
                      })};
}

template <class T>
Var<T> sigmoid(Var<T> a) {
  Tensor<T> out(a.value().shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const T v = a.value()[i];
    out[i] = v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
  }
  const int pa = a.id;
  return {a.tape, a.tape->record(
                      std::move(out), a.needs_grad(),
                      [pa](int self, const Tensor<T>& g, Tape<T>& t, std::vector<Tensor<T>>& grads) {
                        if (!t.needs_grad(pa)) return;
                        const auto& s = t.value(self);
                        std::vector<T> d(g.numel());
                        for (std::size_t i = 0; i < d.size(); ++i)
                          d[i] = g[i] * s[i] * (T(1) - s[i]);
                        t.accumulate(grads, pa, d);
                      })};
}

namespace detail {

// Spatial extent of a convolution output along one axis.
inline int conv_out_dim(int in, int kernel, int stride, int pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

// Output positions whose input tap ox*stride + k - pad stays inside [0, in).
inline std::pair<int, int> conv_valid_range(int out, int in, int k, int stride, int pad) {
  const int shift = k - pad;
  int lo = shift < 0 ? (-shift + stride - 1) / stride : 0;
  int hi = (in - 1 - shift) / stride;  // inclusive
  hi = std::min(hi, out - 1);
  return {lo, hi};
}

}  // namespace detail

// 2D convolution, NCHW input against OIHW weights, zero padding, no bias.
// groups > 1 splits channels into contiguous groups (groups == in_channels
// with one output per input channel is the depthwise case).
template <class T>
Var<T> conv2d(Var<T> input, Var<T> weight, int stride, int pad, int groups = 1) {
  const auto& x = input.value();
  const auto& w = weight.value();
  if (x.ndim() != 4 || w.ndim() != 4)
    throw ShapeError("conv2d: want 4-d input and weight, got input " + shape_str(x.shape()) +
                     " weight " + shape_str(w.shape()));
  if (stride < 1 || pad < 0 || groups < 1)
    throw ShapeError("conv2d: bad stride/pad/groups " + std::to_string(stride) + "/" +
                     std::to_string(pad) + "/" + std::to_string(groups));
  const int n = x.dim(0), c_in = x.dim(1), h_in = x.dim(2), w_in = x.dim(3);
  const int c_out = w.dim(0), c_in_g = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  if (c_in % groups != 0 || c_out % groups != 0 || c_in_g != c_in / groups)
    throw ShapeError("conv2d: channel/group mismatch, input " + shape_str(x.shape()) +
                     " weight " + shape_str(w.shape()) + " groups " + std::to_string(groups));
  const int h_out = detail::conv_out_dim(h_in, kh, stride, pad);
  const int w_out = detail::conv_out_dim(w_in, kw, stride, pad);
  if (h_out < 1 || w_out < 1)
    throw ShapeError("conv2d: kernel " + shape_str(w.shape()) + " does not fit input " +
                     shape_str(x.shape()) + " with stride " + std::to_string(stride) + " pad " +
                     std::to_string(pad));
  const int co_g = c_out / groups;

  // Accumulate along contiguous output rows: for each kernel tap the valid
  // ox range is precomputed, so the inner loop is a branch-free FMA sweep.
  Tensor<T> out({n, c_out, h_out, w_out});
  {
    const T* xd = x.data().data();
    const T* wd = w.data().data();
    T* od = out.data().data();
    const std::size_t x_plane = static_cast<std::size_t>(h_in) * w_in;
    const std::size_t o_plane = static_cast<std::size_t>(h_out) * w_out;
    for (int b = 0; b < n; ++b)
      for (int g = 0; g < groups; ++g)
        for (int oc = 0; oc < co_g; ++oc) {
          const int oc_abs = g * co_g + oc;
          T* oplane = od + (static_cast<std::size_t>(b) * c_out + oc_abs) * o_plane;
          for (int ic = 0; ic < c_in_g; ++ic) {
            const int ic_abs = g * c_in_g + ic;
            const T* xplane = xd + (static_cast<std::size_t>(b) * c_in + ic_abs) * x_plane;
            const T* wrow = wd + (static_cast<std::size_t>(oc_abs) * c_in_g + ic) *
                                     static_cast<std::size_t>(kh) * kw;
            for (int ky = 0; ky < kh; ++ky)
              for (int kx = 0; kx < kw; ++kx) {
                const T wv = wrow[ky * kw + kx];
                if (wv == T(0)) continue;
                const auto [ox_lo, ox_hi] = detail::conv_valid_range(w_out, w_in, kx, stride, pad);
                for (int oy = 0; oy < h_out; ++oy) {
                  const int iy = oy * stride - pad + ky;
                  if (iy < 0 || iy >= h_in) continue;
                  const T* xr = xplane + static_cast<std::size_t>(iy) * w_in + (kx - pad);
                  T* orow = oplane + static_cast<std::size_t>(oy) * w_out;
                  if (stride == 1) {
                    for (int ox = ox_lo; ox <= ox_hi; ++ox) orow[ox] += wv * xr[ox];
                  } else {
                    for (int ox = ox_lo; ox <= ox_hi; ++ox) orow[ox] += wv * xr[ox * stride];
                  }
                }
              }
          }
        }
  }

  const int px = input.id, pw = weight.id;
  return {input.tape,
          input.tape->record(
              std::move(out), input.needs_grad() || weight.needs_grad(),
              [px, pw, stride, pad, groups](int, const Tensor<T>& g, Tape<T>& t,
                                            std::vector<Tensor<T>>& grads) {
                const auto& x = t.value(px);
                const auto& w = t.value(pw);
                const int n = x.dim(0), c_in = x.dim(1), h_in = x.dim(2), w_in = x.dim(3);
                const int c_out = w.dim(0), c_in_g = w.dim(1), kh = w.dim(2), kw = w.dim(3);
                const int h_out = g.dim(2), w_out = g.dim(3);
                const int co_g = c_out / groups;
                const bool want_x = t.needs_grad(px);
                const bool want_w = t.needs_grad(pw);
                std::vector<T> dx(want_x ? x.numel() : 0, T(0));
                std::vector<T> dw(want_w ? w.numel() : 0, T(0));
                const T* xd = x.data().data();
                const T* wd = w.data().data();
                const T* gd = g.data().data();
                const std::size_t x_plane = static_cast<std::size_t>(h_in) * w_in;
                const std::size_t o_plane = static_cast<std::size_t>(h_out) * w_out;
                for (int b = 0; b < n; ++b)
                  for (int gi = 0; gi < groups; ++gi)
                    for (int oc = 0; oc < co_g; ++oc) {
                      const int oc_abs = gi * co_g + oc;
                      const T* gplane = gd + (static_cast<std::size_t>(b) * c_out + oc_abs) * o_plane;
                      for (int ic = 0; ic < c_in_g; ++ic) {
                        const int ic_abs = gi * c_in_g + ic;
                        const T* xplane =
                            xd + (static_cast<std::size_t>(b) * c_in + ic_abs) * x_plane;
                        T* dxplane =
                            want_x ? dx.data() + (static_cast<std::size_t>(b) * c_in + ic_abs) *
                                                     x_plane
                                   : nullptr;
                        const std::size_t wbase = (static_cast<std::size_t>(oc_abs) * c_in_g + ic) *
                                                  static_cast<std::size_t>(kh) * kw;
                        for (int ky = 0; ky < kh; ++ky)
                          for (int kx = 0; kx < kw; ++kx) {
                            const T wv = wd[wbase + static_cast<std::size_t>(ky) * kw + kx];
                            const auto [ox_lo, ox_hi] =
                                detail::conv_valid_range(w_out, w_in, kx, stride, pad);
                            T wacc = 0;
                            for (int oy = 0; oy < h_out; ++oy) {
                              const int iy = oy * stride - pad + ky;
                              if (iy < 0 || iy >= h_in) continue;
                              const T* grow = gplane + static_cast<std::size_t>(oy) * w_out;
                              const std::size_t xoff =
                                  static_cast<std::size_t>(iy) * w_in + (kx - pad);
                              const T* xr = xplane + xoff;
                              if (want_w) {
                                if (stride == 1) {
                                  for (int ox = ox_lo; ox <= ox_hi; ++ox)
                                    wacc += grow[ox] * xr[ox];
                                } else {
                                  for (int ox = ox_lo; ox <= ox_hi; ++ox)
                                    wacc += grow[ox] * xr[ox * stride];
                                }
                              }
                              if (want_x && wv != T(0)) {
                                T* dxr = dxplane + xoff;
                                if (stride == 1) {
                                  for (int ox = ox_lo; ox <= ox_hi; ++ox)
                                    dxr[ox] += wv * grow[ox];
                                } else {
                                  for (int ox = ox_lo; ox <= ox_hi; ++ox)
                                    dxr[ox * stride] += wv * grow[ox];
                                }
                              }
                            }
                            if (want_w)
                              dw[wbase + static_cast<std::size_t>(ky) * kw + kx] += wacc;
                          }
                      }
                    }
                if (want_x) t.accumulate(grads, px, dx);
                if (want_w) t.accumulate(grads, pw, dw);
              })};
}

// Add a per-channel bias to an NCHW tensor (or a length-C bias to an NC one).
template <class T>
Var<T> bias_channels(Var<T> input, Var<T> bias) {
  const auto& x = input.value();
  const auto& b = bias.value();
  if (b.ndim() != 1 || (x.ndim() != 4 && x.ndim() != 2) || x.dim(1) != b.dim(0))
    throw ShapeError("bias_channels: input " + shape_str(x.shape()) + " vs bias " +
                     shape_str(b.shape()));
  const int channels = x.dim(1);
  const std::size_t inner = x.numel() / static_cast<std::size_t>(x.dim(0) * channels);
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const int c = static_cast<int>((i / inner) % static_cast<std::size_t>(channels));
    out[i] = x[i] + b[static_cast<std::size_t>(c)];
  }
  const int px = input.id, pb = bias.id;
  return {input.tape,
          input.tape->record(std::move(out), input.needs_grad() || bias.needs_grad(),
                             [px, pb, channels, inner](int, const Tensor<T>& g, Tape<T>& t,
                                                       std::vector<Tensor<T>>& grads) {
                               if (t.needs_grad(px)) t.accumulate(grads, px, g.data());
                               if (t.needs_grad(pb)) {
                                 std::vector<T> db(static_cast<std::size_t>(channels), T(0));
                                 for (std::size_t i = 0; i < g.numel(); ++i)
                                   db[(i / inner) % static_cast<std::size_t>(channels)] += g[i];
                                 t.accumulate(grads, pb, db);
                               }
                             })};
}

// Fully connected layer: input (N, F) times weight (O, F) plus bias (O).
template <class T>
Var<T> dense(Var<T> input, Var<T> weight, Var<T> bias) {
  const auto& x = input.value();
  const auto& w = weight.value();
  const auto& b = bias.value();
  if (x.ndim() != 2 || w.ndim() != 2 || b.ndim() != 1 || x.dim(1) != w.dim(1) ||
      w.dim(0) != b.dim(0))
    throw ShapeError("dense: input " + shape_str(x.shape()) + " weight " + shape_str(w.shape()) +
                     " bias " + shape_str(b.shape()));
  const int n = x.dim(0), f = x.dim(1), o = w.dim(0);
  Tensor<T> out({n, o});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < o; ++j) {
      T acc = b[static_cast<std::size_t>(j)];
      for (int k = 0; k < f; ++k) acc += x.at2(i, k) * w.at2(j, k);
      out.at2(i, j) = acc;
    }
  const int px = input.id, pw = weight.id, pb = bias.id;
  return {input.tape,
          input.tape->record(
              std::move(out), input.needs_grad() || weight.needs_grad() || bias.needs_grad(),
              [px, pw, pb, n, f, o](int, const Tensor<T>& g, Tape<T>& t,
                                    std::vector<Tensor<T>>& grads) {
                const auto& x = t.value(px);
                const auto& w = t.value(pw);
                if (t.needs_grad(px)) {
                  std::vector<T> dx(x.numel(), T(0));
                  for (int i = 0; i < n; ++i)
                    for (int j = 0; j < o; ++j) {
                      const T go = g.at2(i, j);
                      for (int k = 0; k < f; ++k) dx[x.idx2(i, k)] += go * w.at2(j, k);
                    }
                  t.accumulate(grads, px, dx);
                }
                if (t.needs_grad(pw)) {
                  std::vector<T> dw(w.numel(), T(0));
                  for (int i = 0; i < n; ++i)
                    for (int j = 0; j < o; ++j) {
                      const T go = g.at2(i, j);
                      for (int k = 0; k < f; ++k) dw[w.idx2(j, k)] += go * x.at2(i, k);
                    }
                  t.accumulate(grads, pw, dw);
                }
                if (t.needs_grad(pb)) {
                  std::vector<T> db(static_cast<std::size_t>(o), T(0));
                  for (int i = 0; i < n; ++i)
                    for (int j = 0; j < o; ++j) db[static_cast<std::size_t>(j)] += g.at2(i, j);
                  t.accumulate(grads, pb, db);
                }
              })};
}

// (N, C, H, W) -> (N, C): mean over the spatial plane.
template <class T>
Var<T> global_avg_pool(Var<T> input) {
  const auto& x = input.value();
  if (x.ndim() != 4)
    throw ShapeError("global_avg_pool: want 4-d input, got " + shape_str(x.shape()));
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const T inv = T(1) / static_cast<T>(h * w);
  Tensor<T> out({n, c});
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch) {
      T acc = 0;
      for (int y = 0; y < h; ++y)
        for (int z = 0; z < w; ++z) acc += x.at4(b, ch, y, z);
      out.at2(b, ch) = acc * inv;
    }
  const int px = input.id;
  return {input.tape,
          input.tape->record(std::move(out), input.needs_grad(),
                             [px, n, c, h, w, inv](int, const Tensor<T>& g, Tape<T>& t,
                                                   std::vector<Tensor<T>>& grads) {
                               if (!t.needs_grad(px)) return;
                               const auto& x = t.value(px);
                               std::vector<T> dx(x.numel());
                               for (int b = 0; b < n; ++b)
                                 for (int ch = 0; ch < c; ++ch) {
                                   const T v = g.at2(b, ch) * inv;
                                   for (int y = 0; y < h; ++y)
                                     for (int z = 0; z < w; ++z) dx[x.idx4(b, ch, y, z)] = v;
                                 }
                               t.accumulate(grads, px, dx);
                             })};
}

// Concatenate two NCHW tensors along the channel axis; `a` comes first.
template <class T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
  const auto& xa = a.value();
  const auto& xb = b.value();
  if (xa.ndim() != 4 || xb.ndim() != 4 || xa.dim(0) != xb.dim(0) || xa.dim(2) != xb.dim(2) ||
      xa.dim(3) != xb.dim(3))
    throw ShapeError("concat_channels: " + shape_str(xa.shape()) + " vs " +
                     shape_str(xb.shape()));
  const int n = xa.dim(0), ca = xa.dim(1), cb = xb.dim(1), h = xa.dim(2), w = xa.dim(3);
  Tensor<T> out({n, ca + cb, h, w});
  const std::size_t plane = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  for (int bi = 0; bi < n; ++bi) {
    std::copy_n(xa.data().begin() + static_cast<std::ptrdiff_t>(bi * ca * plane), ca * plane,
                out.data().begin() + static_cast<std::ptrdiff_t>(bi * (ca + cb) * plane));
    std::copy_n(xb.data().begin() + static_cast<std::ptrdiff_t>(bi * cb * plane), cb * plane,
                out.data().begin() +
                    static_cast<std::ptrdiff_t>((bi * (ca + cb) + ca) * plane));
  }
  const int pa = a.id, pb = b.id;
  return {a.tape,
          a.tape->record(std::move(out), a.needs_grad() || b.needs_grad(),
                         [pa, pb, n, ca, cb, plane](int, const Tensor<T>& g, Tape<T>& t,
                                                    std::vector<Tensor<T>>& grads) {
                           if (t.needs_grad(pa)) {
                             std::vector<T> da(static_cast<std::size_t>(n * ca) * plane);
                             for (int bi = 0; bi < n; ++bi)
                               std::copy_n(g.data().begin() +
                                               static_cast<std::ptrdiff_t>(bi * (ca + cb) * plane),
                                           ca * plane,
                                           da.begin() + static_cast<std::ptrdiff_t>(bi * ca * plane));
                             t.accumulate(grads, pa, da);
                           }
                           if (t.needs_grad(pb)) {
                             std::vector<T> db(static_cast<std::size_t>(n * cb) * plane);
                             for (int bi = 0; bi < n; ++bi)
                               std::copy_n(g.data().begin() + static_cast<std::ptrdiff_t>(
                                                                  (bi * (ca + cb) + ca) * plane),
                                           cb * plane,
                                           db.begin() + static_cast<std::ptrdiff_t>(bi * cb * plane));
                             t.accumulate(grads, pb, db);
                           }
                         })};
}

// Multiply each channel plane of an NCHW tensor by a per-(sample, channel)
// gate of shape (N, C). This is the excite step of squeeze-and-excitation.
template <class T>
Var<T> scale_channels(Var<T> input, Var<T> gate) {
  const auto& x = input.value();
  const auto& s = gate.value();
  if (x.ndim() != 4 || s.ndim() != 2 || x.dim(0) != s.dim(0) || x.dim(1) != s.dim(1))
    throw ShapeError("scale_channels: input " + shape_str(x.shape()) + " vs gate " +
                     shape_str(s.shape()));
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<T> out(x.shape());
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch) {
      const T k = s.at2(b, ch);
      for (int y = 0; y < h; ++y)
        for (int z = 0; z < w; ++z) out.at4(b, ch, y, z) = x.at4(b, ch, y, z) * k;
    }
  const int px = input.id, ps = gate.id;
  return {input.tape,
          input.tape->record(
              std::move(out), input.needs_grad() || gate.needs_grad(),
              [px, ps, n, c, h, w](int, const Tensor<T>& g, Tape<T>& t,
                                   std::vector<Tensor<T>>& grads) {
                const auto& x = t.value(px);
                const auto& s = t.value(ps);
                if (t.needs_grad(px)) {
                  std::vector<T> dx(x.numel());
                  for (int b = 0; b < n; ++b)
                    for (int ch = 0; ch < c; ++ch) {
                      const T k = s.at2(b, ch);
                      for (int y = 0; y < h; ++y)
                        for (int z = 0; z < w; ++z)
                          dx[x.idx4(b, ch, y, z)] = g.at4(b, ch, y, z) * k;
                    }
                  t.accumulate(grads, px, dx);
                }
                if (t.needs_grad(ps)) {
                  std::vector<T> ds(s.numel(), T(0));
                  for (int b = 0; b < n; ++b)
                    for (int ch = 0; ch < c; ++ch) {
                      T acc = 0;
                      for (int y = 0; y < h; ++y)
                        for (int z = 0; z < w; ++z)
                          acc += g.at4(b, ch, y, z) * x.at4(b, ch, y, z);
                      ds[s.idx2(b, ch)] = acc;
                    }
                  t.accumulate(grads, ps, ds);
                }
              })};
}

// Inverted dropout: in training mode each element is zeroed with probability
// `rate` and survivors are scaled by 1/(1-rate), so the expectation matches
// eval mode, which is the identity. The mask comes from a counter-based
// stream so the same (seed, call) pair always drops the same elements.
template <class T>
Var<T> dropout(Var<T> input, T rate, bool training, std::uint64_t seed) {
  if (!(rate >= T(0) && rate < T(1)))
    throw DomainError("dropout rate must be in [0, 1), got " + std::to_string(rate));
  if (!training || rate == T(0)) {
    Tensor<T> out = input.value();
    const int pa = input.id;
    return {input.tape,
            input.tape->record(std::move(out), input.needs_grad(),
                               [pa](int, const Tensor<T>& g, Tape<T>& t,
                                    std::vector<Tensor<T>>& grads) {
                                 if (t.needs_grad(pa)) t.accumulate(grads, pa, g.data());
                               })};
  }
  const auto& x = input.value();
  Rng rng(seed);
  std::vector<char> keep(x.numel());
  for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = rng.uniform() >= rate ? 1 : 0;
  const T boost = T(1) / (T(1) - rate);
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = keep[i] ? x[i] * boost : T(0);
  const int pa = input.id;
  return {input.tape,
          input.tape->record(std::move(out), input.needs_grad(),
                             [pa, keep = std::move(keep), boost](int, const Tensor<T>& g,
                                                                 Tape<T>& t,
                                                                 std::vector<Tensor<T>>& grads) {
                               if (!t.needs_grad(pa)) return;
                               std::vector<T> d(g.numel());
                               for (std::size_t i = 0; i < d.size(); ++i)
                                 d[i] = keep[i] ? g[i] * boost : T(0);
                               t.accumulate(grads, pa, d);
                             })};
}

// Mean softmax cross-entropy over a batch of logits (N, K) against integer
// labels. Stable: shifts by the row max before exponentiating. The backward
// pass is the usual (softmax - onehot) / N.
template <class T>
Var<T> softmax_cross_entropy(Var<T> logits, const std::vector<int>& labels) {
  const auto& z = logits.value();
  if (z.ndim() != 2)
    throw ShapeError("softmax_cross_entropy: want 2-d logits, got " + shape_str(z.shape()));
  const int n = z.dim(0), k = z.dim(1);
  if (static_cast<int>(labels.size()) != n)
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                     " labels for batch of " + std::to_string(n));
  for (int i = 0; i < n; ++i)
    if (labels[static_cast<std::size_t>(i)] < 0 || labels[static_cast<std::size_t>(i)] >= k)
      throw DomainError("softmax_cross_entropy: label " +
                        std::to_string(labels[static_cast<std::size_t>(i)]) + " outside [0, " +
                        std::to_string(k) + ") at row " + std::to_string(i));

  // Keep the softmax rows for backward.
  std::vector<T> probs(z.numel());
  T loss = 0;
  for (int i = 0; i < n; ++i) {
    T mx = z.at2(i, 0);
    for (int j = 1; j < k; ++j) mx = std::max(mx, z.at2(i, j));
    T denom = 0;
    for (int j = 0; j < k; ++j) {
      const T e = std::exp(z.at2(i, j) - mx);
      probs[z.idx2(i, j)] = e;
      denom += e;
    }
    for (int j = 0; j < k; ++j) probs[z.idx2(i, j)] /= denom;
    const int y = labels[static_cast<std::size_t>(i)];
    loss -= std::log(probs[z.idx2(i, y)]);
  }
  loss /= static_cast<T>(n);

  const int pz = logits.id;
  return {logits.tape,
          logits.tape->record(
              Tensor<T>::scalar(loss), logits.needs_grad(),
              [pz, labels, probs = std::move(probs), n, k](int, const Tensor<T>& g, Tape<T>& t,
                                                           std::vector<Tensor<T>>& grads) {
                if (!t.needs_grad(pz)) return;
                const T scale = g[0] / static_cast<T>(n);
                std::vector<T> dz(probs.size());
                for (int i = 0; i < n; ++i)
                  for (int j = 0; j < k; ++j) {
                    const std::size_t at =
                        static_cast<std::size_t>(i) * static_cast<std::size_t>(k) +
                        static_cast<std::size_t>(j);
                    const T onehot = j == labels[static_cast<std::size_t>(i)] ? T(1) : T(0);
                    dz[at] = (probs[at] - onehot) * scale;
                  }
                t.accumulate(grads, pz, dz);
              })};
}

// Row-wise softmax probabilities of (N, K) logits; no tape needed, used at
// inference time.
template <class T>
Tensor<T> softmax_rows(const Tensor<T>& z) {
  if (z.ndim() != 2) throw ShapeError("softmax_rows: want 2-d logits, got " + shape_str(z.shape()));
  const int n = z.dim(0), k = z.dim(1);
  Tensor<T> out(z.shape());
  for (int i = 0; i < n; ++i) {
    T mx = z.at2(i, 0);
    for (int j = 1; j < k; ++j) mx = std::max(mx, z.at2(i, j));
    T denom = 0;
    for (int j = 0; j < k; ++j) {
      const T e = std::exp(z.at2(i, j) - mx);
      out.at2(i, j) = e;
      denom += e;
    }
    for (int j = 0; j < k; ++j) out.at2(i, j) /= denom;
  }
  return out;
}

// Squeeze-and-excitation: global average pool, bottleneck dense + relu6,
// expand dense + sigmoid, then gate the input channels. Composed from the
// primitives above, so it differentiates for free.
template <class T>
Var<T> se_block(Var<T> input, Var<T> w_reduce, Var<T> b_reduce, Var<T> w_expand, Var<T> b_expand) {
  Var<T> squeezed = global_avg_pool(input);
  Var<T> hidden = relu6(dense(squeezed, w_reduce, b_reduce));
  Var<T> gate = sigmoid(dense(hidden, w_expand, b_expand));
  return scale_channels(input, gate);
}

}  // namespace ad
}  // namespace nupix
