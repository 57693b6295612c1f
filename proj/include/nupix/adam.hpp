#pragma once

// Adam with the standard bias-corrected first and second moment estimates.

#include <cmath>
#include <string>
#include <vector>

#include "nupix/common.hpp"
#include "nupix/tensor.hpp"

namespace nupix {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const {
    if (!(learning_rate > 0)) throw ConfigError("adam: learning_rate must be positive");
    if (!(beta1 >= 0 && beta1 < 1)) throw ConfigError("adam: beta1 must be in [0, 1)");
    if (!(beta2 >= 0 && beta2 < 1)) throw ConfigError("adam: beta2 must be in [0, 1)");
    if (!(epsilon > 0)) throw ConfigError("adam: epsilon must be positive");
  }
};

// One moment pair per parameter tensor; `step` counts completed updates.
template <class T = double>
class AdamState {
 public:
  AdamState() = default;

  explicit AdamState(const std::vector<std::size_t>& param_sizes) {
    m_.reserve(param_sizes.size());
    v_.reserve(param_sizes.size());
    for (std::size_t sz : param_sizes) {
      m_.emplace_back(sz, T(0));
      v_.emplace_back(sz, T(0));
    }
  }

  std::size_t num_params() const { return m_.size(); }
  long long step() const { return step_; }
  const std::vector<T>& first_moment(std::size_t i) const { return m_[i]; }
  const std::vector<T>& second_moment(std::size_t i) const { return v_[i]; }

  // Apply one update to every parameter tensor in place.
  void update(std::vector<Tensor<T>*>& params, const std::vector<const Tensor<T>*>& grads,
              const AdamConfig& cfg) {
    if (params.size() != m_.size() || grads.size() != m_.size())
      throw ShapeError("adam: got " + std::to_string(params.size()) + " params / " +
                       std::to_string(grads.size()) + " grads for state of " +
                       std::to_string(m_.size()));
    ++step_;
    const T bc1 = T(1) - std::pow(static_cast<T>(cfg.beta1), static_cast<T>(step_));
    const T bc2 = T(1) - std::pow(static_cast<T>(cfg.beta2), static_cast<T>(step_));
    for (std::size_t p = 0; p < params.size(); ++p) {
      auto& theta = *params[p];
      const auto& g = *grads[p];
      if (theta.numel() != m_[p].size() || g.numel() != m_[p].size())
        throw ShapeError("adam: size mismatch at param " + std::to_string(p));
      for (std::size_t i = 0; i < m_[p].size(); ++i) {
        m_[p][i] = cfg.beta1 * m_[p][i] + (1 - cfg.beta1) * g[i];
        v_[p][i] = cfg.beta2 * v_[p][i] + (1 - cfg.beta2) * g[i] * g[i];
        const T m_hat = m_[p][i] / bc1;
        const T v_hat = v_[p][i] / bc2;
        theta[i] -= cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.epsilon);
      }
    }
  }

 private:
  std::vector<std::vector<T>> m_;
  std::vector<std::vector<T>> v_;
  long long step_ = 0;
};

}  // namespace nupix
