#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "ppr/autograd.hpp"

namespace ppr {

/// Global L2 norm over all gradient entries.
inline double global_norm(const ParamMap& grads) {
  double s = 0.0;
  for (const auto& [name, g] : grads) {
    for (double v : g.data()) s += v * v;
  }
  return std::sqrt(s);
}

/// Scales every gradient by min(1, max_norm / norm). Returns the raw norm.
inline double clip_by_global_norm(ParamMap& grads, double max_norm) {
  const double norm = global_norm(grads);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& [name, g] : grads) {
      std::vector<double> v = g.vec();
      for (double& x : v) x *= s;
      g = Tensor(g.shape(), std::move(v));
    }
  }
  return norm;
}

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 40.0;

  void validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw std::invalid_argument("learning rate must be finite and >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
      throw std::invalid_argument("adam betas must lie in [0, 1)");
    }
    if (!(eps > 0.0)) throw std::invalid_argument("adam eps must be > 0");
    if (!(clip_norm >= 0.0)) throw std::invalid_argument("clip_norm must be >= 0 (0 disables)");
  }
};

/// Per-parameter first/second moment estimates with bias correction. Entries
/// without a gradient this step are treated as receiving zero gradient.
class Adam {
 public:
  Adam() = default;
  Adam(const ParamStore& store, AdamConfig cfg) : cfg_(cfg) {
    for (const auto& e : store.entries()) {
      m_.emplace(e.name, Tensor::zeros(e.value.shape()));
      v_.emplace(e.name, Tensor::zeros(e.value.shape()));
    }
  }

  const AdamConfig& config() const { return cfg_; }
  std::uint64_t step_count() const { return step_; }
  const ParamMap& first_moment() const { return m_; }
  const ParamMap& second_moment() const { return v_; }

  void restore(ParamMap m, ParamMap v, std::uint64_t step) {
    if (m.size() != m_.size() || v.size() != v_.size()) throw std::invalid_argument("adam restore: entry mismatch");
    for (const auto& [name, t] : m_) {
      if (!m.count(name) || !v.count(name) || m.at(name).shape() != t.shape() || v.at(name).shape() != t.shape()) {
        throw std::invalid_argument("adam restore: bad moment entry " + name);
      }
    }
    m_ = std::move(m);
    v_ = std::move(v);
    step_ = step;
  }

  void update(ParamStore& store, const ParamMap& grads) {
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (const auto& e : store.entries()) {
      if (!e.trainable) continue;
      auto g_it = grads.find(e.name);
      std::vector<double> m = m_.at(e.name).vec();
      std::vector<double> v = v_.at(e.name).vec();
      std::vector<double> p = e.value.vec();
      const std::vector<double>* g = g_it == grads.end() ? nullptr : &g_it->second.vec();
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = g ? (*g)[i] : 0.0;
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
        p[i] -= cfg_.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
      }
      const Shape shape = e.value.shape();
      m_.at(e.name) = Tensor(shape, std::move(m));
      v_.at(e.name) = Tensor(shape, std::move(v));
      store.set(e.name, Tensor(shape, std::move(p)));
    }
  }

 private:
  AdamConfig cfg_;
  ParamMap m_;
  ParamMap v_;
  std::uint64_t step_ = 0;
};

}  // namespace ppr
