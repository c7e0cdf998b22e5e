#pragma once

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ppr/agents.hpp"
#include "ppr/autograd.hpp"
#include "ppr/rng.hpp"

namespace ppr {

/// d(p, q) = KL(p‖q) + KL(q‖p) per row, from logits [B, A]; returns [B].
inline Tensor sym_kl(const Tensor& p_logits, const Tensor& q_logits) {
  if (p_logits.shape() != q_logits.shape() || p_logits.rank() != 2) {
    throw ShapeError("sym_kl: logits shapes " + shape_str(p_logits.shape()) + " and " +
                     shape_str(q_logits.shape()) + " must be equal [B, A]");
  }
  const Tensor lp = log_softmax(p_logits);
  const Tensor lq = log_softmax(q_logits);
  // Σ (p − q)(log p − log q)
  return sum(mul(sub(exp(lp), exp(lq)), sub(lp, lq)), 1);
}

/// Per-step outputs stacked time-major into [T·B, ...].
struct SegmentOutputs {
  Tensor pi;     // [T·B, A]
  Tensor value;  // [T·B]
  std::optional<Tensor> pi_prime;
  std::optional<Tensor> pi_dprime;
};

inline SegmentOutputs stack_outputs(const std::vector<AgentOutput>& steps) {
  if (steps.empty()) throw std::invalid_argument("stack_outputs: no steps");
  std::vector<Tensor> pi, v, pp, pd;
  for (const AgentOutput& o : steps) {
    pi.push_back(o.pi);
    v.push_back(o.value);
    if (o.pi_prime) pp.push_back(*o.pi_prime);
    if (o.pi_dprime) pd.push_back(*o.pi_dprime);
  }
  SegmentOutputs s{concat(pi, 0), concat(v, 0), std::nullopt, std::nullopt};
  if (pp.size() == steps.size()) s.pi_prime = concat(pp, 0);
  if (pd.size() == steps.size()) s.pi_dprime = concat(pd, 0);
  return s;
}

// ---------------------------------------------------------------------------
// Auxiliary loss

struct AuxWeights {
  double lambda_r_p = 1.0;  // d(π, π′)
  double lambda_r_q = 1.0;  // d(π, π″)
  double lambda_p_q = 1.0;  // d(π′, π″)
  double gate_rate = 0.1;

  bool any() const { return lambda_r_p > 0.0 || lambda_r_q > 0.0 || lambda_p_q > 0.0; }

  void validate() const {
    for (double l : {lambda_r_p, lambda_r_q, lambda_p_q}) {
      if (!(l >= 0.0) || !std::isfinite(l)) throw std::invalid_argument("aux weights must be finite and >= 0");
    }
    if (!(gate_rate >= 0.0 && gate_rate <= 1.0)) throw std::invalid_argument("gate_rate must lie in [0, 1]");
  }
};

/// Per-batch multiplier g·u with g ~ Bernoulli(gate_rate), u ~ U(0, 1). Both
/// draws are always taken so the generator advances identically.
struct AuxGate {
  bool on = false;
  double u = 0.0;

  double scale() const { return on ? u : 0.0; }

  static AuxGate sample(const AuxWeights& w, Rng& rng) {
    AuxGate g;
    g.on = rng.bernoulli(w.gate_rate);
    g.u = rng.uniform();
    return g;
  }

  static AuxGate forced(double u) { return {true, u}; }
};

struct AuxTerms {
  Tensor loss;  // scalar; untracked zero when nothing is active
  double r_p = 0.0;
  double r_q = 0.0;
  double p_q = 0.0;
  bool active = false;
};

/// Mean over (t, B) of the λ-weighted pair divergences, times the gate scale.
/// Pairs whose λ is zero contribute no graph; pairs naming an absent head are
/// an error when their λ is nonzero.
inline AuxTerms aux_loss(const SegmentOutputs& out, const AuxWeights& w, const AuxGate& gate) {
  AuxTerms t{Tensor::scalar(0.0)};
  const double scale = gate.scale();
  if (scale == 0.0 || !w.any()) return t;
  auto need = [](const std::optional<Tensor>& x, const char* name) -> const Tensor& {
    if (!x) throw std::invalid_argument(std::string("aux_loss: nonzero weight on a pair using absent head ") + name);
    return *x;
  };
  std::vector<Tensor> parts;
  if (w.lambda_r_p > 0.0) {
    const Tensor d = mean(sym_kl(out.pi, need(out.pi_prime, "pi_prime")));
    t.r_p = d.item();
    parts.push_back(scalar_mul(d, w.lambda_r_p));
  }
  if (w.lambda_r_q > 0.0) {
    const Tensor d = mean(sym_kl(out.pi, need(out.pi_dprime, "pi_dprime")));
    t.r_q = d.item();
    parts.push_back(scalar_mul(d, w.lambda_r_q));
  }
  if (w.lambda_p_q > 0.0) {
    const Tensor d = mean(sym_kl(need(out.pi_prime, "pi_prime"), need(out.pi_dprime, "pi_dprime")));
    t.p_q = d.item();
    parts.push_back(scalar_mul(d, w.lambda_p_q));
  }
  Tensor acc = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) acc = add(acc, parts[i]);
  t.loss = scalar_mul(acc, scale);
  t.active = true;
  return t;
}

// ---------------------------------------------------------------------------
// V-trace

struct VtraceConfig {
  double gamma = 0.99;
  double rho_bar = 1.0;
  double c_bar = 1.0;
  double baseline_weight = 0.5;
  double entropy_weight = 0.01;

  void validate() const {
    if (!(gamma > 0.0 && gamma <= 1.0)) throw std::invalid_argument("gamma must lie in (0, 1]");
    if (!(c_bar > 0.0) || !(rho_bar >= c_bar)) throw std::invalid_argument("need rho_bar >= c_bar > 0");
    if (!(baseline_weight >= 0.0) || !(entropy_weight >= 0.0)) {
      throw std::invalid_argument("baseline_weight and entropy_weight must be >= 0");
    }
  }
};

struct VtraceResult {
  std::vector<double> vs;             // [T·B] value targets
  std::vector<double> pg_advantages;  // [T·B]
};

namespace detail {

inline double log_prob_of(const double* logits, std::size_t n, int a) {
  double m = logits[0];
  for (std::size_t i = 1; i < n; ++i) m = std::max(m, logits[i]);
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) z += std::exp(logits[i] - m);
  return logits[a] - m - std::log(z);
}

}  // namespace detail

/// Time-major inputs: rewards, values, dones, actions [T·B]; logits [T·B·A];
/// bootstrap [B] is the value after the last step. dones[t] marks step t as
/// the last of its episode, so nothing from t+1 onward reaches step t.
inline VtraceResult vtrace_targets(std::size_t steps, std::size_t batch, const std::vector<double>& rewards,
                                   const std::vector<double>& values, const std::vector<double>& bootstrap,
                                   const std::vector<double>& behavior_logits,
                                   const std::vector<double>& target_logits, const std::vector<int>& actions,
                                   const std::vector<std::uint8_t>& dones, const VtraceConfig& cfg) {
  const std::size_t n = steps * batch;
  if (rewards.size() != n || values.size() != n || actions.size() != n || dones.size() != n ||
      bootstrap.size() != batch) {
    throw std::invalid_argument("vtrace_targets: length mismatch for T=" + std::to_string(steps) +
                                ", B=" + std::to_string(batch));
  }
  if (n == 0 || behavior_logits.size() != target_logits.size() || behavior_logits.size() % n != 0) {
    throw std::invalid_argument("vtrace_targets: logits length mismatch");
  }
  const std::size_t na = behavior_logits.size() / n;
  VtraceResult r{std::vector<double>(n), std::vector<double>(n)};
  std::vector<double> rho(n), c(n), disc(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int a = actions[i];
    if (a < 0 || static_cast<std::size_t>(a) >= na) throw std::out_of_range("vtrace_targets: action out of range");
    const double log_ratio = detail::log_prob_of(&target_logits[i * na], na, a) -
                             detail::log_prob_of(&behavior_logits[i * na], na, a);
    const double ratio = std::exp(log_ratio);
    rho[i] = std::min(cfg.rho_bar, ratio);
    c[i] = std::min(cfg.c_bar, ratio);
    disc[i] = dones[i] ? 0.0 : cfg.gamma;
  }
  for (std::size_t b = 0; b < batch; ++b) {
    double acc = 0.0;
    for (std::size_t t = steps; t-- > 0;) {
      const std::size_t i = t * batch + b;
      const double v_next = t + 1 < steps ? values[i + batch] : bootstrap[b];
      const double delta = rho[i] * (rewards[i] + disc[i] * v_next - values[i]);
      acc = delta + disc[i] * c[i] * acc;
      r.vs[i] = values[i] + acc;
    }
    for (std::size_t t = 0; t < steps; ++t) {
      const std::size_t i = t * batch + b;
      const double vs_next = t + 1 < steps ? r.vs[i + batch] : bootstrap[b];
      r.pg_advantages[i] = rho[i] * (rewards[i] + disc[i] * vs_next - values[i]);
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Actor-critic objective

struct LossParts {
  Tensor total;  // scalar on the tape
  double pg = 0.0;
  double baseline = 0.0;
  double entropy = 0.0;
  double aux = 0.0;
  double aux_r_p = 0.0;
  double aux_r_q = 0.0;
  double aux_p_q = 0.0;
};

/// pg = −mean(log π(a)·A), baseline = w_b·mean((v_s − V)²), entropy bonus
/// −w_e·mean(H(π)); means over the T·B entries. Only π and V appear here.
inline LossParts actor_critic_loss(const SegmentOutputs& out, const std::vector<int>& actions,
                                   const VtraceResult& vt, const VtraceConfig& cfg) {
  const std::size_t n = out.pi.dim(0);
  const std::size_t na = out.pi.dim(1);
  if (actions.size() != n || vt.vs.size() != n || vt.pg_advantages.size() != n || out.value.size() != n) {
    throw std::invalid_argument("actor_critic_loss: length mismatch");
  }
  std::vector<double> onehot_adv(n * na, 0.0);
  for (std::size_t i = 0; i < n; ++i) onehot_adv[i * na + static_cast<std::size_t>(actions[i])] = vt.pg_advantages[i];

  const Tensor logp = log_softmax(out.pi);
  const Tensor pg = scalar_mul(sum(mul(logp, Tensor({n, na}, std::move(onehot_adv)))), -1.0 / static_cast<double>(n));
  const Tensor err = sub(Tensor({n}, vt.vs), out.value);
  const Tensor baseline = scalar_mul(mean(mul(err, err)), cfg.baseline_weight);
  const Tensor entropy = scalar_mul(sum(mul(exp(logp), logp)), -1.0 / static_cast<double>(n));

  LossParts p;
  p.total = sub(add(pg, baseline), scalar_mul(entropy, cfg.entropy_weight));
  p.pg = pg.item();
  p.baseline = baseline.item();
  p.entropy = entropy.item();
  return p;
}

inline LossParts total_loss(const SegmentOutputs& out, const std::vector<int>& actions, const VtraceResult& vt,
                            const VtraceConfig& cfg, const AuxWeights& w, const AuxGate& gate) {
  LossParts p = actor_critic_loss(out, actions, vt, cfg);
  const AuxTerms aux = aux_loss(out, w, gate);
  if (aux.active) {
    p.total = add(p.total, aux.loss);
    p.aux = aux.loss.item();
  }
  p.aux_r_p = aux.r_p;
  p.aux_r_q = aux.r_q;
  p.aux_p_q = aux.p_q;
  return p;
}

}  // namespace ppr
