#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ppr/cores.hpp"
#include "ppr/envs.hpp"

namespace ppr {

/// Recurrent state of every architecture. Fields an architecture does not use
/// stay at the zero state. For the flat family `reaction` is the behavior core;
/// for the minimal hierarchy it is the fast core.
struct AgentState {
  LstmState reaction;
  LstmState perception;
  LstmState prediction;
  LstmState slow;
  std::vector<long> t;  // within-episode step per row

  std::size_t batch() const { return t.size(); }
};

inline AgentState initial_state(std::size_t batch, const AgentConfig& cfg) {
  if (batch == 0) throw std::invalid_argument("initial_state: batch must be >= 1");
  const std::size_t h = cfg.hidden;
  return {LstmState::zeros(batch, h), LstmState::zeros(batch, h), LstmState::zeros(batch, h),
          LstmState::zeros(batch, h), std::vector<long>(batch, 0)};
}

struct AgentOutput {
  Tensor pi;        // [B, A] behavior logits
  Tensor value;     // [B]
  std::optional<Tensor> pi_prime;   // perception logits
  std::optional<Tensor> pi_dprime;  // prediction logits
};

struct StepInput {
  Tensor obs;  // [B, obs_width]
  std::vector<int> prev_action;
  std::vector<double> prev_reward;
};

struct StepOptions {
  /// Evaluate the auxiliary heads (π′, π″). Branch states advance regardless.
  bool aux_heads = true;
  /// Replaces the slow-core output read by reaction and prediction.
  const Tensor* slow_override = nullptr;
};

/// Which rows took each clock-driven transition during one step.
struct StepTrace {
  std::vector<std::uint8_t> slow_tick;
  std::vector<std::uint8_t> perception_reset;
  std::vector<std::uint8_t> fast_reset;
};

struct StepResult {
  AgentState state;
  AgentOutput out;
  StepTrace trace;
};

/// Parameters resolved per role for one forward pass.
struct AgentWeights {
  AgentConfig cfg;
  MlpParams encoder;
  LstmParams reaction;
  LstmParams perception;
  LstmParams prediction;
  LstmParams slow;
  MlpParams pi;
  MlpParams value;
  std::optional<MlpParams> pi_prime;
  std::optional<MlpParams> pi_dprime;

  static AgentWeights from(const ParamMap& m, const AgentConfig& cfg) {
    AgentWeights w;
    w.cfg = cfg;
    w.encoder = MlpParams::from(m, "encoder", Activation::kRelu);
    switch (cfg.arch) {
      case Architecture::kFlat:
      case Architecture::kFlatPrediction:
        w.reaction = LstmParams::from(m, core_for(cfg, "behavior"));
        break;
      case Architecture::kMinimalHier:
        w.reaction = LstmParams::from(m, core_for(cfg, "fast"));
        break;
      case Architecture::kPerceptionReaction:
      case Architecture::kPpr:
        w.reaction = LstmParams::from(m, core_for(cfg, "reaction"));
        w.perception = LstmParams::from(m, core_for(cfg, "perception"));
        break;
    }
    if (has_slow_core(cfg.arch)) w.slow = LstmParams::from(m, core_for(cfg, "slow"));
    if (has_prediction_branch(cfg.arch)) w.prediction = LstmParams::from(m, core_for(cfg, "prediction"));
    w.pi = MlpParams::from(m, "pi", Activation::kNone);
    w.value = MlpParams::from(m, "value", Activation::kNone);
    if (cfg.arch == Architecture::kPpr) w.pi_prime = MlpParams::from(m, "pi_prime", Activation::kNone);
    if (has_prediction_branch(cfg.arch)) w.pi_dprime = MlpParams::from(m, "pi_dprime", Activation::kNone);
    return w;
  }
};

namespace detail {

inline long pos_mod(long t, long tau) { return ((t % tau) + tau) % tau; }

inline std::size_t count_set(const std::vector<std::uint8_t>& f) {
  std::size_t n = 0;
  for (auto v : f) n += v ? 1 : 0;
  return n;
}

inline std::vector<std::uint8_t> invert(const std::vector<std::uint8_t>& f) {
  std::vector<std::uint8_t> out(f.size());
  for (std::size_t i = 0; i < f.size(); ++i) out[i] = f[i] ? 0 : 1;
  return out;
}

/// Rows flagged in `reset` start from the zero state.
inline LstmState reset_rows(const LstmState& s, const std::vector<std::uint8_t>& reset) {
  const std::size_t n = count_set(reset);
  if (n == 0) return s;
  if (n == reset.size()) return LstmState::zeros(s.h.dim(0), s.h.dim(1));
  const auto keep = invert(reset);
  return {row_mask(s.h, keep), row_mask(s.c, keep)};
}

/// Per row: `fresh` where flagged, `old` elsewhere.
inline Tensor blend_rows(const Tensor& fresh, const Tensor& old, const std::vector<std::uint8_t>& take) {
  const std::size_t n = count_set(take);
  if (n == take.size()) return fresh;
  if (n == 0) return old;
  return add(row_mask(fresh, take), row_mask(old, invert(take)));
}

inline LstmState blend_rows(const LstmState& fresh, const LstmState& old, const std::vector<std::uint8_t>& take) {
  return {blend_rows(fresh.h, old.h, take), blend_rows(fresh.c, old.c, take)};
}

inline std::vector<std::uint8_t> phase_flags(const std::vector<long>& t, int tau, long phase) {
  std::vector<std::uint8_t> f(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) f[i] = pos_mod(t[i], tau) == phase ? 1 : 0;
  return f;
}

inline Tensor value_vector(const Tensor& v) { return reshape(v, {v.dim(0)}); }

struct Embedded {
  Tensor x;  // full information
  Tensor p;  // observation block masked
};

inline Embedded embed(const AgentWeights& w, const StepInput& in, bool need_masked) {
  if (in.obs.rank() != 2 || in.obs.dim(1) != w.cfg.obs_width) {
    throw ShapeError("agent step: observation shape " + shape_str(in.obs.shape()) + ", expected [B, " +
                     std::to_string(w.cfg.obs_width) + "]");
  }
  const Tensor feat = mlp_forward(in.obs, w.encoder);
  Embedded e;
  e.x = embed_inputs(feat, in.prev_action, in.prev_reward, false, w.cfg.num_actions);
  if (need_masked) {
    e.p = embed_inputs(Tensor::zeros(feat.shape()), in.prev_action, in.prev_reward, true, w.cfg.num_actions);
  }
  return e;
}

inline void check_state(const AgentState& s, const StepInput& in) {
  if (s.batch() != in.obs.dim(0)) {
    throw ShapeError("agent step: state batch " + std::to_string(s.batch()) + " vs observation batch " +
                     std::to_string(in.obs.dim(0)));
  }
}

inline void advance_clock(AgentState& s) {
  for (long& t : s.t) ++t;
}

}  // namespace detail

/// Flat recurrent agent: h_t = f(x_t, h_{t-1}), π_t = g(h_t).
inline StepResult flat_step(const AgentWeights& w, const StepInput& in, const AgentState& state) {
  detail::check_state(state, in);
  const std::size_t batch = state.batch();
  const auto e = detail::embed(w, in, false);
  StepResult r;
  r.state = state;
  r.state.reaction = lstm_step(concat({e.x, Tensor::zeros({batch, w.cfg.hidden})}, 1), state.reaction, w.reaction);
  r.out.pi = mlp_forward(r.state.reaction.h, w.pi);
  r.out.value = detail::value_vector(mlp_forward(r.state.reaction.h, w.value));
  r.trace.slow_tick.assign(batch, 0);
  r.trace.perception_reset.assign(batch, 0);
  r.trace.fast_reset.assign(batch, 0);
  detail::advance_clock(r.state);
  return r;
}

/// Two-timescale agent: the slow core reads the fast core's previous state
/// when t mod τ = 0 and otherwise copies; the fast core restarts from zero at
/// the same ticks and reads the slow output every step.
inline StepResult minimal_hier_step(const AgentWeights& w, const StepInput& in, const AgentState& state) {
  detail::check_state(state, in);
  const std::size_t batch = state.batch();
  const auto e = detail::embed(w, in, false);
  StepResult r;
  r.state = state;
  r.trace.slow_tick = detail::phase_flags(state.t, w.cfg.tau, 0);
  r.trace.fast_reset = r.trace.slow_tick;
  r.trace.perception_reset.assign(batch, 0);

  if (detail::count_set(r.trace.slow_tick) > 0) {
    const Tensor slow_in = concat({Tensor::zeros({batch, w.cfg.embed_width()}), state.reaction.h}, 1);
    r.state.slow = detail::blend_rows(lstm_step(slow_in, state.slow, w.slow), state.slow, r.trace.slow_tick);
  }
  const LstmState fast_prev = detail::reset_rows(state.reaction, r.trace.fast_reset);
  r.state.reaction = lstm_step(concat({e.x, r.state.slow.h}, 1), fast_prev, w.reaction);

  const Tensor head_in = concat({r.state.reaction.h, r.state.slow.h}, 1);
  r.out.pi = mlp_forward(head_in, w.pi);
  r.out.value = detail::value_vector(mlp_forward(head_in, w.value));
  detail::advance_clock(r.state);
  return r;
}

/// Perception-(Prediction-)Reaction step. Evaluation order within a step:
/// perception, slow, reaction, prediction, heads, clock.
inline StepResult ppr_step(const AgentWeights& w, const StepInput& in, const AgentState& state,
                           const StepOptions& opts = {}) {
  detail::check_state(state, in);
  const std::size_t batch = state.batch();
  const std::size_t hdim = w.cfg.hidden;
  const bool with_prediction = w.cfg.arch == Architecture::kPpr;
  const auto e = detail::embed(w, in, with_prediction);
  const Tensor no_context = Tensor::zeros({batch, hdim});

  StepResult r;
  r.state = state;
  r.trace.slow_tick = detail::phase_flags(state.t, w.cfg.tau, 0);
  r.trace.fast_reset = r.trace.slow_tick;
  r.trace.perception_reset = detail::phase_flags(state.t, w.cfg.tau, 1);

  // perception: observations only, restarts when t mod τ = 1
  const LstmState perc_prev = detail::reset_rows(state.perception, r.trace.perception_reset);
  r.state.perception = lstm_step(concat({e.x, no_context}, 1), perc_prev, w.perception);

  // slow: consumes this step's perception summary when t mod τ = 0
  if (detail::count_set(r.trace.slow_tick) > 0) {
    const Tensor slow_in = concat({Tensor::zeros({batch, w.cfg.embed_width()}), r.state.perception.h}, 1);
    r.state.slow = detail::blend_rows(lstm_step(slow_in, state.slow, w.slow), state.slow, r.trace.slow_tick);
  }
  const Tensor context = opts.slow_override ? *opts.slow_override : r.state.slow.h;
  if (context.shape() != Shape{batch, hdim}) {
    throw ShapeError("ppr_step: slow override has shape " + shape_str(context.shape()));
  }

  // reaction: full information plus slow output, restarts when t mod τ = 0
  r.state.reaction = lstm_step(concat({e.x, context}, 1), detail::reset_rows(state.reaction, r.trace.fast_reset),
                               w.reaction);

  // prediction: previous action/reward plus slow output, same clock as reaction
  if (with_prediction) {
    r.state.prediction = lstm_step(concat({e.p, context}, 1),
                                   detail::reset_rows(state.prediction, r.trace.fast_reset), w.prediction);
  }

  r.out.pi = mlp_forward(r.state.reaction.h, w.pi);
  r.out.value = detail::value_vector(mlp_forward(r.state.reaction.h, w.value));
  if (opts.aux_heads && w.pi_prime) r.out.pi_prime = mlp_forward(r.state.perception.h, *w.pi_prime);
  if (opts.aux_heads && with_prediction) r.out.pi_dprime = mlp_forward(r.state.prediction.h, *w.pi_dprime);
  detail::advance_clock(r.state);
  return r;
}

/// Flat behavior core plus a prediction branch that re-branches from the
/// behavior core's previous state whenever t mod τ = 0 and otherwise continues
/// on previous action/reward alone.
inline StepResult flat_prediction_step(const AgentWeights& w, const StepInput& in, const AgentState& state,
                                       const StepOptions& opts = {}) {
  detail::check_state(state, in);
  const std::size_t batch = state.batch();
  const auto e = detail::embed(w, in, true);
  const Tensor no_context = Tensor::zeros({batch, w.cfg.hidden});

  StepResult r;
  r.state = state;
  r.trace.slow_tick.assign(batch, 0);
  r.trace.perception_reset.assign(batch, 0);
  r.trace.fast_reset = detail::phase_flags(state.t, w.cfg.tau, 0);

  r.state.reaction = lstm_step(concat({e.x, no_context}, 1), state.reaction, w.reaction);
  const LstmState branch_prev = detail::blend_rows(state.reaction, state.prediction, r.trace.fast_reset);
  r.state.prediction = lstm_step(concat({e.p, no_context}, 1), branch_prev, w.prediction);

  r.out.pi = mlp_forward(r.state.reaction.h, w.pi);
  r.out.value = detail::value_vector(mlp_forward(r.state.reaction.h, w.value));
  if (opts.aux_heads) r.out.pi_dprime = mlp_forward(r.state.prediction.h, *w.pi_dprime);
  detail::advance_clock(r.state);
  return r;
}

inline StepResult agent_step(const AgentWeights& w, const StepInput& in, const AgentState& state,
                             const StepOptions& opts = {}) {
  switch (w.cfg.arch) {
    case Architecture::kFlat: return flat_step(w, in, state);
    case Architecture::kMinimalHier: return minimal_hier_step(w, in, state);
    case Architecture::kPerceptionReaction:
    case Architecture::kPpr: return ppr_step(w, in, state, opts);
    case Architecture::kFlatPrediction: return flat_prediction_step(w, in, state, opts);
  }
  throw std::logic_error("unknown architecture");
}

/// Rows flagged done return to the zero state with t = 0.
inline AgentState episode_reset(const AgentState& state, const std::vector<std::uint8_t>& done) {
  if (done.size() != state.batch()) throw ShapeError("episode_reset: mask length differs from batch");
  if (detail::count_set(done) == 0) return state;
  AgentState s = state;
  s.reaction = detail::reset_rows(state.reaction, done);
  s.perception = detail::reset_rows(state.perception, done);
  s.prediction = detail::reset_rows(state.prediction, done);
  s.slow = detail::reset_rows(state.slow, done);
  for (std::size_t i = 0; i < done.size(); ++i) {
    if (done[i]) s.t[i] = 0;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Prediction branches without observations

/// A prediction core advanced on (previous action, previous reward) only.
struct PredictionBranch {
  LstmState state;
  Tensor context;  // slow output held fixed (zeros for the flat family)
};

/// Branch continuing from an agent state taken between steps: PPR keeps its
/// prediction core and current slow output; the flat prediction agent forks
/// from its behavior core.
inline PredictionBranch branch_from(const AgentWeights& w, const AgentState& state) {
  switch (w.cfg.arch) {
    case Architecture::kPpr: return {state.prediction, state.slow.h};
    case Architecture::kFlatPrediction:
      return {state.reaction, Tensor::zeros({state.batch(), w.cfg.hidden})};
    default:
      throw std::invalid_argument("architecture " + to_string(w.cfg.arch) + " has no prediction branch");
  }
}

/// Advances the branch one step and returns π″ logits.
inline Tensor prediction_branch_step(const AgentWeights& w, PredictionBranch& br, const std::vector<int>& prev_action,
                                     const std::vector<double>& prev_reward) {
  const std::size_t batch = br.state.batch();
  const Tensor p = embed_inputs(Tensor::zeros({batch, w.cfg.encoder_width}), prev_action, prev_reward, true,
                                w.cfg.num_actions);
  br.state = lstm_step(concat({p, br.context}, 1), br.state, w.prediction);
  return mlp_forward(br.state.h, *w.pi_dprime);
}

struct RolloutResult {
  std::vector<int> actions;
  std::vector<double> rewards;
  std::vector<Tensor> logits;
  bool episode_ended = false;
};

/// Acts for up to k steps from π″ alone. Reaction and perception stay frozen;
/// each prediction input is built from the branch's own last action and the
/// reward the environment returned for it.
inline RolloutResult prediction_rollout(const AgentWeights& w, const AgentState& state, int prev_action,
                                        double prev_reward, int k, Env& env, Rng& rng) {
  if (k < 1 || k > w.cfg.max_rollout) {
    throw std::out_of_range("prediction_rollout: k = " + std::to_string(k) + " outside [1, " +
                            std::to_string(w.cfg.max_rollout) + "]");
  }
  if (state.batch() != 1) throw ShapeError("prediction_rollout: expects a single-row state");
  PredictionBranch br = branch_from(w, state);
  RolloutResult res;
  std::vector<int> a{prev_action};
  std::vector<double> rew{prev_reward};
  for (int i = 0; i < k; ++i) {
    const Tensor logits = prediction_branch_step(w, br, a, rew);
    const Tensor probs = softmax(logits);
    const int action = rng.categorical(probs.data());
    const EnvStep s = env.step(action);
    res.actions.push_back(action);
    res.rewards.push_back(s.reward);
    res.logits.push_back(logits);
    a[0] = action;
    rew[0] = s.reward;
    if (s.done) {
      res.episode_ended = true;
      break;
    }
  }
  return res;
}

}  // namespace ppr
