#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ppr/agents.hpp"
#include "ppr/checkpoint.hpp"
#include "ppr/config.hpp"
#include "ppr/envs.hpp"
#include "ppr/losses.hpp"
#include "ppr/metrics.hpp"
#include "ppr/optim.hpp"

namespace ppr {

inline constexpr const char* kVersion = "ppr-lab 1.0.0";

/// Independent 64-bit seed for (base, stream, index).
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream, std::uint64_t index) {
  Rng r{base, stream, index};
  return r.next_u64();
}

namespace detail {

inline Tensor stack_rows(const std::vector<std::vector<double>>& rows) {
  const std::size_t w = rows.front().size();
  std::vector<double> data;
  data.reserve(rows.size() * w);
  for (const auto& r : rows) {
    if (r.size() != w) throw ShapeError("observation width changed within a batch");
    data.insert(data.end(), r.begin(), r.end());
  }
  return Tensor({rows.size(), w}, std::move(data));
}

inline int argmax_row(std::span<const double> row) {
  return static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
}

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Acting

/// B environments stepped in lockstep with the recurrent state that drives them.
struct Actor {
  std::vector<std::unique_ptr<Env>> envs;
  AgentState state;
  std::vector<std::vector<double>> obs;
  std::vector<int> prev_action;
  std::vector<double> prev_reward;
  std::vector<double> running_return;
  Rng rng;

  std::size_t batch() const { return envs.size(); }
};

/// Row b's env seed is derived from (seed, b); action sampling uses its own stream.
inline Actor make_actor(const EnvConfig& env, const AgentConfig& agent, std::size_t batch, std::uint64_t seed) {
  Actor a;
  for (std::size_t b = 0; b < batch; ++b) {
    EnvConfig e = env;
    e.seed = derive_seed(seed, 1, b);
    a.envs.push_back(make_env(e));
    a.obs.push_back(a.envs.back()->reset());
  }
  a.state = initial_state(batch, agent);
  a.prev_action.assign(batch, 0);
  a.prev_reward.assign(batch, 0.0);
  a.running_return.assign(batch, 0.0);
  a.rng = Rng{seed, 2};
  return a;
}

struct TrajectorySegment {
  std::size_t steps = 0;  // T
  std::size_t batch = 0;  // B
  std::size_t num_actions = 0;
  std::vector<Tensor> obs;  // T+1 entries of [B, F]; the last feeds the bootstrap value
  std::vector<std::vector<int>> prev_action;  // T+1 entries of [B]
  std::vector<std::vector<double>> prev_reward;
  std::vector<int> actions;            // [T·B] time-major
  std::vector<double> rewards;         // [T·B]
  std::vector<std::uint8_t> dones;     // [T·B]; reset applies before step t+1
  std::vector<double> behavior_logits; // [T·B·A]
  AgentState initial_state;
};

struct ActOptions {
  bool greedy = false;
};

/// Runs T steps with actions from π. Finished episode returns are appended to
/// `finished` when given.
inline TrajectorySegment collect_segment(Actor& actor, const AgentWeights& w, std::size_t steps,
                                         const ActOptions& opts = {}, std::vector<double>* finished = nullptr) {
  const std::size_t batch = actor.batch();
  TrajectorySegment seg;
  seg.steps = steps;
  seg.batch = batch;
  seg.num_actions = w.cfg.num_actions;
  seg.initial_state = actor.state;
  StepOptions step_opts;
  step_opts.aux_heads = false;
  for (std::size_t t = 0; t < steps; ++t) {
    const Tensor obs = detail::stack_rows(actor.obs);
    seg.obs.push_back(obs);
    seg.prev_action.push_back(actor.prev_action);
    seg.prev_reward.push_back(actor.prev_reward);
    const StepResult r = agent_step(w, {obs, actor.prev_action, actor.prev_reward}, actor.state, step_opts);
    const Tensor probs = softmax(r.out.pi);
    const std::size_t na = w.cfg.num_actions;
    seg.behavior_logits.insert(seg.behavior_logits.end(), r.out.pi.vec().begin(), r.out.pi.vec().end());
    std::vector<std::uint8_t> done(batch, 0);
    for (std::size_t b = 0; b < batch; ++b) {
      const auto row = probs.data().subspan(b * na, na);
      const int a = opts.greedy ? detail::argmax_row(row) : actor.rng.categorical(row);
      EnvStep s;
      try {
        s = actor.envs[b]->step(a);
      } catch (const std::exception& e) {
        throw std::runtime_error("batch row " + std::to_string(b) + ": " + e.what());
      }
      seg.actions.push_back(a);
      seg.rewards.push_back(s.reward);
      seg.dones.push_back(s.done ? 1 : 0);
      actor.running_return[b] += s.reward;
      if (s.done) {
        done[b] = 1;
        if (finished) finished->push_back(actor.running_return[b]);
        actor.running_return[b] = 0.0;
        actor.obs[b] = actor.envs[b]->reset();
        actor.prev_action[b] = 0;
        actor.prev_reward[b] = 0.0;
      } else {
        actor.obs[b] = std::move(s.obs);
        actor.prev_action[b] = a;
        actor.prev_reward[b] = s.reward;
      }
    }
    actor.state = episode_reset(r.state, done);
  }
  seg.obs.push_back(detail::stack_rows(actor.obs));
  seg.prev_action.push_back(actor.prev_action);
  seg.prev_reward.push_back(actor.prev_reward);
  return seg;
}

struct Unroll {
  std::vector<AgentOutput> outputs;  // T+1 entries
  AgentState final_state;            // after step T-1 and its episode reset
};

/// Recomputes the forward pass of a segment from its initial state.
inline Unroll unroll_segment(const AgentWeights& w, const TrajectorySegment& seg, bool aux_heads) {
  Unroll u;
  AgentState state = seg.initial_state;
  for (std::size_t t = 0; t <= seg.steps; ++t) {
    StepOptions opts;
    opts.aux_heads = aux_heads && t < seg.steps;
    const StepResult r = agent_step(w, {seg.obs[t], seg.prev_action[t], seg.prev_reward[t]}, state, opts);
    u.outputs.push_back(r.out);
    if (t < seg.steps) {
      const std::vector<std::uint8_t> done(seg.dones.begin() + static_cast<std::ptrdiff_t>(t * seg.batch),
                                           seg.dones.begin() + static_cast<std::ptrdiff_t>((t + 1) * seg.batch));
      state = episode_reset(r.state, done);
      if (t + 1 == seg.steps) u.final_state = state;
    }
  }
  return u;
}

// ---------------------------------------------------------------------------
// Learning

struct TrainStats {
  double loss_total = 0.0;
  double pg = 0.0;
  double baseline = 0.0;
  double entropy = 0.0;
  double aux = 0.0;
  double aux_r_p = 0.0;
  double aux_r_q = 0.0;
  double aux_p_q = 0.0;
  double gate = 0.0;
  double grad_norm = 0.0;
};

/// Raised when the loss or gradient stops being finite; `dump` describes the batch.
class NonFiniteError : public std::runtime_error {
 public:
  NonFiniteError(const std::string& msg, std::string dump) : std::runtime_error(msg), dump_(std::move(dump)) {}
  const std::string& dump() const { return dump_; }

 private:
  std::string dump_;
};

namespace detail {

inline std::string dump_segment(const TrajectorySegment& seg, const LossParts& parts, double grad_norm) {
  std::ostringstream os;
  os.precision(17);
  os << "loss_total=" << parts.total.item() << " pg=" << parts.pg << " baseline=" << parts.baseline
     << " entropy=" << parts.entropy << " aux=" << parts.aux << " grad_norm=" << grad_norm << "\n";
  os << "T=" << seg.steps << " B=" << seg.batch << "\n";
  for (std::size_t t = 0; t < seg.steps; ++t) {
    os << "t=" << t;
    for (std::size_t b = 0; b < seg.batch; ++b) {
      const std::size_t i = t * seg.batch + b;
      os << " [a=" << seg.actions[i] << " r=" << seg.rewards[i] << " d=" << int(seg.dones[i]) << " logits=";
      for (std::size_t k = 0; k < seg.num_actions; ++k) os << (k ? "," : "") << seg.behavior_logits[i * seg.num_actions + k];
      os << "]";
    }
    os << "\n";
  }
  return os.str();
}

}  // namespace detail

struct LearnerConfig {
  AgentConfig agent;
  VtraceConfig vtrace;
  AuxWeights aux;
};

/// One forward unroll on a fresh tape, total loss, backward, clip, Adam update.
/// The aux gate is drawn from `rng` on every call.
inline TrainStats train_step(const TrajectorySegment& seg, ParamStore& store, Adam& adam, const LearnerConfig& cfg,
                             Rng& rng) {
  const AuxGate gate = AuxGate::sample(cfg.aux, rng);
  const bool aux_on = gate.scale() > 0.0 && cfg.aux.any();

  Tape tape;
  const ParamMap bound = store.bind(tape);
  const AgentWeights w = AgentWeights::from(bound, cfg.agent);
  const Unroll u = unroll_segment(w, seg, aux_on);

  const std::vector<AgentOutput> body(u.outputs.begin(), u.outputs.begin() + static_cast<std::ptrdiff_t>(seg.steps));
  const SegmentOutputs out = stack_outputs(body);
  const VtraceResult vt = vtrace_targets(seg.steps, seg.batch, seg.rewards, out.value.vec(),
                                         u.outputs.back().value.vec(), seg.behavior_logits, out.pi.vec(),
                                         seg.actions, seg.dones, cfg.vtrace);
  const LossParts parts = total_loss(out, seg.actions, vt, cfg.vtrace, cfg.aux, aux_on ? gate : AuxGate{});
  if (!std::isfinite(parts.total.item())) {
    throw NonFiniteError("non-finite loss " + MetricsRecord::format_value(parts.total.item()),
                         detail::dump_segment(seg, parts, std::nan("")));
  }
  ParamMap grads = param_grads(tape.backward(parts.total), bound);
  const double norm = clip_by_global_norm(grads, adam.config().clip_norm);
  if (!std::isfinite(norm)) {
    throw NonFiniteError("non-finite gradient norm", detail::dump_segment(seg, parts, norm));
  }
  adam.update(store, grads);

  TrainStats s;
  s.loss_total = parts.total.item();
  s.pg = parts.pg;
  s.baseline = parts.baseline;
  s.entropy = parts.entropy;
  s.aux = parts.aux;
  s.aux_r_p = parts.aux_r_p;
  s.aux_r_q = parts.aux_r_q;
  s.aux_p_q = parts.aux_p_q;
  s.gate = aux_on ? gate.scale() : 0.0;
  s.grad_norm = norm;
  return s;
}

// ---------------------------------------------------------------------------
// Evaluation

enum class EvalMode { kBehaviorPi, kPredictionFixedK, kPredictionBranchFollow, kUniformRandom };

inline std::string to_string(EvalMode m) {
  switch (m) {
    case EvalMode::kBehaviorPi: return "behavior_pi";
    case EvalMode::kPredictionFixedK: return "prediction_fixed_k";
    case EvalMode::kPredictionBranchFollow: return "prediction_branch_follow";
    case EvalMode::kUniformRandom: return "random";
  }
  return "?";
}

inline EvalMode parse_eval_mode(const std::string& s) {
  for (EvalMode m : {EvalMode::kBehaviorPi, EvalMode::kPredictionFixedK, EvalMode::kPredictionBranchFollow,
                     EvalMode::kUniformRandom}) {
    if (to_string(m) == s) return m;
  }
  throw std::invalid_argument("unknown eval mode '" + s +
                              "' (expected behavior_pi, prediction_fixed_k, prediction_branch_follow, random)");
}

struct EvalOptions {
  EvalMode mode = EvalMode::kBehaviorPi;
  int k = 1;            // prediction horizon
  int episodes = 100;
  bool greedy = true;   // argmax actions; otherwise sampled
  std::uint64_t seed = 1000003;
};

struct EvalSummary {
  double mean = 0.0;
  double stderr_ = 0.0;
  double success_rate = 0.0;
  std::vector<double> returns;
};

inline EvalSummary summarize_returns(std::vector<double> returns) {
  EvalSummary s;
  const double n = static_cast<double>(returns.size());
  double sum = 0.0;
  for (double r : returns) sum += r;
  s.mean = sum / n;
  double ss = 0.0;
  std::size_t wins = 0;
  for (double r : returns) {
    ss += (r - s.mean) * (r - s.mean);
    wins += r > 0.0 ? 1 : 0;
  }
  s.stderr_ = returns.size() > 1 ? std::sqrt(ss / (n - 1.0) / n) : 0.0;
  s.success_rate = static_cast<double>(wins) / n;
  s.returns = std::move(returns);
  return s;
}

/// Runs one episode per batch row, all rows in lockstep from t = 0.
///
/// behavior_pi acts from π. The prediction modes keep the behavior core fed
/// with every observation but draw actions from π″ without new observations:
/// prediction_fixed_k always uses the branch rooted k steps earlier (the
/// k-th π″ after branching); prediction_branch_follow re-roots a branch every
/// k steps and follows it from its first step.
inline EvalSummary evaluate(const ParamStore& store, const AgentConfig& agent, const EnvConfig& env,
                            const EvalOptions& opts) {
  if (opts.episodes < 1) throw std::invalid_argument("evaluate: episodes must be >= 1");
  const bool prediction = opts.mode == EvalMode::kPredictionFixedK || opts.mode == EvalMode::kPredictionBranchFollow;
  if (prediction && !has_prediction_branch(agent.arch)) {
    throw std::invalid_argument("eval mode " + to_string(opts.mode) + " needs a prediction branch; architecture " +
                                to_string(agent.arch) + " has none");
  }
  if (prediction && (opts.k < 1 || opts.k > agent.max_rollout)) {
    throw std::out_of_range("evaluate: k = " + std::to_string(opts.k) + " outside [1, " +
                            std::to_string(agent.max_rollout) + "]");
  }
  const ParamMap params = store.values();
  const AgentWeights w = AgentWeights::from(params, agent);
  const std::size_t n = static_cast<std::size_t>(opts.episodes);
  const std::size_t na = agent.num_actions;

  std::vector<std::unique_ptr<Env>> envs;
  std::vector<std::vector<double>> obs;
  for (std::size_t i = 0; i < n; ++i) {
    EnvConfig e = env;
    e.seed = derive_seed(opts.seed, 3, i);
    envs.push_back(make_env(e));
    obs.push_back(envs.back()->reset());
  }
  Rng rng{opts.seed, 4};
  std::vector<int> prev_a(n, 0);
  std::vector<double> prev_r(n, 0.0);
  std::vector<double> ret(n, 0.0);
  std::vector<std::uint8_t> live(n, 1);
  AgentState state = initial_state(n, agent);

  // prediction_fixed_k: states before each of the last k steps plus their p inputs
  std::deque<AgentState> past_states;
  std::deque<std::pair<std::vector<int>, std::vector<double>>> past_p;
  PredictionBranch branch;
  int branch_steps = opts.k;

  StepOptions step_opts;
  step_opts.aux_heads = false;
  const std::vector<double> blank(obs.front().size(), 0.0);
  std::size_t alive = n;
  while (alive > 0) {
    std::vector<std::vector<double>> rows(n);
    for (std::size_t i = 0; i < n; ++i) rows[i] = live[i] ? obs[i] : blank;
    const StepResult r = agent_step(w, {detail::stack_rows(rows), prev_a, prev_r}, state, step_opts);

    Tensor logits = r.out.pi;
    if (opts.mode == EvalMode::kPredictionFixedK) {
      past_states.push_back(state);
      past_p.emplace_back(prev_a, prev_r);
      if (past_states.size() > static_cast<std::size_t>(opts.k)) {
        past_states.pop_front();
        past_p.pop_front();
      }
      PredictionBranch br = branch_from(w, past_states.front());
      for (const auto& [a, rw] : past_p) logits = prediction_branch_step(w, br, a, rw);
    } else if (opts.mode == EvalMode::kPredictionBranchFollow) {
      if (branch_steps == opts.k) {
        branch = branch_from(w, state);
        branch_steps = 0;
      }
      logits = prediction_branch_step(w, branch, prev_a, prev_r);
      ++branch_steps;
    }
    const Tensor probs = softmax(logits);
    state = r.state;

    for (std::size_t i = 0; i < n; ++i) {
      if (!live[i]) continue;
      int a;
      if (opts.mode == EvalMode::kUniformRandom) {
        a = rng.uniform_int(static_cast<int>(na));
      } else {
        const auto row = probs.data().subspan(i * na, na);
        a = opts.greedy ? detail::argmax_row(row) : rng.categorical(row);
      }
      const EnvStep s = envs[i]->step(a);
      ret[i] += s.reward;
      prev_a[i] = a;
      prev_r[i] = s.reward;
      obs[i] = s.obs;
      if (s.done) {
        live[i] = 0;
        --alive;
      }
    }
  }
  return summarize_returns(std::move(ret));
}

// ---------------------------------------------------------------------------
// Experiment driver

struct RunOptions {
  std::filesystem::path out_dir;
  bool resume = false;
  /// Stop (after checkpointing) once env steps reach this value; 0 = never.
  std::uint64_t stop_after = 0;
  bool quiet = true;
};

struct RunResult {
  std::filesystem::path metrics_log;
  std::filesystem::path metrics_csv;
  std::filesystem::path checkpoint;
  std::filesystem::path manifest;
  std::uint64_t env_steps = 0;
  bool completed = false;
  std::vector<MetricsRecord> records;
};

/// Everything needed to continue training bit-exactly.
struct TrainerState {
  ExperimentConfig cfg;
  AgentConfig agent;
  ParamStore params;
  Adam adam;
  Actor actor;
  Rng learner_rng;
  std::deque<double> recent_returns;
  std::uint64_t env_steps = 0;
  std::uint64_t updates = 0;
  std::uint64_t episodes = 0;
};

inline TrainerState fresh_trainer(const ExperimentConfig& cfg) {
  TrainerState s;
  s.cfg = cfg;
  s.agent = cfg.resolved_agent();
  s.params = init_params(derive_seed(cfg.train.seed, 5, 0), s.agent);
  s.adam = Adam(s.params, cfg.optim);
  s.actor = make_actor(cfg.env, s.agent, cfg.train.batch, cfg.train.seed);
  s.learner_rng = Rng{cfg.train.seed, 6};
  return s;
}

namespace detail {

inline const char* kStateFields[] = {"reaction", "perception", "prediction", "slow"};

inline LstmState& state_field(AgentState& s, int i) {
  switch (i) {
    case 0: return s.reaction;
    case 1: return s.perception;
    case 2: return s.prediction;
    default: return s.slow;
  }
}

}  // namespace detail

inline Checkpoint trainer_checkpoint(const TrainerState& s) {
  Checkpoint ck;
  ck.put_bytes("config", s.cfg.canonical());
  ck.put_bytes("config_hash", s.cfg.hash());
  ck.put_vector("counters", {static_cast<double>(s.env_steps), static_cast<double>(s.updates),
                             static_cast<double>(s.episodes), static_cast<double>(s.adam.step_count())});
  put_params(ck, s.params);
  for (const auto& [name, m] : s.adam.first_moment()) ck.put("adam/m/" + name, m);
  for (const auto& [name, v] : s.adam.second_moment()) ck.put("adam/v/" + name, v);
  ck.put_bytes("rng/learner", s.learner_rng.state());
  ck.put_bytes("rng/actor", s.actor.rng.state());
  AgentState st = s.actor.state;
  for (int i = 0; i < 4; ++i) {
    ck.put(std::string("actor/") + detail::kStateFields[i] + ".h", detail::state_field(st, i).h);
    ck.put(std::string("actor/") + detail::kStateFields[i] + ".c", detail::state_field(st, i).c);
  }
  ck.put_vector("actor/t", std::vector<double>(st.t.begin(), st.t.end()));
  std::vector<double> flat_obs;
  for (const auto& o : s.actor.obs) flat_obs.insert(flat_obs.end(), o.begin(), o.end());
  ck.put_vector("actor/obs", flat_obs);
  ck.put_vector("actor/prev_action", std::vector<double>(s.actor.prev_action.begin(), s.actor.prev_action.end()));
  ck.put_vector("actor/prev_reward", s.actor.prev_reward);
  ck.put_vector("actor/running_return", s.actor.running_return);
  for (std::size_t b = 0; b < s.actor.batch(); ++b) ck.put_vector("env/" + std::to_string(b), s.actor.envs[b]->save_state());
  ck.put_vector("recent_returns", std::vector<double>(s.recent_returns.begin(), s.recent_returns.end()));
  return ck;
}

/// Rebuilds a trainer from a checkpoint written by trainer_checkpoint.
inline TrainerState restore_trainer(const Checkpoint& ck) {
  const ExperimentConfig cfg = parse_config(ck.bytes("config"), "checkpoint config");
  TrainerState s = fresh_trainer(cfg);
  load_params(ck, s.params);
  ParamMap m, v;
  for (const auto& e : s.params.entries()) {
    m.emplace(e.name, ck.tensor("adam/m/" + e.name));
    v.emplace(e.name, ck.tensor("adam/v/" + e.name));
  }
  const auto& counters = ck.vector("counters");
  if (counters.size() != 4) throw CheckpointError(CheckpointError::Kind::kFormat, "bad counters entry");
  s.env_steps = static_cast<std::uint64_t>(counters[0]);
  s.updates = static_cast<std::uint64_t>(counters[1]);
  s.episodes = static_cast<std::uint64_t>(counters[2]);
  s.adam.restore(std::move(m), std::move(v), static_cast<std::uint64_t>(counters[3]));
  s.learner_rng.set_state(ck.bytes("rng/learner"));
  s.actor.rng.set_state(ck.bytes("rng/actor"));
  for (int i = 0; i < 4; ++i) {
    LstmState& f = detail::state_field(s.actor.state, i);
    const Tensor h = ck.tensor(std::string("actor/") + detail::kStateFields[i] + ".h");
    const Tensor c = ck.tensor(std::string("actor/") + detail::kStateFields[i] + ".c");
    if (h.shape() != f.h.shape() || c.shape() != f.c.shape()) {
      throw CheckpointError(CheckpointError::Kind::kShape, "actor state shape mismatch");
    }
    f = {h, c};
  }
  const auto& t = ck.vector("actor/t");
  s.actor.state.t.assign(t.begin(), t.end());
  const auto& flat_obs = ck.vector("actor/obs");
  const std::size_t batch = s.actor.batch();
  const std::size_t width = flat_obs.size() / batch;
  for (std::size_t b = 0; b < batch; ++b) {
    s.actor.obs[b].assign(flat_obs.begin() + static_cast<std::ptrdiff_t>(b * width),
                          flat_obs.begin() + static_cast<std::ptrdiff_t>((b + 1) * width));
  }
  const auto& pa = ck.vector("actor/prev_action");
  s.actor.prev_action.assign(pa.begin(), pa.end());
  s.actor.prev_reward = ck.vector("actor/prev_reward");
  s.actor.running_return = ck.vector("actor/running_return");
  for (std::size_t b = 0; b < batch; ++b) s.actor.envs[b]->load_state(ck.vector("env/" + std::to_string(b)));
  const auto& rr = ck.vector("recent_returns");
  s.recent_returns.assign(rr.begin(), rr.end());
  return s;
}

/// Parameters and agent config of a checkpoint, for evaluation.
struct LoadedAgent {
  ExperimentConfig cfg;
  AgentConfig agent;
  ParamStore params;
};

inline LoadedAgent load_agent(const std::filesystem::path& path) {
  const Checkpoint ck = load_checkpoint(path);
  LoadedAgent a;
  a.cfg = parse_config(ck.bytes("config"), "checkpoint config");
  a.agent = a.cfg.resolved_agent();
  a.params = init_params(0, a.agent);
  load_params(ck, a.params);
  return a;
}

inline std::string manifest_text(const ExperimentConfig& cfg) {
  std::string out = "# run manifest\nversion = " + std::string(kVersion) + "\nconfig_hash = " + cfg.hash() + "\n";
  out += cfg.canonical();
  return out;
}

namespace detail {

inline bool crossed(std::uint64_t before, std::uint64_t after, std::uint64_t interval) {
  return interval > 0 && before / interval < after / interval;
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f << text;
}

}  // namespace detail

/// One update: collect, learn, maybe evaluate. Returns the metrics record.
inline MetricsRecord trainer_update(TrainerState& s) {
  const ParamMap acting = s.params.values();
  const AgentWeights w = AgentWeights::from(acting, s.agent);
  std::vector<double> finished;
  const TrajectorySegment seg = collect_segment(s.actor, w, s.cfg.train.segment, {}, &finished);
  const std::uint64_t before = s.env_steps;
  s.env_steps += s.cfg.train.segment * s.cfg.train.batch;
  for (double r : finished) {
    s.recent_returns.push_back(r);
    if (s.recent_returns.size() > static_cast<std::size_t>(s.cfg.train.return_window)) s.recent_returns.pop_front();
  }
  s.episodes += finished.size();

  const TrainStats st = train_step(seg, s.params, s.adam, {s.agent, s.cfg.vtrace, s.cfg.aux}, s.learner_rng);
  ++s.updates;

  MetricsRecord rec;
  rec.set("env_steps", static_cast<double>(s.env_steps));
  rec.set("update", static_cast<double>(s.updates));
  double mean_ret = std::numeric_limits<double>::quiet_NaN();
  if (!s.recent_returns.empty()) {
    mean_ret = 0.0;
    for (double r : s.recent_returns) mean_ret += r;
    mean_ret /= static_cast<double>(s.recent_returns.size());
  }
  rec.set("train_return", mean_ret);
  rec.set("train_episodes", static_cast<double>(s.episodes));
  rec.set("loss_total", st.loss_total);
  rec.set("pg", st.pg);
  rec.set("baseline", st.baseline);
  rec.set("entropy", st.entropy);
  rec.set("aux", st.aux);
  rec.set("aux_r_p", st.aux_r_p);
  rec.set("aux_r_q", st.aux_r_q);
  rec.set("aux_p_q", st.aux_p_q);
  rec.set("gate", st.gate);
  rec.set("grad_norm", st.grad_norm);
  if (detail::crossed(before, s.env_steps, s.cfg.train.eval_interval) || s.env_steps >= s.cfg.train.total_steps) {
    EvalOptions eo;
    eo.episodes = s.cfg.train.eval_episodes;
    eo.seed = s.cfg.train.eval_seed;
    const EvalSummary ev = evaluate(s.params, s.agent, s.cfg.env, eo);
    rec.set("eval_return", ev.mean);
    rec.set("eval_stderr", ev.stderr_);
    rec.set("success_rate", ev.success_rate);
  }
  return rec;
}

/// Trains per the config, writing under `opts.out_dir`:
///   manifest.txt, metrics.log (append-only), metrics.csv (on completion),
///   checkpoint.bin, timing.log (wall-clock, kept out of metrics).
inline RunResult run_experiment(const ExperimentConfig& cfg, const RunOptions& opts) {
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(opts.out_dir);
  RunResult res;
  res.metrics_log = opts.out_dir / "metrics.log";
  res.metrics_csv = opts.out_dir / "metrics.csv";
  res.checkpoint = opts.out_dir / "checkpoint.bin";
  res.manifest = opts.out_dir / "manifest.txt";
  const fs::path timing = opts.out_dir / "timing.log";

  TrainerState s;
  std::vector<MetricsRecord> records;
  if (opts.resume && fs::exists(res.checkpoint)) {
    const Checkpoint ck = load_checkpoint(res.checkpoint);
    if (ck.bytes("config_hash") != cfg.hash()) {
      throw ConfigError("resume: config hash " + cfg.hash() + " differs from checkpoint hash " +
                        ck.bytes("config_hash"));
    }
    s = restore_trainer(ck);
    if (fs::exists(res.metrics_log)) {
      for (auto& r : read_metrics_log(res.metrics_log)) {
        if (r.env_steps() <= s.env_steps) records.push_back(std::move(r));
      }
    }
    std::string text = metrics_log_header() + "\n";
    for (const auto& r : records) text += r.to_line() + "\n";
    detail::write_text(res.metrics_log, text);
  } else {
    if (opts.resume && !opts.quiet) std::fprintf(stderr, "no checkpoint in %s; starting fresh\n", opts.out_dir.c_str());
    s = fresh_trainer(cfg);
    detail::write_text(res.metrics_log, metrics_log_header() + "\n");
    detail::write_text(timing, "");
    save_checkpoint(res.checkpoint, trainer_checkpoint(s));
  }
  detail::write_text(res.manifest, manifest_text(cfg));

  std::ofstream log(res.metrics_log, std::ios::app);
  std::ofstream tlog(timing, std::ios::app);
  const auto t0 = std::chrono::steady_clock::now();
  bool stopped = false;
  while (s.env_steps < cfg.train.total_steps) {
    const std::uint64_t before = s.env_steps;
    MetricsRecord rec;
    try {
      rec = trainer_update(s);
    } catch (const NonFiniteError& e) {
      detail::write_text(opts.out_dir / "nonfinite_dump.txt", std::string(e.what()) + "\n" + e.dump());
      throw;
    }
    log << rec.to_line() << "\n";
    log.flush();
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    tlog << "env_steps=" << s.env_steps << " wall_time=" << wall << "\n";
    records.push_back(std::move(rec));
    if (!opts.quiet && records.back().has("eval_return")) {
      std::fprintf(stderr, "[%s] steps=%llu eval_return=%.4f success=%.3f\n", opts.out_dir.c_str(),
                   static_cast<unsigned long long>(s.env_steps), records.back().get("eval_return"),
                   records.back().get("success_rate"));
    }
    const bool stop = opts.stop_after > 0 && s.env_steps >= opts.stop_after && s.env_steps < cfg.train.total_steps;
    if (stop || detail::crossed(before, s.env_steps, cfg.train.checkpoint_interval)) {
      save_checkpoint(res.checkpoint, trainer_checkpoint(s));
    }
    if (stop) {
      stopped = true;
      break;
    }
  }
  res.env_steps = s.env_steps;
  if (!stopped) {
    save_checkpoint(res.checkpoint, trainer_checkpoint(s));
    write_metrics_csv(res.metrics_csv, records);
    res.completed = true;
  }
  res.records = std::move(records);
  return res;
}

}  // namespace ppr
