#include <gtest/gtest.h>

#include <cmath>

#include "ppr/agents.hpp"

using namespace ppr;

namespace {

AgentConfig make_cfg(Architecture a, int tau, std::size_t hidden = 6, bool share = true) {
  AgentConfig c;
  c.arch = a;
  c.tau = tau;
  c.hidden = hidden;
  c.obs_width = 3;
  c.encoder_width = 5;
  c.head_hidden = 4;
  c.share_fast = share;
  return c;
}

struct Inputs {
  std::vector<Tensor> obs;
  std::vector<std::vector<int>> a;
  std::vector<std::vector<double>> r;
};

Inputs random_inputs(Rng& rng, std::size_t steps, std::size_t batch, std::size_t width) {
  Inputs in;
  for (std::size_t t = 0; t < steps; ++t) {
    std::vector<double> o(batch * width);
    for (double& v : o) v = 2.0 * rng.uniform() - 1.0;
    in.obs.emplace_back(Shape{batch, width}, o);
    std::vector<int> a(batch);
    std::vector<double> r(batch);
    for (std::size_t b = 0; b < batch; ++b) {
      a[b] = rng.uniform_int(4);
      r[b] = rng.uniform() < 0.3 ? 1.0 : 0.0;
    }
    in.a.push_back(a);
    in.r.push_back(r);
  }
  return in;
}

Tensor random_like(Rng& rng, const Tensor& t) {
  std::vector<double> v(t.size());
  for (double& x : v) x = 4.0 * rng.uniform() - 2.0;
  return Tensor(t.shape(), v);
}

struct Trace {
  std::vector<StepResult> steps;
};

/// Unrolls from the initial state. `slow_inject[t]`, when present, overrides the slow output.
Trace unroll(const AgentWeights& w, const Inputs& in, std::size_t batch, const std::vector<Tensor>* slow_inject = nullptr,
             AgentState* start = nullptr) {
  Trace tr;
  AgentState s = start ? *start : initial_state(batch, w.cfg);
  for (std::size_t t = 0; t < in.obs.size(); ++t) {
    StepOptions o;
    if (slow_inject) o.slow_override = &(*slow_inject)[t];
    StepResult r = agent_step(w, {in.obs[t], in.a[t], in.r[t]}, s, o);
    s = r.state;
    tr.steps.push_back(std::move(r));
  }
  return tr;
}

bool same_state(const LstmState& a, const LstmState& b) { return bit_equal(a.h, b.h) && bit_equal(a.c, b.c); }

}  // namespace

TEST(AgentState, InitialIsZeros) {
  const AgentConfig c = make_cfg(Architecture::kPpr, 4);
  const AgentState s = initial_state(2, c);
  EXPECT_EQ(s.t, (std::vector<long>{0, 0}));
  for (const LstmState* l : {&s.reaction, &s.perception, &s.prediction, &s.slow}) {
    for (double v : l->h.data()) EXPECT_EQ(v, 0.0);
    for (double v : l->c.data()) EXPECT_EQ(v, 0.0);
  }
}

TEST(AgentState, ValueHeadFiniteOnInitialState) {
  Rng rng(1);
  for (Architecture a : {Architecture::kFlat, Architecture::kMinimalHier, Architecture::kPerceptionReaction,
                         Architecture::kPpr, Architecture::kFlatPrediction}) {
    const AgentConfig c = make_cfg(a, 3);
    const ParamMap p = init_params(2, c).values();
    const AgentWeights w = AgentWeights::from(p, c);
    const Inputs in = random_inputs(rng, 1, 2, 3);
    const StepResult r = agent_step(w, {in.obs[0], in.a[0], in.r[0]}, initial_state(2, c));
    ASSERT_EQ(r.out.value.shape(), Shape{2});
    for (double v : r.out.value.data()) EXPECT_TRUE(std::isfinite(v)) << to_string(a);
  }
}

TEST(AgentState, EpisodeResetMasks) {
  Rng rng(2);
  const AgentConfig c = make_cfg(Architecture::kPpr, 3);
  const ParamMap p = init_params(2, c).values();
  const AgentWeights w = AgentWeights::from(p, c);
  const Inputs in = random_inputs(rng, 5, 3, 3);
  const AgentState s = unroll(w, in, 3).steps.back().state;

  const AgentState all = episode_reset(s, {1, 1, 1});
  const AgentState fresh = initial_state(3, c);
  EXPECT_TRUE(same_state(all.reaction, fresh.reaction) && same_state(all.slow, fresh.slow) &&
              same_state(all.perception, fresh.perception) && same_state(all.prediction, fresh.prediction));
  EXPECT_EQ(all.t, fresh.t);

  const AgentState none = episode_reset(s, {0, 0, 0});
  EXPECT_TRUE(same_state(none.reaction, s.reaction) && same_state(none.slow, s.slow));
  EXPECT_EQ(none.t, s.t);

  const AgentState mixed = episode_reset(s, {0, 1, 0});
  const std::size_t h = c.hidden;
  for (const auto& [after, before] : {std::pair{&mixed.reaction, &s.reaction}, std::pair{&mixed.slow, &s.slow},
                                      std::pair{&mixed.perception, &s.perception},
                                      std::pair{&mixed.prediction, &s.prediction}}) {
    for (std::size_t row = 0; row < 3; ++row) {
      for (std::size_t j = 0; j < h; ++j) {
        const double want_h = row == 1 ? 0.0 : before->h[row * h + j];
        const double want_c = row == 1 ? 0.0 : before->c[row * h + j];
        EXPECT_EQ(after->h[row * h + j], want_h);
        EXPECT_EQ(after->c[row * h + j], want_c);
      }
    }
  }
  EXPECT_EQ(mixed.t, (std::vector<long>{5, 0, 5}));
}

TEST(FlatAgent, ZeroParamsUniformPolicy) {
  const AgentConfig c = make_cfg(Architecture::kFlat, 1);
  ParamStore s = init_params(0, c);
  for (const auto& e : s.entries()) s.set(e.name, Tensor::zeros(e.value.shape()));
  const ParamMap p = s.values();
  Rng rng(3);
  const Inputs in = random_inputs(rng, 1, 2, 3);
  const StepResult r = flat_step(AgentWeights::from(p, c), {in.obs[0], in.a[0], in.r[0]}, initial_state(2, c));
  const Tensor probs = softmax(r.out.pi);
  for (double v : probs.data()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(FlatAgent, DeterministicAndMatchesManualUnroll) {
  const AgentConfig c = make_cfg(Architecture::kFlat, 1);
  const ParamMap p = init_params(4, c).values();
  const AgentWeights w = AgentWeights::from(p, c);
  Rng rng(5);
  const Inputs in = random_inputs(rng, 3, 2, 3);
  const Trace a = unroll(w, in, 2);
  const Trace b = unroll(w, in, 2);
  for (std::size_t t = 0; t < 3; ++t) EXPECT_TRUE(bit_equal(a.steps[t].out.pi, b.steps[t].out.pi));

  // independent re-computation from the cell and head definitions
  const LstmParams core = LstmParams::from(p, "core");
  const MlpParams enc = MlpParams::from(p, "encoder", Activation::kRelu);
  const MlpParams pi = MlpParams::from(p, "pi", Activation::kNone);
  LstmState s = LstmState::zeros(2, c.hidden);
  for (std::size_t t = 0; t < 3; ++t) {
    const Tensor x = embed_inputs(mlp_forward(in.obs[t], enc), in.a[t], in.r[t], false, 4);
    s = lstm_step(concat({x, Tensor::zeros({2, c.hidden})}, 1), s, core);
    EXPECT_TRUE(bit_equal(mlp_forward(s.h, pi), a.steps[t].out.pi)) << t;
  }
}

TEST(MinimalHier, SlowChangesOnlyAtTicks) {
  for (int tau : {1, 3}) {
    const AgentConfig c = make_cfg(Architecture::kMinimalHier, tau);
    const ParamMap p = init_params(6, c).values();
    Rng rng(7);
    const Inputs in = random_inputs(rng, 10, 1, 3);
    const Trace tr = unroll(AgentWeights::from(p, c), in, 1);
    AgentState prev = initial_state(1, c);
    int applications = 0;
    for (std::size_t t = 0; t < 10; ++t) {
      const bool tick = static_cast<int>(t) % tau == 0;
      const bool changed = !same_state(tr.steps[t].state.slow, prev.slow);
      // at t = 0 the slow input and state are both zero, so the tick leaves it at zero
      if (t > 0) EXPECT_EQ(changed, tick) << "tau=" << tau << " t=" << t;
      applications += tr.steps[t].trace.slow_tick[0];
      prev = tr.steps[t].state;
    }
    EXPECT_EQ(applications, tau == 3 ? 4 : 10);
  }
}

TEST(MinimalHier, FastRestartsFromZeroAtTicks) {
  const AgentConfig c = make_cfg(Architecture::kMinimalHier, 3);
  const ParamMap p = init_params(6, c).values();
  const AgentWeights w = AgentWeights::from(p, c);
  Rng rng(8);
  const Inputs in = random_inputs(rng, 4, 1, 3);
  const Trace tr = unroll(w, in, 1);
  // at t = 3 the fast core sees ∅ and the fresh slow output
  const AgentState before = tr.steps[2].state;
  const LstmParams fast = LstmParams::from(p, "fast");
  const LstmParams slow = LstmParams::from(p, "slow");
  const LstmState s_new =
      lstm_step(concat({Tensor::zeros({1, c.embed_width()}), before.reaction.h}, 1), before.slow, slow);
  const Tensor x = embed_inputs(mlp_forward(in.obs[3], MlpParams::from(p, "encoder", Activation::kRelu)), in.a[3],
                                in.r[3], false, 4);
  const LstmState f_new = lstm_step(concat({x, s_new.h}, 1), LstmState::zeros(1, c.hidden), fast);
  EXPECT_TRUE(same_state(tr.steps[3].state.slow, s_new));
  EXPECT_TRUE(same_state(tr.steps[3].state.reaction, f_new));
}

TEST(Ppr, ClockScheduleTauFour) {
  const AgentConfig c = make_cfg(Architecture::kPpr, 4);
  const ParamMap p = init_params(9, c).values();
  Rng rng(10);
  const Inputs in = random_inputs(rng, 10, 1, 3);
  const Trace tr = unroll(AgentWeights::from(p, c), in, 1);
  std::vector<int> slow, perc, fast;
  for (int t = 0; t < 10; ++t) {
    if (tr.steps[t].trace.slow_tick[0]) slow.push_back(t);
    if (tr.steps[t].trace.perception_reset[0]) perc.push_back(t);
    if (tr.steps[t].trace.fast_reset[0]) fast.push_back(t);
  }
  EXPECT_EQ(slow, (std::vector<int>{0, 4, 8}));
  EXPECT_EQ(perc, (std::vector<int>{1, 5, 9}));
  EXPECT_EQ(fast, (std::vector<int>{0, 4, 8}));
}

TEST(Ppr, PerRowPhasesMatchSingleRowSteps) {
  const AgentConfig c = make_cfg(Architecture::kPpr, 3);
  const ParamMap p = init_params(11, c).values();
  const AgentWeights w = AgentWeights::from(p, c);
  Rng rng(12);
  const Inputs warm = random_inputs(rng, 7, 4, 3);
  AgentState s = unroll(w, warm, 4).steps.back().state;
  s.t = {0, 1, 2, 4};
  const Inputs in = random_inputs(rng, 1, 4, 3);
  const StepResult batch = ppr_step(w, {in.obs[0], in.a[0], in.r[0]}, s);
  for (std::size_t row = 0; row < 4; ++row) {
    AgentState one = initial_state(1, c);
    auto pick = [&](const LstmState& l) { return LstmState{slice(l.h, 0, row, row + 1), slice(l.c, 0, row, row + 1)}; };
    one.reaction = pick(s.reaction);
    one.perception = pick(s.perception);
    one.prediction = pick(s.prediction);
    one.slow = pick(s.slow);
    one.t = {s.t[row]};
    const StepResult single = ppr_step(w, {slice(in.obs[0], 0, row, row + 1), {in.a[0][row]}, {in.r[0][row]}}, one);
    for (std::size_t j = 0; j < 4; ++j) {
      EXPECT_NEAR(single.out.pi[j], batch.out.pi[row * 4 + j], 1e-12) << row;
      EXPECT_NEAR(single.out.pi_prime->data()[j], batch.out.pi_prime->data()[row * 4 + j], 1e-12) << row;
      EXPECT_NEAR(single.out.pi_dprime->data()[j], batch.out.pi_dprime->data()[row * 4 + j], 1e-12) << row;
    }
  }
}

TEST(Ppr, PredictionIgnoresCurrentWindowObservations) {
  Rng rng(13);
  for (int trial = 0; trial < 30; ++trial) {
    const int tau = std::vector<int>{2, 3, 4, 8}[static_cast<std::size_t>(rng.uniform_int(4))];
    const AgentConfig c = make_cfg(Architecture::kPpr, tau, 5, trial % 2 == 0);
    const ParamMap p = init_params(100 + trial, c).values();
    const AgentWeights w = AgentWeights::from(p, c);
    const std::size_t steps = 12;
    Inputs in = random_inputs(rng, steps, 2, 3);
    const Trace base = unroll(w, in, 2);
    const std::size_t t = 1 + static_cast<std::size_t>(rng.uniform_int(static_cast<int>(steps - 1)));
    const std::size_t window = static_cast<std::size_t>(tau) * (t / static_cast<std::size_t>(tau));
    if (window == t) continue;
    const std::size_t s = window + 1 + static_cast<std::size_t>(rng.uniform_int(static_cast<int>(t - window)));
    in.obs[s] = random_like(rng, in.obs[s]);
    const Trace pert = unroll(w, in, 2);
    EXPECT_TRUE(bit_equal(*base.steps[t].out.pi_dprime, *pert.steps[t].out.pi_dprime)) << "t=" << t << " s=" << s;
  }
}

TEST(Ppr, PerceptionIgnoresSlowStateAndPreResetObservations) {
  Rng rng(14);
  for (int trial = 0; trial < 30; ++trial) {
    const int tau = std::vector<int>{2, 3, 4, 8}[static_cast<std::size_t>(rng.uniform_int(4))];
    const AgentConfig c = make_cfg(Architecture::kPpr, tau, 5, trial % 2 == 1);
    const ParamMap p = init_params(200 + trial, c).values();
    const AgentWeights w = AgentWeights::from(p, c);
    const std::size_t steps = 12;
    Inputs in = random_inputs(rng, steps, 2, 3);
    const Trace base = unroll(w, in, 2);
    const long t = 1 + rng.uniform_int(static_cast<int>(steps - 1));
    const long last = tau * ((t - 1) / tau);  // observations at s <= last precede the reset
    const long s = rng.uniform_int(static_cast<int>(last + 1));
    Inputs moved = in;
    moved.obs[static_cast<std::size_t>(s)] = random_like(rng, in.obs[static_cast<std::size_t>(s)]);
    const Trace pert = unroll(w, moved, 2);
    EXPECT_TRUE(bit_equal(*base.steps[t].out.pi_prime, *pert.steps[t].out.pi_prime)) << "t=" << t << " s=" << s;

    AgentState st = base.steps[static_cast<std::size_t>(t - 1)].state;
    st.slow = {random_like(rng, st.slow.h), random_like(rng, st.slow.c)};
    const std::size_t ut = static_cast<std::size_t>(t);
    const StepResult r = ppr_step(w, {in.obs[ut], in.a[ut], in.r[ut]}, st);
    EXPECT_TRUE(bit_equal(*r.out.pi_prime, *base.steps[ut].out.pi_prime));
  }
}

TEST(Ppr, ReactionLocalWithInjectedSlowOutputs) {
  Rng rng(15);
  for (int trial = 0; trial < 30; ++trial) {
    const int tau = std::vector<int>{2, 3, 4, 8}[static_cast<std::size_t>(rng.uniform_int(4))];
    const AgentConfig c = make_cfg(Architecture::kPpr, tau, 5);
    const ParamMap p = init_params(300 + trial, c).values();
    const AgentWeights w = AgentWeights::from(p, c);
    const std::size_t steps = 14;
    Inputs in = random_inputs(rng, steps, 2, 3);
    const Trace base = unroll(w, in, 2);
    std::vector<Tensor> slow;
    for (const auto& st : base.steps) slow.push_back(st.state.slow.h);
    const std::size_t t = static_cast<std::size_t>(tau) + static_cast<std::size_t>(rng.uniform_int(static_cast<int>(steps) - tau));
    const std::size_t reset = static_cast<std::size_t>(tau) * (t / static_cast<std::size_t>(tau));
    const std::size_t s = static_cast<std::size_t>(rng.uniform_int(static_cast<int>(reset)));
    in.obs[s] = random_like(rng, in.obs[s]);
    const Trace pert = unroll(w, in, 2, &slow);
    EXPECT_TRUE(bit_equal(base.steps[t].out.pi, pert.steps[t].out.pi)) << "t=" << t << " s=" << s;
  }
}

TEST(Ppr, PhasePersistsAcrossSegments) {
  const AgentConfig c = make_cfg(Architecture::kPpr, 16);
  const ParamMap p = init_params(16, c).values();
  const AgentWeights w = AgentWeights::from(p, c);
  Rng rng(17);
  const Inputs all = random_inputs(rng, 100, 2, 3);
  const Trace whole = unroll(w, all, 2);
  Inputs first, second;
  for (std::size_t t = 0; t < 100; ++t) {
    Inputs& dst = t < 50 ? first : second;
    dst.obs.push_back(all.obs[t]);
    dst.a.push_back(all.a[t]);
    dst.r.push_back(all.r[t]);
  }
  const Trace a = unroll(w, first, 2);
  AgentState carried = a.steps.back().state;
  const Trace b = unroll(w, second, 2, nullptr, &carried);
  const AgentState& x = whole.steps.back().state;
  const AgentState& y = b.steps.back().state;
  EXPECT_TRUE(same_state(x.reaction, y.reaction) && same_state(x.perception, y.perception) &&
              same_state(x.prediction, y.prediction) && same_state(x.slow, y.slow));
  EXPECT_EQ(x.t, y.t);
}

TEST(Ppr, SharedCoreGradientCollectsEveryBranch) {
  const AgentConfig c = make_cfg(Architecture::kPpr, 2);
  Rng rng(18);
  const Inputs in = random_inputs(rng, 4, 2, 3);
  auto grad_with = [&](const std::string& zero_head) {
    ParamStore s = init_params(19, c);
    if (!zero_head.empty()) {
      for (const char* part : {".1.w", ".1.b"}) s.set(zero_head + part, Tensor::zeros(s.get(zero_head + part).shape()));
    }
    Tape tape;
    const ParamMap bound = s.bind(tape);
    const Trace tr = unroll(AgentWeights::from(bound, c), in, 2);
    Tensor l = Tensor::scalar(0.0);
    for (const auto& st : tr.steps) {
      l = add(l, add(sum(mul(st.out.pi, st.out.pi)),
                     add(sum(mul(*st.out.pi_prime, *st.out.pi_prime)), sum(mul(*st.out.pi_dprime, *st.out.pi_dprime)))));
    }
    return tape.backward(l).of(bound.at("fast.w_x"));
  };
  const Tensor all = grad_with("");
  for (const std::string head : {"pi", "pi_prime", "pi_dprime"}) {
    EXPECT_FALSE(bit_equal(all, grad_with(head))) << head;
  }
}

TEST(Ppr, PerceptionReactionHasNoAuxHeads) {
  const AgentConfig c = make_cfg(Architecture::kPerceptionReaction, 2);
  const ParamMap p = init_params(1, c).values();
  EXPECT_FALSE(p.count("pi_prime.0.w"));
  Rng rng(20);
  const Inputs in = random_inputs(rng, 1, 1, 3);
  const StepResult r = agent_step(AgentWeights::from(p, c), {in.obs[0], in.a[0], in.r[0]}, initial_state(1, c));
  EXPECT_FALSE(r.out.pi_prime.has_value());
  EXPECT_FALSE(r.out.pi_dprime.has_value());
}

TEST(FlatPrediction, BranchNeverSeesObservations) {
  Rng rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    const AgentConfig c = make_cfg(Architecture::kFlatPrediction, 4, 5, trial % 2 == 0);
    const ParamMap p = init_params(400 + trial, c).values();
    const AgentWeights w = AgentWeights::from(p, c);
    Inputs in = random_inputs(rng, 10, 2, 3);
    const Trace base = unroll(w, in, 2);
    const std::size_t t = 1 + static_cast<std::size_t>(rng.uniform_int(9));
    const std::size_t root = 4 * (t / 4);  // branch forks from the state before `root`
    if (root == t) continue;
    const std::size_t s = root + static_cast<std::size_t>(rng.uniform_int(static_cast<int>(t - root + 1)));
    in.obs[s] = random_like(rng, in.obs[s]);
    const Trace pert = unroll(w, in, 2);
    EXPECT_TRUE(bit_equal(*base.steps[t].out.pi_dprime, *pert.steps[t].out.pi_dprime));
  }
}

// ---------------------------------------------------------------------------
// Prediction rollouts

namespace {

/// Deterministic chain: reward depends on (t, action); observations are noise.
class ChainEnv : public Env {
 public:
  ChainEnv(std::uint64_t seed, std::uint64_t noise_seed) : Env(seed, 50), noise_(noise_seed) {}
  std::size_t obs_width() const override { return 3; }
  std::string name() const override { return "chain"; }
  std::vector<double> observe() const override {
    Rng r{noise_, static_cast<std::uint64_t>(time())};
    return {r.uniform(), r.uniform(), r.uniform()};
  }

 protected:
  void begin_episode(Rng&) override {}
  double advance(int action, EnvStep&) override { return (action + time()) % 3 == 0 ? 1.0 : -0.5; }
  std::vector<double> episode_state() const override { return {}; }
  void restore_episode(std::span<const double>) override {}

 private:
  std::uint64_t noise_;
};

}  // namespace

TEST(Rollout, RejectsBadHorizonAndArchitecture) {
  const AgentConfig c = make_cfg(Architecture::kPpr, 4);
  const ParamMap p = init_params(1, c).values();
  const AgentWeights w = AgentWeights::from(p, c);
  ChainEnv env(1, 1);
  env.reset();
  Rng rng(1);
  EXPECT_THROW(prediction_rollout(w, initial_state(1, c), 0, 0.0, 0, env, rng), std::out_of_range);
  EXPECT_THROW(prediction_rollout(w, initial_state(1, c), 0, 0.0, 11, env, rng), std::out_of_range);
  const AgentConfig f = make_cfg(Architecture::kFlat, 4);
  const ParamMap fp = init_params(1, f).values();
  EXPECT_THROW(prediction_rollout(AgentWeights::from(fp, f), initial_state(1, f), 0, 0.0, 1, env, rng),
               std::invalid_argument);
}

TEST(Rollout, KOneMatchesBehaviorWhenHeadsCoincide) {
  const AgentConfig c = make_cfg(Architecture::kFlatPrediction, 4);
  ParamStore s = init_params(2, c);
  for (const auto& e : s.entries()) {
    if (e.name.rfind("encoder", 0) == 0) s.set(e.name, Tensor::zeros(e.value.shape()));
  }
  for (const char* part : {".0.w", ".0.b", ".1.w", ".1.b"}) {
    s.set(std::string("pi_dprime") + part, s.get(std::string("pi") + part));
  }
  const ParamMap p = s.values();
  const AgentWeights w = AgentWeights::from(p, c);
  Rng rng(3);
  const Inputs in = random_inputs(rng, 6, 1, 3);
  const AgentState st = unroll(w, in, 1).steps[4].state;
  const StepResult behave = agent_step(w, {in.obs[5], in.a[5], in.r[5]}, st);
  ChainEnv env(1, 1);
  env.reset();
  Rng r2(4);
  const RolloutResult ro = prediction_rollout(w, st, in.a[5][0], in.r[5][0], 1, env, r2);
  ASSERT_EQ(ro.logits.size(), 1u);
  EXPECT_TRUE(bit_equal(ro.logits[0], behave.out.pi));
}

TEST(Rollout, ObservationsDoNotMatter) {
  const AgentConfig c = make_cfg(Architecture::kPpr, 4);
  const ParamMap p = init_params(5, c).values();
  const AgentWeights w = AgentWeights::from(p, c);
  Rng rng(6);
  const Inputs in = random_inputs(rng, 5, 1, 3);
  const AgentState st = unroll(w, in, 1).steps.back().state;
  ChainEnv a(1, 111), b(1, 222);
  a.reset();
  b.reset();
  Rng ra(7), rb(7);
  const RolloutResult x = prediction_rollout(w, st, 1, 0.0, 7, a, ra);
  const RolloutResult y = prediction_rollout(w, st, 1, 0.0, 7, b, rb);
  ASSERT_EQ(x.logits.size(), y.logits.size());
  for (std::size_t i = 0; i < x.logits.size(); ++i) EXPECT_TRUE(bit_equal(x.logits[i], y.logits[i]));
  EXPECT_EQ(x.actions, y.actions);
}

TEST(Rollout, RewardsMatchScriptedPlayout) {
  const AgentConfig c = make_cfg(Architecture::kFlatPrediction, 4);
  const ParamMap p = init_params(8, c).values();
  const AgentWeights w = AgentWeights::from(p, c);
  ChainEnv env(1, 1);
  env.reset();
  Rng rng(9);
  const RolloutResult ro = prediction_rollout(w, initial_state(1, c), 0, 0.0, 3, env, rng);
  ASSERT_EQ(ro.actions.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    const double oracle = (ro.actions[i] + static_cast<int>(i)) % 3 == 0 ? 1.0 : -0.5;
    EXPECT_EQ(ro.rewards[i], oracle);
  }
}

TEST(Rollout, BranchInputsUseOwnActionsAndRewards) {
  const AgentConfig c = make_cfg(Architecture::kPpr, 4);
  const ParamMap p = init_params(10, c).values();
  const AgentWeights w = AgentWeights::from(p, c);
  const AgentState st = initial_state(1, c);
  ChainEnv env(1, 1);
  env.reset();
  Rng rng(11);
  const RolloutResult ro = prediction_rollout(w, st, 2, 0.5, 4, env, rng);
  PredictionBranch br = branch_from(w, st);
  std::vector<int> a{2};
  std::vector<double> r{0.5};
  for (std::size_t i = 0; i < ro.logits.size(); ++i) {
    EXPECT_TRUE(bit_equal(prediction_branch_step(w, br, a, r), ro.logits[i]));
    a[0] = ro.actions[i];
    r[0] = ro.rewards[i];
  }
}
