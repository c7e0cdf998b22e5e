#pragma once

#include <atomic>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <mutex>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "ppr/config.hpp"
#include "ppr/trainer.hpp"

namespace ppr {

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names = {"loss_combos", "tau_sweep", "architectures", "prediction_rollout"};
  return names;
}

struct AblationRun {
  std::string name;
  ExperimentConfig cfg;
};

namespace detail {

inline double on_value(double base) { return base > 0.0 ? base : 1.0; }

inline void zero_aux(ExperimentConfig& c) {
  c.aux.lambda_r_p = 0.0;
  c.aux.lambda_r_q = 0.0;
  c.aux.lambda_p_q = 0.0;
}

}  // namespace detail

/// Expands a preset into named configs. Every config is validated.
inline std::vector<AblationRun> expand_preset(const std::string& preset, const ExperimentConfig& base) {
  std::vector<AblationRun> runs;
  if (preset == "loss_combos") {
    // bit 0: d(π,π′), bit 1: d(π,π″), bit 2: d(π′,π″); all-off is Perception-Reaction
    for (int mask = 0; mask < 8; ++mask) {
      ExperimentConfig c = base;
      c.agent.arch = Architecture::kPpr;
      c.aux.lambda_r_p = (mask & 1) ? detail::on_value(base.aux.lambda_r_p) : 0.0;
      c.aux.lambda_r_q = (mask & 2) ? detail::on_value(base.aux.lambda_r_q) : 0.0;
      c.aux.lambda_p_q = (mask & 4) ? detail::on_value(base.aux.lambda_p_q) : 0.0;
      runs.push_back({"rp" + std::to_string(mask & 1) + "_rq" + std::to_string((mask >> 1) & 1) + "_pq" +
                          std::to_string((mask >> 2) & 1),
                      c});
    }
  } else if (preset == "tau_sweep") {
    for (int tau : {2, 4, 8, 16, 32}) {
      ExperimentConfig c = base;
      c.agent.tau = tau;
      runs.push_back({"tau_" + std::to_string(tau), c});
    }
  } else if (preset == "architectures") {
    for (Architecture a : {Architecture::kFlat, Architecture::kMinimalHier, Architecture::kPerceptionReaction,
                           Architecture::kPpr}) {
      ExperimentConfig c = base;
      c.agent.arch = a;
      if (a == Architecture::kPpr) {
        c.aux.lambda_r_p = detail::on_value(base.aux.lambda_r_p);
        c.aux.lambda_r_q = detail::on_value(base.aux.lambda_r_q);
        c.aux.lambda_p_q = detail::on_value(base.aux.lambda_p_q);
      } else {
        detail::zero_aux(c);
      }
      runs.push_back({to_string(a), c});
    }
  } else if (preset == "prediction_rollout") {
    ExperimentConfig c = base;
    c.agent.arch = Architecture::kFlatPrediction;
    detail::zero_aux(c);
    c.aux.lambda_r_q = detail::on_value(base.aux.lambda_r_q);
    runs.push_back({"flat_prediction", c});
  } else {
    std::string valid;
    for (const auto& n : preset_names()) valid += (valid.empty() ? "" : ", ") + n;
    throw ConfigError("unknown ablation preset '" + preset + "' (valid: " + valid + ")");
  }
  std::set<std::string> seen;
  for (const auto& r : runs) {
    r.cfg.validate();
    if (!seen.insert(r.name).second) throw std::logic_error("duplicate run name " + r.name);
  }
  return runs;
}

inline const std::vector<int>& rollout_horizons() {
  static const std::vector<int> k = {1, 3, 7};
  return k;
}

struct RolloutRow {
  std::string scheme;
  int k = 0;
  EvalSummary summary;
};

/// The three behavior schemes at each horizon, plus nothing else.
inline std::vector<RolloutRow> rollout_table(const ParamStore& params, const AgentConfig& agent, const EnvConfig& env,
                                             int episodes, std::uint64_t seed, bool greedy) {
  std::vector<RolloutRow> rows;
  for (EvalMode m : {EvalMode::kBehaviorPi, EvalMode::kPredictionFixedK, EvalMode::kPredictionBranchFollow}) {
    for (int k : rollout_horizons()) {
      EvalOptions eo;
      eo.mode = m;
      eo.k = k;
      eo.episodes = episodes;
      eo.seed = seed;
      eo.greedy = greedy;
      rows.push_back({to_string(m), k, evaluate(params, agent, env, eo)});
    }
  }
  return rows;
}

inline std::string format_rollout_table(const std::vector<RolloutRow>& rows, const EvalSummary& random) {
  std::string out = "scheme,k,mean_return,stderr,success_rate\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%d,%.6f,%.6f,%.4f\n", r.scheme.c_str(), r.k, r.summary.mean,
                  r.summary.stderr_, r.summary.success_rate);
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "random,0,%.6f,%.6f,%.4f\n", random.mean, random.stderr_, random.success_rate);
  out += buf;
  return out;
}

struct AblationOptions {
  std::filesystem::path out_dir;
  int jobs = 1;
  bool quiet = true;
  bool resume = false;
};

struct AblationResult {
  std::vector<std::string> names;
  std::vector<RunResult> runs;
  std::filesystem::path summary;
  std::filesystem::path rollout_table;
};

/// Runs every expanded config under out_dir/<preset>/<run>. Runs are
/// independent; `jobs` > 1 runs them on worker threads.
inline AblationResult run_ablation(const std::string& preset, const ExperimentConfig& base,
                                   const AblationOptions& opts) {
  const std::vector<AblationRun> runs = expand_preset(preset, base);
  const std::filesystem::path root = opts.out_dir / preset;
  std::filesystem::create_directories(root);
  AblationResult res;
  res.runs.resize(runs.size());
  std::vector<std::exception_ptr> errors(runs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < runs.size(); i = next++) {
      try {
        RunOptions ro;
        ro.out_dir = root / runs[i].name;
        ro.quiet = opts.quiet;
        ro.resume = opts.resume;
        res.runs[i] = run_experiment(runs[i].cfg, ro);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const int jobs = std::max(1, std::min<int>(opts.jobs, static_cast<int>(runs.size())));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  std::string summary = "run,arch,tau,lambda_r_p,lambda_r_q,lambda_p_q,env_steps,final_eval_return,final_success_rate\n";
  for (std::size_t i = 0; i < runs.size(); ++i) {
    res.names.push_back(runs[i].name);
    const auto& c = runs[i].cfg;
    double ev = std::nan(""), sr = std::nan("");
    for (auto it = res.runs[i].records.rbegin(); it != res.runs[i].records.rend(); ++it) {
      if (it->has("eval_return")) {
        ev = it->get("eval_return");
        sr = it->get("success_rate");
        break;
      }
    }
    summary += runs[i].name + "," + to_string(c.agent.arch) + "," + std::to_string(c.agent.tau) + "," +
               MetricsRecord::format_value(c.aux.lambda_r_p) + "," + MetricsRecord::format_value(c.aux.lambda_r_q) +
               "," + MetricsRecord::format_value(c.aux.lambda_p_q) + "," + std::to_string(res.runs[i].env_steps) +
               "," + MetricsRecord::format_value(ev) + "," + MetricsRecord::format_value(sr) + "\n";
  }
  res.summary = root / "summary.csv";
  detail::write_text(res.summary, summary);

  if (preset == "prediction_rollout") {
    const LoadedAgent a = load_agent(res.runs.front().checkpoint);
    const int episodes = runs.front().cfg.train.eval_episodes;
    const std::uint64_t seed = runs.front().cfg.train.eval_seed;
    const auto rows = rollout_table(a.params, a.agent, a.cfg.env, episodes, seed, false);
    EvalOptions ro;
    ro.mode = EvalMode::kUniformRandom;
    ro.episodes = episodes;
    ro.seed = seed;
    const EvalSummary random = evaluate(a.params, a.agent, a.cfg.env, ro);
    res.rollout_table = root / "rollout_table.csv";
    detail::write_text(res.rollout_table, format_rollout_table(rows, random));
  }
  return res;
}

}  // namespace ppr
