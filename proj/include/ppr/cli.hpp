#pragma once

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <ostream>
#include <string>
#include <vector>

#include "ppr/ablation.hpp"
#include "ppr/checkpoint.hpp"
#include "ppr/config.hpp"
#include "ppr/metrics.hpp"
#include "ppr/trainer.hpp"

namespace ppr {

enum ExitCode : int { kExitOk = 0, kExitUsage = 2, kExitRuntime = 3 };

namespace detail {

inline ExperimentConfig resolve_config(const std::string& path, const std::vector<std::string>& overrides) {
  ExperimentConfig cfg = load_config_file(path);
  for (const auto& kv : overrides) {
    try {
      apply_override(cfg, kv);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("--set ") + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

}  // namespace detail

/// Entry point shared by the `ppr` binary and the integration tests.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"PPR recurrent agent lab: train, ablate, eval, curves"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "runs", preset, checkpoint, mode = "behavior_pi", env_kind, column = "eval_return",
                           curves_out;
  std::vector<std::string> overrides, files, names;
  bool dry_run = false, resume = false, sample = false, verbose = false;
  std::uint64_t stop_after = 0, seed = 1000003;
  int jobs = 1, episodes = 100, k = 1;

  auto* train = app.add_subcommand("train", "run one experiment");
  train->add_option("config", config_path, "config file (key = value lines)")->required();
  train->add_option("--set", overrides, "override key=value (repeatable)");
  train->add_option("--out-dir", out_dir, "output directory for this run");
  train->add_flag("--dry-run", dry_run, "validate and print the resolved config");
  train->add_flag("--resume", resume, "continue from out-dir/checkpoint.bin");
  train->add_option("--stop-after", stop_after, "stop after this many env steps (checkpointed)");
  train->add_flag("--verbose", verbose, "print eval progress to stderr");

  auto* ablate = app.add_subcommand("ablate", "run an ablation preset");
  ablate->add_option("preset", preset, "loss_combos | tau_sweep | architectures | prediction_rollout")->required();
  ablate->add_option("config", config_path, "base config file")->required();
  ablate->add_option("--set", overrides, "override key=value (repeatable)");
  ablate->add_option("--out-dir", out_dir, "output root");
  ablate->add_option("--jobs", jobs, "runs in parallel")->check(CLI::PositiveNumber);
  ablate->add_flag("--dry-run", dry_run, "list the expanded runs without training");
  ablate->add_flag("--resume", resume, "resume runs that have checkpoints");
  ablate->add_flag("--verbose", verbose, "print eval progress to stderr");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("checkpoint", checkpoint, "checkpoint.bin")->required();
  eval->add_option("--env", env_kind, "env kind (default: the checkpoint's)");
  eval->add_option("--set", overrides, "override env.* keys");
  eval->add_option("--mode", mode, "behavior_pi | prediction_fixed_k | prediction_branch_follow | random");
  eval->add_option("--k", k, "prediction horizon");
  eval->add_option("--episodes", episodes, "episodes (>= 1)");
  eval->add_option("--seed", seed, "evaluation seed");
  eval->add_flag("--sample", sample, "sample actions instead of argmax");

  auto* curves = app.add_subcommand("curves", "merge metrics CSVs onto one step grid");
  curves->add_option("files", files, "metrics.csv files")->required();
  curves->add_option("--column", column, "metric to merge");
  curves->add_option("--names", names, "run names (default: parent directory names)");
  curves->add_option("--out", curves_out, "output CSV (default: stdout)");

  std::vector<std::string> argv_rev(args.rbegin(), args.rend());
  try {
    app.parse(argv_rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*train) {
      ExperimentConfig cfg = detail::resolve_config(config_path, overrides);
      if (dry_run) {
        out << manifest_text(cfg);
        return kExitOk;
      }
      RunOptions ro;
      ro.out_dir = out_dir;
      ro.resume = resume;
      ro.stop_after = stop_after;
      ro.quiet = !verbose;
      const RunResult r = run_experiment(cfg, ro);
      out << "manifest: " << r.manifest.string() << "\n";
      out << "metrics: " << r.metrics_log.string() << "\n";
      if (r.completed) out << "metrics_csv: " << r.metrics_csv.string() << "\n";
      out << "checkpoint: " << r.checkpoint.string() << "\n";
      out << "env_steps: " << r.env_steps << (r.completed ? "" : " (stopped early)") << "\n";
      return kExitOk;
    }
    if (*ablate) {
      ExperimentConfig cfg = detail::resolve_config(config_path, overrides);
      if (dry_run) {
        for (const auto& r : expand_preset(preset, cfg)) {
          out << r.name << " arch=" << to_string(r.cfg.agent.arch) << " tau=" << r.cfg.agent.tau
              << " lambda=(" << r.cfg.aux.lambda_r_p << "," << r.cfg.aux.lambda_r_q << "," << r.cfg.aux.lambda_p_q
              << ")\n";
        }
        return kExitOk;
      }
      AblationOptions ao;
      ao.out_dir = out_dir;
      ao.jobs = jobs;
      ao.quiet = !verbose;
      ao.resume = resume;
      const AblationResult r = run_ablation(preset, cfg, ao);
      out << "runs: " << r.names.size() << "\n";
      for (const auto& n : r.names) out << "  " << n << "\n";
      out << "summary: " << r.summary.string() << "\n";
      if (!r.rollout_table.empty()) {
        out << "rollout_table: " << r.rollout_table.string() << "\n";
        std::ifstream t(r.rollout_table);
        out << t.rdbuf();
      }
      return kExitOk;
    }
    if (*eval) {
      if (episodes < 1) {
        err << "eval: --episodes must be >= 1\n";
        return kExitUsage;
      }
      const EvalMode m = parse_eval_mode(mode);
      LoadedAgent a = load_agent(checkpoint);
      EnvConfig env = a.cfg.env;
      if (!env_kind.empty()) env.kind = parse_env_kind(env_kind);
      ExperimentConfig probe = a.cfg;
      probe.env = env;
      for (const auto& kv : overrides) {
        if (kv.rfind("env.", 0) != 0) throw ConfigError("eval --set accepts env.* keys only, got '" + kv + "'");
        apply_override(probe, kv);
      }
      probe.env.validate();
      if (env_obs_width(probe.env) != a.agent.obs_width) {
        throw ConfigError("env observation width " + std::to_string(env_obs_width(probe.env)) +
                          " differs from the checkpoint's " + std::to_string(a.agent.obs_width));
      }
      EvalOptions eo;
      eo.mode = m;
      eo.k = k;
      eo.episodes = episodes;
      eo.seed = seed;
      eo.greedy = !sample;
      const EvalSummary s = evaluate(a.params, a.agent, probe.env, eo);
      char buf[256];
      std::snprintf(buf, sizeof buf, "%s k=%d episodes=%d: mean return %.6f +/- %.6f (success %.4f)\n",
                    to_string(m).c_str(), k, episodes, s.mean, s.stderr_, s.success_rate);
      out << buf;
      return kExitOk;
    }
    if (*curves) {
      std::vector<Curve> cs;
      for (std::size_t i = 0; i < files.size(); ++i) {
        std::string name = i < names.size() ? names[i] : std::filesystem::path(files[i]).parent_path().filename().string();
        if (name.empty()) name = "run" + std::to_string(i);
        cs.push_back(curve_from_csv(files[i], column, name));
      }
      const std::string csv = merge_curves(cs);
      if (curves_out.empty()) {
        out << csv;
      } else {
        detail::write_text(curves_out, csv);
        out << "curves: " << curves_out << "\n";
      }
      return kExitOk;
    }
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::out_of_range& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace ppr
