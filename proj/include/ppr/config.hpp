#pragma once

#include <zlib.h>

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "ppr/cores.hpp"
#include "ppr/envs.hpp"
#include "ppr/losses.hpp"
#include "ppr/optim.hpp"

namespace ppr {

/// Parse or validation failure; `line` is 0 when not tied to a file line.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(const std::string& msg, std::string source = {}, int line = 0)
      : std::invalid_argument(format(msg, source, line)), line_(line) {}
  int line() const { return line_; }

 private:
  static std::string format(const std::string& msg, const std::string& source, int line) {
    if (line > 0) return (source.empty() ? std::string("config") : source) + ":" + std::to_string(line) + ": " + msg;
    if (!source.empty()) return source + ": " + msg;
    return msg;
  }
  int line_;
};

struct TrainConfig {
  std::size_t segment = 32;  // T
  std::size_t batch = 32;    // B
  std::uint64_t total_steps = 200000;
  std::uint64_t eval_interval = 50000;
  int eval_episodes = 100;
  std::uint64_t checkpoint_interval = 100000;
  std::uint64_t seed = 1;
  std::uint64_t eval_seed = 1000003;
  int return_window = 100;  // episodes in the running train return
};

struct ExperimentConfig {
  AgentConfig agent;
  EnvConfig env;
  TrainConfig train;
  AdamConfig optim;
  VtraceConfig vtrace;
  AuxWeights aux;

  /// Agent config with the observation/action widths of the env filled in.
  AgentConfig resolved_agent() const {
    AgentConfig a = agent;
    a.obs_width = env_obs_width(env);
    a.num_actions = kNumActions;
    return a;
  }

  void validate() const;
  std::string canonical() const;
  std::string hash() const;
  void set(const std::string& key, const std::string& value);
  static std::vector<std::string> keys();
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

/// Shortest text that parses back to the same double.
inline std::string fmt_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const char* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw ConfigError("key '" + key + "': cannot parse '" + v + "' as a number");
  if constexpr (std::is_signed_v<T>) {
    if (out < 0) throw ConfigError("key '" + key + "': must be >= 0, got '" + v + "'");
  }
  return out;
}

inline double parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return d;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': cannot parse '" + v + "' as a real number");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("key '" + key + "': expected true or false, got '" + v + "'");
}

struct Field {
  std::string key;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

template <typename T>
Field uint_field(std::string key, T ExperimentConfig::*group, auto member) {
  return {key,
          [=](ExperimentConfig& c, const std::string& v) {
            using V = std::remove_reference_t<decltype(c.*group.*member)>;
            c.*group.*member = parse_number<V>(key, v);
          },
          [=](const ExperimentConfig& c) { return std::to_string(c.*group.*member); }};
}

template <typename T>
Field real_field(std::string key, T ExperimentConfig::*group, double T::*member) {
  return {key, [=](ExperimentConfig& c, const std::string& v) { c.*group.*member = parse_real(key, v); },
          [=](const ExperimentConfig& c) { return fmt_double(c.*group.*member); }};
}

inline const std::vector<Field>& fields() {
  using E = ExperimentConfig;
  static const std::vector<Field> f = {
      {"agent.arch", [](E& c, const std::string& v) { c.agent.arch = parse_architecture(v); },
       [](const E& c) { return to_string(c.agent.arch); }},
      uint_field("agent.tau", &E::agent, &AgentConfig::tau),
      uint_field("agent.hidden", &E::agent, &AgentConfig::hidden),
      uint_field("agent.encoder_width", &E::agent, &AgentConfig::encoder_width),
      uint_field("agent.head_hidden", &E::agent, &AgentConfig::head_hidden),
      {"agent.share_fast", [](E& c, const std::string& v) { c.agent.share_fast = parse_bool("agent.share_fast", v); },
       [](const E& c) { return std::string(c.agent.share_fast ? "true" : "false"); }},
      uint_field("agent.max_rollout", &E::agent, &AgentConfig::max_rollout),

      {"env.kind", [](E& c, const std::string& v) { c.env.kind = parse_env_kind(v); },
       [](const E& c) { return to_string(c.env.kind); }},
      uint_field("env.length", &E::env, &EnvConfig::length),
      uint_field("env.delay", &E::env, &EnvConfig::delay),
      uint_field("env.objects", &E::env, &EnvConfig::objects),
      uint_field("env.grid", &E::env, &EnvConfig::grid),
      uint_field("env.respawns", &E::env, &EnvConfig::respawns),
      uint_field("env.cap", &E::env, &EnvConfig::cap),

      uint_field("train.segment", &E::train, &TrainConfig::segment),
      uint_field("train.batch", &E::train, &TrainConfig::batch),
      uint_field("train.total_steps", &E::train, &TrainConfig::total_steps),
      uint_field("train.eval_interval", &E::train, &TrainConfig::eval_interval),
      uint_field("train.eval_episodes", &E::train, &TrainConfig::eval_episodes),
      uint_field("train.checkpoint_interval", &E::train, &TrainConfig::checkpoint_interval),
      uint_field("train.seed", &E::train, &TrainConfig::seed),
      uint_field("train.eval_seed", &E::train, &TrainConfig::eval_seed),
      uint_field("train.return_window", &E::train, &TrainConfig::return_window),

      real_field("optim.lr", &E::optim, &AdamConfig::lr),
      real_field("optim.beta1", &E::optim, &AdamConfig::beta1),
      real_field("optim.beta2", &E::optim, &AdamConfig::beta2),
      real_field("optim.eps", &E::optim, &AdamConfig::eps),
      real_field("optim.clip_norm", &E::optim, &AdamConfig::clip_norm),

      real_field("loss.gamma", &E::vtrace, &VtraceConfig::gamma),
      real_field("loss.rho_bar", &E::vtrace, &VtraceConfig::rho_bar),
      real_field("loss.c_bar", &E::vtrace, &VtraceConfig::c_bar),
      real_field("loss.baseline_weight", &E::vtrace, &VtraceConfig::baseline_weight),
      real_field("loss.entropy_weight", &E::vtrace, &VtraceConfig::entropy_weight),
      real_field("loss.lambda_r_p", &E::aux, &AuxWeights::lambda_r_p),
      real_field("loss.lambda_r_q", &E::aux, &AuxWeights::lambda_r_q),
      real_field("loss.lambda_p_q", &E::aux, &AuxWeights::lambda_p_q),
      real_field("loss.gate_rate", &E::aux, &AuxWeights::gate_rate),
  };
  return f;
}

}  // namespace detail

inline std::vector<std::string> ExperimentConfig::keys() {
  std::vector<std::string> k;
  for (const auto& f : detail::fields()) k.push_back(f.key);
  return k;
}

inline void ExperimentConfig::set(const std::string& key, const std::string& value) {
  for (const auto& f : detail::fields()) {
    if (f.key == key) {
      try {
        f.set(*this, value);
      } catch (const ConfigError&) {
        throw;
      } catch (const std::exception& e) {
        throw ConfigError("key '" + key + "': " + e.what());
      }
      return;
    }
  }
  throw ConfigError("unknown key '" + key + "'");
}

/// One `key = value` line per field in fixed order.
inline std::string ExperimentConfig::canonical() const {
  std::string out;
  for (const auto& f : detail::fields()) out += f.key + " = " + f.get(*this) + "\n";
  return out;
}

inline std::string ExperimentConfig::hash() const {
  const std::string text = canonical();
  const uLong crc = crc32(0L, reinterpret_cast<const Bytef*>(text.data()), static_cast<uInt>(text.size()));
  char buf[16];
  std::snprintf(buf, sizeof buf, "%08lx", static_cast<unsigned long>(crc));
  return buf;
}

inline void ExperimentConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  need(agent.tau >= 1, "agent.tau must be >= 1");
  need(agent.hidden >= 1 && agent.encoder_width >= 1 && agent.head_hidden >= 1, "agent widths must be >= 1");
  need(agent.max_rollout >= 1, "agent.max_rollout must be >= 1");
  need(train.segment >= 2, "train.segment must be >= 2");
  need(train.batch >= 1, "train.batch must be >= 1");
  need(train.eval_episodes >= 1, "train.eval_episodes must be >= 1");
  need(train.return_window >= 1, "train.return_window must be >= 1");
  try {
    env.validate();
    optim.validate();
    vtrace.validate();
    aux.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  const bool perception = agent.arch == Architecture::kPpr;
  const bool prediction = has_prediction_branch(agent.arch);
  need(perception || aux.lambda_r_p == 0.0,
       "loss.lambda_r_p must be 0 for agent.arch = " + to_string(agent.arch) + " (no perception policy)");
  need(prediction || aux.lambda_r_q == 0.0,
       "loss.lambda_r_q must be 0 for agent.arch = " + to_string(agent.arch) + " (no prediction policy)");
  need((perception && prediction) || aux.lambda_p_q == 0.0,
       "loss.lambda_p_q must be 0 for agent.arch = " + to_string(agent.arch));
}

/// Applies `key = value` lines. Blank lines and `#` comments are skipped.
inline void apply_config_text(ExperimentConfig& cfg, const std::string& text, const std::string& source = {}) {
  std::istringstream in(text);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    const auto hash_pos = line.find('#');
    if (hash_pos != std::string::npos) line.erase(hash_pos);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("expected 'key = value', got '" + line + "'", source, n);
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (key.empty() || value.empty()) throw ConfigError("empty key or value", source, n);
    try {
      cfg.set(key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(e.what(), source, n);
    }
  }
}

inline ExperimentConfig parse_config(const std::string& text, const std::string& source = {}) {
  ExperimentConfig cfg;
  apply_config_text(cfg, text, source);
  return cfg;
}

inline ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str(), path);
}

/// Applies a command-line override of the form `key=value`.
inline void apply_override(ExperimentConfig& cfg, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + kv + "' is not key=value");
  cfg.set(detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
}

}  // namespace ppr
