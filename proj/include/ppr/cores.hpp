#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ppr/autograd.hpp"
#include "ppr/rng.hpp"

namespace ppr {

enum class Architecture { kFlat, kMinimalHier, kPerceptionReaction, kPpr, kFlatPrediction };

inline std::string to_string(Architecture a) {
  switch (a) {
    case Architecture::kFlat: return "flat";
    case Architecture::kMinimalHier: return "minimal_hier";
    case Architecture::kPerceptionReaction: return "perception_reaction";
    case Architecture::kPpr: return "ppr";
    case Architecture::kFlatPrediction: return "flat_prediction";
  }
  return "?";
}

inline Architecture parse_architecture(const std::string& s) {
  for (Architecture a : {Architecture::kFlat, Architecture::kMinimalHier, Architecture::kPerceptionReaction,
                         Architecture::kPpr, Architecture::kFlatPrediction}) {
    if (to_string(a) == s) return a;
  }
  throw std::invalid_argument("unknown architecture '" + s +
                              "' (expected flat, minimal_hier, perception_reaction, ppr, flat_prediction)");
}

inline bool has_slow_core(Architecture a) {
  return a == Architecture::kMinimalHier || a == Architecture::kPerceptionReaction || a == Architecture::kPpr;
}

inline bool has_prediction_branch(Architecture a) {
  return a == Architecture::kPpr || a == Architecture::kFlatPrediction;
}

inline bool has_perception_branch(Architecture a) {
  return a == Architecture::kPerceptionReaction || a == Architecture::kPpr;
}

struct AgentConfig {
  Architecture arch = Architecture::kPpr;
  int tau = 8;
  std::size_t hidden = 64;
  std::size_t obs_width = 4;
  std::size_t num_actions = 4;
  std::size_t encoder_width = 32;
  std::size_t head_hidden = 32;
  bool share_fast = true;
  int max_rollout = 10;

  /// [encoded obs, one-hot previous action, clipped previous reward]
  std::size_t embed_width() const { return encoder_width + num_actions + 1; }

  /// Every core takes [input slot, context slot]: embed width plus H.
  std::size_t core_input_width() const { return embed_width() + hidden; }

  /// Width of the vector read by the policy and value heads.
  std::size_t head_input_width() const {
    return arch == Architecture::kMinimalHier ? 2 * hidden : hidden;
  }
};

// ---------------------------------------------------------------------------
// LSTM

struct LstmParams {
  Tensor w_x;  // [4H, D], gate blocks (i, f, g, o)
  Tensor w_h;  // [4H, H]
  Tensor b;    // [4H]

  std::size_t hidden() const { return w_h.dim(1); }
  std::size_t input() const { return w_x.dim(1); }

  static LstmParams from(const ParamMap& m, const std::string& core) {
    return {m.at(core + ".w_x"), m.at(core + ".w_h"), m.at(core + ".b")};
  }
};

struct LstmState {
  Tensor h;
  Tensor c;

  static LstmState zeros(std::size_t batch, std::size_t hidden) {
    return {Tensor::zeros({batch, hidden}), Tensor::zeros({batch, hidden})};
  }

  std::size_t batch() const { return h.dim(0); }
};

inline LstmState lstm_step(const Tensor& x, const LstmState& s, const LstmParams& p) {
  const std::size_t hdim = p.hidden();
  if (x.rank() != 2 || x.dim(1) != p.input()) {
    throw ShapeError("lstm_step: input x has shape " + shape_str(x.shape()) + ", expected [B, " +
                     std::to_string(p.input()) + "]");
  }
  const std::size_t batch = x.dim(0);
  const Shape want{batch, hdim};
  if (s.h.shape() != want) {
    throw ShapeError("lstm_step: hidden state h has shape " + shape_str(s.h.shape()) + ", expected " +
                     shape_str(want));
  }
  if (s.c.shape() != want) {
    throw ShapeError("lstm_step: cell state c has shape " + shape_str(s.c.shape()) + ", expected " +
                     shape_str(want));
  }
  const Tensor gates = add(add(matmul_nt(x, p.w_x), matmul_nt(s.h, p.w_h)), broadcast_rows(p.b, batch));
  const Tensor i = sigmoid(slice(gates, 1, 0, hdim));
  const Tensor f = sigmoid(slice(gates, 1, hdim, 2 * hdim));
  const Tensor g = tanh(slice(gates, 1, 2 * hdim, 3 * hdim));
  const Tensor o = sigmoid(slice(gates, 1, 3 * hdim, 4 * hdim));
  const Tensor c = add(mul(f, s.c), mul(i, g));
  return {mul(o, tanh(c)), c};
}

// ---------------------------------------------------------------------------
// MLP

enum class Activation { kNone, kRelu };

struct MlpLayer {
  Tensor w;  // [out, in]
  Tensor b;  // [out]
  Activation act = Activation::kNone;
};

struct MlpParams {
  std::vector<MlpLayer> layers;

  /// Layers `<prefix>.<k>.w/b`; hidden layers use relu, the last `last_act`.
  static MlpParams from(const ParamMap& m, const std::string& prefix, Activation last_act) {
    MlpParams p;
    for (std::size_t k = 0;; ++k) {
      auto w = m.find(prefix + "." + std::to_string(k) + ".w");
      if (w == m.end()) break;
      p.layers.push_back({w->second, m.at(prefix + "." + std::to_string(k) + ".b"), Activation::kRelu});
    }
    if (p.layers.empty()) throw std::out_of_range("no layers found for " + prefix);
    p.layers.back().act = last_act;
    return p;
  }
};

inline Tensor mlp_forward(const Tensor& x, const MlpParams& p) {
  Tensor h = x;
  for (const MlpLayer& layer : p.layers) {
    if (h.rank() != 2 || h.dim(1) != layer.w.dim(1)) {
      throw ShapeError("mlp_forward: input shape " + shape_str(h.shape()) + " does not match layer weight " +
                       shape_str(layer.w.shape()));
    }
    h = add(matmul_nt(h, layer.w), broadcast_rows(layer.b, h.dim(0)));
    if (layer.act == Activation::kRelu) h = relu(h);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Inputs

/// Builds [features or zeros, one-hot(prev_action), clip(prev_reward, -1, 1)].
/// Masking keeps the width so every branch can share one core.
inline Tensor embed_inputs(const Tensor& obs_features, std::span<const int> prev_action,
                           std::span<const double> prev_reward, bool mask_observation, std::size_t num_actions) {
  if (obs_features.rank() != 2) {
    throw ShapeError("embed_inputs: features must be [B, F], got " + shape_str(obs_features.shape()));
  }
  const std::size_t batch = obs_features.dim(0);
  if (prev_action.size() != batch || prev_reward.size() != batch) {
    throw ShapeError("embed_inputs: previous action/reward count does not match batch " + std::to_string(batch));
  }
  const std::size_t w = num_actions + 1;
  std::vector<double> side(batch * w, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    const int a = prev_action[b];
    if (a < 0 || static_cast<std::size_t>(a) >= num_actions) {
      throw std::out_of_range("embed_inputs: previous action " + std::to_string(a) + " outside [0, " +
                              std::to_string(num_actions) + ")");
    }
    side[b * w + static_cast<std::size_t>(a)] = 1.0;
    side[b * w + num_actions] = std::clamp(prev_reward[b], -1.0, 1.0);
  }
  const Tensor extra({batch, w}, std::move(side));
  if (mask_observation) return concat({Tensor::zeros(obs_features.shape()), extra}, 1);
  return concat({obs_features, extra}, 1);
}

// ---------------------------------------------------------------------------
// Parameter layout

/// Branch role -> stored core name. Shared fast weights map several roles to
/// the single core "fast" (or "core" for the flat family).
inline std::vector<std::pair<std::string, std::string>> core_bindings(const AgentConfig& cfg) {
  switch (cfg.arch) {
    case Architecture::kFlat:
      return {{"behavior", "core"}};
    case Architecture::kFlatPrediction:
      if (cfg.share_fast) return {{"behavior", "core"}, {"prediction", "core"}};
      return {{"behavior", "core"}, {"prediction", "prediction"}};
    case Architecture::kMinimalHier:
      return {{"fast", "fast"}, {"slow", "slow"}};
    case Architecture::kPerceptionReaction:
      if (cfg.share_fast) return {{"perception", "fast"}, {"reaction", "fast"}, {"slow", "slow"}};
      return {{"perception", "perception"}, {"reaction", "reaction"}, {"slow", "slow"}};
    case Architecture::kPpr:
      if (cfg.share_fast) {
        return {{"perception", "fast"}, {"reaction", "fast"}, {"prediction", "fast"}, {"slow", "slow"}};
      }
      return {{"perception", "perception"},
              {"reaction", "reaction"},
              {"prediction", "prediction"},
              {"slow", "slow"}};
  }
  return {};
}

inline std::string core_for(const AgentConfig& cfg, const std::string& role) {
  for (const auto& [r, c] : core_bindings(cfg)) {
    if (r == role) return c;
  }
  throw std::out_of_range("architecture " + to_string(cfg.arch) + " has no " + role + " branch");
}

/// Distinct stored cores in first-use order.
inline std::vector<std::string> stored_cores(const AgentConfig& cfg) {
  std::vector<std::string> out;
  for (const auto& [role, core] : core_bindings(cfg)) {
    if (std::find(out.begin(), out.end(), core) == out.end()) out.push_back(core);
  }
  return out;
}

inline std::vector<std::string> head_names(const AgentConfig& cfg) {
  std::vector<std::string> heads{"pi", "value"};
  if (cfg.arch == Architecture::kPpr) {
    heads.push_back("pi_prime");
    heads.push_back("pi_dprime");
  } else if (cfg.arch == Architecture::kFlatPrediction) {
    heads.push_back("pi_dprime");
  }
  return heads;
}

namespace detail {

/// FNV-1a; keys the per-tensor init stream.
inline std::uint64_t name_key(const std::string& name) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : name) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline Tensor uniform_tensor(std::uint64_t seed, const std::string& name, Shape shape, std::size_t fan_in) {
  Rng rng{seed, name_key(name)};
  const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> v(numel(shape));
  for (double& x : v) x = (2.0 * rng.uniform() - 1.0) * s;
  return Tensor(std::move(shape), std::move(v));
}

inline void add_mlp(ParamStore& store, std::uint64_t seed, const std::string& prefix,
                    const std::vector<std::size_t>& widths) {
  for (std::size_t k = 0; k + 1 < widths.size(); ++k) {
    const std::string base = prefix + "." + std::to_string(k);
    store.add(base + ".w", uniform_tensor(seed, base + ".w", {widths[k + 1], widths[k]}, widths[k]));
    store.add(base + ".b", Tensor::zeros({widths[k + 1]}));
  }
}

}  // namespace detail

/// Deterministic initialization. Every tensor draws from its own stream keyed
/// by (seed, name), so a name present in two architectures gets the same
/// values in both. Entry order: encoder, cores, pi, value, auxiliary heads.
inline ParamStore init_params(std::uint64_t seed, const AgentConfig& cfg) {
  if (cfg.hidden == 0 || cfg.obs_width == 0 || cfg.num_actions == 0 || cfg.encoder_width == 0 ||
      cfg.head_hidden == 0) {
    throw std::invalid_argument("init_params: all widths must be positive");
  }
  ParamStore store;
  detail::add_mlp(store, seed, "encoder", {cfg.obs_width, cfg.encoder_width, cfg.encoder_width});

  const std::size_t h = cfg.hidden;
  const std::size_t d = cfg.core_input_width();
  for (const std::string& core : stored_cores(cfg)) {
    store.add(core + ".w_x", detail::uniform_tensor(seed, core + ".w_x", {4 * h, d}, d));
    store.add(core + ".w_h", detail::uniform_tensor(seed, core + ".w_h", {4 * h, h}, h));
    std::vector<double> bias(4 * h, 0.0);
    std::fill(bias.begin() + static_cast<std::ptrdiff_t>(h), bias.begin() + static_cast<std::ptrdiff_t>(2 * h), 1.0);
    store.add(core + ".b", Tensor({4 * h}, std::move(bias)));
  }

  const std::size_t in = cfg.head_input_width();
  for (const std::string& head : head_names(cfg)) {
    const std::size_t out = head == "value" ? 1 : cfg.num_actions;
    detail::add_mlp(store, seed, head, {in, cfg.head_hidden, out});
  }
  return store;
}

inline std::vector<std::string> expected_param_names(const AgentConfig& cfg) {
  return init_params(0, cfg).names();
}

/// Elements of all LSTM tensors used by the architecture, each stored core
/// counted once however many branches share it.
inline std::size_t count_recurrent_params(const ParamStore& store, const AgentConfig& cfg) {
  std::set<std::string> cores;
  for (const auto& [role, core] : core_bindings(cfg)) cores.insert(core);
  std::size_t n = 0;
  for (const std::string& core : cores) {
    for (const char* part : {".w_x", ".w_h", ".b"}) n += store.get(core + part).size();
  }
  return n;
}

}  // namespace ppr
