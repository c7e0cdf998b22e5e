#pragma once

#include <algorithm>
#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ppr/rng.hpp"

namespace ppr {

/// All environments share four discrete actions.
inline constexpr int kNumActions = 4;

enum class EnvKind { kTMaze, kNonMatch, kGoalMaze, kReactive };

inline std::string to_string(EnvKind k) {
  switch (k) {
    case EnvKind::kTMaze: return "tmaze";
    case EnvKind::kNonMatch: return "nonmatch";
    case EnvKind::kGoalMaze: return "goalmaze";
    case EnvKind::kReactive: return "reactive";
  }
  return "?";
}

inline EnvKind parse_env_kind(const std::string& s) {
  for (EnvKind k : {EnvKind::kTMaze, EnvKind::kNonMatch, EnvKind::kGoalMaze, EnvKind::kReactive}) {
    if (to_string(k) == s) return k;
  }
  throw std::invalid_argument("unknown env kind '" + s + "' (expected tmaze, nonmatch, goalmaze, reactive)");
}

struct EnvConfig {
  EnvKind kind = EnvKind::kTMaze;
  int length = 10;    // tmaze corridor length L
  int delay = 5;      // nonmatch blank steps D
  int objects = 4;    // nonmatch object vocabulary
  int grid = 5;       // goalmaze side
  int respawns = 3;   // goalmaze respawns after each goal visit
  int cap = 0;        // episode cap; 0 selects the kind's default
  std::uint64_t seed = 1;

  int effective_cap() const {
    if (cap > 0) return cap;
    switch (kind) {
      case EnvKind::kTMaze: return length + 1;
      case EnvKind::kNonMatch: return delay + 2;
      case EnvKind::kGoalMaze: return 50;
      case EnvKind::kReactive: return 20;
    }
    return 1;
  }

  void validate() const {
    auto need = [](bool ok, const std::string& what) {
      if (!ok) throw std::invalid_argument("env config: " + what);
    };
    switch (kind) {
      case EnvKind::kTMaze:
        need(length >= 1, "tmaze length must be >= 1");
        need(effective_cap() >= length + 1, "tmaze cap must allow reaching the junction");
        break;
      case EnvKind::kNonMatch:
        need(delay >= 0, "nonmatch delay must be >= 0");
        need(objects >= 2, "nonmatch needs at least 2 objects");
        need(effective_cap() >= delay + 2, "nonmatch cap must allow reaching the choice");
        break;
      case EnvKind::kGoalMaze:
        need(grid >= 2, "goalmaze grid must be >= 2");
        need(respawns >= 0, "goalmaze respawns must be >= 0");
        need(effective_cap() >= 2 * (grid - 1), "goalmaze cap must cover the grid diameter");
        break;
      case EnvKind::kReactive:
        need(effective_cap() >= 1, "reactive cap must be >= 1");
        break;
    }
  }
};

struct EnvStep {
  std::vector<double> obs;
  double reward = 0.0;
  bool done = false;
  std::map<std::string, double> info;
};

class EnvError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Episodic POMDP. An episode's layout is drawn from Rng{seed, reset index},
/// so a trajectory is a function of (seed, reset index, action sequence).
class Env {
 public:
  explicit Env(std::uint64_t seed, int cap) : seed_(seed), cap_(cap) {}
  virtual ~Env() = default;

  virtual std::size_t obs_width() const = 0;
  virtual std::string name() const = 0;
  std::size_t num_actions() const { return kNumActions; }

  std::vector<double> reset() {
    Rng rng{seed_, reset_index_};
    ++reset_index_;
    t_ = 0;
    done_ = false;
    begin_episode(rng);
    return observe();
  }

  EnvStep step(int action) {
    if (done_) throw EnvError(name() + ": step() after episode end");
    if (action < 0 || action >= kNumActions) {
      throw std::out_of_range(name() + ": action " + std::to_string(action) + " outside [0, 4)");
    }
    EnvStep s;
    s.reward = advance(action, s);
    ++t_;
    if (t_ >= cap_ && !s.done) {
      s.done = true;
      s.info["capped"] = 1.0;
    }
    done_ = s.done;
    s.obs = observe();
    return s;
  }

  bool done() const { return done_; }
  int time() const { return t_; }
  int cap() const { return cap_; }
  std::uint64_t reset_index() const { return reset_index_; }

  virtual std::vector<double> observe() const = 0;

  /// Flat snapshot of the whole mutable state (for checkpoints).
  std::vector<double> save_state() const {
    std::vector<double> s{static_cast<double>(reset_index_), static_cast<double>(t_), done_ ? 1.0 : 0.0};
    const std::vector<double> e = episode_state();
    s.insert(s.end(), e.begin(), e.end());
    return s;
  }

  void load_state(std::span<const double> s) {
    if (s.size() < 3) throw std::invalid_argument(name() + ": truncated state");
    reset_index_ = static_cast<std::uint64_t>(s[0]);
    t_ = static_cast<int>(s[1]);
    done_ = s[2] != 0.0;
    restore_episode(s.subspan(3));
  }

 protected:
  virtual void begin_episode(Rng& rng) = 0;
  /// Applies the action, returns the reward, may set `out.done` / info.
  virtual double advance(int action, EnvStep& out) = 0;
  virtual std::vector<double> episode_state() const = 0;
  virtual void restore_episode(std::span<const double> s) = 0;

  void set_layout_started() {
    t_ = 0;
    done_ = false;
  }

 private:
  std::uint64_t seed_;
  std::uint64_t reset_index_ = 0;
  int cap_;
  int t_ = 0;
  bool done_ = true;
};

/// Cue shown at t = 0, corridor auto-advances to the junction at t = L, where
/// the arm choice (action parity: even = up, odd = down) earns +1 when it
/// matches the cue and -1 otherwise.
class TMazeEnv : public Env {
 public:
  TMazeEnv(int length, std::uint64_t seed, int cap) : Env(seed, cap), length_(length) {}

  std::size_t obs_width() const override { return 4; }
  std::string name() const override { return "tmaze"; }

  std::vector<double> observe() const override {
    const bool start = pos_ == 0;
    return {start && cue_ == 0 ? 1.0 : 0.0, start && cue_ == 1 ? 1.0 : 0.0, pos_ == length_ ? 1.0 : 0.0,
            static_cast<double>(pos_) / static_cast<double>(length_)};
  }

  int cue() const { return cue_; }
  int position() const { return pos_; }

 protected:
  void begin_episode(Rng& rng) override {
    cue_ = rng.uniform_int(2);
    pos_ = 0;
  }

  double advance(int action, EnvStep& out) override {
    if (pos_ < length_) {
      ++pos_;
      return 0.0;
    }
    out.done = true;
    const bool ok = (action % 2) == cue_;
    out.info["success"] = ok ? 1.0 : 0.0;
    return ok ? 1.0 : -1.0;
  }

  std::vector<double> episode_state() const override { return {static_cast<double>(cue_), static_cast<double>(pos_)}; }

  void restore_episode(std::span<const double> s) override {
    cue_ = static_cast<int>(s[0]);
    pos_ = static_cast<int>(s[1]);
  }

 private:
  int length_;
  int cue_ = 0;
  int pos_ = 0;
};

/// Delayed non-match-to-sample: sample object for one step, D blank steps,
/// then sample and a different object side by side. Picking the non-matching
/// side (action parity: even = left, odd = right) earns +1, otherwise -1.
class NonMatchEnv : public Env {
 public:
  NonMatchEnv(int delay, int objects, std::uint64_t seed, int cap)
      : Env(seed, cap), delay_(delay), objects_(objects) {}

  std::size_t obs_width() const override { return static_cast<std::size_t>(3 * objects_ + 1); }
  std::string name() const override { return "nonmatch"; }

  std::vector<double> observe() const override {
    std::vector<double> o(obs_width(), 0.0);
    const auto k = static_cast<std::size_t>(objects_);
    if (phase_ == 0) {
      o[static_cast<std::size_t>(sample_)] = 1.0;
    } else if (phase_ == delay_ + 1) {
      const int left = sample_left_ ? sample_ : other_;
      const int right = sample_left_ ? other_ : sample_;
      o[k + static_cast<std::size_t>(left)] = 1.0;
      o[2 * k + static_cast<std::size_t>(right)] = 1.0;
      o[3 * k] = 1.0;
    }
    return o;
  }

 protected:
  void begin_episode(Rng& rng) override {
    sample_ = rng.uniform_int(objects_);
    other_ = rng.uniform_int(objects_ - 1);
    if (other_ >= sample_) ++other_;
    sample_left_ = rng.bernoulli(0.5);
    phase_ = 0;
  }

  double advance(int action, EnvStep& out) override {
    if (phase_ <= delay_) {
      ++phase_;
      return 0.0;
    }
    out.done = true;
    const int nonmatch_side = sample_left_ ? 1 : 0;
    const bool ok = (action % 2) == nonmatch_side;
    out.info["success"] = ok ? 1.0 : 0.0;
    return ok ? 1.0 : -1.0;
  }

  std::vector<double> episode_state() const override {
    return {static_cast<double>(sample_), static_cast<double>(other_), sample_left_ ? 1.0 : 0.0,
            static_cast<double>(phase_)};
  }

  void restore_episode(std::span<const double> s) override {
    sample_ = static_cast<int>(s[0]);
    other_ = static_cast<int>(s[1]);
    sample_left_ = s[2] != 0.0;
    phase_ = static_cast<int>(s[3]);
  }

 private:
  int delay_;
  int objects_;
  int sample_ = 0;
  int other_ = 1;
  bool sample_left_ = true;
  int phase_ = 0;
};

/// Open N x N grid with an invisible goal fixed for the episode. Reaching it
/// pays +1 and respawns the agent at a random non-goal cell; the episode ends
/// after `respawns + 1` visits or at the cap. Actions: up, down, left, right.
class GoalMazeEnv : public Env {
 public:
  GoalMazeEnv(int grid, int respawns, std::uint64_t seed, int cap) : Env(seed, cap), grid_(grid), respawns_(respawns) {}

  std::size_t obs_width() const override { return static_cast<std::size_t>(grid_ * grid_); }
  std::string name() const override { return "goalmaze"; }

  std::vector<double> observe() const override {
    std::vector<double> o(obs_width(), 0.0);
    o[static_cast<std::size_t>(pos_)] = 1.0;
    return o;
  }

  int goal() const { return goal_; }
  int position() const { return pos_; }
  int grid() const { return grid_; }

  /// Forces an episode layout: goal, start and one respawn cell per visit.
  void reset_with(int goal, int start, std::vector<int> respawn_cells) {
    if (static_cast<int>(respawn_cells.size()) != respawns_) throw std::invalid_argument("respawn count mismatch");
    goal_ = goal;
    pos_ = start;
    respawn_cells_ = std::move(respawn_cells);
    visits_ = 0;
    set_layout_started();
  }

  static int move(int pos, int action, int grid) {
    int r = pos / grid, c = pos % grid;
    switch (action) {
      case 0: r = std::max(0, r - 1); break;
      case 1: r = std::min(grid - 1, r + 1); break;
      case 2: c = std::max(0, c - 1); break;
      default: c = std::min(grid - 1, c + 1); break;
    }
    return r * grid + c;
  }

 protected:
  void begin_episode(Rng& rng) override {
    const int cells = grid_ * grid_;
    goal_ = rng.uniform_int(cells);
    auto non_goal = [&] {
      int c = rng.uniform_int(cells - 1);
      return c >= goal_ ? c + 1 : c;
    };
    pos_ = non_goal();
    respawn_cells_.clear();
    for (int i = 0; i < respawns_; ++i) respawn_cells_.push_back(non_goal());
    visits_ = 0;
  }

  double advance(int action, EnvStep& out) override {
    pos_ = move(pos_, action, grid_);
    if (pos_ != goal_) return 0.0;
    ++visits_;
    out.info["goal"] = 1.0;
    if (visits_ > respawns_) {
      out.done = true;
    } else {
      pos_ = respawn_cells_[static_cast<std::size_t>(visits_ - 1)];
    }
    return 1.0;
  }

  std::vector<double> episode_state() const override {
    std::vector<double> s{static_cast<double>(goal_), static_cast<double>(pos_), static_cast<double>(visits_)};
    for (int c : respawn_cells_) s.push_back(static_cast<double>(c));
    return s;
  }

  void restore_episode(std::span<const double> s) override {
    goal_ = static_cast<int>(s[0]);
    pos_ = static_cast<int>(s[1]);
    visits_ = static_cast<int>(s[2]);
    respawn_cells_.clear();
    for (std::size_t i = 3; i < s.size(); ++i) respawn_cells_.push_back(static_cast<int>(s[i]));
  }

 private:
  int grid_;
  int respawns_;
  int goal_ = 0;
  int pos_ = 0;
  int visits_ = 0;
  std::vector<int> respawn_cells_;
};

/// Fully observed target direction, redrawn every step; matching it pays 0.1.
class ReactiveEnv : public Env {
 public:
  ReactiveEnv(std::uint64_t seed, int cap) : Env(seed, cap), horizon_(cap) {}

  std::size_t obs_width() const override { return kNumActions; }
  std::string name() const override { return "reactive"; }

  std::vector<double> observe() const override {
    std::vector<double> o(kNumActions, 0.0);
    o[static_cast<std::size_t>(target())] = 1.0;
    return o;
  }

  int target() const { return targets_.empty() ? 0 : targets_[std::min<std::size_t>(cursor_, targets_.size() - 1)]; }

 protected:
  void begin_episode(Rng& rng) override {
    targets_.assign(static_cast<std::size_t>(horizon_), 0);
    for (int& t : targets_) t = rng.uniform_int(kNumActions);
    cursor_ = 0;
  }

  double advance(int action, EnvStep& out) override {
    const bool hit = action == target();
    out.info["hit"] = hit ? 1.0 : 0.0;
    ++cursor_;
    return hit ? 0.1 : 0.0;
  }

  std::vector<double> episode_state() const override {
    std::vector<double> s{static_cast<double>(cursor_)};
    for (int t : targets_) s.push_back(static_cast<double>(t));
    return s;
  }

  void restore_episode(std::span<const double> s) override {
    cursor_ = static_cast<std::size_t>(s[0]);
    targets_.clear();
    for (std::size_t i = 1; i < s.size(); ++i) targets_.push_back(static_cast<int>(s[i]));
  }

 private:
  int horizon_;
  std::vector<int> targets_;
  std::size_t cursor_ = 0;
};

inline std::unique_ptr<Env> make_env(const EnvConfig& cfg) {
  cfg.validate();
  const int cap = cfg.effective_cap();
  switch (cfg.kind) {
    case EnvKind::kTMaze: return std::make_unique<TMazeEnv>(cfg.length, cfg.seed, cap);
    case EnvKind::kNonMatch: return std::make_unique<NonMatchEnv>(cfg.delay, cfg.objects, cfg.seed, cap);
    case EnvKind::kGoalMaze: return std::make_unique<GoalMazeEnv>(cfg.grid, cfg.respawns, cfg.seed, cap);
    case EnvKind::kReactive: return std::make_unique<ReactiveEnv>(cfg.seed, cap);
  }
  throw std::invalid_argument("unknown env kind");
}

inline std::size_t env_obs_width(const EnvConfig& cfg) { return make_env(cfg)->obs_width(); }

/// Above this many latent states the exhaustive oracle refuses to run.
inline constexpr std::size_t kOracleStateLimit = std::size_t{1} << 24;

/// BFS distances from `goal` on the open grid.
inline std::vector<int> grid_distances(int grid, int goal) {
  std::vector<int> dist(static_cast<std::size_t>(grid * grid), -1);
  std::deque<int> q{goal};
  dist[static_cast<std::size_t>(goal)] = 0;
  while (!q.empty()) {
    const int u = q.front();
    q.pop_front();
    for (int a = 0; a < kNumActions; ++a) {
      const int v = GoalMazeEnv::move(u, a, grid);
      if (dist[static_cast<std::size_t>(v)] < 0) {
        dist[static_cast<std::size_t>(v)] = dist[static_cast<std::size_t>(u)] + 1;
        q.push_back(v);
      }
    }
  }
  return dist;
}

/// Optimal expected episode return, by enumeration of each kind's latent
/// episode variables. For goalmaze this is the value of the policy that knows
/// the goal and walks shortest paths, averaged over goal, start and respawns.
inline double oracle_return(const EnvConfig& cfg) {
  cfg.validate();
  const int cap = cfg.effective_cap();
  switch (cfg.kind) {
    case EnvKind::kTMaze: {
      double total = 0.0;
      for (int cue = 0; cue < 2; ++cue) {
        double best = -1.0;
        for (int a = 0; a < kNumActions; ++a) best = std::max(best, (a % 2) == cue ? 1.0 : -1.0);
        total += best;
      }
      return total / 2.0;
    }
    case EnvKind::kNonMatch: {
      double total = 0.0;
      int layouts = 0;
      for (int sample = 0; sample < cfg.objects; ++sample) {
        for (int other = 0; other < cfg.objects; ++other) {
          if (other == sample) continue;
          for (int side = 0; side < 2; ++side) {
            double best = -1.0;
            for (int a = 0; a < kNumActions; ++a) best = std::max(best, (a % 2) == (side == 0 ? 1 : 0) ? 1.0 : -1.0);
            total += best;
            ++layouts;
          }
        }
      }
      return total / layouts;
    }
    case EnvKind::kReactive:
      return 0.1 * cap;
    case EnvKind::kGoalMaze: {
      const int cells = cfg.grid * cfg.grid;
      const std::size_t states = static_cast<std::size_t>(cells) * static_cast<std::size_t>(cap + 1) *
                                 static_cast<std::size_t>(cfg.respawns + 2);
      if (states > kOracleStateLimit) {
        throw std::invalid_argument("oracle_return: goalmaze latent space of " + std::to_string(states) +
                                    " states exceeds the search limit");
      }
      double total = 0.0;
      for (int goal = 0; goal < cells; ++goal) {
        const std::vector<int> dist = grid_distances(cfg.grid, goal);
        std::vector<double> step_dist(static_cast<std::size_t>(cap + 1), 0.0);
        for (int c = 0; c < cells; ++c) {
          if (c == goal) continue;
          const int d = dist[static_cast<std::size_t>(c)];
          if (d <= cap) step_dist[static_cast<std::size_t>(d)] += 1.0 / (cells - 1);
        }
        // arrival-time distribution after k visits, truncated at the cap
        std::vector<double> arrival(static_cast<std::size_t>(cap + 1), 0.0);
        arrival[0] = 1.0;
        double expected = 0.0;
        for (int k = 1; k <= cfg.respawns + 1; ++k) {
          std::vector<double> next(static_cast<std::size_t>(cap + 1), 0.0);
          for (int t = 0; t <= cap; ++t) {
            if (arrival[static_cast<std::size_t>(t)] == 0.0) continue;
            for (int d = 1; t + d <= cap; ++d) {
              next[static_cast<std::size_t>(t + d)] +=
                  arrival[static_cast<std::size_t>(t)] * step_dist[static_cast<std::size_t>(d)];
            }
          }
          arrival = std::move(next);
          for (double p : arrival) expected += p;
        }
        total += expected;
      }
      return total / cells;
    }
  }
  return 0.0;
}

}  // namespace ppr
