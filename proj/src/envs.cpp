#include "mtil/envs.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

namespace mtil {

namespace {

constexpr double kDt = 0.1;
constexpr double kGain = 10.0;  // 1/dt: lands exactly on the subgoal once close
constexpr double kReachRadius = 0.15;
constexpr double kSubgoalTol = 1e-9;
constexpr int kTwoStageHorizon = 400;

double clip1(double v) { return std::min(1.0, std::max(-1.0, v)); }

double dist2(double ax, double ay, double bx, double by) {
  return std::hypot(ax - bx, ay - by);
}

/// Two-dimensional point agent driven by velocity commands. Success requires
/// visiting A, returning to the origin, then visiting B, in that order; the
/// observation is the agent position only, so the origin revisit is
/// indistinguishable from the start without memory.
class TwoStageReach final : public Env {
 public:
  explicit TwoStageReach(double noise) : noise_(noise) {
    spec_.obs_dim = 2;
    spec_.action_dim = 2;
    spec_.horizon = kTwoStageHorizon;
    spec_.success_predicate =
        "first visit to A precedes first visit to B with an origin return in between";
    spec_.task_id = noise_ > 0.0 ? "two-stage-reach:noise=" + format_noise(noise_)
                                 : "two-stage-reach";
  }

  std::vector<double> reset(uint64_t seed) override {
    rng_.seed(seed);
    std::uniform_real_distribution<double> jitter(-0.05, 0.05);
    ax_ = 1.0 + jitter(rng_);
    ay_ = jitter(rng_);
    bx_ = -1.0 + jitter(rng_);
    by_ = jitter(rng_);
    x_ = 0.0;
    y_ = 0.0;
    t_ = 0;
    done_ = false;
    visited_a_ = false;
    origin_between_ = false;
    first_b_ = false;
    b_valid_ = false;
    subgoal_ = 0;
    return observe();
  }

  StepResult step(const std::vector<double>& action) override {
    if (done_) throw EnvError("step after episode end");
    if (action.size() != 2) throw EnvError("two-stage-reach expects 2-dim actions");
    x_ += kDt * clip1(action[0]);
    y_ += kDt * clip1(action[1]);
    ++t_;

    if (!visited_a_ && dist2(x_, y_, ax_, ay_) <= kReachRadius) visited_a_ = true;
    if (visited_a_ && !first_b_ && dist2(x_, y_, 0.0, 0.0) <= kReachRadius)
      origin_between_ = true;
    if (!first_b_ && dist2(x_, y_, bx_, by_) <= kReachRadius) {
      first_b_ = true;
      b_valid_ = visited_a_ && origin_between_;
    }

    StepResult r;
    r.success = first_b_ && b_valid_;
    r.done = r.success || t_ >= spec_.horizon;
    done_ = r.done;
    r.observation = observe();
    return r;
  }

  std::vector<double> expert_action() const override {
    // subgoal plan origin -> A -> origin -> B -> origin
    const double goals[5][2] = {{0.0, 0.0}, {ax_, ay_}, {0.0, 0.0}, {bx_, by_}, {0.0, 0.0}};
    while (subgoal_ < 4 && dist2(x_, y_, goals[subgoal_][0], goals[subgoal_][1]) <= kSubgoalTol)
      ++subgoal_;
    return {clip1(kGain * (goals[subgoal_][0] - x_)), clip1(kGain * (goals[subgoal_][1] - y_))};
  }

  const EnvSpec& spec() const override { return spec_; }

  std::unique_ptr<Env> fresh() const override { return std::make_unique<TwoStageReach>(noise_); }

 private:
  std::vector<double> observe() {
    std::vector<double> obs = {x_, y_};
    if (noise_ > 0.0) {
      std::normal_distribution<double> n(0.0, noise_);
      for (auto& v : obs) v += n(rng_);
    }
    return obs;
  }

  static std::string format_noise(double v) {
    std::ostringstream os;
    os << v;
    return os.str();
  }

  EnvSpec spec_;
  double noise_;
  std::mt19937_64 rng_;
  double ax_ = 1.0, ay_ = 0.0, bx_ = -1.0, by_ = 0.0;
  double x_ = 0.0, y_ = 0.0;
  int t_ = 0;
  bool done_ = true;
  bool visited_a_ = false;
  bool origin_between_ = false;
  bool first_b_ = false;
  bool b_valid_ = false;
  mutable int subgoal_ = 0;
};

/// Corridor memory task: a +/-1 cue is shown once at t = 1, followed by L
/// silent steps; the final observation raises a decision marker and the
/// episode succeeds iff the action sign matches m * cue. The cue comes from
/// the seed parity, so consecutive-seed evaluation sets are exactly balanced.
class CueRecall final : public Env {
 public:
  CueRecall(int delay, int mapping, double noise) : delay_(delay), mapping_(mapping), noise_(noise) {
    if (delay_ < 1) throw EnvError("cue-recall delay must be >= 1");
    if (mapping_ != 1 && mapping_ != -1) throw EnvError("cue-recall mapping must be +1 or -1");
    spec_.obs_dim = 2;
    spec_.action_dim = 1;
    spec_.horizon = delay_ + 2;
    spec_.success_predicate = "sign of the decision-step action equals m * cue";
    std::ostringstream id;
    id << "cue-recall:L=" << delay_ << ":m=" << (mapping_ > 0 ? "+1" : "-1");
    if (noise_ > 0.0) id << ":noise=" << noise_;
    spec_.task_id = id.str();
  }

  std::vector<double> reset(uint64_t seed) override {
    rng_.seed(seed);
    cue_ = (seed % 2 == 0) ? 1.0 : -1.0;
    t_ = 1;
    done_ = false;
    return observe();
  }

  StepResult step(const std::vector<double>& action) override {
    if (done_) throw EnvError("step after episode end");
    if (action.size() != 1) throw EnvError("cue-recall expects 1-dim actions");
    double a = clip1(action[0]);
    StepResult r;
    if (t_ == spec_.horizon) {
      r.success = mapping_ * cue_ * a > 0.0;
      r.done = true;
    }
    ++t_;
    done_ = r.done;
    r.observation = done_ ? std::vector<double>{0.0, 0.0} : observe();
    return r;
  }

  std::vector<double> expert_action() const override {
    if (t_ == spec_.horizon) return {mapping_ * cue_};
    return {0.0};
  }

  const EnvSpec& spec() const override { return spec_; }

  std::unique_ptr<Env> fresh() const override {
    return std::make_unique<CueRecall>(delay_, mapping_, noise_);
  }

 private:
  std::vector<double> observe() {
    std::vector<double> obs(2, 0.0);
    if (t_ == 1) obs[0] = cue_;
    if (t_ == spec_.horizon) obs[1] = 1.0;  // decision marker
    if (noise_ > 0.0) {
      std::normal_distribution<double> n(0.0, noise_);
      for (auto& v : obs) v += n(rng_);
    }
    return obs;
  }

  EnvSpec spec_;
  int delay_;
  int mapping_;
  double noise_;
  std::mt19937_64 rng_;
  double cue_ = 1.0;
  int t_ = 1;
  bool done_ = true;
};

}  // namespace

std::unique_ptr<Env> make_env(const std::string& id) {
  std::vector<std::string> parts;
  std::stringstream ss(id);
  std::string item;
  while (std::getline(ss, item, ':')) parts.push_back(item);
  if (parts.empty()) throw EnvError("empty environment id");

  double noise = 0.0;
  int delay = -1;
  int mapping = 1;
  for (size_t i = 1; i < parts.size(); ++i) {
    auto eq = parts[i].find('=');
    if (eq == std::string::npos) throw EnvError("bad environment option '" + parts[i] + "'");
    std::string key = parts[i].substr(0, eq);
    std::string val = parts[i].substr(eq + 1);
    try {
      if (key == "noise") {
        noise = std::stod(val);
      } else if (key == "L") {
        delay = std::stoi(val);
      } else if (key == "m") {
        mapping = std::stoi(val);
      } else {
        throw EnvError("unknown environment option '" + key + "'");
      }
    } catch (const std::invalid_argument&) {
      throw EnvError("bad value for environment option '" + key + "'");
    }
  }

  if (parts[0] == "two-stage-reach") {
    if (delay >= 0) throw EnvError("two-stage-reach takes no L option");
    return std::make_unique<TwoStageReach>(noise);
  }
  if (parts[0] == "cue-recall") {
    if (delay < 0) delay = 50;
    return std::make_unique<CueRecall>(delay, mapping, noise);
  }
  throw EnvError("unknown environment '" + parts[0] + "'");
}

std::vector<std::string> lifelong_task_family() {
  return {"cue-recall:L=10:m=+1", "cue-recall:L=30:m=-1", "cue-recall:L=50:m=-1"};
}

Trajectory expert_episode(Env& env, uint64_t seed) {
  Trajectory traj;
  traj.task_id = env.spec().task_id;
  traj.seed = seed;
  std::vector<double> obs = env.reset(seed);
  for (int t = 0; t < env.spec().horizon; ++t) {
    std::vector<double> action = env.expert_action();
    traj.observations.push_back(obs);
    traj.actions.push_back(action);
    StepResult r = env.step(action);
    obs = r.observation;
    if (r.done) {
      traj.success = r.success;
      break;
    }
  }
  return traj;
}

Dataset generate_demos(Env& env, int n, uint64_t seed) {
  if (n < 1) throw EnvError("generate_demos: n must be >= 1");
  Dataset ds;
  int collected = 0;
  int attempts = 0;
  int failures = 0;
  uint64_t next_seed = seed;
  while (collected < n) {
    Trajectory traj = expert_episode(env, next_seed);
    ++attempts;
    ++next_seed;
    if (traj.success) {
      ds.append(std::move(traj));
      ++collected;
    } else {
      ++failures;
      if (failures * 10 > std::max(attempts, 10))
        throw EnvError("expert failure rate above 10% on " + env.spec().task_id +
                       " (" + std::to_string(failures) + "/" + std::to_string(attempts) + ")");
    }
  }
  return ds;
}

}  // namespace mtil
