#pragma once

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "mtil/data.hpp"

namespace mtil {

struct EnvError : std::runtime_error {
  explicit EnvError(const std::string& msg) : std::runtime_error(msg) {}
};

struct EnvSpec {
  int obs_dim = 0;
  int action_dim = 0;
  int horizon = 0;
  std::string success_predicate;
  std::string task_id;
};

struct StepResult {
  std::vector<double> observation;
  bool done = false;
  bool success = false;
};

/// Deterministic episodic environment. Observations deliberately expose less
/// than the latent state; the scripted expert reads the latent state directly
/// (experts are privileged).
class Env {
 public:
  virtual ~Env() = default;
  virtual std::vector<double> reset(uint64_t seed) = 0;
  /// Actions outside the declared [-1, 1] bounds are clipped.
  /// Stepping a finished episode raises EnvError.
  virtual StepResult step(const std::vector<double>& action) = 0;
  virtual std::vector<double> expert_action() const = 0;
  virtual const EnvSpec& spec() const = 0;
  virtual std::unique_ptr<Env> fresh() const = 0;  // same configuration, unreset
};

/// Environment ids:
///   "two-stage-reach"            optional ":noise=<sigma>"
///   "cue-recall:L=<delay>:m=<+1|-1>"  optional ":noise=<sigma>"
std::unique_ptr<Env> make_env(const std::string& id);

/// Cue-recall tasks for the lifelong protocol: delays 10/30/50 with cue
/// mappings +1, -1, +1.
std::vector<std::string> lifelong_task_family();

/// n successful expert demonstrations. Failed expert episodes are regenerated
/// with fresh seeds and counted; a failure rate above 10% aborts.
Dataset generate_demos(Env& env, int n, uint64_t seed);

/// Run one expert episode; returns the recorded trajectory.
Trajectory expert_episode(Env& env, uint64_t seed);

}  // namespace mtil
