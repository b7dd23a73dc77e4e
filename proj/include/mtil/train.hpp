#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mtil/data.hpp"
#include "mtil/policy.hpp"

namespace mtil {

enum class LossKind { kMse, kGmmNll };

/// Diagonal Fisher estimate with its anchor parameter snapshot, both in the
/// parameter store's flattened order.
struct FisherInfo {
  std::vector<double> diag;
  std::vector<double> anchor;
};

struct TrainConfig {
  int epochs = 100;
  double lr0 = 2e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  LossKind loss = LossKind::kMse;
  std::optional<int> history_reset_interval;  // none = full history
  double ewc_lambda = 100.0;
  std::vector<FisherInfo> ewc_anchors;  // quadratic penalties from earlier tasks
  int fisher_samples = 200;
  uint64_t seed = 0;
  double grad_clip = 10.0;
  std::string log_path;  // CSV per-epoch log, empty = no file

  /// Test instrumentation: called before every policy step with the state
  /// about to be consumed and the 1-based trajectory step t.
  std::function<void(const PolicyState&, int t)> observer;

  void validate() const;
};

struct EpochLog {
  int epoch = 0;
  double mean_loss = 0.0;
  double lr = 0.0;
  double seconds = 0.0;
  int updates = 0;
};

/// Decoupled-weight-decay Adam with bias-corrected moments.
class AdamW {
 public:
  AdamW(int size, double beta1, double beta2, double weight_decay, double eps = 1e-8);

  void step(std::vector<double>& params, const std::vector<double>& grads, double lr);
  int steps_taken() const { return t_; }

 private:
  std::vector<double> m_, v_;
  int t_ = 0;
  double beta1_, beta2_, wd_, eps_;
};

/// lr0 * (1 + cos(pi * step / total)) / 2
double cosine_lr(int step, int total, double lr0);

/// One pass over a trajectory (Alg. 1 inner loop): state reset at the start,
/// chunk loss per step against chunk_targets, mean over steps, exactly one
/// optimizer update. Returns the optimized trajectory loss (including any EWC
/// penalty).
double train_trajectory(Policy& policy, const Trajectory& traj, const TrainConfig& cfg,
                        AdamW& opt, double lr);

/// Full training loop: epochs x trajectories, trajectory order shuffled per
/// epoch by seed (order within a trajectory is never shuffled).
std::vector<EpochLog> train(Policy& policy, const Dataset& dataset, const TrainConfig& cfg);

/// Diagonal empirical Fisher: mean of squared per-step loss gradients over
/// sampled (trajectory, step) pairs; the anchor snapshots current parameters.
FisherInfo fisher_estimate(const Policy& policy, const Dataset& dataset, int n_samples,
                           uint64_t seed = 0);

/// (lambda / 2) * sum_p F_p (theta_p - theta*_p)^2
double ewc_penalty(const std::vector<double>& theta, const FisherInfo& fisher, double lambda);
DiffArray ewc_penalty(Tape& tape, const BoundPolicy& bound, const FisherInfo& fisher,
                      double lambda);

}  // namespace mtil
