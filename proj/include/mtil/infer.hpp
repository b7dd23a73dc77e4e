#pragma once

#include <cstdint>
#include <deque>
#include <optional>
#include <stdexcept>
#include <vector>

#include "mtil/data.hpp"
#include "mtil/envs.hpp"
#include "mtil/policy.hpp"

namespace mtil {

struct InferError : std::runtime_error {
  explicit InferError(const std::string& msg) : std::runtime_error(msg) {}
};

struct AggregationConfig {
  bool enabled = true;
  double gamma = 0.9;  // exponential age decay, in (0, 1]
  int chunk_k = 1;

  void validate() const;
};

/// Ring of the last K predicted chunks, each tagged with the step it was
/// predicted at. Entries whose coverage window [j, j+K) has passed are
/// evicted.
class PredictionBuffer {
 public:
  struct Entry {
    int origin = 0;                         // prediction step j
    std::vector<std::vector<double>> rows;  // K x action_dim
  };

  explicit PredictionBuffer(int chunk_k);

  void push(int origin_step, std::vector<std::vector<double>> chunk);
  void evict_expired(int t);  // drop entries with j + K <= t
  const std::deque<Entry>& entries() const { return entries_; }
  int chunk_k() const { return k_; }

 private:
  int k_ = 1;
  std::deque<Entry> entries_;
};

/// Weighted average of every buffered prediction covering step t:
/// a_t = sum_j gamma^(t-j) chunk_j[t-j] / sum_j gamma^(t-j), j <= t < j+K.
std::vector<double> aggregate(const PredictionBuffer& buffer, int t,
                              const AggregationConfig& cfg);

struct RolloutConfig {
  AggregationConfig aggregation;
  int t_max = 0;  // 0 = environment horizon
  /// Mirrors the training-side history ablation so short-history variants
  /// deploy the way they were trained.
  std::optional<int> history_reset_interval;
  bool gmm_sample_actions = false;  // default: mean of the top-weight component
  uint64_t gmm_rng_seed = 0;
};

struct RolloutResult {
  Trajectory trajectory;
  bool success = false;
  int final_step_index = 0;  // equals the executed step count: no state forking
};

/// Autoregressive deployment: reset policy state and environment, then per
/// step encode, predict a chunk, buffer it, aggregate (or take row 0 when
/// aggregation is off), execute, record.
RolloutResult rollout(const Policy& policy, Env& env, const RolloutConfig& cfg, uint64_t seed);

}  // namespace mtil
