#include "mtil/infer.hpp"

#include <cmath>
#include <random>

namespace mtil {

void AggregationConfig::validate() const {
  if (gamma <= 0.0 || gamma > 1.0) throw InferError("aggregation gamma must be in (0, 1]");
  if (chunk_k < 1) throw InferError("aggregation chunk size must be >= 1");
}

PredictionBuffer::PredictionBuffer(int chunk_k) : k_(chunk_k) {
  if (chunk_k < 1) throw InferError("prediction buffer chunk size must be >= 1");
}

void PredictionBuffer::push(int origin_step, std::vector<std::vector<double>> chunk) {
  if (static_cast<int>(chunk.size()) != k_)
    throw InferError("buffered chunk has " + std::to_string(chunk.size()) + " rows, expected " +
                     std::to_string(k_));
  entries_.push_back({origin_step, std::move(chunk)});
  evict_expired(origin_step);
  while (static_cast<int>(entries_.size()) > k_) entries_.pop_front();
}

void PredictionBuffer::evict_expired(int t) {
  while (!entries_.empty() && entries_.front().origin + k_ <= t) entries_.pop_front();
}

std::vector<double> aggregate(const PredictionBuffer& buffer, int t,
                              const AggregationConfig& cfg) {
  cfg.validate();
  std::vector<double> acc;
  double weight_sum = 0.0;
  for (const auto& entry : buffer.entries()) {
    int age = t - entry.origin;
    if (age < 0 || age >= buffer.chunk_k()) continue;  // outside coverage window
    double w = std::pow(cfg.gamma, age);
    const auto& row = entry.rows[age];
    if (acc.empty()) acc.assign(row.size(), 0.0);
    for (size_t i = 0; i < row.size(); ++i) acc[i] += w * row[i];
    weight_sum += w;
  }
  if (acc.empty()) throw InferError("no buffered prediction covers step " + std::to_string(t));
  for (auto& v : acc) v /= weight_sum;
  return acc;
}

RolloutResult rollout(const Policy& policy, Env& env, const RolloutConfig& cfg, uint64_t seed) {
  const PolicyConfig& pc = policy.cfg;
  if (pc.obs_dim != env.spec().obs_dim || pc.action_dim != env.spec().action_dim)
    throw InferError("policy dims do not match environment " + env.spec().task_id);
  if (cfg.history_reset_interval && *cfg.history_reset_interval < 1)
    throw InferError("history reset interval must be >= 1");

  AggregationConfig agg = cfg.aggregation;
  agg.chunk_k = pc.chunk_k;
  if (agg.enabled) agg.validate();

  Tape tape;  // parameters bound as constants: the tape never grows
  BoundPolicy bound(tape, policy, /*track=*/false);
  PolicyState state = reset_state(pc);
  PredictionBuffer buffer(pc.chunk_k);
  std::mt19937_64 gmm_rng(cfg.gmm_rng_seed ^ seed);

  RolloutResult result;
  result.trajectory.task_id = env.spec().task_id;
  result.trajectory.seed = seed;

  std::vector<double> obs = env.reset(seed);
  int t_max = cfg.t_max > 0 ? cfg.t_max : env.spec().horizon;

  for (int t = 1; t <= t_max; ++t) {
    if (cfg.history_reset_interval && (t - 1) % *cfg.history_reset_interval == 0)
      state = reset_state(pc);

    DiffArray x = bound.encode(DiffArray({pc.obs_dim}, obs));
    auto [out, next] = bound.step(x, state);
    state = std::move(next);

    std::vector<std::vector<double>> rows;
    if (pc.head == HeadKind::kLinearChunk) {
      rows.resize(pc.chunk_k);
      for (int k = 0; k < pc.chunk_k; ++k)
        rows[k].assign(out.chunk.data.begin() + static_cast<size_t>(k) * pc.action_dim,
                       out.chunk.data.begin() + static_cast<size_t>(k + 1) * pc.action_dim);
    } else {
      rows.push_back(cfg.gmm_sample_actions ? gmm_sample(*out.gmm, gmm_rng)
                                            : gmm_mode(*out.gmm));
    }

    buffer.push(t, std::move(rows));
    std::vector<double> action =
        agg.enabled ? aggregate(buffer, t, agg) : buffer.entries().back().rows[0];

    result.trajectory.observations.push_back(obs);
    result.trajectory.actions.push_back(action);
    StepResult r = env.step(action);
    obs = r.observation;
    if (r.done) {
      result.success = r.success;
      break;
    }
  }
  result.trajectory.success = result.success;
  result.final_step_index = state.step_index;
  return result;
}

}  // namespace mtil
