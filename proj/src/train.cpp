#include "mtil/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

namespace mtil {

namespace {

DiffArray const_vector(const std::vector<double>& v) {
  return DiffArray({static_cast<int>(v.size())}, v);
}

DiffArray flatten_rows(const std::vector<std::vector<double>>& rows) {
  std::vector<double> flat;
  for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
  return const_vector(flat);
}

DiffArray step_loss(Tape& tape, const TrainConfig& cfg, const PolicyOutput& out,
                    const Trajectory& traj, int t, int chunk_k) {
  if (cfg.loss == LossKind::kMse) {
    DiffArray target = flatten_rows(chunk_targets(traj, t, chunk_k));
    DiffArray flat = tape.reshape(out.chunk, {target.size()});
    return tape.mean(tape.square(tape.sub(flat, target)));
  }
  if (!out.gmm) throw TapeError("gmm-nll loss requires a gmm head");
  return gmm_nll(tape, *out.gmm, const_vector(traj.actions[t - 1]));
}

void clip_gradient(std::vector<double>& grads, double max_norm) {
  double sq = 0.0;
  for (double g : grads) sq += g * g;
  double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    double s = max_norm / norm;
    for (double& g : grads) g *= s;
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 0) throw TapeError("train config: epochs must be >= 0");
  if (lr0 <= 0.0) throw TapeError("train config: lr0 must be positive");
  if (history_reset_interval && *history_reset_interval < 1)
    throw TapeError("train config: reset interval must be >= 1");
  if (ewc_lambda < 0.0) throw TapeError("train config: ewc lambda must be >= 0");
  for (const auto& f : ewc_anchors)
    for (double d : f.diag)
      if (d < 0.0) throw TapeError("train config: fisher entries must be >= 0");
}

AdamW::AdamW(int size, double beta1, double beta2, double weight_decay, double eps)
    : m_(size, 0.0), v_(size, 0.0), beta1_(beta1), beta2_(beta2), wd_(weight_decay), eps_(eps) {}

void AdamW::step(std::vector<double>& params, const std::vector<double>& grads, double lr) {
  if (params.size() != m_.size() || grads.size() != m_.size())
    throw TapeError("adamw: size mismatch");
  ++t_;
  double bc1 = 1.0 - std::pow(beta1_, t_);
  double bc2 = 1.0 - std::pow(beta2_, t_);
  for (size_t i = 0; i < params.size(); ++i) {
    double g = grads[i];
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g * g;
    double mhat = m_[i] / bc1;
    double vhat = v_[i] / bc2;
    // decoupled decay applied separately from the adaptive step
    params[i] -= lr * wd_ * params[i] + lr * mhat / (std::sqrt(vhat) + eps_);
  }
}

double cosine_lr(int step, int total, double lr0) {
  if (total < 1) throw TapeError("cosine_lr: total must be >= 1");
  if (step < 0 || step > total) throw TapeError("cosine_lr: step outside [0, total]");
  return lr0 * (1.0 + std::cos(M_PI * static_cast<double>(step) / total)) / 2.0;
}

double train_trajectory(Policy& policy, const Trajectory& traj, const TrainConfig& cfg,
                        AdamW& opt, double lr) {
  const PolicyConfig& pc = policy.cfg;
  if (static_cast<int>(traj.observations[0].size()) != pc.obs_dim ||
      static_cast<int>(traj.actions[0].size()) != pc.action_dim)
    throw TapeError("train_trajectory: trajectory dims do not match the policy");

  Tape tape;
  BoundPolicy bound(tape, policy, /*track=*/true);
  PolicyState state = reset_state(pc);

  int T = traj.length();
  DiffArray total;
  for (int t = 1; t <= T; ++t) {
    if (cfg.history_reset_interval && (t - 1) % *cfg.history_reset_interval == 0)
      state = reset_state(pc);
    if (cfg.observer) cfg.observer(state, t);
    DiffArray x = bound.encode(const_vector(traj.observations[t - 1]));
    auto [out, next] = bound.step(x, state);
    state = std::move(next);
    DiffArray loss_t = step_loss(tape, cfg, out, traj, t, pc.chunk_k);
    total = (t == 1) ? loss_t : tape.add(total, loss_t);
  }
  DiffArray traj_loss = tape.scale(total, 1.0 / static_cast<double>(T));
  for (const auto& fisher : cfg.ewc_anchors)
    traj_loss = tape.add(traj_loss, ewc_penalty(tape, bound, fisher, cfg.ewc_lambda));

  tape.backward(traj_loss);
  std::vector<double> grads = bound.flat_grad();
  clip_gradient(grads, cfg.grad_clip);

  std::vector<double> flat = policy.params.flatten();
  opt.step(flat, grads, lr);
  policy.params.unflatten(flat);
  return traj_loss.value();
}

std::vector<EpochLog> train(Policy& policy, const Dataset& dataset, const TrainConfig& cfg) {
  cfg.validate();
  if (dataset.trajectories.empty()) throw TapeError("train: empty dataset");
  if (dataset.obs_dim != policy.cfg.obs_dim || dataset.action_dim != policy.cfg.action_dim)
    throw TapeError("train: dataset dims do not match the policy");

  AdamW opt(policy.params.total_size(), cfg.beta1, cfg.beta2, cfg.weight_decay);
  std::vector<EpochLog> logs;
  std::ofstream csv;
  if (!cfg.log_path.empty()) {
    csv.open(cfg.log_path);
    if (!csv) throw FormatError("cannot open training log " + cfg.log_path);
    csv << "epoch,mean_loss,lr,seconds\n";
  }

  int n = static_cast<int>(dataset.trajectories.size());
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto start = std::chrono::steady_clock::now();
    double lr = cosine_lr(epoch, cfg.epochs, cfg.lr0);
    std::mt19937_64 shuffle_rng(cfg.seed * 0x9E3779B97F4A7C15ull + epoch + 1);
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double loss_sum = 0.0;
    int updates = 0;
    for (int idx : order) {
      try {
        loss_sum += train_trajectory(policy, dataset.trajectories[idx], cfg, opt, lr);
      } catch (const TapeError& e) {
        throw TapeError("epoch " + std::to_string(epoch) + ", trajectory " +
                        std::to_string(idx) + ": " + e.what());
      }
      ++updates;
    }

    EpochLog log;
    log.epoch = epoch;
    log.mean_loss = loss_sum / n;
    log.lr = lr;
    log.updates = updates;
    log.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    logs.push_back(log);
    if (csv.is_open())
      csv << log.epoch << "," << log.mean_loss << "," << log.lr << "," << log.seconds << "\n";
  }
  return logs;
}

FisherInfo fisher_estimate(const Policy& policy, const Dataset& dataset, int n_samples,
                           uint64_t seed) {
  if (n_samples < 1) throw TapeError("fisher_estimate: n_samples must be >= 1");
  if (dataset.trajectories.empty()) throw TapeError("fisher_estimate: empty dataset");

  std::mt19937_64 rng(seed);
  FisherInfo info;
  info.anchor = policy.params.flatten();
  info.diag.assign(info.anchor.size(), 0.0);

  TrainConfig loss_cfg;  // loss kind follows the head
  loss_cfg.loss = policy.cfg.head == HeadKind::kGmm ? LossKind::kGmmNll : LossKind::kMse;

  for (int s = 0; s < n_samples; ++s) {
    const Trajectory& traj =
        dataset.trajectories[rng() % dataset.trajectories.size()];
    int t_pick = 1 + static_cast<int>(rng() % traj.length());

    Tape tape;
    BoundPolicy bound(tape, policy, /*track=*/true);
    PolicyState state = reset_state(policy.cfg);
    DiffArray loss;
    for (int t = 1; t <= t_pick; ++t) {
      DiffArray x = bound.encode(const_vector(traj.observations[t - 1]));
      auto [out, next] = bound.step(x, state);
      state = std::move(next);
      if (t == t_pick) loss = step_loss(tape, loss_cfg, out, traj, t, policy.cfg.chunk_k);
    }
    tape.backward(loss);
    std::vector<double> g = bound.flat_grad();
    for (size_t i = 0; i < g.size(); ++i) info.diag[i] += g[i] * g[i];
  }
  for (auto& d : info.diag) d /= n_samples;
  // normalize to unit maximum: raw squared-loss gradients shrink with the
  // residuals as training converges, which would make any fixed lambda
  // meaningless across tasks; the relative importance structure is what the
  // penalty needs
  double mx = 0.0;
  for (double d : info.diag) mx = std::max(mx, d);
  if (mx > 0.0)
    for (auto& d : info.diag) d /= mx;
  return info;
}

double ewc_penalty(const std::vector<double>& theta, const FisherInfo& fisher, double lambda) {
  if (theta.size() != fisher.diag.size() || theta.size() != fisher.anchor.size())
    throw TapeError("ewc_penalty: shape mismatch with anchor");
  double acc = 0.0;
  for (size_t i = 0; i < theta.size(); ++i) {
    double d = theta[i] - fisher.anchor[i];
    acc += fisher.diag[i] * d * d;
  }
  return 0.5 * lambda * acc;
}

DiffArray ewc_penalty(Tape& tape, const BoundPolicy& bound, const FisherInfo& fisher,
                      double lambda) {
  size_t off = 0;
  DiffArray acc;
  bool first = true;
  for (const auto& [name, leaf] : bound.leaves()) {
    int n = leaf.size();
    if (off + n > fisher.diag.size()) throw TapeError("ewc_penalty: shape mismatch with anchor");
    DiffArray f({n}, std::vector<double>(fisher.diag.begin() + off, fisher.diag.begin() + off + n));
    DiffArray a({n},
                std::vector<double>(fisher.anchor.begin() + off, fisher.anchor.begin() + off + n));
    DiffArray flat = tape.reshape(leaf, {n});
    DiffArray term = tape.sum(tape.mul(f, tape.square(tape.sub(flat, a))));
    acc = first ? term : tape.add(acc, term);
    first = false;
    off += n;
  }
  if (off != fisher.diag.size()) throw TapeError("ewc_penalty: shape mismatch with anchor");
  return tape.scale(acc, 0.5 * lambda);
}

}  // namespace mtil
