#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "mtil/envs.hpp"
#include "mtil/train.hpp"

using namespace mtil;

namespace {

// smooth synthetic demonstration, easy to memorize
Trajectory synthetic_traj(int T, int obs_dim, int action_dim) {
  Trajectory t;
  t.task_id = "synthetic";
  for (int s = 0; s < T; ++s) {
    std::vector<double> o(obs_dim), a(action_dim);
    for (int j = 0; j < obs_dim; ++j) o[j] = std::sin(0.1 * (s + 1) * (j + 1));
    for (int j = 0; j < action_dim; ++j) a[j] = 0.5 * std::cos(0.2 * (s + 1) + j);
    t.observations.push_back(std::move(o));
    t.actions.push_back(std::move(a));
  }
  t.success = true;
  return t;
}

PolicyConfig tiny_config(int obs_dim, int action_dim, int chunk_k) {
  PolicyConfig cfg = desk_preset(obs_dim, action_dim, chunk_k);
  cfg.d_model = 16;
  cfg.d_state = 4;
  cfg.n_layers = 2;
  return cfg;
}

DiffArray const_vector(const std::vector<double>& v) {
  return DiffArray({static_cast<int>(v.size())}, v);
}

}  // namespace

TEST_CASE("adamw: zero gradient with zero decay leaves parameters unchanged") {
  AdamW opt(3, 0.9, 0.999, 0.0);
  std::vector<double> params = {1.0, -2.0, 0.5};
  std::vector<double> zero = {0.0, 0.0, 0.0};
  auto before = params;
  opt.step(params, zero, 0.1);
  CHECK(params == before);
}

TEST_CASE("adamw: first step magnitude is lr * g / (|g| + eps)") {
  AdamW opt(2, 0.9, 0.999, 0.0);
  std::vector<double> params = {0.0, 0.0};
  std::vector<double> g = {0.3, -2.0};
  double lr = 0.01;
  opt.step(params, g, lr);
  for (int i = 0; i < 2; ++i)
    CHECK(params[i] == doctest::Approx(-lr * g[i] / (std::abs(g[i]) + 1e-8)).epsilon(1e-9));
}

TEST_CASE("adamw: 100 steps on a quadratic bowl converge within 1e-3") {
  AdamW opt(2, 0.9, 0.999, 0.0);
  std::vector<double> theta = {0.2, -0.16};
  const std::vector<double> target = {0.0, 0.0};
  for (int s = 0; s < 100; ++s) {
    std::vector<double> g = {theta[0] - target[0], theta[1] - target[1]};
    opt.step(theta, g, cosine_lr(s, 100, 0.06));
  }
  CHECK(std::abs(theta[0] - target[0]) <= 1e-3);
  CHECK(std::abs(theta[1] - target[1]) <= 1e-3);
}

TEST_CASE("cosine_lr endpoints and midpoint") {
  CHECK(cosine_lr(0, 100, 3e-4) == doctest::Approx(3e-4).epsilon(1e-15));
  CHECK(cosine_lr(100, 100, 3e-4) == doctest::Approx(0.0).epsilon(1e-18));
  CHECK(cosine_lr(50, 100, 3e-4) == doctest::Approx(1.5e-4).epsilon(1e-12));
  CHECK_THROWS_AS(cosine_lr(-1, 100, 1e-4), TapeError);
  CHECK_THROWS_AS(cosine_lr(101, 100, 1e-4), TapeError);
}

TEST_CASE("train: zero epochs leaves parameters unchanged") {
  Dataset ds;
  ds.append(synthetic_traj(5, 3, 2));
  Policy p = Policy::init(tiny_config(3, 2, 1), 5);
  auto before = p.params.flatten();
  TrainConfig cfg;
  cfg.epochs = 0;
  auto logs = train(p, ds, cfg);
  CHECK(logs.empty());
  CHECK(p.params.flatten() == before);
}

TEST_CASE("train: K=1 first loss equals the mean squared error over action dims") {
  Dataset ds;
  ds.append(synthetic_traj(1, 3, 2));
  Policy p = Policy::init(tiny_config(3, 2, 1), 7);

  // hand-computed forward pass of the untouched policy
  Tape t;
  BoundPolicy bp(t, p, false);
  auto [out, st] = bp.step(bp.encode(const_vector(ds.trajectories[0].observations[0])),
                           reset_state(p.cfg));
  double expect = 0.0;
  for (int j = 0; j < 2; ++j) {
    double d = out.chunk.data[j] - ds.trajectories[0].actions[0][j];
    expect += d * d;
  }
  expect /= 2.0;

  TrainConfig cfg;
  cfg.epochs = 1;
  auto logs = train(p, ds, cfg);
  REQUIRE(logs.size() == 1);
  CHECK(logs[0].mean_loss == doctest::Approx(expect).epsilon(1e-14));
  CHECK(logs[0].updates == 1);  // one optimizer update per trajectory
}

TEST_CASE("train: fixed seed gives bit-identical parameters across runs") {
  auto env = make_env("cue-recall:L=5:m=+1");
  Dataset ds = generate_demos(*env, 6, 3);

  auto run = [&]() {
    Policy p = Policy::init(tiny_config(2, 1, 1), 11);
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.lr0 = 1e-3;
    cfg.seed = 9;
    train(p, ds, cfg);
    return p.params.flatten();
  };
  auto a = run();
  auto b = run();
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("train: temporal order is preserved and resets hit the exact steps") {
  auto env = make_env("cue-recall:L=12:m=+1");
  Dataset ds = generate_demos(*env, 2, 1);
  Policy p = Policy::init(tiny_config(2, 1, 1), 13);

  SUBCASE("full history: (step_index, t) strictly increasing within a trajectory") {
    TrainConfig cfg;
    cfg.epochs = 1;
    std::vector<std::pair<int, int>> seen;
    cfg.observer = [&](const PolicyState& s, int t) { seen.emplace_back(s.step_index, t); };
    train(p, ds, cfg);
    REQUIRE(seen.size() == 2 * 14);  // two trajectories of L+2 steps
    for (size_t i = 0; i < seen.size(); ++i) {
      size_t pos = i % 14;
      CHECK(seen[i].second == static_cast<int>(pos) + 1);
      CHECK(seen[i].first == static_cast<int>(pos));  // state consumed at t has index t-1
      if (pos > 0) {
        CHECK(seen[i].first > seen[i - 1].first);
        CHECK(seen[i].second > seen[i - 1].second);
      }
    }
  }

  SUBCASE("reset interval r: state is exactly zero whenever (t-1) mod r = 0") {
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.history_reset_interval = 5;
    int zero_checks = 0, nonzero_checks = 0;
    cfg.observer = [&](const PolicyState& s, int t) {
      if ((t - 1) % 5 == 0) {
        CHECK(s.is_zero());
        ++zero_checks;
      } else if (t > 1) {
        // cue-recall observations include a nonzero cue at t=1, so states
        // right after it are nonzero
        if (!s.is_zero()) ++nonzero_checks;
      }
    };
    train(p, ds, cfg);
    CHECK(zero_checks == 2 * 3);  // t = 1, 6, 11 per trajectory
    CHECK(nonzero_checks > 0);
  }
}

TEST_CASE("train: reset interval 1 degenerates to markovian cloning") {
  auto env = make_env("cue-recall:L=6:m=+1");
  Dataset ds = generate_demos(*env, 1, 2);
  const Trajectory& traj = ds.trajectories[0];
  Policy p = Policy::init(tiny_config(2, 1, 1), 17);

  // with r = 1 every prediction runs from the zero state: the trajectory loss
  // equals the mean of independent fresh-state step losses
  double expect = 0.0;
  {
    Tape t;
    BoundPolicy bp(t, p, false);
    for (int s = 1; s <= traj.length(); ++s) {
      auto [out, st] =
          bp.step(bp.encode(const_vector(traj.observations[s - 1])), reset_state(p.cfg));
      double d = out.chunk.data[0] - traj.actions[s - 1][0];
      expect += d * d;
    }
    expect /= traj.length();
  }

  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.history_reset_interval = 1;
  cfg.observer = [&](const PolicyState& s, int t) { CHECK(s.is_zero()); };
  auto logs = train(p, ds, cfg);
  CHECK(logs[0].mean_loss == doctest::Approx(expect).epsilon(1e-13));
}

TEST_CASE("train: perfect memorization of one short trajectory") {
  Dataset ds;
  ds.append(synthetic_traj(20, 3, 2));
  PolicyConfig pc = tiny_config(3, 2, 4);
  Policy p = Policy::init(pc, 19);
  TrainConfig cfg;
  cfg.epochs = 500;
  cfg.lr0 = 3e-3;
  cfg.weight_decay = 0.0;
  cfg.seed = 4;
  auto logs = train(p, ds, cfg);
  CHECK(logs.back().mean_loss < 1e-4);
}

TEST_CASE("train: cue-recall loss falls below 0.01 within 200 epochs") {
  auto env = make_env("cue-recall:L=10:m=+1");
  Dataset ds = generate_demos(*env, 50, 5);
  Policy p = Policy::init(desk_preset(2, 1, 1), 23);
  TrainConfig cfg;
  cfg.lr0 = 1e-3;
  cfg.seed = 6;
  double best = 1e18;
  int total_epochs = 0;
  while (total_epochs < 200 && best >= 0.01) {
    cfg.epochs = 25;
    auto logs = train(p, ds, cfg);
    for (const auto& l : logs) best = std::min(best, l.mean_loss);
    total_epochs += 25;
  }
  CHECK(best < 0.01);
}

TEST_CASE("gradient flows through time exactly when memory is usable") {
  auto env = make_env("cue-recall:L=8:m=+1");
  Dataset ds = generate_demos(*env, 2, 7);
  const Trajectory& traj = ds.trajectories[0];
  Policy p = Policy::init(tiny_config(2, 1, 1), 29);

  auto a_log_grad_norm = [&](bool reset_every_step) {
    Tape tape;
    BoundPolicy bound(tape, p, true);
    PolicyState state = reset_state(p.cfg);
    DiffArray total;
    for (int t = 1; t <= traj.length(); ++t) {
      if (reset_every_step) state = reset_state(p.cfg);
      auto [out, next] = bound.step(bound.encode(const_vector(traj.observations[t - 1])), state);
      state = std::move(next);
      DiffArray target = const_vector(traj.actions[t - 1]);
      DiffArray loss = tape.mean(tape.square(tape.sub(tape.reshape(out.chunk, {1}), target)));
      total = t == 1 ? loss : tape.add(total, loss);
    }
    tape.backward(tape.scale(total, 1.0 / traj.length()));
    double norm = 0.0;
    for (int l = 0; l < p.cfg.n_layers; ++l) {
      DiffArray g = tape.grad(bound.leaf("layers." + std::to_string(l) + ".a_log"));
      for (double v : g.data) norm += v * v;
    }
    return std::sqrt(norm);
  };

  CHECK(a_log_grad_norm(false) > 1e-10);  // memory carries the cue to the loss
  CHECK(a_log_grad_norm(true) == 0.0);    // zero state kills the a_log path
}

TEST_CASE("fisher_estimate: zero for a constant-loss model, nonnegative otherwise") {
  // all-zero parameters and all-zero actions: every step loss is exactly 0
  Dataset ds;
  Trajectory t;
  for (int s = 0; s < 6; ++s) {
    t.observations.push_back({0.5, -0.2});
    t.actions.push_back({0.0});
  }
  ds.append(std::move(t));

  PolicyConfig pc = tiny_config(2, 1, 1);
  Policy p = Policy::init(pc, 31);
  for (auto& [name, arr] : p.params.entries)
    for (auto& v : arr.data) v = 0.0;
  FisherInfo f = fisher_estimate(p, ds, 50, 1);
  for (double d : f.diag) CHECK(d == 0.0);

  Policy q = Policy::init(pc, 37);
  FisherInfo f2 = fisher_estimate(q, ds, 50, 1);
  for (double d : f2.diag) CHECK(d >= 0.0);
}

TEST_CASE("fisher_estimate: doubling the sample count is stable on a converged model") {
  Dataset ds;
  ds.append(synthetic_traj(12, 3, 2));
  Policy p = Policy::init(tiny_config(3, 2, 1), 41);
  TrainConfig cfg;
  cfg.epochs = 300;
  cfg.lr0 = 3e-3;
  cfg.weight_decay = 0.0;
  train(p, ds, cfg);

  FisherInfo fa = fisher_estimate(p, ds, 400, 11);
  FisherInfo fb = fisher_estimate(p, ds, 800, 12);
  double num = 0.0, den = 0.0;
  for (size_t i = 0; i < fa.diag.size(); ++i) {
    num += (fa.diag[i] - fb.diag[i]) * (fa.diag[i] - fb.diag[i]);
    den += fa.diag[i] * fa.diag[i];
  }
  CHECK(std::sqrt(num) < 0.2 * std::sqrt(den));
}

TEST_CASE("ewc_penalty closed forms") {
  FisherInfo f;
  f.diag = {2.0};
  f.anchor = {1.0};
  CHECK(ewc_penalty({1.0}, f, 5.0) == 0.0);         // theta = anchor
  CHECK(ewc_penalty({4.0}, f, 0.0) == 0.0);         // lambda = 0
  CHECK(ewc_penalty({4.0}, f, 1.0) == 9.0);         // (1/2) * 1 * 2 * 3^2
  CHECK_THROWS_AS(ewc_penalty({1.0, 2.0}, f, 1.0), TapeError);
}

TEST_CASE("ewc_penalty on tape matches the plain evaluation") {
  Policy p = Policy::init(tiny_config(2, 1, 1), 43);
  FisherInfo f;
  f.anchor = p.params.flatten();
  f.diag.assign(f.anchor.size(), 0.0);
  std::mt19937_64 rng(47);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& d : f.diag) d = u(rng);

  // move parameters away from the anchor
  auto flat = p.params.flatten();
  for (auto& v : flat) v += 0.1;
  p.params.unflatten(flat);

  Tape tape;
  BoundPolicy bound(tape, p, true);
  DiffArray pen = ewc_penalty(tape, bound, f, 100.0);
  CHECK(pen.value() == doctest::Approx(ewc_penalty(flat, f, 100.0)).epsilon(1e-12));

  // and it is differentiable: d pen / d theta = lambda * F * (theta - anchor)
  tape.backward(pen);
  DiffArray g = tape.grad(bound.leaves()[0].second);
  CHECK(g.data[0] == doctest::Approx(100.0 * f.diag[0] * 0.1).epsilon(1e-9));
}

TEST_CASE("train: dimension mismatches are rejected") {
  Dataset ds;
  ds.append(synthetic_traj(4, 3, 2));
  Policy p = Policy::init(tiny_config(2, 2, 1), 53);
  TrainConfig cfg;
  CHECK_THROWS_AS(train(p, ds, cfg), TapeError);
  Dataset empty;
  empty.obs_dim = 2;
  empty.action_dim = 2;
  CHECK_THROWS_AS(train(p, empty, cfg), TapeError);
}
