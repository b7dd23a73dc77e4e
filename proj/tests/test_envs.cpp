#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "mtil/envs.hpp"

using namespace mtil;

TEST_CASE("reset: same seed gives identical initial observation") {
  for (const char* id : {"two-stage-reach", "cue-recall:L=10:m=+1"}) {
    auto e1 = make_env(id);
    auto e2 = make_env(id);
    CHECK(e1->reset(42) == e2->reset(42));
  }
}

TEST_CASE("two-stage-reach: initial observation is the origin with no stage info") {
  auto env = make_env("two-stage-reach");
  auto obs = env->reset(7);
  REQUIRE(obs.size() == 2);
  CHECK(obs[0] == 0.0);
  CHECK(obs[1] == 0.0);
  CHECK(env->spec().obs_dim == 2);
  CHECK(env->spec().action_dim == 2);
  CHECK(env->spec().horizon == 400);
}

TEST_CASE("cue-recall: initial observation carries the cue, balanced by seed parity") {
  auto env = make_env("cue-recall:L=5:m=+1");
  auto o0 = env->reset(0);
  auto o1 = env->reset(1);
  CHECK(o0[0] == 1.0);
  CHECK(o1[0] == -1.0);
  CHECK(o0[1] == 0.0);
  CHECK(env->spec().horizon == 7);
}

TEST_CASE("experts succeed on 1000 seeded episodes with lengths within horizon") {
  for (const char* id : {"two-stage-reach", "cue-recall:L=50:m=+1", "cue-recall:L=10:m=-1"}) {
    auto env = make_env(id);
    int successes = 0;
    for (uint64_t seed = 0; seed < 1000; ++seed) {
      Trajectory t = expert_episode(*env, seed);
      successes += t.success ? 1 : 0;
      CHECK(t.length() <= env->spec().horizon);
    }
    CHECK(successes == 1000);
  }
}

TEST_CASE("expert controller converges onto its subgoals") {
  // two-stage-reach: the origin return passes within controller tolerance of
  // the subgoal, so the proportional action there is negligible
  auto env = make_env("two-stage-reach");
  Trajectory t = expert_episode(*env, 3);
  REQUIRE(t.success);
  bool found_return = false;
  for (int i = 1; i < t.length(); ++i) {
    double d = std::hypot(t.observations[i][0], t.observations[i][1]);
    if (d <= 1e-9) {
      found_return = true;
      CHECK(10.0 * d <= 1e-8);  // proportional action magnitude at the subgoal
    }
  }
  CHECK(found_return);

  // cue-recall: the expert emits exact zeros until the decision step
  auto cue = make_env("cue-recall:L=8:m=+1");
  Trajectory ct = expert_episode(*cue, 4);
  REQUIRE(ct.success);
  for (int i = 0; i + 1 < ct.length(); ++i) CHECK(ct.actions[i][0] == 0.0);
  CHECK(std::abs(ct.actions[ct.length() - 1][0]) == 1.0);
}

TEST_CASE("generate_demos: n homogeneous successful trajectories") {
  auto env = make_env("two-stage-reach");
  Dataset ds = generate_demos(*env, 100, 7);
  CHECK(ds.trajectories.size() == 100);
  CHECK(ds.obs_dim == 2);
  CHECK(ds.action_dim == 2);
  for (const auto& t : ds.trajectories) {
    CHECK(t.success);
    CHECK(t.task_id == "two-stage-reach");
  }
}

TEST_CASE("demos replay open-loop to the same outcome") {
  for (const char* id : {"two-stage-reach", "cue-recall:L=20:m=-1"}) {
    auto env = make_env(id);
    Dataset ds = generate_demos(*env, 5, 11);
    for (const auto& t : ds.trajectories) {
      auto replay_env = env->fresh();
      auto obs = replay_env->reset(t.seed);
      bool success = false;
      for (int i = 0; i < t.length(); ++i) {
        CHECK(obs == t.observations[i]);
        StepResult r = replay_env->step(t.actions[i]);
        obs = r.observation;
        success = r.success;
        if (r.done) CHECK(i == t.length() - 1);
      }
      CHECK(success == t.success);
    }
  }
}

TEST_CASE("distinct seeds give distinct observation streams") {
  auto env = make_env("two-stage-reach");
  Trajectory a = expert_episode(*env, 1);
  Trajectory b = expert_episode(*env, 2);
  CHECK(a.observations != b.observations);

  auto cue = make_env("cue-recall:L=10:m=+1");
  Trajectory c = expert_episode(*cue, 0);
  Trajectory d = expert_episode(*cue, 1);
  CHECK(c.observations != d.observations);
}

TEST_CASE("ambiguity certificate: near-identical observations demand opposing actions") {
  auto env = make_env("two-stage-reach");
  Dataset ds = generate_demos(*env, 5, 23);
  bool found = false;
  for (const auto& t : ds.trajectories) {
    for (int i = 0; i < t.length() && !found; ++i) {
      for (int j = i + 1; j < t.length() && !found; ++j) {
        double dx = t.observations[i][0] - t.observations[j][0];
        double dy = t.observations[i][1] - t.observations[j][1];
        if (std::hypot(dx, dy) > 1e-6) continue;
        const auto& ai = t.actions[i];
        const auto& aj = t.actions[j];
        double dot = ai[0] * aj[0] + ai[1] * aj[1];
        double ni = std::hypot(ai[0], ai[1]);
        double nj = std::hypot(aj[0], aj[1]);
        if (ni > 1e-12 && nj > 1e-12 && dot / (ni * nj) < 0.0) found = true;  // > 90 degrees
      }
    }
  }
  CHECK(found);
}

TEST_CASE("markov ceiling: post-cue observations are identical across the two cues") {
  int L = 6;
  auto plus = make_env("cue-recall:L=6:m=+1");
  auto minus = make_env("cue-recall:L=6:m=+1");
  auto op = plus->reset(0);   // cue +1
  auto om = minus->reset(1);  // cue -1
  CHECK(op[0] == -om[0]);
  for (int t = 0; t < L + 2; ++t) {
    StepResult rp = plus->step({0.0});
    StepResult rm = minus->step({0.0});
    CHECK(rp.observation == rm.observation);
    if (rp.done) break;
  }
}

TEST_CASE("environments are deterministic given seed and action sequence") {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<std::vector<double>> actions;
  for (int i = 0; i < 50; ++i) actions.push_back({u(rng), u(rng)});

  auto run = [&](uint64_t seed) {
    auto env = make_env("two-stage-reach");
    std::vector<std::vector<double>> stream;
    stream.push_back(env->reset(seed));
    for (const auto& a : actions) {
      StepResult r = env->step(a);
      stream.push_back(r.observation);
      if (r.done) break;
    }
    return stream;
  };
  CHECK(run(5) == run(5));
}

TEST_CASE("actions are clipped to the declared bounds") {
  auto env = make_env("two-stage-reach");
  env->reset(0);
  StepResult r = env->step({100.0, -100.0});
  CHECK(r.observation[0] == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(r.observation[1] == doctest::Approx(-0.1).epsilon(1e-12));
}

TEST_CASE("stepping a finished episode raises") {
  auto env = make_env("cue-recall:L=1:m=+1");
  env->reset(0);
  for (int t = 0; t < 3; ++t) env->step({1.0});
  CHECK_THROWS_AS(env->step({1.0}), EnvError);
}

TEST_CASE("environment id parsing") {
  CHECK(make_env("cue-recall:L=30:m=-1")->spec().task_id == "cue-recall:L=30:m=-1");
  CHECK(make_env("cue-recall")->spec().horizon == 52);  // default L = 50
  CHECK_THROWS_AS(make_env("no-such-env"), EnvError);
  CHECK_THROWS_AS(make_env("cue-recall:L=oops"), EnvError);
  CHECK_THROWS_AS(make_env("two-stage-reach:L=5"), EnvError);
  CHECK(lifelong_task_family().size() == 3);
}

TEST_CASE("observation noise flag perturbs streams without breaking replay determinism") {
  auto env = make_env("two-stage-reach:noise=0.01");
  auto o1 = env->reset(3);
  auto env2 = make_env("two-stage-reach:noise=0.01");
  auto o2 = env2->reset(3);
  CHECK(o1 == o2);
  CHECK((o1[0] != 0.0 || o1[1] != 0.0));  // noise applied at reset
}
