#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <random>

#include "mtil/evalm.hpp"

using namespace mtil;

namespace {

AccuracyMatrix make_matrix(std::vector<std::vector<double>> rows, std::vector<double> base) {
  AccuracyMatrix m;
  m.n_tasks = static_cast<int>(rows.size());
  m.rows = std::move(rows);
  m.base = std::move(base);
  m.validate();
  return m;
}

}  // namespace

TEST_CASE("success_rate: scripted expert scores 1.0 on two-stage-reach") {
  Actor expert = [](Env& env, const std::vector<double>&, uint64_t, int) {
    return env.expert_action();
  };
  RateResult r = success_rate_actor("two-stage-reach", expert, 100, 42);
  CHECK(r.rate == 1.0);
  CHECK(r.ci.lo > 0.95);
  CHECK(r.ci.hi == 1.0);
}

TEST_CASE("success_rate: random actions on cue-recall land near the markov ceiling") {
  Actor random_actor = [](Env&, const std::vector<double>&, uint64_t seed, int t) {
    std::mt19937_64 rng(seed * 1315423911ull + t);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    return std::vector<double>{u(rng)};
  };
  RateResult r = success_rate_actor("cue-recall:L=5:m=+1", random_actor, 1000, 7);
  CHECK(r.rate >= 0.4);
  CHECK(r.rate <= 0.6);
}

TEST_CASE("success_rate: single episode gives a 0/1 rate") {
  Actor expert = [](Env& env, const std::vector<double>&, uint64_t, int) {
    return env.expert_action();
  };
  RateResult r = success_rate_actor("cue-recall:L=3:m=+1", expert, 1, 5);
  CHECK((r.rate == 0.0 || r.rate == 1.0));
}

TEST_CASE("success_rate for a policy is deterministic in the base seed") {
  PolicyConfig pc = desk_preset(2, 1, 1);
  pc.d_model = 8;
  pc.d_state = 4;
  pc.n_layers = 1;
  Policy p = Policy::init(pc, 3);
  RolloutConfig rc;
  rc.aggregation.enabled = false;
  RateResult a = success_rate(p, "cue-recall:L=5:m=+1", 40, 11, rc);
  RateResult b = success_rate(p, "cue-recall:L=5:m=+1", 40, 11, rc);
  CHECK(a.rate == b.rate);
  CHECK(a.ci.lo == b.ci.lo);
}

TEST_CASE("wilson interval matches a direct evaluation and stays in [0,1]") {
  // independent recomputation of the score interval
  auto direct = [](int s, int n) {
    double z = 1.959963984540054, p = double(s) / n;
    double c = (p + z * z / (2 * n)) / (1 + z * z / n);
    double h = z * std::sqrt(p * (1 - p) / n + z * z / (4.0 * n * n)) / (1 + z * z / n);
    return std::pair<double, double>{c - h, c + h};
  };
  for (auto [s, n] : std::vector<std::pair<int, int>>{{0, 10}, {10, 10}, {73, 100}, {1, 1000}}) {
    WilsonInterval w = wilson_interval(s, n);
    auto [lo, hi] = direct(s, n);
    CHECK(w.lo == doctest::Approx(std::max(0.0, lo)).epsilon(1e-12));
    CHECK(w.hi == doctest::Approx(std::min(1.0, hi)).epsilon(1e-12));
    CHECK(w.lo >= 0.0);
    CHECK(w.hi <= 1.0);
    CHECK(w.lo <= double(s) / n);
    CHECK(w.hi >= double(s) / n);
  }
  CHECK_THROWS_AS(wilson_interval(0, 0), InferError);
}

TEST_CASE("fwt: zero, hand value, and linearity") {
  // A[i-1][i] = A_base[i] for all i -> 0
  auto m0 = make_matrix({{1.0, 0.5, 0.2}, {0.9, 1.0, 0.7}, {0.8, 0.9, 1.0}}, {0.3, 0.5, 0.7});
  CHECK(fwt(m0) == doctest::Approx(0.0).epsilon(1e-15));

  // N = 3, A[1][2] = 0.6, A[2][3] = 0.8, base = (., 0.5, 0.5) -> 0.2
  auto m1 = make_matrix({{1.0, 0.6, 0.0}, {0.9, 1.0, 0.8}, {0.8, 0.9, 1.0}}, {0.0, 0.5, 0.5});
  CHECK(fwt(m1) == doctest::Approx(0.2).epsilon(1e-15));

  // adding delta to every A[i-1][i] shifts FWT by delta
  double delta = 0.15;
  auto m2 = m1;
  m2.rows[0][1] += delta;
  m2.rows[1][2] += delta;
  CHECK(fwt(m2) == doctest::Approx(fwt(m1) + delta).epsilon(1e-12));
}

TEST_CASE("nbt: no forgetting, hand value, improvements clamp to zero") {
  auto keep = make_matrix({{1.0, 0.0, 0.0}, {0.9, 0.9, 0.0}, {1.0, 0.9, 0.8}}, {0, 0, 0});
  CHECK(nbt(keep) == 0.0);  // A[N][i] = A[i][i]

  // N = 3: A11=1, A31=0.4; A22=0.9, A32=0.9 -> (0.6 + 0)/2 = 0.3
  auto hand = make_matrix({{1.0, 0.0, 0.0}, {0.5, 0.9, 0.0}, {0.4, 0.9, 1.0}}, {0, 0, 0});
  CHECK(nbt(hand) == doctest::Approx(0.3).epsilon(1e-15));

  // improvement on old tasks contributes 0, never negative
  auto better = make_matrix({{0.5, 0.0}, {0.9, 1.0}}, {0, 0});
  CHECK(nbt(better) == 0.0);
}

TEST_CASE("auc: saturated, hand value, single task") {
  auto ones = make_matrix({{1.0, 1.0}, {1.0, 1.0}}, {0, 0});
  CHECK(auc(ones) == 1.0);
  auto hand = make_matrix({{0.0, 0.0, 0.0}, {0.0, 0.0, 0.0}, {0.2, 0.4, 0.6}}, {0, 0, 0});
  CHECK(auc(hand) == doctest::Approx(0.4).epsilon(1e-15));
  auto single = make_matrix({{0.7}}, {0.0});
  CHECK(auc(single) == doctest::Approx(0.7).epsilon(1e-15));
}

TEST_CASE("metrics need at least two tasks") {
  auto single = make_matrix({{0.7}}, {0.5});
  CHECK_THROWS_AS(fwt(single), InferError);
  CHECK_THROWS_AS(nbt(single), InferError);
}

TEST_CASE("fwt/nbt/auc match an independent spreadsheet-style evaluation") {
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    int n = 2 + static_cast<int>(rng() % 4);
    std::vector<std::vector<double>> rows(n, std::vector<double>(n));
    std::vector<double> base(n);
    for (auto& row : rows)
      for (auto& v : row) v = u(rng);
    for (auto& v : base) v = u(rng);
    auto m = make_matrix(rows, base);

    double fwt_ref = 0.0;
    for (int i = 2; i <= n; ++i) fwt_ref += rows[i - 2][i - 1] - base[i - 1];
    fwt_ref /= (n - 1);
    double nbt_ref = 0.0;
    for (int i = 1; i <= n - 1; ++i)
      nbt_ref += std::max(0.0, rows[i - 1][i - 1] - rows[n - 1][i - 1]);
    nbt_ref /= (n - 1);
    double auc_ref = 0.0;
    for (int i = 1; i <= n; ++i) auc_ref += rows[n - 1][i - 1];
    auc_ref /= n;

    CHECK(std::abs(fwt(m) - fwt_ref) <= 1e-12);
    CHECK(std::abs(nbt(m) - nbt_ref) <= 1e-12);
    CHECK(std::abs(auc(m) - auc_ref) <= 1e-12);
  }
}

TEST_CASE("fingerprints are stable and config-sensitive") {
  auto fp1 = fingerprint({{"env", "two-stage-reach"}, {"seed", "7"}});
  auto fp2 = fingerprint({{"env", "two-stage-reach"}, {"seed", "7"}});
  auto fp3 = fingerprint({{"env", "two-stage-reach"}, {"seed", "8"}});
  CHECK(fp1 == fp2);
  CHECK(fp1 != fp3);
  CHECK(fp1.size() == 16);
}

TEST_CASE("report JSON round-trips and renders") {
  Report r;
  r.rows.push_back({"full-history", "two-stage-reach", 0.97, 0.915, 0.991, 100, 5001, "abcd"});
  LifelongReport l;
  l.regime = "ewc-off";
  l.seed = 3;
  l.tasks = {"a", "b"};
  l.matrix = make_matrix({{1.0, 0.0}, {0.5, 1.0}}, {0.9, 0.8});
  l.fwt_value = fwt(l.matrix);
  l.nbt_value = nbt(l.matrix);
  l.auc_value = auc(l.matrix);
  l.has_base = true;
  l.config_fingerprint = "ffff";
  r.lifelong.push_back(l);

  std::string path = "/tmp/test_evalm_report.json";
  write_report(r, path);
  Report back = read_report(path);
  CHECK(report_to_json(back) == report_to_json(r));
  CHECK(back.rows[0].method == "full-history");
  CHECK(back.lifelong[0].matrix.at(2, 1) == 0.5);

  std::string text = render_text(r);
  CHECK(text.find("full-history") != std::string::npos);
  CHECK(text.find("NBT") != std::string::npos);
  std::string csv = render_csv(r);
  CHECK(csv.find("rate,full-history") != std::string::npos);
  std::remove(path.c_str());

  // malformed report file raises a typed error
  {
    std::ofstream os(path);
    os << "not json at all{";
  }
  CHECK_THROWS_AS(read_report(path), FormatError);
  std::remove(path.c_str());
}

TEST_CASE("run_lifelong: identical tasks show positive forward transfer") {
  LifelongConfig cfg;
  cfg.tasks = {"two-stage-reach", "two-stage-reach"};
  cfg.demos_per_task = 20;
  cfg.epochs_per_task = 40;
  cfg.base_epochs = 5;  // scratch baseline far from saturation
  cfg.lr0 = 1e-3;
  cfg.eval_episodes = 50;
  cfg.seed = 2;
  cfg.d_model = 16;
  cfg.d_state = 4;
  cfg.n_layers = 2;
  LifelongReport rep = run_lifelong(cfg);
  // chunk defaults to 1 for the driver; two-stage works with K=1 as well
  CHECK(rep.matrix.n_tasks == 2);
  CHECK(rep.fwt_value > 0.0);
}

TEST_CASE("run_lifelong: conflicting cue mappings cause forgetting without ewc") {
  LifelongConfig cfg;
  cfg.tasks = {"cue-recall:L=5:m=+1", "cue-recall:L=5:m=-1"};
  cfg.demos_per_task = 10;
  cfg.epochs_per_task = 40;
  cfg.base_epochs = 40;
  cfg.lr0 = 1e-3;
  cfg.eval_episodes = 40;
  cfg.seed = 3;
  cfg.d_model = 16;
  cfg.d_state = 4;
  cfg.n_layers = 2;
  cfg.ewc = false;
  LifelongReport rep = run_lifelong(cfg);
  CHECK(rep.matrix.at(1, 1) == 1.0);                    // task 1 learned
  CHECK(rep.matrix.at(2, 1) < rep.matrix.at(1, 1));     // and then forgotten
  CHECK(rep.nbt_value > 0.0);
}

TEST_CASE("env_train_defaults cover the shipped environments") {
  auto tsr = env_train_defaults("two-stage-reach");
  CHECK(tsr.chunk_k == 8);
  CHECK(tsr.aggregation);
  auto cue = env_train_defaults("cue-recall:L=50:m=+1");
  CHECK(cue.chunk_k == 1);
  CHECK(!cue.aggregation);
  CHECK_THROWS_AS(env_train_defaults("mystery"), EnvError);
}
