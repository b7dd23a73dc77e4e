#include "mtil/evalm.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <thread>

#include <json.hpp>

namespace mtil {

namespace {

constexpr double kZ95 = 1.959963984540054;

int pool_size(int workers, int n) {
  if (workers <= 0) workers = static_cast<int>(std::thread::hardware_concurrency());
  if (workers < 1) workers = 1;
  return std::min(workers, n);
}

/// Runs fn(i) for i in [0, n) on a worker pool; fn must only touch state
/// owned by episode i.
void parallel_for(int n, int workers, const std::function<void(int)>& fn) {
  workers = pool_size(workers, n);
  if (workers <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&]() {
      for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
    });
  for (auto& t : pool) t.join();
}

}  // namespace

WilsonInterval wilson_interval(int successes, int n) {
  if (n < 1) throw InferError("wilson interval needs n >= 1");
  double p = static_cast<double>(successes) / n;
  double z2 = kZ95 * kZ95;
  double denom = 1.0 + z2 / n;
  double center = (p + z2 / (2.0 * n)) / denom;
  double half = kZ95 * std::sqrt(p * (1.0 - p) / n + z2 / (4.0 * n * n)) / denom;
  // the boundary endpoints equal the estimate exactly; avoid rounding past them
  double lo = successes == 0 ? 0.0 : std::max(0.0, center - half);
  double hi = successes == n ? 1.0 : std::min(1.0, center + half);
  return {lo, hi};
}

RateResult success_rate(const Policy& policy, const std::string& env_id, int n_episodes,
                        uint64_t base_seed, const RolloutConfig& rollout_cfg, int workers) {
  if (n_episodes < 1) throw InferError("success_rate needs n >= 1");
  std::vector<uint8_t> ok(n_episodes, 0);
  parallel_for(n_episodes, workers, [&](int i) {
    auto env = make_env(env_id);
    ok[i] = rollout(policy, *env, rollout_cfg, base_seed + i).success ? 1 : 0;
  });
  int successes = 0;
  for (uint8_t v : ok) successes += v;
  RateResult r;
  r.rate = static_cast<double>(successes) / n_episodes;
  r.ci = wilson_interval(successes, n_episodes);
  r.episodes = n_episodes;
  r.base_seed = base_seed;
  return r;
}

RateResult success_rate_actor(const std::string& env_id, const Actor& actor, int n_episodes,
                              uint64_t base_seed, int workers) {
  if (n_episodes < 1) throw InferError("success_rate needs n >= 1");
  std::vector<uint8_t> ok(n_episodes, 0);
  parallel_for(n_episodes, workers, [&](int i) {
    auto env = make_env(env_id);
    uint64_t episode_seed = base_seed + i;
    std::vector<double> obs = env->reset(episode_seed);
    for (int t = 1; t <= env->spec().horizon; ++t) {
      StepResult r = env->step(actor(*env, obs, episode_seed, t));
      obs = r.observation;
      if (r.done) {
        ok[i] = r.success ? 1 : 0;
        break;
      }
    }
  });
  int successes = 0;
  for (uint8_t v : ok) successes += v;
  RateResult r;
  r.rate = static_cast<double>(successes) / n_episodes;
  r.ci = wilson_interval(successes, n_episodes);
  r.episodes = n_episodes;
  r.base_seed = base_seed;
  return r;
}

double AccuracyMatrix::at(int i, int j) const {
  if (i < 1 || i > n_tasks || j < 1 || j > n_tasks)
    throw InferError("accuracy matrix index out of range");
  return rows[i - 1][j - 1];
}

double AccuracyMatrix::base_at(int i) const {
  if (i < 1 || i > static_cast<int>(base.size()))
    throw InferError("accuracy matrix baseline index out of range");
  return base[i - 1];
}

void AccuracyMatrix::validate() const {
  if (static_cast<int>(rows.size()) != n_tasks)
    throw InferError("accuracy matrix has wrong row count");
  for (const auto& row : rows) {
    if (static_cast<int>(row.size()) != n_tasks)
      throw InferError("accuracy matrix has ragged rows");
    for (double v : row)
      if (v < 0.0 || v > 1.0) throw InferError("accuracy entries must lie in [0,1]");
  }
}

double fwt(const AccuracyMatrix& m) {
  if (m.n_tasks < 2) throw InferError("fwt needs at least 2 tasks");
  double acc = 0.0;
  for (int i = 2; i <= m.n_tasks; ++i) acc += m.at(i - 1, i) - m.base_at(i);
  return acc / (m.n_tasks - 1);
}

double nbt(const AccuracyMatrix& m) {
  if (m.n_tasks < 2) throw InferError("nbt needs at least 2 tasks");
  double acc = 0.0;
  for (int i = 1; i <= m.n_tasks - 1; ++i)
    acc += std::max(0.0, m.at(i, i) - m.at(m.n_tasks, i));
  return acc / (m.n_tasks - 1);
}

double auc(const AccuracyMatrix& m) {
  if (m.n_tasks < 1) throw InferError("auc needs at least 1 task");
  double acc = 0.0;
  for (int i = 1; i <= m.n_tasks; ++i) acc += m.at(m.n_tasks, i);
  return acc / m.n_tasks;
}

EnvTrainDefaults env_train_defaults(const std::string& env_id) {
  EnvTrainDefaults d;
  if (env_id.rfind("two-stage-reach", 0) == 0) {
    d.chunk_k = 8;
    d.aggregation = true;
    d.gamma = 0.9;
    d.epochs = 40;
    d.lr0 = 1e-3;
    d.demos = 100;
    return d;
  }
  if (env_id.rfind("cue-recall", 0) == 0) {
    d.chunk_k = 1;
    d.aggregation = false;
    d.epochs = 40;
    d.lr0 = 1e-3;
    d.demos = 100;
    return d;
  }
  throw EnvError("no training defaults for environment '" + env_id + "'");
}

uint64_t fnv1a64(const std::string& s) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string fingerprint(const std::vector<std::pair<std::string, std::string>>& kv) {
  std::string canon;
  for (const auto& [k, v] : kv) canon += k + "=" + v + ";";
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << fnv1a64(canon);
  return os.str();
}

namespace {

nlohmann::json matrix_to_json(const AccuracyMatrix& m) {
  nlohmann::json j;
  j["n_tasks"] = m.n_tasks;
  j["rows"] = m.rows;
  j["base"] = m.base;
  return j;
}

AccuracyMatrix matrix_from_json(const nlohmann::json& j) {
  AccuracyMatrix m;
  m.n_tasks = j.at("n_tasks").get<int>();
  m.rows = j.at("rows").get<std::vector<std::vector<double>>>();
  m.base = j.at("base").get<std::vector<double>>();
  m.validate();
  return m;
}

}  // namespace

std::string report_to_json(const Report& report) {
  nlohmann::json j;
  j["fwt_definition"] = report.fwt_definition;
  j["rows"] = nlohmann::json::array();
  for (const auto& r : report.rows) {
    nlohmann::json row;
    row["method"] = r.method;
    row["env_id"] = r.env_id;
    row["rate"] = r.rate;
    row["ci_lo"] = r.ci_lo;
    row["ci_hi"] = r.ci_hi;
    row["episodes"] = r.episodes;
    row["base_seed"] = r.base_seed;
    row["config_fingerprint"] = r.config_fingerprint;
    j["rows"].push_back(row);
  }
  j["lifelong"] = nlohmann::json::array();
  for (const auto& l : report.lifelong) {
    nlohmann::json row;
    row["regime"] = l.regime;
    row["seed"] = l.seed;
    row["tasks"] = l.tasks;
    row["matrix"] = matrix_to_json(l.matrix);
    row["fwt"] = l.fwt_value;
    row["nbt"] = l.nbt_value;
    row["auc"] = l.auc_value;
    row["has_base"] = l.has_base;
    row["config_fingerprint"] = l.config_fingerprint;
    j["lifelong"].push_back(row);
  }
  return j.dump(2);
}

Report report_from_json(const std::string& json_text) {
  nlohmann::json j = nlohmann::json::parse(json_text);
  Report report;
  report.fwt_definition = j.at("fwt_definition").get<std::string>();
  for (const auto& row : j.at("rows")) {
    ReportRow r;
    r.method = row.at("method").get<std::string>();
    r.env_id = row.at("env_id").get<std::string>();
    r.rate = row.at("rate").get<double>();
    r.ci_lo = row.at("ci_lo").get<double>();
    r.ci_hi = row.at("ci_hi").get<double>();
    r.episodes = row.at("episodes").get<int>();
    r.base_seed = row.at("base_seed").get<uint64_t>();
    r.config_fingerprint = row.at("config_fingerprint").get<std::string>();
    report.rows.push_back(std::move(r));
  }
  for (const auto& row : j.at("lifelong")) {
    LifelongReport l;
    l.regime = row.at("regime").get<std::string>();
    l.seed = row.at("seed").get<uint64_t>();
    l.tasks = row.at("tasks").get<std::vector<std::string>>();
    l.matrix = matrix_from_json(row.at("matrix"));
    l.fwt_value = row.at("fwt").get<double>();
    l.nbt_value = row.at("nbt").get<double>();
    l.auc_value = row.at("auc").get<double>();
    l.has_base = row.at("has_base").get<bool>();
    l.config_fingerprint = row.at("config_fingerprint").get<std::string>();
    report.lifelong.push_back(std::move(l));
  }
  return report;
}

void write_report(const Report& report, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  os << report_to_json(report) << "\n";
}

Report read_report(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  try {
    return report_from_json(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + " is not a report file: " + e.what());
  }
}

std::string render_text(const Report& report) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(3);
  if (!report.rows.empty()) {
    os << std::left << std::setw(22) << "method" << std::setw(28) << "env" << std::right
       << std::setw(7) << "rate" << std::setw(8) << "ci_lo" << std::setw(8) << "ci_hi"
       << std::setw(6) << "n" << "  fingerprint\n";
    for (const auto& r : report.rows)
      os << std::left << std::setw(22) << r.method << std::setw(28) << r.env_id << std::right
         << std::setw(7) << r.rate << std::setw(8) << r.ci_lo << std::setw(8) << r.ci_hi
         << std::setw(6) << r.episodes << "  " << r.config_fingerprint << "\n";
  }
  for (const auto& l : report.lifelong) {
    os << "\nlifelong " << l.regime << " (seed " << l.seed << ")\n";
    for (int i = 1; i <= l.matrix.n_tasks; ++i) {
      os << "  after task " << i << ":";
      for (int j = 1; j <= l.matrix.n_tasks; ++j) os << " " << l.matrix.at(i, j);
      os << "\n";
    }
    if (l.has_base) {
      os << "  scratch     :";
      for (int j = 1; j <= l.matrix.n_tasks; ++j) os << " " << l.matrix.base_at(j);
      os << "\n";
    }
    os << "  FWT " << l.fwt_value << "  NBT " << l.nbt_value << "  AUC " << l.auc_value
       << "  [" << report.fwt_definition << "]\n";
  }
  return os.str();
}

std::string render_csv(const Report& report) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "kind,method_or_regime,env_or_task,rate_or_value,ci_lo,ci_hi,episodes,seed,fingerprint\n";
  for (const auto& r : report.rows)
    os << "rate," << r.method << "," << r.env_id << "," << r.rate << "," << r.ci_lo << ","
       << r.ci_hi << "," << r.episodes << "," << r.base_seed << "," << r.config_fingerprint
       << "\n";
  for (const auto& l : report.lifelong) {
    for (int i = 1; i <= l.matrix.n_tasks; ++i)
      for (int j = 1; j <= l.matrix.n_tasks; ++j)
        os << "accuracy," << l.regime << "," << l.tasks[j - 1] << "," << l.matrix.at(i, j)
           << ",,," << i << "," << l.seed << "," << l.config_fingerprint << "\n";
    if (l.has_base)
      for (int j = 1; j <= l.matrix.n_tasks; ++j)
        os << "baseline," << l.regime << "," << l.tasks[j - 1] << "," << l.matrix.base_at(j)
           << ",,,," << l.seed << "," << l.config_fingerprint << "\n";
    os << "metric," << l.regime << ",fwt," << l.fwt_value << ",,,," << l.seed << ","
       << l.config_fingerprint << "\n";
    os << "metric," << l.regime << ",nbt," << l.nbt_value << ",,,," << l.seed << ","
       << l.config_fingerprint << "\n";
    os << "metric," << l.regime << ",auc," << l.auc_value << ",,,," << l.seed << ","
       << l.config_fingerprint << "\n";
  }
  return os.str();
}

Report ablate(const AblateConfig& cfg) {
  auto proto = make_env(cfg.env_id);
  Dataset demos = generate_demos(*proto, cfg.demos, cfg.seed * 1000);
  const EnvSpec& spec = proto->spec();

  std::string fp = fingerprint({{"env", cfg.env_id},
                                {"demos", std::to_string(cfg.demos)},
                                {"epochs", std::to_string(cfg.epochs)},
                                {"lr0", std::to_string(cfg.lr0)},
                                {"chunk_k", std::to_string(cfg.chunk_k)},
                                {"gamma", std::to_string(cfg.gamma)},
                                {"aggregation", cfg.aggregation ? "1" : "0"},
                                {"reset", std::to_string(cfg.reset_interval)},
                                {"seed", std::to_string(cfg.seed)}});

  RolloutConfig deploy;
  deploy.aggregation.enabled = cfg.aggregation;
  deploy.aggregation.gamma = cfg.gamma;

  Report report;
  auto add_row = [&](const std::string& method, const Policy& policy,
                     const RolloutConfig& rc) {
    RateResult r =
        success_rate(policy, cfg.env_id, cfg.eval_episodes, cfg.seed * 5000 + 1, rc, cfg.workers);
    report.rows.push_back(
        {method, cfg.env_id, r.rate, r.ci.lo, r.ci.hi, r.episodes, r.base_seed, fp});
  };

  TrainConfig tc;
  tc.epochs = cfg.epochs;
  tc.lr0 = cfg.lr0;
  tc.seed = cfg.seed;

  {
    Policy full = Policy::init(desk_preset(spec.obs_dim, spec.action_dim, cfg.chunk_k),
                               cfg.seed * 97 + 1);
    full.cfg.env_id = cfg.env_id;
    train(full, demos, tc);
    add_row("full-history", full, deploy);
  }
  {
    Policy short_hist = Policy::init(desk_preset(spec.obs_dim, spec.action_dim, cfg.chunk_k),
                                     cfg.seed * 97 + 1);
    short_hist.cfg.env_id = cfg.env_id;
    TrainConfig tc10 = tc;
    tc10.history_reset_interval = cfg.reset_interval;
    train(short_hist, demos, tc10);
    RolloutConfig deploy10 = deploy;
    deploy10.history_reset_interval = cfg.reset_interval;
    add_row("reset-" + std::to_string(cfg.reset_interval), short_hist, deploy10);
  }
  {
    PolicyConfig mc = desk_preset(spec.obs_dim, spec.action_dim, cfg.chunk_k);
    mc.backbone = Backbone::kMlp;
    mc.env_id = cfg.env_id;
    Policy markov = Policy::init(mc, cfg.seed * 97 + 1);
    TrainConfig tcm = tc;
    tcm.history_reset_interval = 1;
    train(markov, demos, tcm);
    add_row("markov-mlp", markov, deploy);
  }
  return report;
}

LifelongReport run_lifelong(const LifelongConfig& cfg) {
  std::vector<std::string> tasks = cfg.tasks.empty() ? lifelong_task_family() : cfg.tasks;
  if (tasks.size() < 2) throw InferError("lifelong protocol needs at least 2 tasks");
  int n = static_cast<int>(tasks.size());

  auto first = make_env(tasks[0]);
  int obs_dim = first->spec().obs_dim;
  int action_dim = first->spec().action_dim;
  for (const auto& t : tasks) {
    auto env = make_env(t);
    if (env->spec().obs_dim != obs_dim || env->spec().action_dim != action_dim)
      throw InferError("lifelong task family must share observation/action dims");
  }

  PolicyConfig pc = desk_preset(obs_dim, action_dim, 1);
  pc.d_model = cfg.d_model;
  pc.d_state = cfg.d_state;
  pc.n_layers = cfg.n_layers;

  RolloutConfig deploy;
  deploy.aggregation.enabled = false;

  auto eval_all = [&](const Policy& policy) {
    std::vector<double> row(n);
    for (int j = 0; j < n; ++j)
      row[j] = success_rate(policy, tasks[j], cfg.eval_episodes,
                            cfg.seed * 1000003 + 900000 + j * 1000, deploy, cfg.workers)
                   .rate;
    return row;
  };

  std::vector<Dataset> demo_sets;
  for (int i = 0; i < n; ++i) {
    auto env = make_env(tasks[i]);
    demo_sets.push_back(generate_demos(*env, cfg.demos_per_task, cfg.seed * 10000 + i * 1000));
  }

  LifelongReport out;
  out.regime = cfg.ewc ? "ewc-on" : "ewc-off";
  out.seed = cfg.seed;
  out.tasks = tasks;
  out.matrix.n_tasks = n;
  out.config_fingerprint =
      fingerprint({{"tasks", std::to_string(n)},
                   {"demos", std::to_string(cfg.demos_per_task)},
                   {"epochs", std::to_string(cfg.epochs_per_task)},
                   {"base_epochs", std::to_string(cfg.base_epochs)},
                   {"lr0", std::to_string(cfg.lr0)},
                   {"ewc", cfg.ewc ? "1" : "0"},
                   {"lambda", std::to_string(cfg.ewc_lambda)},
                   {"fisher", std::to_string(cfg.fisher_samples)},
                   {"seed", std::to_string(cfg.seed)}});

  Policy policy = Policy::init(pc, cfg.seed + 100);
  std::vector<FisherInfo> anchors;
  for (int i = 0; i < n; ++i) {
    TrainConfig tc;
    tc.epochs = cfg.epochs_per_task;
    tc.lr0 = cfg.lr0;
    tc.seed = cfg.seed * 77 + i;
    if (cfg.ewc) {
      tc.ewc_anchors = anchors;
      tc.ewc_lambda = cfg.ewc_lambda;
    }
    train(policy, demo_sets[i], tc);
    if (cfg.ewc)
      anchors.push_back(
          fisher_estimate(policy, demo_sets[i], cfg.fisher_samples, cfg.seed * 31 + i));
    out.matrix.rows.push_back(eval_all(policy));
  }

  out.has_base = cfg.compute_base;
  if (cfg.compute_base) {
    for (int j = 0; j < n; ++j) {
      Policy scratch = Policy::init(pc, cfg.seed + 100);  // same init as the sequential run
      TrainConfig tc;
      tc.epochs = cfg.base_epochs;
      tc.lr0 = cfg.lr0;
      tc.seed = cfg.seed * 77 + j;
      train(scratch, demo_sets[j], tc);
      out.matrix.base.push_back(
          success_rate(scratch, tasks[j], cfg.eval_episodes,
                       cfg.seed * 1000003 + 900000 + j * 1000, deploy, cfg.workers)
              .rate);
    }
    out.fwt_value = fwt(out.matrix);
  } else {
    out.matrix.base.assign(n, 0.0);
  }
  out.matrix.validate();
  out.nbt_value = nbt(out.matrix);
  out.auc_value = auc(out.matrix);
  return out;
}

}  // namespace mtil
