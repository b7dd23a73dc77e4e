#include <cstdio>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mtil/data.hpp"
#include "mtil/envs.hpp"
#include "mtil/evalm.hpp"
#include "mtil/infer.hpp"
#include "mtil/policy.hpp"
#include "mtil/train.hpp"

namespace {

using namespace mtil;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;   // unknown flags / bad invocation
constexpr int kExitConfig = 3;  // invalid configuration or inputs

struct ConfigException : std::runtime_error {
  explicit ConfigException(const std::string& msg) : std::runtime_error(msg) {}
};

std::string dataset_env_id(const Dataset& ds) {
  if (ds.trajectories.empty()) return "";
  const std::string& id = ds.trajectories[0].task_id;
  for (const auto& t : ds.trajectories)
    if (t.task_id != id) return "";
  return id;
}

std::string trim(const std::string& s) {
  auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

/// Applies a key=value config file to a parsed subcommand. Values never
/// override options given explicitly on the command line; unknown keys are
/// invalid configuration.
void apply_config_file(CLI::App* sub, const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigException("cannot open config file " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::string text = trim(line);
    if (text.empty() || text[0] == '#') continue;
    auto eq = text.find('=');
    if (eq == std::string::npos)
      throw ConfigException(path + ":" + std::to_string(lineno) + ": expected key=value");
    std::string key = trim(text.substr(0, eq));
    std::string value = trim(text.substr(eq + 1));
    CLI::Option* opt = sub->get_option_no_throw("--" + key);
    if (opt == nullptr || key == "config")
      throw ConfigException(path + ":" + std::to_string(lineno) + ": unknown config key '" +
                            key + "'");
    if (opt->count() > 0) continue;  // command-line value wins
    try {
      opt->add_result(value);
      opt->run_callback();
    } catch (const CLI::Error& e) {
      throw ConfigException(path + ":" + std::to_string(lineno) + ": bad value for '" + key +
                            "': " + e.what());
    }
  }
}

std::vector<uint64_t> parse_seed_list(const std::string& text) {
  std::vector<uint64_t> seeds;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    seeds.push_back(std::stoull(item));
  }
  if (seeds.empty()) throw ConfigException("empty seed list");
  return seeds;
}

int run_gen_data(const std::string& env_id, int n, uint64_t seed, const std::string& out,
                 const std::string& csv_dir) {
  auto env = make_env(env_id);
  Dataset ds = generate_demos(*env, n, seed);
  write_dataset(ds, out);
  if (!csv_dir.empty()) export_csv(ds, csv_dir);
  std::cout << "wrote " << ds.trajectories.size() << " trajectories (" << env_id << ") to "
            << out << "\n";
  return kExitOk;
}

struct TrainCli {
  std::string data;
  std::string out;
  std::string log_path;
  std::string preset = "desk";
  std::string head = "linear";
  std::string backbone = "mamba";
  int chunk_k = -1;
  int gmm_components = 5;
  int epochs = -1;
  double lr0 = -1.0;
  double weight_decay = 1e-4;
  int reset_interval = 0;
  uint64_t seed = 7;
};

int run_train(const TrainCli& a) {
  Dataset ds = read_dataset(a.data);
  if (ds.trajectories.empty()) throw ConfigException("training dataset is empty");
  std::string env_id = dataset_env_id(ds);

  EnvTrainDefaults defaults;
  bool have_defaults = false;
  if (!env_id.empty()) {
    try {
      defaults = env_train_defaults(env_id);
      have_defaults = true;
    } catch (const EnvError&) {
    }
  }
  int chunk_k = a.chunk_k > 0 ? a.chunk_k : (have_defaults ? defaults.chunk_k : 1);
  int epochs = a.epochs >= 0 ? a.epochs : (have_defaults ? defaults.epochs : 40);
  double lr0 = a.lr0 > 0 ? a.lr0 : (have_defaults ? defaults.lr0 : 1e-3);

  PolicyConfig pc;
  if (a.preset == "desk") {
    pc = desk_preset(ds.obs_dim, ds.action_dim, chunk_k);
  } else if (a.preset == "sim") {
    pc = sim_preset(ds.obs_dim, ds.action_dim, chunk_k);
  } else {
    throw ConfigException("unknown preset '" + a.preset + "' (expected desk or sim)");
  }
  if (a.head == "gmm") {
    pc.head = HeadKind::kGmm;
    pc.gmm_components = a.gmm_components;
  } else if (a.head != "linear") {
    throw ConfigException("unknown head '" + a.head + "' (expected linear or gmm)");
  }
  if (a.backbone == "mlp") {
    pc.backbone = Backbone::kMlp;
  } else if (a.backbone != "mamba") {
    throw ConfigException("unknown backbone '" + a.backbone + "' (expected mamba or mlp)");
  }
  pc.env_id = env_id;

  Policy policy = Policy::init(pc, a.seed);
  TrainConfig tc;
  tc.epochs = epochs;
  tc.lr0 = lr0;
  tc.weight_decay = a.weight_decay;
  tc.loss = pc.head == HeadKind::kGmm ? LossKind::kGmmNll : LossKind::kMse;
  if (a.reset_interval > 0) tc.history_reset_interval = a.reset_interval;
  tc.seed = a.seed;
  tc.log_path = a.log_path;

  auto logs = train(policy, ds, tc);
  save_checkpoint(policy, a.out);
  if (!logs.empty())
    std::cout << "trained " << logs.size() << " epochs, final loss " << logs.back().mean_loss
              << "\n";
  std::cout << "checkpoint written to " << a.out << "\n";
  return kExitOk;
}

struct EvalCli {
  std::string ckpt;
  std::string env_id;
  std::string out;
  int episodes = 100;
  uint64_t seed = 5001;
  int aggregation = -1;  // -1 = env default
  double gamma = 0.9;
  int reset_interval = 0;
  bool gmm_sample = false;
  int workers = 0;
};

int run_eval(const EvalCli& a) {
  Policy policy = load_checkpoint(a.ckpt);
  std::string env_id = !a.env_id.empty() ? a.env_id : policy.cfg.env_id;
  if (env_id.empty())
    throw ConfigException("checkpoint has no environment record; pass --env");

  bool agg = false;
  if (a.aggregation >= 0) {
    agg = a.aggregation > 0;
  } else {
    try {
      agg = env_train_defaults(env_id).aggregation;
    } catch (const EnvError&) {
    }
  }

  RolloutConfig rc;
  rc.aggregation.enabled = agg;
  rc.aggregation.gamma = a.gamma;
  if (a.reset_interval > 0) rc.history_reset_interval = a.reset_interval;
  rc.gmm_sample_actions = a.gmm_sample;

  RateResult r = success_rate(policy, env_id, a.episodes, a.seed, rc, a.workers);

  std::string method = policy.cfg.backbone == Backbone::kMlp ? "markov-mlp" : "mamba";
  if (a.reset_interval > 0) method += "+reset-" + std::to_string(a.reset_interval);
  if (agg) method += "+agg";
  std::string fp = fingerprint({{"ckpt", a.ckpt},
                                {"env", env_id},
                                {"episodes", std::to_string(a.episodes)},
                                {"seed", std::to_string(a.seed)},
                                {"agg", agg ? "1" : "0"},
                                {"gamma", std::to_string(a.gamma)},
                                {"reset", std::to_string(a.reset_interval)}});

  Report report;
  report.rows.push_back(
      {method, env_id, r.rate, r.ci.lo, r.ci.hi, r.episodes, r.base_seed, fp});
  std::printf("success rate %.3f [%.3f, %.3f] over %d episodes (base seed %llu)\n", r.rate,
              r.ci.lo, r.ci.hi, r.episodes, static_cast<unsigned long long>(r.base_seed));
  if (!a.out.empty()) {
    write_report(report, a.out);
    std::cout << "report written to " << a.out << "\n";
  }
  return kExitOk;
}

int run_ablate(const AblateConfig& cfg, const std::string& out) {
  Report report = ablate(cfg);
  std::cout << render_text(report);
  if (!out.empty()) {
    write_report(report, out);
    std::cout << "report written to " << out << "\n";
  }
  return kExitOk;
}

struct LifelongCli {
  std::string tasks;        // comma-separated ids; empty = default family
  std::string ewc = "both";  // on|off|both
  std::string seeds = "1,2,3";
  std::string out;
  LifelongConfig base;
};

int run_lifelong_cmd(const LifelongCli& a) {
  std::vector<std::string> task_list;
  if (!a.tasks.empty()) {
    std::stringstream ss(a.tasks);
    std::string item;
    while (std::getline(ss, item, ','))
      if (!item.empty()) task_list.push_back(item);
  }
  std::vector<bool> regimes;
  if (a.ewc == "on") {
    regimes = {true};
  } else if (a.ewc == "off") {
    regimes = {false};
  } else if (a.ewc == "both") {
    regimes = {false, true};
  } else {
    throw ConfigException("--ewc expects on, off or both");
  }

  Report report;
  for (uint64_t seed : parse_seed_list(a.seeds)) {
    for (bool ewc_on : regimes) {
      LifelongConfig cfg = a.base;
      cfg.tasks = task_list;
      cfg.seed = seed;
      cfg.ewc = ewc_on;
      report.lifelong.push_back(run_lifelong(cfg));
    }
  }
  std::cout << render_text(report);
  if (!a.out.empty()) {
    write_report(report, a.out);
    std::cout << "report written to " << a.out << "\n";
  }
  return kExitOk;
}

int run_report(const std::string& in, const std::string& csv, bool text) {
  Report report = read_report(in);
  if (!csv.empty()) {
    std::ofstream os(csv);
    if (!os) throw FormatError("cannot open " + csv + " for writing");
    os << render_csv(report);
    std::cout << "csv written to " << csv << "\n";
  }
  if (text || csv.empty()) std::cout << render_text(report);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"selective state-space imitation learning on toy POMDP tasks"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate expert demonstrations");
  std::string gen_env = "two-stage-reach", gen_out, gen_csv;
  int gen_n = 100;
  uint64_t gen_seed = 7;
  gen->add_option("--env", gen_env, "environment id");
  gen->add_option("--n", gen_n, "number of demonstrations")->check(CLI::PositiveNumber);
  gen->add_option("--seed", gen_seed, "base seed");
  gen->add_option("--out", gen_out, "output dataset path")->required();
  gen->add_option("--csv", gen_csv, "also export one CSV per trajectory into this directory");

  // train
  auto* tr = app.add_subcommand("train", "train a policy on a demonstration dataset");
  TrainCli tcli;
  tr->add_option("--data", tcli.data, "dataset path")->required();
  tr->add_option("--out", tcli.out, "checkpoint output path")->required();
  tr->add_option("--log", tcli.log_path, "per-epoch CSV log path");
  tr->add_option("--preset", tcli.preset, "model preset: desk or sim");
  tr->add_option("--K", tcli.chunk_k, "action chunk size");
  tr->add_option("--head", tcli.head, "output head: linear or gmm");
  tr->add_option("--gmm-components", tcli.gmm_components, "mixture components for the gmm head");
  tr->add_option("--backbone", tcli.backbone, "backbone: mamba or mlp");
  tr->add_option("--epochs", tcli.epochs, "training epochs");
  tr->add_option("--lr0", tcli.lr0, "initial learning rate (cosine decay)");
  tr->add_option("--weight-decay", tcli.weight_decay, "decoupled weight decay");
  tr->add_option("--reset-interval", tcli.reset_interval,
                 "zero the hidden state every r steps (history ablation)");
  tr->add_option("--seed", tcli.seed, "training seed");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint with seeded rollouts");
  EvalCli ecli;
  ev->add_option("--ckpt", ecli.ckpt, "checkpoint path")->required();
  ev->add_option("--env", ecli.env_id, "environment id (default: from the checkpoint)");
  ev->add_option("--episodes", ecli.episodes, "episode count")->check(CLI::PositiveNumber);
  ev->add_option("--seed", ecli.seed, "base seed");
  ev->add_flag("--aggregation,!--no-aggregation", ecli.aggregation,
               "temporal aggregation (default: environment preset)");
  ev->add_option("--gamma", ecli.gamma, "aggregation decay");
  ev->add_option("--reset-interval", ecli.reset_interval, "deploy with periodic state resets");
  ev->add_flag("--gmm-sample", ecli.gmm_sample, "sample gmm actions instead of the mode");
  ev->add_option("--workers", ecli.workers, "episode worker pool size");
  ev->add_option("--out", ecli.out, "write the report JSON here");

  // ablate
  auto* ab = app.add_subcommand("ablate", "full vs short-history vs markov baseline");
  AblateConfig acfg;
  std::string ab_out;
  ab->add_option("--env", acfg.env_id, "environment id");
  ab->add_option("--demos", acfg.demos, "demonstration count");
  ab->add_option("--epochs", acfg.epochs, "training epochs per variant");
  ab->add_option("--lr0", acfg.lr0, "initial learning rate");
  ab->add_option("--K", acfg.chunk_k, "action chunk size");
  ab->add_flag("--aggregation,!--no-aggregation", acfg.aggregation, "temporal aggregation");
  ab->add_option("--gamma", acfg.gamma, "aggregation decay");
  ab->add_option("--reset-interval", acfg.reset_interval, "short-history reset interval");
  ab->add_option("--episodes", acfg.eval_episodes, "evaluation episodes per variant");
  ab->add_option("--seed", acfg.seed, "experiment seed");
  ab->add_option("--workers", acfg.workers, "episode worker pool size");
  ab->add_option("--out", ab_out, "write the report JSON here");

  // lifelong
  auto* ll = app.add_subcommand("lifelong", "sequential task protocol with EWC");
  LifelongCli lcli;
  ll->add_option("--tasks", lcli.tasks, "comma-separated task ids (default: cue family)");
  ll->add_option("--ewc", lcli.ewc, "on, off or both");
  ll->add_option("--lambda", lcli.base.ewc_lambda, "EWC penalty weight");
  ll->add_option("--demos", lcli.base.demos_per_task, "demonstrations per task");
  ll->add_option("--epochs", lcli.base.epochs_per_task, "epochs per task");
  ll->add_option("--base-epochs", lcli.base.base_epochs, "scratch-baseline epochs");
  ll->add_option("--fisher-samples", lcli.base.fisher_samples, "Fisher estimate sample count");
  ll->add_option("--episodes", lcli.base.eval_episodes, "evaluation episodes per cell");
  ll->add_option("--lr0", lcli.base.lr0, "initial learning rate");
  ll->add_option("--seeds", lcli.seeds, "comma-separated seeds for paired runs");
  ll->add_option("--d-model", lcli.base.d_model, "model width");
  ll->add_option("--d-state", lcli.base.d_state, "state size per channel");
  ll->add_option("--layers", lcli.base.n_layers, "block count");
  ll->add_option("--workers", lcli.base.workers, "episode worker pool size");
  ll->add_option("--out", lcli.out, "write the report JSON here");

  // report
  auto* rp = app.add_subcommand("report", "render a report as text and CSV");
  std::string rp_in, rp_csv;
  bool rp_text = false;
  rp->add_option("--in", rp_in, "report JSON path")->required();
  rp->add_option("--csv", rp_csv, "write CSV here");
  rp->add_flag("--text", rp_text, "also print the text table");

  // every subcommand accepts a plain key=value config file; command-line
  // flags override file values
  std::map<CLI::App*, std::string> config_paths;
  for (CLI::App* sub : {gen, tr, ev, ab, ll, rp}) {
    auto& slot = config_paths[sub];
    sub->add_option("--config", slot, "key=value configuration file");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ExtrasError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const CLI::RequiredError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const CLI::ParseError& e) {
    // bad values, malformed config files, unreadable options
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }

  try {
    for (auto& [sub, path] : config_paths)
      if (sub->parsed() && !path.empty()) apply_config_file(sub, path);

    if (gen->parsed()) return run_gen_data(gen_env, gen_n, gen_seed, gen_out, gen_csv);
    if (tr->parsed()) return run_train(tcli);
    if (ev->parsed()) return run_eval(ecli);
    if (ab->parsed()) return run_ablate(acfg, ab_out);
    if (ll->parsed()) return run_lifelong_cmd(lcli);
    if (rp->parsed()) return run_report(rp_in, rp_csv, rp_text);
  } catch (const ConfigException& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const EnvError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const InferError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const TapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kExitOk;
}
