#include "mtil/policy.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include <json.hpp>

#include "mtil/io.hpp"

namespace mtil {

namespace {

constexpr double kLogStdLo = -5.0;
constexpr double kLogStdHi = 2.0;
constexpr char kCheckpointMagic[8] = {'M', 'T', 'I', 'L', 'C', 'K', 'P', 'T'};
constexpr uint32_t kCheckpointVersion = 1;

DiffArray uniform_init(std::mt19937_64& rng, Shape shape, int fan_in) {
  double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> u(-bound, bound);
  DiffArray a = DiffArray::zeros(std::move(shape));
  for (auto& v : a.data) v = u(rng);
  return a;
}

std::string layer_key(int i, const char* field) {
  return "layers." + std::to_string(i) + "." + field;
}

}  // namespace

void PolicyConfig::validate() const {
  if (obs_dim < 1 || action_dim < 1) throw TapeError("policy config: dims must be positive");
  if (chunk_k < 1) throw TapeError("policy config: chunk_k must be >= 1");
  if (d_model < 1 || d_state < 1) throw TapeError("policy config: model dims must be positive");
  if (backbone == Backbone::kMamba && n_layers < 1)
    throw TapeError("policy config: n_layers must be >= 1");
  if (head == HeadKind::kGmm && chunk_k != 1)
    throw TapeError("policy config: the gmm head requires chunk_k = 1");
  if (head == HeadKind::kGmm && gmm_components < 1)
    throw TapeError("policy config: gmm_components must be >= 1");
  if (backbone == Backbone::kMlp && mlp_hidden < 1)
    throw TapeError("policy config: mlp_hidden must be >= 1");
}

PolicyConfig desk_preset(int obs_dim, int action_dim, int chunk_k) {
  PolicyConfig c;
  c.obs_dim = obs_dim;
  c.action_dim = action_dim;
  c.chunk_k = chunk_k;
  c.d_model = 64;
  c.d_state = 16;
  c.n_layers = 4;
  return c;
}

PolicyConfig sim_preset(int obs_dim, int action_dim, int chunk_k) {
  PolicyConfig c;
  c.obs_dim = obs_dim;
  c.action_dim = action_dim;
  c.chunk_k = chunk_k;
  c.d_model = 2048;
  c.d_state = 512;
  c.n_layers = 4;
  return c;
}

void ParamStore::add(const std::string& name, DiffArray value) {
  if (has(name)) throw TapeError("duplicate parameter name " + name);
  entries.emplace_back(name, std::move(value));
}

DiffArray& ParamStore::at(const std::string& name) {
  for (auto& [k, v] : entries)
    if (k == name) return v;
  throw TapeError("unknown parameter " + name);
}

const DiffArray& ParamStore::at(const std::string& name) const {
  for (const auto& [k, v] : entries)
    if (k == name) return v;
  throw TapeError("unknown parameter " + name);
}

bool ParamStore::has(const std::string& name) const {
  for (const auto& [k, v] : entries)
    if (k == name) return true;
  return false;
}

int ParamStore::total_size() const {
  int n = 0;
  for (const auto& [k, v] : entries) n += v.size();
  return n;
}

std::vector<double> ParamStore::flatten() const {
  std::vector<double> flat;
  flat.reserve(total_size());
  for (const auto& [k, v] : entries) flat.insert(flat.end(), v.data.begin(), v.data.end());
  return flat;
}

void ParamStore::unflatten(const std::vector<double>& flat) {
  if (static_cast<int>(flat.size()) != total_size())
    throw TapeError("unflatten: size mismatch");
  size_t off = 0;
  for (auto& [k, v] : entries) {
    std::copy(flat.begin() + off, flat.begin() + off + v.data.size(), v.data.begin());
    off += v.data.size();
  }
}

Policy Policy::init(PolicyConfig cfg, uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  Policy p;
  p.cfg = cfg;

  p.params.add("encoder.w", uniform_init(rng, {cfg.d_model, cfg.obs_dim}, cfg.obs_dim));
  p.params.add("encoder.b", DiffArray::zeros({cfg.d_model}));

  if (cfg.backbone == Backbone::kMamba) {
    for (int i = 0; i < cfg.n_layers; ++i) {
      MambaBlockParams b = init_mamba_block(rng, cfg.d_model, cfg.d_state);
      p.params.add(layer_key(i, "norm_gain"), std::move(b.norm_gain));
      p.params.add(layer_key(i, "w_in"), std::move(b.w_in));
      p.params.add(layer_key(i, "w_gate"), std::move(b.w_gate));
      p.params.add(layer_key(i, "w_out"), std::move(b.w_out));
      p.params.add(layer_key(i, "a_log"), std::move(b.ssm.a_log));
      p.params.add(layer_key(i, "w_delta"), std::move(b.ssm.w_delta));
      p.params.add(layer_key(i, "b_delta"), std::move(b.ssm.b_delta));
      p.params.add(layer_key(i, "w_b"), std::move(b.ssm.w_b));
      p.params.add(layer_key(i, "w_c"), std::move(b.ssm.w_c));
      p.params.add(layer_key(i, "skip"), std::move(b.ssm.skip));
    }
  } else {
    int h = cfg.mlp_hidden;
    p.params.add("mlp.w1", uniform_init(rng, {h, cfg.d_model}, cfg.d_model));
    p.params.add("mlp.b1", DiffArray::zeros({h}));
    p.params.add("mlp.w2", uniform_init(rng, {h, h}, h));
    p.params.add("mlp.b2", DiffArray::zeros({h}));
  }

  int feat = cfg.feature_dim();
  if (cfg.head == HeadKind::kLinearChunk) {
    p.params.add("head.w", uniform_init(rng, {cfg.chunk_k * cfg.action_dim, feat}, feat));
    p.params.add("head.b", DiffArray::zeros({cfg.chunk_k * cfg.action_dim}));
  } else {
    int m = cfg.gmm_components;
    p.params.add("head.w", uniform_init(rng, {m + m * cfg.action_dim, feat}, feat));
    p.params.add("head.b", DiffArray::zeros({m + m * cfg.action_dim}));
    p.params.add("head.log_std", DiffArray::zeros({m, cfg.action_dim}));
  }
  return p;
}

bool PolicyState::is_zero() const {
  for (const auto& l : layers)
    if (!l.is_zero()) return false;
  return true;
}

PolicyState reset_state(const PolicyConfig& cfg) {
  PolicyState s;
  if (cfg.backbone == Backbone::kMamba)
    for (int i = 0; i < cfg.n_layers; ++i)
      s.layers.push_back(HiddenState::reset(cfg.d_model, cfg.d_state));
  s.step_index = 0;
  return s;
}

BoundPolicy::BoundPolicy(Tape& tape, const Policy& policy, bool track)
    : tape_(&tape), cfg_(&policy.cfg), track_(track) {
  bound_.reserve(policy.params.entries.size());
  for (const auto& [name, value] : policy.params.entries)
    bound_.emplace_back(name, track ? tape.leaf(value) : value);
  wire_blocks();
}

BoundPolicy::BoundPolicy(Tape& tape, const Policy& policy, const DiffArray& theta)
    : tape_(&tape), cfg_(&policy.cfg), track_(theta.node >= 0) {
  if (theta.shape != Shape{policy.params.total_size()})
    throw TapeError("theta has " + shape_str(theta.shape) + " entries, policy expects " +
                    std::to_string(policy.params.total_size()));
  int off = 0;
  for (const auto& [name, value] : policy.params.entries) {
    DiffArray piece = tape.reshape(tape.slice(theta, off, value.size()), value.shape);
    off += value.size();
    bound_.emplace_back(name, std::move(piece));
  }
  wire_blocks();
}

void BoundPolicy::wire_blocks() {
  if (cfg_->backbone == Backbone::kMamba) {
    for (int i = 0; i < cfg_->n_layers; ++i) {
      MambaBlockParams b;
      b.norm_gain = p(layer_key(i, "norm_gain"));
      b.w_in = p(layer_key(i, "w_in"));
      b.w_gate = p(layer_key(i, "w_gate"));
      b.w_out = p(layer_key(i, "w_out"));
      b.ssm.a_log = p(layer_key(i, "a_log"));
      b.ssm.w_delta = p(layer_key(i, "w_delta"));
      b.ssm.b_delta = p(layer_key(i, "b_delta"));
      b.ssm.w_b = p(layer_key(i, "w_b"));
      b.ssm.w_c = p(layer_key(i, "w_c"));
      b.ssm.skip = p(layer_key(i, "skip"));
      blocks_.push_back(std::move(b));
    }
  }
}

const DiffArray& BoundPolicy::p(const std::string& name) const {
  for (const auto& [k, v] : bound_)
    if (k == name) return v;
  throw TapeError("unbound parameter " + name);
}

DiffArray BoundPolicy::leaf(const std::string& name) const { return p(name); }

DiffArray BoundPolicy::encode(const DiffArray& obs) const {
  if (obs.shape != Shape{cfg_->obs_dim})
    throw TapeError("encode: observation shape " + shape_str(obs.shape) + " expected [" +
                    std::to_string(cfg_->obs_dim) + "]");
  return tape_->add(tape_->matmul(p("encoder.w"), obs), p("encoder.b"));
}

std::pair<PolicyOutput, PolicyState> BoundPolicy::step(const DiffArray& x,
                                                       const PolicyState& s) const {
  Tape& t = *tape_;
  PolicyState next;
  next.step_index = s.step_index + 1;

  DiffArray feat = x;
  if (cfg_->backbone == Backbone::kMamba) {
    if (static_cast<int>(s.layers.size()) != cfg_->n_layers)
      throw TapeError("policy_step: state has wrong layer count");
    next.layers.reserve(cfg_->n_layers);
    for (int i = 0; i < cfg_->n_layers; ++i) {
      auto [out, h] = mamba_block(t, feat, s.layers[i], blocks_[i]);
      feat = std::move(out);
      HiddenState hs = std::move(h);
      hs.step_index = next.step_index;
      next.layers.push_back(std::move(hs));
    }
  } else {
    feat = t.silu(t.add(t.matmul(p("mlp.w1"), feat), p("mlp.b1")));
    feat = t.silu(t.add(t.matmul(p("mlp.w2"), feat), p("mlp.b2")));
  }

  PolicyOutput out;
  DiffArray u = t.add(t.matmul(p("head.w"), feat), p("head.b"));
  if (cfg_->head == HeadKind::kLinearChunk) {
    out.chunk = t.reshape(u, {cfg_->chunk_k, cfg_->action_dim});
    if (!out.chunk.all_finite()) throw TapeError("policy_step: non-finite chunk");
  } else {
    int m = cfg_->gmm_components, a = cfg_->action_dim;
    Gmm g;
    g.weights = t.softmax(t.slice(u, 0, m));
    g.means = t.reshape(t.slice(u, m, m * a), {m, a});
    g.log_stds = t.clamp(p("head.log_std"), kLogStdLo, kLogStdHi);
    out.gmm = std::move(g);
  }
  return {std::move(out), std::move(next)};
}

std::vector<double> BoundPolicy::flat_grad() const {
  if (!track_) throw TapeError("flat_grad: policy was bound without tracking");
  std::vector<double> flat;
  for (const auto& [name, leaf] : bound_) {
    DiffArray g = tape_->grad(leaf);
    flat.insert(flat.end(), g.data.begin(), g.data.end());
  }
  return flat;
}

DiffArray gmm_nll(Tape& t, const Gmm& gmm, const DiffArray& action) {
  int m = gmm.means.shape[0];
  int a = gmm.means.shape[1];
  if (action.shape != Shape{a})
    throw TapeError("gmm_nll: action shape " + shape_str(action.shape) + " expected [" +
                    std::to_string(a) + "]");

  Gmm g = gmm;
  double min_std = 1e300;
  for (double ls : g.log_stds.data) min_std = std::min(min_std, std::exp(ls));
  if (min_std < 1e-8) {
    std::fprintf(stderr, "gmm_nll: clamping degenerate stds below 1e-8\n");
    g.log_stds = t.clamp(g.log_stds, std::log(1e-8), 1e300);
  }

  // tile the action across components
  DiffArray tiled = DiffArray::zeros({m, a});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < a; ++j) tiled.data[static_cast<size_t>(i) * a + j] = action.data[j];

  DiffArray inv_std = t.exp(t.neg(g.log_stds));                    // {M,A}
  DiffArray z = t.mul(t.sub(g.means, tiled), inv_std);             // {M,A}
  // log N = -z^2/2 - log_std - log(2*pi)/2, summed over action dims
  DiffArray log_n = t.sub(t.scale(t.square(z), -0.5),
                          t.add(g.log_stds, DiffArray::full({m, a}, 0.5 * std::log(2.0 * M_PI))));
  DiffArray per_comp = t.matmul(log_n, DiffArray::full({a}, 1.0));  // {M}
  // floor keeps log finite for explicitly-zero weights; softmax outputs are unaffected
  DiffArray w = t.clamp(g.weights, 1e-300, 1.0);
  DiffArray scores = t.add(t.log(w), per_comp);  // {M}

  double mx = scores.data[0];
  for (double v : scores.data) mx = std::max(mx, v);
  DiffArray shifted = t.exp(t.add(scores, DiffArray::full({m}, -mx)));
  DiffArray lse = t.add(t.log(t.sum(shifted)), DiffArray::scalar(mx));
  return t.neg(lse);
}

std::vector<double> gmm_sample(const Gmm& gmm, std::mt19937_64& rng) {
  int m = gmm.means.shape[0];
  int a = gmm.means.shape[1];
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double r = u(rng);
  int comp = m - 1;
  double cum = 0.0;
  for (int i = 0; i < m; ++i) {
    cum += gmm.weights.data[i];
    if (r < cum) {
      comp = i;
      break;
    }
  }
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> out(a);
  for (int j = 0; j < a; ++j) {
    double mu = gmm.means.data[static_cast<size_t>(comp) * a + j];
    double sd = std::exp(gmm.log_stds.data[static_cast<size_t>(comp) * a + j]);
    out[j] = mu + sd * n(rng);
  }
  return out;
}

std::vector<double> gmm_mode(const Gmm& gmm) {
  int m = gmm.means.shape[0];
  int a = gmm.means.shape[1];
  int best = 0;
  for (int i = 1; i < m; ++i)
    if (gmm.weights.data[i] > gmm.weights.data[best]) best = i;
  return std::vector<double>(gmm.means.data.begin() + static_cast<size_t>(best) * a,
                             gmm.means.data.begin() + static_cast<size_t>(best + 1) * a);
}

std::string config_to_json(const PolicyConfig& cfg) {
  nlohmann::json j;
  j["obs_dim"] = cfg.obs_dim;
  j["action_dim"] = cfg.action_dim;
  j["chunk_k"] = cfg.chunk_k;
  j["d_model"] = cfg.d_model;
  j["d_state"] = cfg.d_state;
  j["n_layers"] = cfg.n_layers;
  j["head"] = cfg.head == HeadKind::kGmm ? "gmm" : "linear-chunk";
  j["gmm_components"] = cfg.gmm_components;
  j["backbone"] = cfg.backbone == Backbone::kMlp ? "mlp" : "mamba";
  j["mlp_hidden"] = cfg.mlp_hidden;
  j["env_id"] = cfg.env_id;
  return j.dump();
}

PolicyConfig config_from_json(const std::string& json_text) {
  nlohmann::json j = nlohmann::json::parse(json_text);
  PolicyConfig cfg;
  cfg.obs_dim = j.at("obs_dim").get<int>();
  cfg.action_dim = j.at("action_dim").get<int>();
  cfg.chunk_k = j.at("chunk_k").get<int>();
  cfg.d_model = j.at("d_model").get<int>();
  cfg.d_state = j.at("d_state").get<int>();
  cfg.n_layers = j.at("n_layers").get<int>();
  cfg.head = j.at("head").get<std::string>() == "gmm" ? HeadKind::kGmm : HeadKind::kLinearChunk;
  cfg.gmm_components = j.at("gmm_components").get<int>();
  cfg.backbone = j.at("backbone").get<std::string>() == "mlp" ? Backbone::kMlp : Backbone::kMamba;
  cfg.mlp_hidden = j.at("mlp_hidden").get<int>();
  cfg.env_id = j.at("env_id").get<std::string>();
  cfg.validate();
  return cfg;
}

void save_checkpoint(const Policy& policy, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  write_bytes(os, kCheckpointMagic, 8);
  write_u32(os, kCheckpointVersion);
  write_string(os, config_to_json(policy.cfg));
  write_u64(os, policy.params.entries.size());
  for (const auto& [name, value] : policy.params.entries) {
    write_string(os, name);
    write_u32(os, static_cast<uint32_t>(value.shape.size()));
    for (int d : value.shape) write_u64(os, static_cast<uint64_t>(d));
    for (double v : value.data) write_f64(os, v);
  }
  if (!os) throw FormatError("write error on " + path);
}

Policy load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  char magic[8];
  read_bytes(is, magic, 8, "checkpoint magic");
  if (!std::equal(magic, magic + 8, kCheckpointMagic))
    throw FormatError(path + " is not a checkpoint file (bad magic)");
  uint32_t version = read_u32(is, "checkpoint version");
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version));

  Policy p;
  p.cfg = config_from_json(read_string(is, "config record"));
  uint64_t n_arrays = read_u64(is, "array count");
  for (uint64_t i = 0; i < n_arrays; ++i) {
    std::string name = read_string(is, "array name");
    uint32_t ndim = read_u32(is, "array rank");
    if (ndim > 8) throw FormatError("implausible array rank");
    Shape shape(ndim);
    for (auto& d : shape) d = static_cast<int>(read_u64(is, "array dim"));
    DiffArray a = DiffArray::zeros(shape);
    for (auto& v : a.data) v = read_f64(is, "array data");
    p.params.add(name, std::move(a));
  }
  return p;
}

}  // namespace mtil
