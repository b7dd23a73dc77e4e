#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "mtil/numerics.hpp"
#include "mtil/ssm.hpp"

namespace mtil {

enum class HeadKind { kLinearChunk, kGmm };
enum class Backbone { kMamba, kMlp };

struct PolicyConfig {
  int obs_dim = 0;
  int action_dim = 0;
  int chunk_k = 1;
  int d_model = 64;
  int d_state = 16;
  int n_layers = 4;
  HeadKind head = HeadKind::kLinearChunk;
  int gmm_components = 5;
  Backbone backbone = Backbone::kMamba;
  int mlp_hidden = 128;
  std::string env_id;  // environment the policy was trained for, if any

  void validate() const;
  int feature_dim() const { return backbone == Backbone::kMamba ? d_model : mlp_hidden; }
};

/// The "desk" preset mirrors the smallest benchmark column: d_model 64,
/// d_state 16, 4 layers. "sim" (d_model 2048, d_state 512) is expressible but
/// not exercised by tests.
PolicyConfig desk_preset(int obs_dim, int action_dim, int chunk_k);
PolicyConfig sim_preset(int obs_dim, int action_dim, int chunk_k);

/// Ordered collection of named parameter arrays. Insertion order defines the
/// flattened layout used by the optimizer and the Fisher estimates.
struct ParamStore {
  std::vector<std::pair<std::string, DiffArray>> entries;

  void add(const std::string& name, DiffArray value);
  DiffArray& at(const std::string& name);
  const DiffArray& at(const std::string& name) const;
  bool has(const std::string& name) const;
  int total_size() const;
  std::vector<double> flatten() const;
  void unflatten(const std::vector<double>& flat);
};

struct Policy {
  PolicyConfig cfg;
  ParamStore params;

  static Policy init(PolicyConfig cfg, uint64_t seed);
};

/// Per-rollout recurrent state: one HiddenState per layer, all sharing the
/// same step index. The MLP backbone carries no layers.
struct PolicyState {
  std::vector<HiddenState> layers;
  int step_index = 0;

  bool is_zero() const;
};

PolicyState reset_state(const PolicyConfig& cfg);

/// Diagonal-covariance Gaussian mixture over actions.
struct Gmm {
  DiffArray weights;   // {M}, simplex (softmax-produced)
  DiffArray means;     // {M, A}
  DiffArray log_stds;  // {M, A}
};

struct PolicyOutput {
  DiffArray chunk;  // {K, A}; for the GMM head this is empty
  std::optional<Gmm> gmm;
};

/// View of the policy parameters bound to one tape, either as tracked leaves
/// (training) or as plain constants (evaluation; the tape does not grow).
class BoundPolicy {
 public:
  BoundPolicy(Tape& tape, const Policy& policy, bool track);
  /// Binds every parameter as a slice of one flat array (store order), so a
  /// whole-policy gradient can be checked against finite differences.
  BoundPolicy(Tape& tape, const Policy& policy, const DiffArray& theta);

  DiffArray encode(const DiffArray& obs) const;
  std::pair<PolicyOutput, PolicyState> step(const DiffArray& x, const PolicyState& s) const;

  /// Gradient per named parameter after tape.backward(), flattened in store
  /// order. Requires track = true.
  std::vector<double> flat_grad() const;
  DiffArray leaf(const std::string& name) const;

  const PolicyConfig& cfg() const { return *cfg_; }
  Tape& tape() const { return *tape_; }
  const std::vector<std::pair<std::string, DiffArray>>& leaves() const { return bound_; }

 private:
  const DiffArray& p(const std::string& name) const;
  void wire_blocks();

  Tape* tape_;
  const PolicyConfig* cfg_;
  bool track_;
  std::vector<std::pair<std::string, DiffArray>> bound_;
  std::vector<MambaBlockParams> blocks_;
};

/// Negative log-likelihood of one action under the mixture, computed in log
/// space (log-sum-exp over components).
DiffArray gmm_nll(Tape& tape, const Gmm& gmm, const DiffArray& action);

std::vector<double> gmm_sample(const Gmm& gmm, std::mt19937_64& rng);
/// Mean of the highest-weight component (deterministic evaluation decode).
std::vector<double> gmm_mode(const Gmm& gmm);

/// Checkpoint container: magic "MTILCKPT", version, JSON config record, then
/// named parameter arrays as 64-bit little-endian doubles. Round-trips are
/// bit-exact. Exact layout is documented in docs/formats.md.
void save_checkpoint(const Policy& policy, const std::string& path);
Policy load_checkpoint(const std::string& path);

std::string config_to_json(const PolicyConfig& cfg);
PolicyConfig config_from_json(const std::string& json_text);

}  // namespace mtil
