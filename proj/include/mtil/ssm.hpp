#pragma once

#include <random>
#include <utility>
#include <vector>

#include "mtil/numerics.hpp"

namespace mtil {

/// Parameters of one selective state-space layer over D channels with an
/// N-dimensional state per channel. The continuous per-channel decay a is
/// stored as a_log = log(-a), so a = -exp(a_log) is strictly negative and the
/// discretized gain exp(delta * a) stays in (0, 1) for every delta > 0.
struct SsmLayerParams {
  DiffArray a_log;    // {D}
  DiffArray w_delta;  // {D, D}
  DiffArray b_delta;  // {D}
  DiffArray w_b;      // {N, D}
  DiffArray w_c;      // {N, D}
  DiffArray skip;     // {D}

  int channels() const { return a_log.shape[0]; }
  int state_size() const { return w_b.shape[0]; }
};

/// Per-channel hidden state h in R^{D x N}; the running summary of the whole
/// input history seen since the last reset.
struct HiddenState {
  DiffArray h;  // {D, N}
  int step_index = 0;

  static HiddenState reset(int channels, int state_size);
  bool is_zero() const;
};

/// Input-dependent (delta_t, B_t, C_t).
struct SelectiveParams {
  DiffArray delta;  // {D}, strictly positive
  DiffArray b;      // {N}
  DiffArray c;      // {N}
};

SelectiveParams selective_params(Tape& tape, const DiffArray& x,
                                 const SsmLayerParams& params);

/// Zero-order hold on the state, Euler on the input:
/// abar[d] = exp(delta[d] * a[d]), bbar[d][n] = delta[d] * b[n].
std::pair<DiffArray, DiffArray> discretize(Tape& tape, const SelectiveParams& sp,
                                           const DiffArray& a_log);

/// One recurrence step:
///   h[d][n] = abar[d] * h_prev[d][n] + bbar[d][n] * x[d]
///   y[d]    = sum_n c[n] * h[d][n] + skip[d] * x[d]
std::pair<HiddenState, DiffArray> ssm_step(Tape& tape, const HiddenState& h_prev,
                                           const DiffArray& x,
                                           const SsmLayerParams& params);

/// Whole-sequence scan; identical outputs to T applications of ssm_step.
std::pair<std::vector<DiffArray>, HiddenState> ssm_scan(
    Tape& tape, const std::vector<DiffArray>& xs, const SsmLayerParams& params,
    const HiddenState& h0);

/// Gated residual block:
///   out = x + w_out * ( ssm(w_in * norm(x)) o silu(w_gate * norm(x)) )
/// norm is RMS normalization with a learned per-channel gain.
struct MambaBlockParams {
  DiffArray norm_gain;  // {d_model}
  DiffArray w_in;       // {D, d_model}
  DiffArray w_gate;     // {D, d_model}
  DiffArray w_out;      // {d_model, D}
  SsmLayerParams ssm;

  int model_dim() const { return norm_gain.shape[0]; }
};

std::pair<DiffArray, HiddenState> mamba_block(Tape& tape, const DiffArray& x,
                                              const HiddenState& h_prev,
                                              const MambaBlockParams& params);

DiffArray rms_norm(Tape& tape, const DiffArray& x, const DiffArray& gain);

/// Standard multi-timescale init: a spans [-1, -1/64] log-uniformly, the
/// delta bias puts softplus output in roughly [0.01, 0.1], skip starts at 1.
SsmLayerParams init_ssm_layer(std::mt19937_64& rng, int channels, int state_size);
MambaBlockParams init_mamba_block(std::mt19937_64& rng, int d_model, int state_size);

}  // namespace mtil
