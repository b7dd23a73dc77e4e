#include "mtil/ssm.hpp"

#include <cmath>

namespace mtil {

HiddenState HiddenState::reset(int channels, int state_size) {
  HiddenState s;
  s.h = DiffArray::zeros({channels, state_size});
  s.step_index = 0;
  return s;
}

bool HiddenState::is_zero() const {
  for (double v : h.data)
    if (v != 0.0) return false;
  return true;
}

SelectiveParams selective_params(Tape& tape, const DiffArray& x,
                                 const SsmLayerParams& params) {
  if (x.shape.size() != 1 || x.shape[0] != params.channels())
    throw TapeError("selective_params: embedding dim " + shape_str(x.shape) +
                    " does not match layer channels " + std::to_string(params.channels()));
  SelectiveParams sp;
  sp.delta = tape.softplus(tape.add(tape.matmul(params.w_delta, x), params.b_delta));
  sp.b = tape.matmul(params.w_b, x);
  sp.c = tape.matmul(params.w_c, x);
  return sp;
}

std::pair<DiffArray, DiffArray> discretize(Tape& tape, const SelectiveParams& sp,
                                           const DiffArray& a_log) {
  int d = a_log.shape[0];
  int n = sp.b.shape[0];
  DiffArray a = tape.neg(tape.exp(a_log));                       // {D}, a < 0
  DiffArray abar = tape.exp(tape.mul(sp.delta, a));              // {D}
  DiffArray bbar = tape.matmul(tape.reshape(sp.delta, {d, 1}),   // {D, N}
                               tape.reshape(sp.b, {1, n}));
  return {abar, bbar};
}

std::pair<HiddenState, DiffArray> ssm_step(Tape& tape, const HiddenState& h_prev,
                                           const DiffArray& x,
                                           const SsmLayerParams& params) {
  int d = params.channels();
  int n = params.state_size();
  if (h_prev.h.shape != Shape{d, n})
    throw TapeError("ssm_step: state shape " + shape_str(h_prev.h.shape) +
                    " does not match layer " + std::to_string(d) + "x" + std::to_string(n));

  SelectiveParams sp = selective_params(tape, x, params);
  auto [abar, bbar] = discretize(tape, sp, params.a_log);

  DiffArray ones_row = DiffArray::full({1, n}, 1.0);
  DiffArray abar_cols = tape.matmul(tape.reshape(abar, {d, 1}), ones_row);  // {D,N}
  DiffArray x_cols = tape.matmul(tape.reshape(x, {d, 1}), ones_row);        // {D,N}

  HiddenState next;
  next.h = tape.add(tape.mul(abar_cols, h_prev.h), tape.mul(bbar, x_cols));
  next.step_index = h_prev.step_index + 1;
  if (!next.h.all_finite()) throw TapeError("ssm_step: hidden state diverged");

  DiffArray y = tape.add(tape.matmul(next.h, sp.c), tape.mul(params.skip, x));
  return {std::move(next), std::move(y)};
}

std::pair<std::vector<DiffArray>, HiddenState> ssm_scan(
    Tape& tape, const std::vector<DiffArray>& xs, const SsmLayerParams& params,
    const HiddenState& h0) {
  if (xs.empty()) throw TapeError("ssm_scan: empty sequence");
  std::vector<DiffArray> ys;
  ys.reserve(xs.size());
  HiddenState h = h0;
  for (const DiffArray& x : xs) {
    auto [next, y] = ssm_step(tape, h, x, params);
    h = std::move(next);
    ys.push_back(std::move(y));
  }
  return {std::move(ys), std::move(h)};
}

DiffArray rms_norm(Tape& tape, const DiffArray& x, const DiffArray& gain) {
  DiffArray ms = tape.add(tape.mean(tape.square(x)), DiffArray::scalar(1e-8));
  DiffArray inv_rms = tape.exp(tape.scale(tape.log(ms), -0.5));  // {1}
  return tape.mul(tape.mul(x, inv_rms), gain);
}

std::pair<DiffArray, HiddenState> mamba_block(Tape& tape, const DiffArray& x,
                                              const HiddenState& h_prev,
                                              const MambaBlockParams& params) {
  DiffArray xn = rms_norm(tape, x, params.norm_gain);
  DiffArray u = tape.matmul(params.w_in, xn);
  auto [h, y_ssm] = ssm_step(tape, h_prev, u, params.ssm);
  DiffArray gate = tape.silu(tape.matmul(params.w_gate, xn));
  DiffArray out = tape.add(x, tape.matmul(params.w_out, tape.mul(y_ssm, gate)));
  return {std::move(out), std::move(h)};
}

namespace {

DiffArray uniform_array(std::mt19937_64& rng, Shape shape, double bound) {
  std::uniform_real_distribution<double> u(-bound, bound);
  DiffArray a = DiffArray::zeros(std::move(shape));
  for (auto& v : a.data) v = u(rng);
  return a;
}

}  // namespace

SsmLayerParams init_ssm_layer(std::mt19937_64& rng, int channels, int state_size) {
  SsmLayerParams p;
  // a = -exp(a_log) log-uniform in [-1, -1/64]
  std::uniform_real_distribution<double> ua(std::log(1.0 / 64.0), 0.0);
  p.a_log = DiffArray::zeros({channels});
  for (auto& v : p.a_log.data) v = ua(rng);

  double scale = 1.0 / std::sqrt(static_cast<double>(channels));
  p.w_delta = uniform_array(rng, {channels, channels}, 0.1 * scale);
  // inverse softplus of a log-uniform target in [0.01, 0.1]
  std::uniform_real_distribution<double> ud(std::log(0.01), std::log(0.1));
  p.b_delta = DiffArray::zeros({channels});
  for (auto& v : p.b_delta.data) {
    double target = std::exp(ud(rng));
    v = std::log(std::expm1(target));
  }
  p.w_b = uniform_array(rng, {state_size, channels}, scale);
  p.w_c = uniform_array(rng, {state_size, channels}, scale);
  p.skip = DiffArray::full({channels}, 1.0);
  return p;
}

MambaBlockParams init_mamba_block(std::mt19937_64& rng, int d_model, int state_size) {
  MambaBlockParams p;
  double scale = 1.0 / std::sqrt(static_cast<double>(d_model));
  p.norm_gain = DiffArray::full({d_model}, 1.0);
  p.w_in = uniform_array(rng, {d_model, d_model}, scale);
  p.w_gate = uniform_array(rng, {d_model, d_model}, scale);
  p.w_out = uniform_array(rng, {d_model, d_model}, scale);
  p.ssm = init_ssm_layer(rng, d_model, state_size);
  return p;
}

}  // namespace mtil
