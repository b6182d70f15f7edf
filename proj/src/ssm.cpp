#include "dssm/ssm.hpp"

#include <cmath>

namespace dssm {

void SsmParams::validate() const {
  const int64_t di = d_inner(), ds = d_state();
  check(a_log.rank() == 2, "SsmParams: a_log must be [d_inner, d_state]");
  check(delta_w.rank() == 2 && delta_w.dim(0) == di && delta_w.dim(1) == di,
        "SsmParams: delta_w must be [d_inner, d_inner]");
  check(delta_b.rank() == 1 && delta_b.dim(0) == di,
        "SsmParams: delta_b must be [d_inner]");
  check(b_w.rank() == 2 && b_w.dim(0) == ds && b_w.dim(1) == di,
        "SsmParams: b_w must be [d_state, d_inner]");
  check(c_w.rank() == 2 && c_w.dim(0) == ds && c_w.dim(1) == di,
        "SsmParams: c_w must be [d_state, d_inner]");
  check(d_skip.rank() == 1 && d_skip.dim(0) == di,
        "SsmParams: d_skip must be [d_inner]");
}

SsmParams SsmParams::init(int64_t d_inner, int64_t d_state, Rng& rng, Dtype dt) {
  check(d_inner >= 1 && d_state >= 1, "SsmParams::init: dims must be positive");
  SsmParams p;
  // Each channel's diagonal decays span log(1)..log(d_state): a mix of fast
  // and slow timescales, and A = -exp(a_log) keeps every |a_bar| < 1.
  p.a_log = Tensor({d_inner, d_state}, dt);
  for (int64_t i = 0; i < d_inner; ++i) {
    for (int64_t j = 0; j < d_state; ++j) {
      p.a_log.set2(i, j, std::log(static_cast<double>(j + 1)));
    }
  }
  const double wd = 1.0 / std::sqrt(static_cast<double>(d_inner));
  p.delta_w = randn({d_inner, d_inner}, wd, rng, dt);
  // Bias set so softplus(delta_b) lands in a useful step-size range.
  p.delta_b = Tensor({d_inner}, dt);
  for (int64_t i = 0; i < d_inner; ++i) {
    const double target_dt = std::exp(rng.uniform(std::log(1e-3), std::log(0.1)));
    p.delta_b.set(i, std::log(std::expm1(target_dt)));  // softplus inverse
  }
  p.b_w = randn({d_state, d_inner}, wd, rng, dt);
  p.c_w = randn({d_state, d_inner}, wd, rng, dt);
  p.d_skip = Tensor::full({d_inner}, 1.0, dt);
  return p;
}

SelectiveProjections selective_projections(const Tensor& x_t, const SsmParams& p,
                                           GradTape* tape) {
  check(x_t.rank() == 1 && x_t.dim(0) == p.d_inner(),
        "selective_projections: x_t must be [d_inner]");
  SelectiveProjections out;
  out.delta = softplus(add(linear(x_t, p.delta_w, tape), p.delta_b, tape), tape);
  out.b = linear(x_t, p.b_w, tape);
  out.c = linear(x_t, p.c_w, tape);
  return out;
}

std::pair<Tensor, Tensor> discretize(const Tensor& a_log, const Tensor& b,
                                     const Tensor& delta, GradTape* tape) {
  check(a_log.rank() == 2, "discretize: a_log must be [d_inner, d_state]");
  check(delta.rank() == 1 && delta.dim(0) == a_log.dim(0),
        "discretize: delta must be [d_inner]");
  check(b.rank() == 1 && b.dim(0) == a_log.dim(1),
        "discretize: b must be [d_state]");
  // a_bar = exp(delta[i] * -exp(a_log[i,j])), zero-order hold.
  Tensor a = scale(exp_op(a_log, tape), -1.0, tape);
  Tensor a_bar = exp_op(scale_rows(a, delta, tape), tape);
  // b_bar = delta[i] * b[j], Euler.
  Tensor b_bar = outer(delta, b, tape);
  return {std::move(a_bar), std::move(b_bar)};
}

std::pair<SsmState, Tensor> ssm_step(const SsmState& state, const Tensor& x_t,
                                     const SsmParams& p, GradTape* tape) {
  p.validate();
  check(x_t.rank() == 1 && x_t.dim(0) == p.d_inner(), "ssm_step: x_t must be [d_inner]");
  check(state.h.rank() == 2 && state.h.dim(0) == p.d_inner() &&
            state.h.dim(1) == p.d_state(),
        "ssm_step: state shape mismatch");
  SelectiveProjections proj = selective_projections(x_t, p, tape);
  auto [a_bar, b_bar] = discretize(p.a_log, proj.b, proj.delta, tape);
  // h' = a_bar*h + b_bar*x, elementwise; x broadcast across the state axis.
  Tensor h_next = add(mul(a_bar, state.h, tape), scale_rows(b_bar, x_t, tape), tape);
  // y = h' . C (+ d_skip * x).
  Tensor y = reshape(matmul(h_next, reshape(proj.c, {p.d_state(), 1}, tape), tape),
                     {p.d_inner()}, tape);
  if (p.use_d_skip) y = add(y, mul(p.d_skip, x_t, tape), tape);
  return {SsmState{std::move(h_next)}, std::move(y)};
}

std::pair<Tensor, SsmState> selective_scan(const Tensor& xs, const SsmParams& p,
                                           SsmState state, GradTape* tape) {
  check(xs.rank() == 2 && xs.dim(1) == p.d_inner(),
        "selective_scan: xs must be [T, d_inner]");
  const int64_t T = xs.dim(0);
  Tensor ys({T, p.d_inner()}, xs.dtype());
  std::vector<Tensor> rows;
  rows.reserve(static_cast<size_t>(T));
  for (int64_t t = 0; t < T; ++t) {
    Tensor x_t = reshape(slice_rows(xs, t, t + 1, tape), {p.d_inner()}, tape);
    auto [next, y_t] = ssm_step(state, x_t, p, tape);
    state = std::move(next);
    rows.push_back(std::move(y_t));
  }
  if (tape) {
    // Keep the per-row tape lineage intact.
    if (T == 0) return {Tensor({0, p.d_inner()}, xs.dtype()), std::move(state)};
    Tensor out = concat_rows(rows, tape);
    return {std::move(out), std::move(state)};
  }
  for (int64_t t = 0; t < T; ++t) {
    for (int64_t j = 0; j < p.d_inner(); ++j) ys.set2(t, j, rows[static_cast<size_t>(t)].get(j));
  }
  return {std::move(ys), std::move(state)};
}

}  // namespace dssm
