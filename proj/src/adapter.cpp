#include "dssm/adapter.hpp"

#include <cmath>

namespace dssm {

void AdapterWeights::validate() const {
  check(k >= 1, "AdapterWeights: k must be >= 1");
  check(w1.rank() == 2 && w2.rank() == 2, "AdapterWeights: w1/w2 must be rank-2");
  check(w1.dim(1) % k == 0, "AdapterWeights: w1 fan-in must be k*d_model");
  check(w2.dim(1) == w1.dim(0), "AdapterWeights: w2 fan-in must match w1 fan-out");
}

AdapterWeights AdapterWeights::init(int64_t k, int64_t d_model, int64_t d_lm,
                                    int64_t d_hidden, Rng& rng, Dtype dt) {
  check(k >= 1 && d_model >= 1 && d_lm >= 1, "AdapterWeights::init: bad dims");
  if (d_hidden <= 0) d_hidden = d_lm;
  AdapterWeights w;
  w.k = k;
  w.w1 = randn({d_hidden, k * d_model}, 1.0 / std::sqrt(double(k * d_model)), rng, dt);
  w.w2 = randn({d_lm, d_hidden}, 1.0 / std::sqrt(double(d_hidden)), rng, dt);
  return w;
}

Tensor downsample_concat(const Tensor& h, int64_t k, GradTape* tape) {
  check(h.rank() == 2, "downsample_concat: input must be [T_c, d_model]");
  check(k >= 1, "downsample_concat: k must be >= 1");
  const int64_t t_c = h.dim(0), d = h.dim(1);
  const int64_t t_s = t_c / k;
  check(t_s >= 1, "downsample_concat: fewer than k frames, nothing to emit");
  // Row-major [t_s*k, d] viewed as [t_s, k*d] IS the concatenation of each
  // group of k consecutive rows; dropping the remainder first makes the
  // reshape exact.
  Tensor kept = slice_rows(h, 0, t_s * k, tape);
  return reshape(kept, {t_s, k * d}, tape);
}

SpeechEmbeddings adapter_forward(const Tensor& h, const AdapterWeights& w,
                                 GradTape* tape) {
  w.validate();
  check(h.rank() == 2 && h.dim(1) == w.d_model(),
        "adapter_forward: input width does not match adapter d_model");
  Tensor frames = downsample_concat(h, w.k, tape);
  Tensor hidden = relu(linear(frames, w.w1, tape), tape);
  return SpeechEmbeddings{linear(hidden, w.w2, tape)};
}

}  // namespace dssm
