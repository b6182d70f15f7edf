#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

// ============================================================================
// Decoder/encoder building blocks: the causal block's streaming contract
// (chunk invariance, purity, residual identity), the bidirectional
// composition, the macaron encoder block, and the strided CNN frontend.
// ============================================================================

#include <cmath>

#include "dssm/blocks.hpp"

using namespace dssm;

namespace {

void zero(Tensor& t) {
  for (int64_t i = 0; i < t.numel(); ++i) t.set(i, 0.0);
}

}  // namespace

// ============================================================================
// Causal Mamba block
// ============================================================================

TEST_CASE("block output matches across any chunking of the same stream") {
  Rng rng(41);
  const int64_t d_model = 6, d_inner = 12, d_state = 4, k = 4, t_len = 24;
  MambaBlockWeights w = MambaBlockWeights::init(d_model, d_inner, d_state, k, rng,
                                                Dtype::F32);
  Tensor x = randn({t_len, d_model}, 1.0, rng, Dtype::F32);
  auto [whole, whole_state] =
      mamba_block_forward(x, w, LayerState::zeros(k, d_inner, d_state, Dtype::F32));

  for (int trial = 0; trial < 6; ++trial) {
    LayerState carry = LayerState::zeros(k, d_inner, d_state, Dtype::F32);
    std::vector<Tensor> pieces;
    int64_t at = 0;
    while (at < t_len) {
      const int64_t step = rng.uniform_int(1, 7);
      const int64_t hi = std::min(at + step, t_len);
      auto [y, next] = mamba_block_forward(slice_rows(x, at, hi), w, carry);
      pieces.push_back(y);
      carry = next;
      at = hi;
    }
    CHECK(bitwise_equal(concat_rows(pieces), whole));
    CHECK(bitwise_equal(carry.conv.frames, whole_state.conv.frames));
    CHECK(bitwise_equal(carry.ssm.h, whole_state.ssm.h));
  }
}

TEST_CASE("block forward never mutates the state it was given") {
  Rng rng(42);
  const int64_t d_model = 5, d_inner = 10, d_state = 3, k = 4;
  MambaBlockWeights w =
      MambaBlockWeights::init(d_model, d_inner, d_state, k, rng, Dtype::F64);
  LayerState state = LayerState::zeros(k, d_inner, d_state, Dtype::F64);
  state.conv.frames = randn({k - 1, d_inner}, 1.0, rng, Dtype::F64);
  state.ssm.h = randn({d_inner, d_state}, 1.0, rng, Dtype::F64);
  Tensor conv_before = state.conv.frames.clone();
  Tensor ssm_before = state.ssm.h.clone();
  Tensor x = randn({7, d_model}, 1.0, rng, Dtype::F64);
  (void)mamba_block_forward(x, w, state);
  CHECK(bitwise_equal(state.conv.frames, conv_before));
  CHECK(bitwise_equal(state.ssm.h, ssm_before));
}

TEST_CASE("zeroed out_proj reduces the block to the identity") {
  // The inner path ends in out_proj; killing it leaves only the residual.
  Rng rng(43);
  MambaBlockWeights w = MambaBlockWeights::init(6, 12, 4, 4, rng, Dtype::F64);
  zero(w.inner.out_proj);
  Tensor x = randn({9, 6}, 1.0, rng, Dtype::F64);
  auto [y, st] = mamba_block_forward(x, w, LayerState::zeros(4, 12, 4, Dtype::F64));
  CHECK(bitwise_equal(y, x));
  // The state still advances: the recurrence ran even though its output
  // was discarded.
  CHECK(!bitwise_equal(st.ssm.h, Tensor::zeros({12, 4}, Dtype::F64)));
}

TEST_CASE("streamed single-row calls agree with the one-shot chunk") {
  Rng rng(44);
  const int64_t d_model = 4, d_inner = 8, d_state = 3, k = 4, t_len = 11;
  MambaBlockWeights w =
      MambaBlockWeights::init(d_model, d_inner, d_state, k, rng, Dtype::F64);
  Tensor x = randn({t_len, d_model}, 1.0, rng, Dtype::F64);
  auto [whole, whole_state] =
      mamba_block_forward(x, w, LayerState::zeros(k, d_inner, d_state, Dtype::F64));
  LayerState carry = LayerState::zeros(k, d_inner, d_state, Dtype::F64);
  for (int64_t t = 0; t < t_len; ++t) {
    auto [y, next] = mamba_block_forward(slice_rows(x, t, t + 1), w, carry);
    carry = next;
    for (int64_t j = 0; j < d_model; ++j) CHECK(y.get2(0, j) == whole.get2(t, j));
  }
  CHECK(bitwise_equal(carry.conv.frames, whole_state.conv.frames));
  CHECK(bitwise_equal(carry.ssm.h, whole_state.ssm.h));
}

// ============================================================================
// Bidirectional composition
// ============================================================================

TEST_CASE("bidirectional output is the mean of the two directional passes") {
  Rng rng(45);
  const int64_t d_model = 5, d_inner = 10, d_state = 3, k = 4, t_len = 8;
  MambaInnerWeights fwd =
      MambaInnerWeights::init(d_model, d_inner, d_state, k, rng, Dtype::F64);
  MambaInnerWeights bwd =
      MambaInnerWeights::init(d_model, d_inner, d_state, k, rng, Dtype::F64);
  Tensor x = randn({t_len, d_model}, 1.0, rng, Dtype::F64);
  Tensor y = bidirectional_mamba_forward(x, fwd, bwd);

  auto [yf, sf] =
      mamba_inner_forward(x, fwd, LayerState::zeros(k, d_inner, d_state, Dtype::F64));
  auto [yb, sb] = mamba_inner_forward(reverse_rows(x), bwd,
                                      LayerState::zeros(k, d_inner, d_state, Dtype::F64));
  Tensor manual = scale(add(yf, reverse_rows(yb)), 0.5);
  CHECK(allclose(y, manual, 0.0, 0.0));  // exact: same op sequence
}

TEST_CASE("sharing direction weights makes the bidirectional pass palindromic") {
  // With fwd == bwd, reversing the input exactly reverses the output.
  Rng rng(46);
  MambaInnerWeights w = MambaInnerWeights::init(4, 8, 3, 4, rng, Dtype::F64);
  Tensor x = randn({10, 4}, 1.0, rng, Dtype::F64);
  Tensor y = bidirectional_mamba_forward(x, w, w);
  Tensor y_rev = bidirectional_mamba_forward(reverse_rows(x), w, w);
  CHECK(bitwise_equal(reverse_rows(y_rev), y));
}

// ============================================================================
// ConMamba encoder block
// ============================================================================

TEST_CASE("zeroing every sublayer output leaves only the final norm") {
  Rng rng(47);
  ConMambaBlockWeights w =
      ConMambaBlockWeights::init(6, 12, 4, 4, 7, 2, rng, Dtype::F64);
  // Each stage is residual; killing each stage's last projection makes every
  // stage the identity, so the block collapses to its final layer norm.
  zero(w.ffn1.w2);
  zero(w.ffn1.b2);
  zero(w.ffn2.w2);
  zero(w.ffn2.b2);
  zero(w.fwd.out_proj);
  zero(w.bwd.out_proj);
  zero(w.conv.pw2);
  zero(w.conv.pw2_b);
  Tensor x = randn({9, 6}, 1.0, rng, Dtype::F64);
  Tensor y = conmamba_block_forward(x, w);
  Tensor expect = layer_norm(x, w.final_norm_gamma, w.final_norm_beta, 1e-6);
  CHECK(allclose(y, expect, 1e-12));
}

TEST_CASE("encoder block is deterministic and shape-preserving") {
  Rng rng(48);
  ConMambaBlockWeights w =
      ConMambaBlockWeights::init(8, 16, 4, 4, 7, 2, rng, Dtype::F32);
  Tensor x = randn({12, 8}, 1.0, rng, Dtype::F32);
  Tensor y1 = conmamba_block_forward(x, w);
  Tensor y2 = conmamba_block_forward(x, w);
  CHECK(y1.dim(0) == 12);
  CHECK(y1.dim(1) == 8);
  CHECK(bitwise_equal(y1, y2));
  CHECK(y1.all_finite());
}

TEST_CASE("encoder block gradients agree with finite differences") {
  Rng rng(49);
  ConMambaBlockWeights w =
      ConMambaBlockWeights::init(4, 8, 3, 4, 5, 2, rng, Dtype::F64);
  Tensor x = randn({6, 4}, 1.0, rng, Dtype::F64);
  // Spot-check one weight from each stage plus the input.
  std::vector<Tensor*> params = {&w.ffn1.w1, &w.fwd.in_proj, &w.bwd.conv_w,
                                 &w.conv.dw, &w.ffn2.w2,     &w.final_norm_gamma,
                                 &x};
  // The step size is 1e-4 rather than 1e-5: the exp(-delta*exp(a_log)) chain
  // inside each direction leaves some true gradients near the f64 cancellation
  // floor, where a smaller step only amplifies round-off in the differences.
  const double err = grad_check(
      [&](GradTape* tape) { return mean_all(conmamba_block_forward(x, w, tape), tape); },
      params, 1e-4);
  CHECK(err < 1e-4);
}

// ============================================================================
// CNN frontend
// ============================================================================

TEST_CASE("two stride-2 stages round up at each halving") {
  CHECK(frontend_out_len(4) == 1);
  CHECK(frontend_out_len(5) == 2);
  CHECK(frontend_out_len(8) == 2);
  CHECK(frontend_out_len(9) == 3);
  CHECK(frontend_out_len(16) == 4);
  CHECK(frontend_out_len(100) == 25);
  CHECK(frontend_out_len(kFrontendMinFrames) == 1);
}

TEST_CASE("frontend output shape tracks the downsampling arithmetic") {
  Rng rng(50);
  const int64_t d_feat = 12, d_model = 10;
  FrontendWeights w = FrontendWeights::init(d_feat, d_model, 4, 4, rng, Dtype::F32);
  for (int64_t t_f : {4, 7, 16, 33}) {
    Tensor feats = randn({t_f, d_feat}, 1.0, rng, Dtype::F32);
    Tensor out = cnn_frontend(feats, w);
    CHECK(out.dim(0) == frontend_out_len(t_f));
    CHECK(out.dim(1) == d_model);
    CHECK(out.all_finite());
  }
  CHECK_THROWS(cnn_frontend(randn({3, d_feat}, 1.0, rng, Dtype::F32), w));
  CHECK_THROWS(cnn_frontend(randn({8, d_feat + 1}, 1.0, rng, Dtype::F32), w));
}

// ============================================================================
// Full encoder
// ============================================================================

TEST_CASE("encoder forward: shape, determinism, and per-segment independence") {
  EncoderConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 8;
  cfg.d_state = 4;
  cfg.d_feat = 12;
  cfg.frontend_c1 = 4;
  cfg.frontend_c2 = 4;
  cfg.expand = 2;
  cfg.ssm_conv_kernel = 4;
  cfg.conv_kernel = 7;
  cfg.ffn_mult = 2;
  cfg.validate();
  Rng rng(51);
  EncoderWeights w = EncoderWeights::init(cfg, rng, Dtype::F32);

  Tensor feats = randn({20, cfg.d_feat}, 1.0, rng, Dtype::F32);
  Tensor h1 = encoder_forward(feats, cfg, w);
  Tensor h2 = encoder_forward(feats, cfg, w);
  CHECK(h1.dim(0) == frontend_out_len(20));
  CHECK(h1.dim(1) == cfg.d_model);
  CHECK(bitwise_equal(h1, h2));  // no hidden state between calls

  // Each segment starts from zero state: a segment's encoding does not
  // depend on what was encoded before it.
  Tensor other = randn({32, cfg.d_feat}, 1.0, rng, Dtype::F32);
  (void)encoder_forward(other, cfg, w);
  CHECK(bitwise_equal(encoder_forward(feats, cfg, w), h1));
}

TEST_CASE("encoder config validation and json round trip") {
  EncoderConfig cfg;
  cfg.n_layers = 3;
  cfg.d_model = 16;
  cfg.d_state = 4;
  cfg.d_feat = 20;
  cfg.conv_kernel = 15;
  EncoderConfig back = EncoderConfig::from_json(cfg.to_json());
  CHECK(back.n_layers == cfg.n_layers);
  CHECK(back.d_model == cfg.d_model);
  CHECK(back.d_state == cfg.d_state);
  CHECK(back.d_feat == cfg.d_feat);
  CHECK(back.frontend_c1 == cfg.frontend_c1);
  CHECK(back.frontend_c2 == cfg.frontend_c2);
  CHECK(back.expand == cfg.expand);
  CHECK(back.ssm_conv_kernel == cfg.ssm_conv_kernel);
  CHECK(back.conv_kernel == cfg.conv_kernel);
  CHECK(back.ffn_mult == cfg.ffn_mult);

  EncoderConfig bad = cfg;
  bad.conv_kernel = 8;  // conv module needs an odd kernel for symmetric padding
  CHECK_THROWS(bad.validate());
  bad = cfg;
  bad.n_layers = -1;  // zero layers (frontend only) is legal; negative is not
  CHECK_THROWS(bad.validate());
  bad = cfg;
  bad.d_model = -1;
  CHECK_THROWS(bad.validate());
}

TEST_CASE("inner weights validate their own shape contract") {
  Rng rng(52);
  MambaInnerWeights w = MambaInnerWeights::init(4, 8, 3, 4, rng, Dtype::F64);
  w.validate();
  CHECK(w.d_model() == 4);
  CHECK(w.d_inner() == 8);
  CHECK(w.conv_kernel() == 4);
  MambaInnerWeights bad = w;
  bad.in_proj = Tensor::zeros({15, 4}, Dtype::F64);  // must be exactly 2*d_inner
  CHECK_THROWS(bad.validate());
  bad = w;
  bad.out_proj = Tensor::zeros({4, 7}, Dtype::F64);
  CHECK_THROWS(bad.validate());
}
