#include "dssm/blocks.hpp"

#include <cmath>

#include "json.hpp"

namespace dssm {

// ============================================================================
// Mamba block
// ============================================================================

void MambaInnerWeights::validate() const {
  ssm.validate();
  const int64_t di = ssm.d_inner();
  check(in_proj.rank() == 2 && in_proj.dim(0) == 2 * di,
        "MambaInnerWeights: in_proj must be [2*d_inner, d_model]");
  check(conv_w.rank() == 2 && conv_w.dim(1) == di,
        "MambaInnerWeights: conv_w must be [K, d_inner]");
  check(conv_b.rank() == 1 && conv_b.dim(0) == di,
        "MambaInnerWeights: conv_b must be [d_inner]");
  check(out_proj.rank() == 2 && out_proj.dim(0) == in_proj.dim(1) &&
            out_proj.dim(1) == di,
        "MambaInnerWeights: out_proj must be [d_model, d_inner]");
}

MambaInnerWeights MambaInnerWeights::init(int64_t d_model, int64_t d_inner,
                                          int64_t d_state, int64_t conv_kernel,
                                          Rng& rng, Dtype dt) {
  MambaInnerWeights w;
  w.in_proj = randn({2 * d_inner, d_model}, 1.0 / std::sqrt(double(d_model)), rng, dt);
  w.conv_w = randn({conv_kernel, d_inner}, 1.0 / std::sqrt(double(conv_kernel)), rng, dt);
  w.conv_b = Tensor::zeros({d_inner}, dt);
  w.ssm = SsmParams::init(d_inner, d_state, rng, dt);
  w.out_proj = randn({d_model, d_inner}, 1.0 / std::sqrt(double(d_inner)), rng, dt);
  return w;
}

MambaBlockWeights MambaBlockWeights::init(int64_t d_model, int64_t d_inner,
                                          int64_t d_state, int64_t conv_kernel,
                                          Rng& rng, Dtype dt) {
  MambaBlockWeights w;
  w.norm_gamma = Tensor::full({d_model}, 1.0, dt);
  w.inner = MambaInnerWeights::init(d_model, d_inner, d_state, conv_kernel, rng, dt);
  return w;
}

std::pair<Tensor, LayerState> mamba_inner_forward(const Tensor& x,
                                                  const MambaInnerWeights& w,
                                                  LayerState state, GradTape* tape) {
  w.validate();
  check(x.rank() == 2 && x.dim(1) == w.d_model(),
        "mamba_inner_forward: x must be [T, d_model]");
  const int64_t di = w.d_inner();
  Tensor xz = linear(x, w.in_proj, tape);              // [T, 2*d_inner]
  Tensor xh = split_cols(xz, 0, di, tape);             // conv/scan path
  Tensor z = split_cols(xz, di, 2 * di, tape);         // gate path
  auto [conv_y, conv_state] =
      causal_depthwise_conv1d(xh, w.conv_w, w.conv_b, state.conv.frames, tape);
  Tensor u = silu(conv_y, tape);
  auto [scan_y, ssm_state] = selective_scan(u, w.ssm, std::move(state.ssm), tape);
  Tensor gated = mul(scan_y, silu(z, tape), tape);
  Tensor y = linear(gated, w.out_proj, tape);
  return {std::move(y),
          LayerState{ConvState{std::move(conv_state)}, std::move(ssm_state)}};
}

std::pair<Tensor, LayerState> mamba_block_forward(const Tensor& x,
                                                  const MambaBlockWeights& w,
                                                  LayerState state, GradTape* tape) {
  Tensor normed = rms_norm(x, w.norm_gamma, 1e-6, tape);
  auto [inner_y, next] = mamba_inner_forward(normed, w.inner, std::move(state), tape);
  return {add(x, inner_y, tape), std::move(next)};
}

Tensor bidirectional_mamba_forward(const Tensor& x, const MambaInnerWeights& fwd,
                                   const MambaInnerWeights& bwd, GradTape* tape) {
  check(x.rank() == 2, "bidirectional_mamba_forward: x must be [T, d_model]");
  const Dtype dt = x.dtype();
  auto zero_state = [&](const MambaInnerWeights& w) {
    return LayerState::zeros(w.conv_kernel(), w.d_inner(), w.ssm.d_state(), dt);
  };
  auto [y_f, st_f] = mamba_inner_forward(x, fwd, zero_state(fwd), tape);
  auto [y_b, st_b] =
      mamba_inner_forward(reverse_rows(x, tape), bwd, zero_state(bwd), tape);
  return scale(add(y_f, reverse_rows(y_b, tape), tape), 0.5, tape);
}

// ============================================================================
// ConMamba block
// ============================================================================

FeedForwardWeights FeedForwardWeights::init(int64_t d, int64_t mult, Rng& rng, Dtype dt) {
  FeedForwardWeights w;
  w.norm_gamma = Tensor::full({d}, 1.0, dt);
  w.norm_beta = Tensor::zeros({d}, dt);
  w.w1 = randn({mult * d, d}, 1.0 / std::sqrt(double(d)), rng, dt);
  w.b1 = Tensor::zeros({mult * d}, dt);
  w.w2 = randn({d, mult * d}, 1.0 / std::sqrt(double(mult * d)), rng, dt);
  w.b2 = Tensor::zeros({d}, dt);
  return w;
}

ConvModuleWeights ConvModuleWeights::init(int64_t d, int64_t kernel, Rng& rng, Dtype dt) {
  check(kernel % 2 == 1, "ConvModuleWeights: kernel must be odd");
  ConvModuleWeights w;
  w.norm_gamma = Tensor::full({d}, 1.0, dt);
  w.norm_beta = Tensor::zeros({d}, dt);
  w.pw1 = randn({2 * d, d}, 1.0 / std::sqrt(double(d)), rng, dt);
  w.pw1_b = Tensor::zeros({2 * d}, dt);
  w.dw = randn({kernel, d}, 1.0 / std::sqrt(double(kernel)), rng, dt);
  w.dw_b = Tensor::zeros({d}, dt);
  w.pw2 = randn({d, d}, 1.0 / std::sqrt(double(d)), rng, dt);
  w.pw2_b = Tensor::zeros({d}, dt);
  return w;
}

ConMambaBlockWeights ConMambaBlockWeights::init(int64_t d_model, int64_t d_inner,
                                                int64_t d_state, int64_t ssm_conv_kernel,
                                                int64_t conv_kernel, int64_t ffn_mult,
                                                Rng& rng, Dtype dt) {
  ConMambaBlockWeights w;
  w.ffn1 = FeedForwardWeights::init(d_model, ffn_mult, rng, dt);
  w.bidir_norm_gamma = Tensor::full({d_model}, 1.0, dt);
  w.bidir_norm_beta = Tensor::zeros({d_model}, dt);
  w.fwd = MambaInnerWeights::init(d_model, d_inner, d_state, ssm_conv_kernel, rng, dt);
  w.bwd = MambaInnerWeights::init(d_model, d_inner, d_state, ssm_conv_kernel, rng, dt);
  w.conv = ConvModuleWeights::init(d_model, conv_kernel, rng, dt);
  w.ffn2 = FeedForwardWeights::init(d_model, ffn_mult, rng, dt);
  w.final_norm_gamma = Tensor::full({d_model}, 1.0, dt);
  w.final_norm_beta = Tensor::zeros({d_model}, dt);
  return w;
}

static Tensor feed_forward(const Tensor& x, const FeedForwardWeights& w, GradTape* tape) {
  Tensor h = layer_norm(x, w.norm_gamma, w.norm_beta, 1e-6, tape);
  h = silu(linear_bias(h, w.w1, w.b1, tape), tape);
  return linear_bias(h, w.w2, w.b2, tape);
}

static Tensor conv_module(const Tensor& x, const ConvModuleWeights& w, GradTape* tape) {
  Tensor h = layer_norm(x, w.norm_gamma, w.norm_beta, 1e-6, tape);
  Tensor pw = linear_bias(h, w.pw1, w.pw1_b, tape);  // [T, 2d]
  const int64_t d = x.cols();
  Tensor gated = mul(split_cols(pw, 0, d, tape),
                     sigmoid(split_cols(pw, d, 2 * d, tape), tape), tape);  // GLU
  Tensor dwc = depthwise_conv1d_same(gated, w.dw, w.dw_b, tape);
  return linear_bias(silu(dwc, tape), w.pw2, w.pw2_b, tape);
}

Tensor conmamba_block_forward(const Tensor& x, const ConMambaBlockWeights& w,
                              GradTape* tape) {
  check(x.rank() == 2, "conmamba_block_forward: x must be [T, d_model]");
  Tensor h = add(x, scale(feed_forward(x, w.ffn1, tape), 0.5, tape), tape);
  Tensor bn = layer_norm(h, w.bidir_norm_gamma, w.bidir_norm_beta, 1e-6, tape);
  h = add(h, bidirectional_mamba_forward(bn, w.fwd, w.bwd, tape), tape);
  h = add(h, conv_module(h, w.conv, tape), tape);
  h = add(h, scale(feed_forward(h, w.ffn2, tape), 0.5, tape), tape);
  return layer_norm(h, w.final_norm_gamma, w.final_norm_beta, 1e-6, tape);
}

// ============================================================================
// CNN frontend + encoder
// ============================================================================

FrontendWeights FrontendWeights::init(int64_t d_feat, int64_t d_model, int64_t c1,
                                      int64_t c2, Rng& rng, Dtype dt) {
  FrontendWeights w;
  w.conv1_w = randn({c1, 1, 3, 3}, 1.0 / 3.0, rng, dt);
  w.conv1_b = Tensor::zeros({c1}, dt);
  w.conv2_w = randn({c2, c1, 3, 3}, 1.0 / (3.0 * std::sqrt(double(c1))), rng, dt);
  w.conv2_b = Tensor::zeros({c2}, dt);
  const int64_t f_out = frontend_out_len(d_feat);  // same rounding on the feature axis
  w.proj_w = randn({d_model, c2 * f_out}, 1.0 / std::sqrt(double(c2 * f_out)), rng, dt);
  w.proj_b = Tensor::zeros({d_model}, dt);
  return w;
}

int64_t frontend_out_len(int64_t t_f) {
  const int64_t once = (t_f + 1) / 2;  // ceil(t_f / 2): k=3, stride 2, pad 1
  return (once + 1) / 2;
}

Tensor cnn_frontend(const Tensor& features, const FrontendWeights& w, GradTape* tape) {
  check(features.rank() == 2, "cnn_frontend: features must be [T_f, d_feat]");
  const int64_t t_f = features.dim(0);
  check(t_f >= kFrontendMinFrames,
        "cnn_frontend: input shorter than the frontend receptive field");
  Tensor img = reshape(features, {1, t_f, features.dim(1)}, tape);  // [C=1, T, F]
  Tensor h = silu(conv2d(img, w.conv1_w, w.conv1_b, /*stride=*/2, /*pad=*/1, tape), tape);
  h = silu(conv2d(h, w.conv2_w, w.conv2_b, 2, 1, tape), tape);
  Tensor flat = chw_to_time_major(h, tape);  // [T_c, c2 * F_c]
  check(flat.dim(1) == w.proj_w.dim(1),
        "cnn_frontend: feature width does not match the projection fan-in");
  return linear_bias(flat, w.proj_w, w.proj_b, tape);
}

void EncoderConfig::validate() const {
  check(n_layers >= 0, "EncoderConfig: n_layers must be >= 0");
  check(d_model >= 1 && d_state >= 1 && d_feat >= 1, "EncoderConfig: bad dims");
  check(expand >= 1 && ffn_mult >= 1, "EncoderConfig: bad multipliers");
  check(conv_kernel % 2 == 1, "EncoderConfig: conv_kernel must be odd");
  check(ssm_conv_kernel >= 1, "EncoderConfig: ssm_conv_kernel must be >= 1");
}

std::string EncoderConfig::to_json() const {
  nlohmann::json j{{"n_layers", n_layers},     {"d_model", d_model},
                   {"d_state", d_state},       {"d_feat", d_feat},
                   {"frontend_c1", frontend_c1}, {"frontend_c2", frontend_c2},
                   {"expand", expand},         {"ssm_conv_kernel", ssm_conv_kernel},
                   {"conv_kernel", conv_kernel}, {"ffn_mult", ffn_mult}};
  return j.dump();
}

EncoderConfig EncoderConfig::from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  EncoderConfig cfg;
  cfg.n_layers = j.value("n_layers", cfg.n_layers);
  cfg.d_model = j.value("d_model", cfg.d_model);
  cfg.d_state = j.value("d_state", cfg.d_state);
  cfg.d_feat = j.value("d_feat", cfg.d_feat);
  cfg.frontend_c1 = j.value("frontend_c1", cfg.frontend_c1);
  cfg.frontend_c2 = j.value("frontend_c2", cfg.frontend_c2);
  cfg.expand = j.value("expand", cfg.expand);
  cfg.ssm_conv_kernel = j.value("ssm_conv_kernel", cfg.ssm_conv_kernel);
  cfg.conv_kernel = j.value("conv_kernel", cfg.conv_kernel);
  cfg.ffn_mult = j.value("ffn_mult", cfg.ffn_mult);
  cfg.validate();
  return cfg;
}

EncoderWeights EncoderWeights::init(const EncoderConfig& cfg, Rng& rng, Dtype dt) {
  cfg.validate();
  EncoderWeights w;
  w.frontend = FrontendWeights::init(cfg.d_feat, cfg.d_model, cfg.frontend_c1,
                                     cfg.frontend_c2, rng, dt);
  w.layers.reserve(static_cast<size_t>(cfg.n_layers));
  for (int64_t i = 0; i < cfg.n_layers; ++i) {
    w.layers.push_back(ConMambaBlockWeights::init(cfg.d_model, cfg.d_inner(),
                                                  cfg.d_state, cfg.ssm_conv_kernel,
                                                  cfg.conv_kernel, cfg.ffn_mult, rng, dt));
  }
  return w;
}

Tensor encoder_forward(const Tensor& features, const EncoderConfig& cfg,
                       const EncoderWeights& w, GradTape* tape) {
  cfg.validate();
  check(features.rank() == 2 && features.dim(1) == cfg.d_feat,
        "encoder_forward: features must be [T_f, d_feat]");
  check(static_cast<int64_t>(w.layers.size()) == cfg.n_layers,
        "encoder_forward: layer count does not match config");
  Tensor h = cnn_frontend(features, w.frontend, tape);
  for (const ConMambaBlockWeights& layer : w.layers) {
    h = conmamba_block_forward(h, layer, tape);  // each segment from zero state
  }
  return h;
}

}  // namespace dssm
