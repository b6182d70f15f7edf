#pragma once

/**
 * Sequence-model building blocks.
 *
 * The decoder side stacks causal Mamba blocks that stream token by token
 * through a fixed-size per-layer state (conv window + recurrence). The
 * encoder side stacks ConMamba blocks that see a whole segment at once and
 * may look both directions inside it; each segment starts from zero state.
 */

#include <utility>
#include <vector>

#include "dssm/ssm.hpp"

namespace dssm {

// ============================================================================
// Causal Mamba block (decoder stack)
// ============================================================================

/** Inner path shared by the causal block and each bidirectional direction. */
struct MambaInnerWeights {
  Tensor in_proj;   // [2*d_inner, d_model] -> split into x-hat and gate z
  Tensor conv_w;    // [K, d_inner] depthwise
  Tensor conv_b;    // [d_inner]
  SsmParams ssm;
  Tensor out_proj;  // [d_model, d_inner]

  int64_t d_model() const { return in_proj.dim(1); }
  int64_t d_inner() const { return ssm.d_inner(); }
  int64_t conv_kernel() const { return conv_w.dim(0); }
  void validate() const;
  static MambaInnerWeights init(int64_t d_model, int64_t d_inner, int64_t d_state,
                                int64_t conv_kernel, Rng& rng, Dtype dt);
};

struct MambaBlockWeights {
  Tensor norm_gamma;  // [d_model] pre-norm (RMS)
  MambaInnerWeights inner;

  static MambaBlockWeights init(int64_t d_model, int64_t d_inner, int64_t d_state,
                                int64_t conv_kernel, Rng& rng, Dtype dt);
};

/** Streaming state of one causal block: conv window plus recurrence. */
struct LayerState {
  ConvState conv;
  SsmState ssm;

  static LayerState zeros(int64_t conv_kernel, int64_t d_inner, int64_t d_state, Dtype dt) {
    return LayerState{ConvState::zeros(conv_kernel, d_inner, dt),
                      SsmState::zeros(d_inner, d_state, dt)};
  }
  size_t byte_size() const { return conv.byte_size() + ssm.byte_size(); }
};

/**
 * Inner path over a chunk: in_proj split -> causal depthwise conv + SiLU ->
 * selective scan -> gate by SiLU(z) -> out_proj. No norm, no residual.
 * Chunk-invariant through the carried state.
 */
std::pair<Tensor, LayerState> mamba_inner_forward(const Tensor& x,
                                                  const MambaInnerWeights& w,
                                                  LayerState state,
                                                  GradTape* tape = nullptr);

/** Pre-norm + inner path + residual: y = x + inner(rms_norm(x)). */
std::pair<Tensor, LayerState> mamba_block_forward(const Tensor& x,
                                                  const MambaBlockWeights& w,
                                                  LayerState state,
                                                  GradTape* tape = nullptr);

/**
 * Offline bidirectional form over one segment:
 *   y = (inner_fwd(x) + reverse(inner_bwd(reverse(x)))) / 2
 * each direction a full inner path from zero state.
 */
Tensor bidirectional_mamba_forward(const Tensor& x, const MambaInnerWeights& fwd,
                                   const MambaInnerWeights& bwd,
                                   GradTape* tape = nullptr);

// ============================================================================
// ConMamba block (encoder stack)
// ============================================================================

struct FeedForwardWeights {
  Tensor norm_gamma, norm_beta;  // [d]
  Tensor w1, b1;                 // [mult*d, d], [mult*d]
  Tensor w2, b2;                 // [d, mult*d], [d]
  static FeedForwardWeights init(int64_t d, int64_t mult, Rng& rng, Dtype dt);
};

struct ConvModuleWeights {
  Tensor norm_gamma, norm_beta;  // [d]
  Tensor pw1, pw1_b;             // [2d, d], [2d] pointwise, split for GLU
  Tensor dw, dw_b;               // [K, d], [d] depthwise (odd K, symmetric pad)
  Tensor pw2, pw2_b;             // [d, d], [d] pointwise
  static ConvModuleWeights init(int64_t d, int64_t kernel, Rng& rng, Dtype dt);
};

struct ConMambaBlockWeights {
  FeedForwardWeights ffn1;
  Tensor bidir_norm_gamma, bidir_norm_beta;  // [d] pre-norm of the bidirectional stage
  MambaInnerWeights fwd, bwd;
  ConvModuleWeights conv;
  FeedForwardWeights ffn2;
  Tensor final_norm_gamma, final_norm_beta;  // [d]

  static ConMambaBlockWeights init(int64_t d_model, int64_t d_inner, int64_t d_state,
                                   int64_t ssm_conv_kernel, int64_t conv_kernel,
                                   int64_t ffn_mult, Rng& rng, Dtype dt);
};

/**
 * Macaron order, every stage residual:
 *   x + 1/2 FFN -> + bidirectional Mamba -> + conv module -> + 1/2 FFN -> final norm.
 * Norms inside this block are mean-centered layer norms.
 */
Tensor conmamba_block_forward(const Tensor& x, const ConMambaBlockWeights& w,
                              GradTape* tape = nullptr);

// ============================================================================
// CNN frontend + encoder stack
// ============================================================================

struct FrontendWeights {
  Tensor conv1_w, conv1_b;  // [c1,1,3,3], [c1]; stride 2, pad 1
  Tensor conv2_w, conv2_b;  // [c2,c1,3,3], [c2]
  Tensor proj_w, proj_b;    // [d_model, c2*ceil(ceil(d_feat/2)/2)], [d_model]
  static FrontendWeights init(int64_t d_feat, int64_t d_model, int64_t c1, int64_t c2,
                              Rng& rng, Dtype dt);
};

struct EncoderConfig {
  int64_t n_layers = 12;
  int64_t d_model = 512;
  int64_t d_state = 16;
  int64_t d_feat = 80;
  int64_t frontend_c1 = 32;
  int64_t frontend_c2 = 32;
  int64_t expand = 2;          // d_inner = expand * d_model
  int64_t ssm_conv_kernel = 4;
  int64_t conv_kernel = 31;    // ConMamba conv module
  int64_t ffn_mult = 4;

  int64_t d_inner() const { return expand * d_model; }
  void validate() const;
  std::string to_json() const;
  static EncoderConfig from_json(const std::string& text);
};

struct EncoderWeights {
  FrontendWeights frontend;
  std::vector<ConMambaBlockWeights> layers;
  static EncoderWeights init(const EncoderConfig& cfg, Rng& rng, Dtype dt);
};

/** Frames per downsampling stage round up: T_c = ceil(ceil(T_f/2)/2). */
int64_t frontend_out_len(int64_t t_f);
/** Smallest T_f the frontend accepts (the total downsampling factor). */
constexpr int64_t kFrontendMinFrames = 4;

/**
 * features[T_f, d_feat] -> two strided conv stages (stride 2, SiLU) ->
 * time-major flatten -> linear -> [T_c, d_model].
 */
Tensor cnn_frontend(const Tensor& features, const FrontendWeights& w,
                    GradTape* tape = nullptr);

/** Frontend + n_layers ConMamba blocks over one segment, zero initial state. */
Tensor encoder_forward(const Tensor& features, const EncoderConfig& cfg,
                       const EncoderWeights& w, GradTape* tape = nullptr);

}  // namespace dssm
