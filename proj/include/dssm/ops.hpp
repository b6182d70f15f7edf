#pragma once

/**
 * Differentiable tensor operations and the reverse-mode gradient tape.
 *
 * Every op takes an optional GradTape*. With a null tape the op is a plain
 * forward computation (the inference path). With a tape, the op records a
 * node holding copies of whatever the backward rule needs; GradTape::backward
 * then walks the recorded nodes once, in reverse creation order (which is a
 * reverse topological order, since inputs always predate their consumers).
 *
 * Gradient accumulators are keyed by tensor identity: a tensor participates
 * in a tape when it carries that tape's id (assigned by watch() for leaves
 * or by the recording op for results). Tensors without a matching id are
 * treated as constants.
 */

#include <functional>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "dssm/tensor.hpp"

namespace dssm {

// ============================================================================
// GradTape
// ============================================================================

class GradTape {
 public:
  GradTape();
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  /** Registers a leaf (parameter or input) so gradients accumulate for it. */
  int64_t watch(Tensor& t);

  /** True when `t` carries an id issued by this tape. */
  bool tracks(const Tensor& t) const {
    return t.tape_id() >= 0 && t.tape_epoch() == epoch_;
  }

  /**
   * Records an op node. `parents` are the tape ids of the differentiable
   * inputs (-1 entries allowed for constants); `backward` maps the incoming
   * gradient to one gradient per parent (positionally aligned, undefined
   * Tensor for constant slots is permitted). Returns the new node id and
   * stamps `result` with it.
   */
  using BackwardFn = std::function<std::vector<Tensor>(const Tensor& grad_out)>;
  int64_t record(std::vector<int64_t> parents, BackwardFn backward, Tensor& result);

  /** Seeds d(loss)/d(loss) = 1 and propagates. `loss` must be single-element. */
  void backward(const Tensor& loss);

  /** Accumulated gradient for `t` (zeros of t's shape when none reached it). */
  Tensor grad(const Tensor& t) const;

  uint64_t epoch() const { return epoch_; }
  size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    std::vector<int64_t> parents;
    BackwardFn backward;          // null for leaves
    std::vector<int64_t> shape;   // of the node's output, for zero grads
    Dtype dtype;
  };
  std::vector<Node> nodes_;
  std::vector<std::optional<Tensor>> grads_;
  bool ran_backward_ = false;
  uint64_t epoch_;
};

// ============================================================================
// Elementwise and arithmetic ops
// ============================================================================

Tensor add(const Tensor& a, const Tensor& b, GradTape* tape = nullptr);
Tensor sub(const Tensor& a, const Tensor& b, GradTape* tape = nullptr);
Tensor mul(const Tensor& a, const Tensor& b, GradTape* tape = nullptr);
Tensor scale(const Tensor& a, double s, GradTape* tape = nullptr);
/** x[T,d] + row-broadcast bias[d] (rank-1 x treated as one row). */
Tensor add_row_bias(const Tensor& x, const Tensor& bias, GradTape* tape = nullptr);
/** Row i of x[m,n] scaled by s[i]. */
Tensor scale_rows(const Tensor& x, const Tensor& s, GradTape* tape = nullptr);
/** Outer product u[m] x v[n] -> [m,n]. */
Tensor outer(const Tensor& u, const Tensor& v, GradTape* tape = nullptr);

enum class Unary { Relu, Silu, Softplus, Exp, Sigmoid };
Tensor elementwise(Unary kind, const Tensor& x, GradTape* tape = nullptr);
Tensor relu(const Tensor& x, GradTape* tape = nullptr);
Tensor silu(const Tensor& x, GradTape* tape = nullptr);
Tensor softplus(const Tensor& x, GradTape* tape = nullptr);
Tensor exp_op(const Tensor& x, GradTape* tape = nullptr);
Tensor sigmoid(const Tensor& x, GradTape* tape = nullptr);

// ============================================================================
// Linear algebra
// ============================================================================

/** [m,k] x [k,n] -> [m,n]. */
Tensor matmul(const Tensor& a, const Tensor& b, GradTape* tape = nullptr);
/** y = x . w^T with w[out,in]; x may be [T,in] or rank-1 [in]. */
Tensor linear(const Tensor& x, const Tensor& w, GradTape* tape = nullptr);
Tensor linear_bias(const Tensor& x, const Tensor& w, const Tensor& b,
                   GradTape* tape = nullptr);

// ============================================================================
// Convolutions
// ============================================================================

/**
 * Depthwise causal conv over time. x[T,d], w[K,d], b[d]; `state` holds the
 * last K-1 input frames from earlier chunks (zeros at stream start).
 * Returns y[T,d] and the trailing K-1 frames of [state; x] as the new state.
 * Chunked application over any split of the time axis is bit-identical to a
 * single call. Gradients flow to x, w and b; the incoming state is constant.
 */
std::pair<Tensor, Tensor> causal_depthwise_conv1d(const Tensor& x, const Tensor& w,
                                                  const Tensor& b, const Tensor& state,
                                                  GradTape* tape = nullptr);

/** Depthwise conv with symmetric zero padding (odd K); offline segments. */
Tensor depthwise_conv1d_same(const Tensor& x, const Tensor& w, const Tensor& b,
                             GradTape* tape = nullptr);

/** x[C,H,W] * w[OC,C,kh,kw] + b[OC], one stride and zero-pad for both axes. */
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int64_t stride,
              int64_t pad, GradTape* tape = nullptr);

/** [C,H,W] -> [H, C*W] (time-major flatten of channels and width). */
Tensor chw_to_time_major(const Tensor& x, GradTape* tape = nullptr);

// ============================================================================
// Normalization and losses
// ============================================================================

/** Root-mean-square norm per row: y = x / sqrt(mean(x^2) + eps) * gamma. */
Tensor rms_norm(const Tensor& x, const Tensor& gamma, double eps,
                GradTape* tape = nullptr);
/** Mean-centered layer norm per row with affine gamma/beta. */
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps, GradTape* tape = nullptr);

/** -log softmax(logits)[target] for rank-1 logits[V]; max-shifted internally. */
Tensor cross_entropy(const Tensor& logits, int64_t target, GradTape* tape = nullptr);
/** Mean of per-row cross-entropy over logits[n,V] and targets[n]. */
Tensor cross_entropy_mean(const Tensor& logits, std::span<const int64_t> targets,
                          GradTape* tape = nullptr);

Tensor sum_all(const Tensor& x, GradTape* tape = nullptr);
Tensor mean_all(const Tensor& x, GradTape* tape = nullptr);

// ============================================================================
// Shape ops
// ============================================================================

Tensor reshape(const Tensor& x, std::vector<int64_t> new_shape, GradTape* tape = nullptr);
Tensor concat_rows(std::span<const Tensor> parts, GradTape* tape = nullptr);
Tensor slice_rows(const Tensor& x, int64_t r0, int64_t r1, GradTape* tape = nullptr);
Tensor split_cols(const Tensor& x, int64_t c0, int64_t c1, GradTape* tape = nullptr);
Tensor reverse_rows(const Tensor& x, GradTape* tape = nullptr);
/** Row gather; duplicate indices accumulate on the backward scatter-add. */
Tensor gather_rows(const Tensor& x, std::span<const int64_t> indices,
                   GradTape* tape = nullptr);

// ============================================================================
// Gradient verification
// ============================================================================

/**
 * Compares reverse-mode gradients of `f` against central finite differences,
 * elementwise over every tensor in `params`. `f` must build the scalar loss
 * from the current parameter values, recording on the given tape when one is
 * passed. Returns the max relative error with denominator
 * max(|analytic|, |numeric|, 1e-8). Throws if any value involved is not
 * finite. eps is the central-difference step (f64 parameters expected).
 */
double grad_check(const std::function<Tensor(GradTape*)>& f,
                  std::span<Tensor* const> params, double eps);

}  // namespace dssm
