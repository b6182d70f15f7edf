#pragma once

// ============================================================================
// Losses for state-token supervision + response generation, the staged
// component-freeze schedule, and a small Adam optimizer.
// ============================================================================

#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "dssm/checkpoint.hpp"
#include "dssm/ops.hpp"
#include "dssm/tensor.hpp"

namespace dssm {

// ============================================================================
// Losses
// ============================================================================

/** The two duplex loss terms and their sum. */
struct LossBreakdown {
  Tensor l1;     // scalar: state-token cross entropy
  Tensor l2;     // scalar: mean response cross entropy (zero when no response)
  Tensor total;  // scalar: l1 + l2
  int64_t j = -1;  // position of the state token in the sequence
};

/**
 * Mean cross entropy of the response span. logits[t] scores the token at
 * position t+1, so targets[i] is read against logits[prompt_len - 1 + i].
 * Empty targets are an error; callers with no response skip this term.
 */
Tensor response_loss(const Tensor& logits, std::span<const int64_t> targets,
                     int64_t prompt_len, GradTape* tape = nullptr);

/**
 * l1 = cross entropy of the state token (input position j) read from
 * logits[j - 1]; l2 = response_loss over targets (zero if targets is empty);
 * total = l1 + l2.
 */
LossBreakdown duplex_loss(const Tensor& logits, int64_t j, int64_t state_target,
                          std::span<const int64_t> targets, int64_t prompt_len,
                          GradTape* tape = nullptr);

/**
 * Same loss computed from pre-head hidden rows [T, d_model], pushing only the
 * needed positions through the output head. Matches duplex_loss on the full
 * logits matrix bit-for-bit in structure (identical op sequence per position).
 */
LossBreakdown duplex_loss_from_hidden(const Tensor& hidden, const LmWeights& w,
                                      int64_t j, int64_t state_target,
                                      std::span<const int64_t> targets,
                                      int64_t prompt_len, GradTape* tape = nullptr);

// ============================================================================
// Freeze schedule
// ============================================================================

/**
 * Trainable component prefixes ("encoder", "adapter", "lm") for each training
 * stage: 1 aligns the speech path, 2 and 3 teach the language model, 4
 * re-tunes the speech path. Throws on stages outside 1..4.
 */
std::set<std::string> trainable_components(int stage);

/** Component prefix of a dotted parameter name ("lm.head" -> "lm"). */
std::string component_of(const std::string& param_name);

/** True when the named parameter moves under the given stage's mask. */
bool is_trainable(const std::string& param_name, int stage);

/**
 * Zeroes gradients of parameters outside the trainable set. `grads` aligns
 * index-for-index with `params`. `override_components`, when non-empty,
 * replaces the stage's component set.
 */
void apply_freeze(const ParamMap& params, std::vector<Tensor>& grads, int stage,
                  const std::set<std::string>& override_components = {});

// ============================================================================
// Optimizer
// ============================================================================

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t noam_warmup = 0;  // > 0 switches on warmup/decay scaling of lr
};

/**
 * Warmup/decay factor, 1.0 at step == warmup: scales as step/warmup^1.5·√w
 * while warming up and as √(warmup/step) afterwards.
 */
double noam_factor(int64_t step, int64_t warmup);

/**
 * Adam over a fixed parameter list. Moments start at zero, so a parameter
 * whose gradient is exactly zero on every step never moves by a single bit.
 */
class Adam {
 public:
  Adam(ParamMap params, AdamConfig cfg);

  /** One update; grads align with the constructor's parameter order. */
  void step(const std::vector<Tensor>& grads);

  int64_t steps_taken() const { return t_; }
  const ParamMap& params() const { return params_; }

 private:
  ParamMap params_;
  AdamConfig cfg_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  int64_t t_ = 0;
};

/** Gradients for each param in order (zeros where the tape never reached). */
std::vector<Tensor> collect_grads(const GradTape& tape, const ParamMap& params);

// ============================================================================
// Training config (JSON)
// ============================================================================

struct TrainConfig {
  int stage = 3;
  double lr = 1e-3;
  int64_t steps = 100;
  uint64_t seed = 1;
  int64_t noam_warmup = 0;                // 0 = plain fixed lr
  std::set<std::string> trainable_override;  // empty = follow the stage mask

  void validate() const;
  std::string to_json() const;
  static TrainConfig from_json(const std::string& text);
};

}  // namespace dssm
