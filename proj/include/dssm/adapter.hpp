#pragma once

/**
 * Speech adapter: bridges encoder output into the language model's embedding
 * space and shortens the sequence on the way. Every k consecutive encoder
 * frames are concatenated into one wide vector (remainder frames dropped),
 * then a two-layer perceptron with ReLU maps it to d_lm. T_s = floor(T_c/k).
 */

#include "dssm/ops.hpp"
#include "dssm/tensor.hpp"

namespace dssm {

struct AdapterWeights {
  int64_t k = 5;  // frames concatenated per output embedding
  Tensor w1;      // [d_hidden, k*d_model]
  Tensor w2;      // [d_lm, d_hidden]

  int64_t d_model() const { return w1.dim(1) / k; }
  int64_t d_hidden() const { return w1.dim(0); }
  int64_t d_lm() const { return w2.dim(0); }
  void validate() const;
  /** d_hidden defaults to d_lm when 0 is passed. */
  static AdapterWeights init(int64_t k, int64_t d_model, int64_t d_lm,
                             int64_t d_hidden, Rng& rng, Dtype dt);
};

/** Speech-embedding rows ready to sit inside an LM prompt. */
struct SpeechEmbeddings {
  Tensor s;  // [T_s, d_lm]
};

/**
 * [T_c, d_model] -> [floor(T_c/k), k*d_model] by concatenating each group of
 * k consecutive rows; trailing remainder rows are dropped. Errors when
 * T_c < k (nothing to emit).
 */
Tensor downsample_concat(const Tensor& h, int64_t k, GradTape* tape = nullptr);

/** downsample_concat + w2 . relu(w1 . frame), bias-free. */
SpeechEmbeddings adapter_forward(const Tensor& h, const AdapterWeights& w,
                                 GradTape* tape = nullptr);

}  // namespace dssm
