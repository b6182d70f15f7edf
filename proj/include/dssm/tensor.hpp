#pragma once

/**
 * Dense row-major tensor with a runtime dtype (f32 or f64).
 *
 * Every quantity in the engine (weights, activations, recurrent states,
 * gradients) lives in one of these. Storage is contiguous; there are no
 * strides or views. Ops that need typed hot loops grab ptr<T>() and
 * dispatch on dtype(); everything else goes through the double-valued
 * get/set accessors.
 */

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace dssm {

enum class Dtype : uint8_t { F32, F64 };

inline size_t dtype_size(Dtype dt) { return dt == Dtype::F32 ? 4 : 8; }
const char* dtype_name(Dtype dt);
Dtype dtype_from_name(std::string_view name);

void check(bool cond, const std::string& msg);

class GradTape;

class Tensor {
 public:
  Tensor() = default;
  Tensor(std::vector<int64_t> shape, Dtype dt);  // zero-filled

  static Tensor zeros(std::vector<int64_t> shape, Dtype dt);
  static Tensor full(std::vector<int64_t> shape, double value, Dtype dt);
  static Tensor scalar(double value, Dtype dt);
  static Tensor from_values(std::vector<int64_t> shape,
                            std::span<const double> values, Dtype dt);

  bool defined() const { return numel_ > 0; }
  const std::vector<int64_t>& shape() const { return shape_; }
  int64_t numel() const { return numel_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
  // Row/col of a rank-2 tensor; rank-1 is treated as a single row.
  int64_t rows() const;
  int64_t cols() const;
  Dtype dtype() const { return dtype_; }
  size_t byte_size() const { return static_cast<size_t>(numel_) * dtype_size(dtype_); }

  double get(int64_t i) const;
  void set(int64_t i, double v);
  double get2(int64_t r, int64_t c) const { return get(r * cols() + c); }
  void set2(int64_t r, int64_t c, double v) { set(r * cols() + c, v); }
  double item() const;  // value of a single-element tensor

  template <typename T> T* ptr();
  template <typename T> const T* ptr() const;

  std::vector<double> to_vector() const;
  Tensor astype(Dtype dt) const;
  Tensor clone() const { return *this; }

  bool all_finite() const;
  void append_bytes(std::vector<std::byte>& out) const;  // raw little-endian payload

  // Autodiff identity: set when an op recorded this tensor on a tape.
  int64_t tape_id() const { return tape_id_; }
  uint64_t tape_epoch() const { return tape_epoch_; }
  void set_tape_ref(int64_t id, uint64_t epoch) { tape_id_ = id; tape_epoch_ = epoch; }
  void clear_tape_ref() { tape_id_ = -1; tape_epoch_ = 0; }

 private:
  std::vector<int64_t> shape_;
  int64_t numel_ = 0;
  Dtype dtype_ = Dtype::F64;
  std::vector<float> f32_;
  std::vector<double> f64_;
  int64_t tape_id_ = -1;
  uint64_t tape_epoch_ = 0;
};

template <> inline float* Tensor::ptr<float>() { return f32_.data(); }
template <> inline double* Tensor::ptr<double>() { return f64_.data(); }
template <> inline const float* Tensor::ptr<float>() const { return f32_.data(); }
template <> inline const double* Tensor::ptr<double>() const { return f64_.data(); }

bool bitwise_equal(const Tensor& a, const Tensor& b);
bool allclose(const Tensor& a, const Tensor& b, double atol, double rtol = 0.0);

// ============================================================================
// Deterministic RNG
// ============================================================================

/**
 * SplitMix64-based generator. std::mt19937 would do, but the standard
 * distributions are implementation-defined; this keeps every seeded
 * artifact (datasets, weights, scenarios) byte-stable across toolchains.
 */
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}
  uint64_t next_u64();
  double uniform();                       // [0, 1)
  double uniform(double lo, double hi);
  int64_t uniform_int(int64_t lo, int64_t hi);  // inclusive range
  double normal();                        // Box-Muller, one value per call
  Rng fork(uint64_t stream);              // independent child stream

 private:
  uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

Tensor randn(std::vector<int64_t> shape, double stddev, Rng& rng, Dtype dt);
Tensor rand_uniform(std::vector<int64_t> shape, double lo, double hi, Rng& rng, Dtype dt);

uint64_t fnv1a(const std::byte* data, size_t n, uint64_t seed = 0xcbf29ce484222325ull);

}  // namespace dssm
