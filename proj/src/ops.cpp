#include "dssm/ops.hpp"

#include <atomic>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace dssm {

// ============================================================================
// GradTape
// ============================================================================

static std::atomic<uint64_t> g_tape_epoch{1};

GradTape::GradTape() : epoch_(g_tape_epoch.fetch_add(1)) {}

int64_t GradTape::watch(Tensor& t) {
  if (tracks(t)) return t.tape_id();
  Node leaf;
  leaf.shape = t.shape();
  leaf.dtype = t.dtype();
  nodes_.push_back(std::move(leaf));
  const int64_t id = static_cast<int64_t>(nodes_.size()) - 1;
  t.set_tape_ref(id, epoch_);
  return id;
}

int64_t GradTape::record(std::vector<int64_t> parents, BackwardFn backward,
                         Tensor& result) {
  Node node;
  node.parents = std::move(parents);
  node.backward = std::move(backward);
  node.shape = result.shape();
  node.dtype = result.dtype();
  nodes_.push_back(std::move(node));
  const int64_t id = static_cast<int64_t>(nodes_.size()) - 1;
  result.set_tape_ref(id, epoch_);
  return id;
}

void GradTape::backward(const Tensor& loss) {
  check(!ran_backward_, "GradTape::backward: tape already ran backward");
  check(tracks(loss), "GradTape::backward: loss was not recorded on this tape");
  check(loss.numel() == 1, "GradTape::backward: loss must hold a single element");
  grads_.assign(nodes_.size(), std::nullopt);
  const int64_t root = loss.tape_id();
  grads_[static_cast<size_t>(root)] =
      Tensor::full(nodes_[static_cast<size_t>(root)].shape, 1.0,
                   nodes_[static_cast<size_t>(root)].dtype);
  // Reverse creation order is a reverse topological order: every parent id is
  // smaller than its consumer's id. Each node is visited exactly once.
  for (int64_t i = root; i >= 0; --i) {
    const Node& node = nodes_[static_cast<size_t>(i)];
    if (!grads_[static_cast<size_t>(i)].has_value() || !node.backward) continue;
    std::vector<Tensor> pgrads = node.backward(*grads_[static_cast<size_t>(i)]);
    check(pgrads.size() == node.parents.size(),
          "GradTape::backward: op returned wrong parent-gradient count");
    for (size_t k = 0; k < pgrads.size(); ++k) {
      const int64_t p = node.parents[k];
      if (p < 0 || !pgrads[k].defined()) continue;
      auto& slot = grads_[static_cast<size_t>(p)];
      if (!slot.has_value()) {
        slot = std::move(pgrads[k]);
      } else {
        slot = add(*slot, pgrads[k]);
      }
    }
  }
  ran_backward_ = true;
}

Tensor GradTape::grad(const Tensor& t) const {
  check(ran_backward_, "GradTape::grad: call backward() first");
  check(tracks(t), "GradTape::grad: tensor is not on this tape");
  const auto& slot = grads_[static_cast<size_t>(t.tape_id())];
  if (slot.has_value()) return *slot;
  const Node& node = nodes_[static_cast<size_t>(t.tape_id())];
  return Tensor::zeros(node.shape, node.dtype);
}

// ============================================================================
// Validation helpers
// ============================================================================

static void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  check(a.dtype() == b.dtype(), std::string(op) + ": dtype mismatch");
}

static void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  check(a.shape() == b.shape(), std::string(op) + ": shape mismatch");
}

static int64_t parent_id(GradTape* tape, const Tensor& t) {
  return tape->tracks(t) ? t.tape_id() : -1;
}

static bool want_tape(GradTape* tape, std::initializer_list<const Tensor*> ins) {
  if (!tape) return false;
  for (const Tensor* t : ins) {
    if (tape->tracks(*t)) return true;
  }
  return false;
}

// ============================================================================
// Raw matmul kernels (shared by forwards and backward rules)
// ============================================================================

template <typename T>
static void mm_nn_kernel(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    for (int64_t l = 0; l < k; ++l) {
      const T ail = a[i * k + l];
      const T* bl = b + l * n;
      for (int64_t j = 0; j < n; ++j) ci[j] += ail * bl[j];
    }
  }
}

// c[i,j] = sum_l a[i,l] * b[j,l]   (b used transposed; rows dotted with rows)
template <typename T>
static void mm_nt_kernel(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const T* ai = a + i * k;
    for (int64_t j = 0; j < n; ++j) {
      const T* bj = b + j * k;
      T acc = 0;
      for (int64_t l = 0; l < k; ++l) acc += ai[l] * bj[l];
      c[i * n + j] = acc;
    }
  }
}

// c[l,j] = sum_i a[i,l] * b[i,j]   (a used transposed)
template <typename T>
static void mm_tn_kernel(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const T* ai = a + i * k;
    const T* bi = b + i * n;
    for (int64_t l = 0; l < k; ++l) {
      const T ail = ai[l];
      T* cl = c + l * n;
      for (int64_t j = 0; j < n; ++j) cl[j] += ail * bi[j];
    }
  }
}

static Tensor mat_nn(const Tensor& a, const Tensor& b) {
  const int64_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor c({m, n}, a.dtype());
  if (a.dtype() == Dtype::F32) {
    mm_nn_kernel<float>(a.ptr<float>(), b.ptr<float>(), c.ptr<float>(), m, k, n);
  } else {
    mm_nn_kernel<double>(a.ptr<double>(), b.ptr<double>(), c.ptr<double>(), m, k, n);
  }
  return c;
}

static Tensor mat_nt(const Tensor& a, const Tensor& b) {  // [m,k] x [n,k]^T
  const int64_t m = a.rows(), k = a.cols(), n = b.rows();
  Tensor c({m, n}, a.dtype());
  if (a.dtype() == Dtype::F32) {
    mm_nt_kernel<float>(a.ptr<float>(), b.ptr<float>(), c.ptr<float>(), m, k, n);
  } else {
    mm_nt_kernel<double>(a.ptr<double>(), b.ptr<double>(), c.ptr<double>(), m, k, n);
  }
  return c;
}

static Tensor mat_tn(const Tensor& a, const Tensor& b) {  // [m,k]^T x [m,n]
  const int64_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor c({k, n}, a.dtype());
  if (a.dtype() == Dtype::F32) {
    mm_tn_kernel<float>(a.ptr<float>(), b.ptr<float>(), c.ptr<float>(), m, k, n);
  } else {
    mm_tn_kernel<double>(a.ptr<double>(), b.ptr<double>(), c.ptr<double>(), m, k, n);
  }
  return c;
}

static Tensor col_sum(const Tensor& g) {  // [T,d] -> [d]
  Tensor out({g.cols()}, g.dtype());
  for (int64_t t = 0; t < g.rows(); ++t) {
    for (int64_t j = 0; j < g.cols(); ++j) out.set(j, out.get(j) + g.get2(t, j));
  }
  return out;
}

// ============================================================================
// Elementwise and arithmetic
// ============================================================================

template <typename T, typename F>
static Tensor map2(const Tensor& a, const Tensor& b, F f) {
  Tensor out(a.shape(), a.dtype());
  const T* pa = a.ptr<T>();
  const T* pb = b.ptr<T>();
  T* po = out.ptr<T>();
  for (int64_t i = 0; i < a.numel(); ++i) po[i] = f(pa[i], pb[i]);
  return out;
}

template <typename F>
static Tensor binary_forward(const Tensor& a, const Tensor& b, F f, const char* op) {
  require_same_dtype(a, b, op);
  require_same_shape(a, b, op);
  return a.dtype() == Dtype::F32 ? map2<float>(a, b, f) : map2<double>(a, b, f);
}

Tensor add(const Tensor& a, const Tensor& b, GradTape* tape) {
  Tensor y = binary_forward(a, b, [](auto x, auto z) { return x + z; }, "add");
  if (want_tape(tape, {&a, &b})) {
    tape->record({parent_id(tape, a), parent_id(tape, b)},
                 [](const Tensor& g) { return std::vector<Tensor>{g, g}; }, y);
  }
  return y;
}

Tensor sub(const Tensor& a, const Tensor& b, GradTape* tape) {
  Tensor y = binary_forward(a, b, [](auto x, auto z) { return x - z; }, "sub");
  if (want_tape(tape, {&a, &b})) {
    tape->record({parent_id(tape, a), parent_id(tape, b)},
                 [](const Tensor& g) {
                   return std::vector<Tensor>{g, scale(g, -1.0)};
                 },
                 y);
  }
  return y;
}

Tensor mul(const Tensor& a, const Tensor& b, GradTape* tape) {
  Tensor y = binary_forward(a, b, [](auto x, auto z) { return x * z; }, "mul");
  if (want_tape(tape, {&a, &b})) {
    tape->record({parent_id(tape, a), parent_id(tape, b)},
                 [a, b](const Tensor& g) {
                   return std::vector<Tensor>{mul(g, b), mul(g, a)};
                 },
                 y);
  }
  return y;
}

Tensor scale(const Tensor& a, double s, GradTape* tape) {
  Tensor y(a.shape(), a.dtype());
  for (int64_t i = 0; i < a.numel(); ++i) y.set(i, a.get(i) * s);
  if (want_tape(tape, {&a})) {
    tape->record({a.tape_id()},
                 [s](const Tensor& g) { return std::vector<Tensor>{scale(g, s)}; }, y);
  }
  return y;
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias, GradTape* tape) {
  require_same_dtype(x, bias, "add_row_bias");
  check(bias.rank() == 1, "add_row_bias: bias must be rank-1");
  check(x.cols() == bias.dim(0), "add_row_bias: width mismatch");
  Tensor y(x.shape(), x.dtype());
  for (int64_t t = 0; t < x.rows(); ++t) {
    for (int64_t j = 0; j < x.cols(); ++j) {
      y.set(t * x.cols() + j, x.get(t * x.cols() + j) + bias.get(j));
    }
  }
  if (want_tape(tape, {&x, &bias})) {
    const bool rank1 = x.rank() == 1;
    tape->record({parent_id(tape, x), parent_id(tape, bias)},
                 [rank1](const Tensor& g) {
                   Tensor db = rank1 ? g : col_sum(g);
                   return std::vector<Tensor>{g, std::move(db)};
                 },
                 y);
  }
  return y;
}

Tensor scale_rows(const Tensor& x, const Tensor& s, GradTape* tape) {
  require_same_dtype(x, s, "scale_rows");
  check(x.rank() == 2 && s.rank() == 1 && s.dim(0) == x.rows(),
        "scale_rows: expected x[m,n], s[m]");
  Tensor y(x.shape(), x.dtype());
  for (int64_t i = 0; i < x.rows(); ++i) {
    const double si = s.get(i);
    for (int64_t j = 0; j < x.cols(); ++j) y.set2(i, j, x.get2(i, j) * si);
  }
  if (want_tape(tape, {&x, &s})) {
    tape->record({parent_id(tape, x), parent_id(tape, s)},
                 [x, s](const Tensor& g) {
                   Tensor dx = scale_rows(g, s);
                   Tensor ds({s.dim(0)}, s.dtype());
                   for (int64_t i = 0; i < x.rows(); ++i) {
                     double acc = 0;
                     for (int64_t j = 0; j < x.cols(); ++j) acc += g.get2(i, j) * x.get2(i, j);
                     ds.set(i, acc);
                   }
                   return std::vector<Tensor>{std::move(dx), std::move(ds)};
                 },
                 y);
  }
  return y;
}

Tensor outer(const Tensor& u, const Tensor& v, GradTape* tape) {
  require_same_dtype(u, v, "outer");
  check(u.rank() == 1 && v.rank() == 1, "outer: expected rank-1 inputs");
  const int64_t m = u.dim(0), n = v.dim(0);
  Tensor y({m, n}, u.dtype());
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) y.set2(i, j, u.get(i) * v.get(j));
  }
  if (want_tape(tape, {&u, &v})) {
    tape->record({parent_id(tape, u), parent_id(tape, v)},
                 [u, v](const Tensor& g) {
                   Tensor du({u.dim(0)}, u.dtype());
                   Tensor dv({v.dim(0)}, v.dtype());
                   for (int64_t i = 0; i < u.dim(0); ++i) {
                     double acc = 0;
                     for (int64_t j = 0; j < v.dim(0); ++j) acc += g.get2(i, j) * v.get(j);
                     du.set(i, acc);
                   }
                   for (int64_t j = 0; j < v.dim(0); ++j) {
                     double acc = 0;
                     for (int64_t i = 0; i < u.dim(0); ++i) acc += g.get2(i, j) * u.get(i);
                     dv.set(j, acc);
                   }
                   return std::vector<Tensor>{std::move(du), std::move(dv)};
                 },
                 y);
  }
  return y;
}

// Numerically stable scalar kernels.
static double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
static double softplus_scalar(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

Tensor elementwise(Unary kind, const Tensor& x, GradTape* tape) {
  Tensor y(x.shape(), x.dtype());
  for (int64_t i = 0; i < x.numel(); ++i) {
    const double v = x.get(i);
    double r = 0;
    switch (kind) {
      case Unary::Relu: r = v > 0 ? v : 0; break;
      case Unary::Silu: r = v * sigmoid_scalar(v); break;
      case Unary::Softplus: r = softplus_scalar(v); break;
      case Unary::Exp: r = std::exp(v); break;
      case Unary::Sigmoid: r = sigmoid_scalar(v); break;
    }
    y.set(i, r);
  }
  if (want_tape(tape, {&x})) {
    tape->record({x.tape_id()},
                 [kind, x](const Tensor& g) {
                   Tensor dx(x.shape(), x.dtype());
                   for (int64_t i = 0; i < x.numel(); ++i) {
                     const double v = x.get(i);
                     double d = 0;
                     switch (kind) {
                       case Unary::Relu: d = v > 0 ? 1.0 : 0.0; break;
                       case Unary::Silu: {
                         const double s = sigmoid_scalar(v);
                         d = s + v * s * (1.0 - s);
                         break;
                       }
                       case Unary::Softplus: d = sigmoid_scalar(v); break;
                       case Unary::Exp: d = std::exp(v); break;
                       case Unary::Sigmoid: {
                         const double s = sigmoid_scalar(v);
                         d = s * (1.0 - s);
                         break;
                       }
                     }
                     dx.set(i, d * g.get(i));
                   }
                   return std::vector<Tensor>{std::move(dx)};
                 },
                 y);
  }
  return y;
}

Tensor relu(const Tensor& x, GradTape* tape) { return elementwise(Unary::Relu, x, tape); }
Tensor silu(const Tensor& x, GradTape* tape) { return elementwise(Unary::Silu, x, tape); }
Tensor softplus(const Tensor& x, GradTape* tape) { return elementwise(Unary::Softplus, x, tape); }
Tensor exp_op(const Tensor& x, GradTape* tape) { return elementwise(Unary::Exp, x, tape); }
Tensor sigmoid(const Tensor& x, GradTape* tape) { return elementwise(Unary::Sigmoid, x, tape); }

// ============================================================================
// Linear algebra
// ============================================================================

Tensor matmul(const Tensor& a, const Tensor& b, GradTape* tape) {
  require_same_dtype(a, b, "matmul");
  check(a.rank() == 2 && b.rank() == 2, "matmul: expected rank-2 operands");
  check(a.cols() == b.rows(), "matmul: inner extents mismatch");
  Tensor y = mat_nn(a, b);
  if (want_tape(tape, {&a, &b})) {
    tape->record({parent_id(tape, a), parent_id(tape, b)},
                 [a, b](const Tensor& g) {
                   return std::vector<Tensor>{mat_nt(g, b), mat_tn(a, g)};
                 },
                 y);
  }
  return y;
}

Tensor linear(const Tensor& x, const Tensor& w, GradTape* tape) {
  require_same_dtype(x, w, "linear");
  check(w.rank() == 2, "linear: weight must be rank-2 [out,in]");
  check(x.rank() == 1 || x.rank() == 2, "linear: input must be rank-1/2");
  check(x.cols() == w.cols(), "linear: input width does not match weight fan-in");
  const bool rank1 = x.rank() == 1;
  Tensor y = mat_nt(x, w);
  if (rank1) y = reshape(y, {w.dim(0)});
  if (want_tape(tape, {&x, &w})) {
    tape->record({parent_id(tape, x), parent_id(tape, w)},
                 [x, w, rank1](const Tensor& g) {
                   Tensor g2 = rank1 ? reshape(g, {1, g.dim(0)}) : g;
                   Tensor dx = mat_nn(g2, w);
                   if (rank1) dx = reshape(dx, {x.dim(0)});
                   Tensor x2 = rank1 ? reshape(x, {1, x.dim(0)}) : x;
                   Tensor dw = mat_tn(g2, x2);
                   return std::vector<Tensor>{std::move(dx), std::move(dw)};
                 },
                 y);
  }
  return y;
}

Tensor linear_bias(const Tensor& x, const Tensor& w, const Tensor& b, GradTape* tape) {
  return add_row_bias(linear(x, w, tape), b, tape);
}

// ============================================================================
// Convolutions
// ============================================================================

std::pair<Tensor, Tensor> causal_depthwise_conv1d(const Tensor& x, const Tensor& w,
                                                  const Tensor& b, const Tensor& state,
                                                  GradTape* tape) {
  require_same_dtype(x, w, "causal_depthwise_conv1d");
  require_same_dtype(x, b, "causal_depthwise_conv1d");
  require_same_dtype(x, state, "causal_depthwise_conv1d");
  check(x.rank() == 2 && w.rank() == 2, "causal_depthwise_conv1d: x[T,d], w[K,d]");
  const int64_t T = x.dim(0), d = x.dim(1), K = w.dim(0), S = K - 1;
  check(K >= 1, "causal_depthwise_conv1d: kernel must have at least one tap");
  check(w.dim(1) == d, "causal_depthwise_conv1d: channel-count mismatch");
  check(b.rank() == 1 && b.dim(0) == d, "causal_depthwise_conv1d: bias width mismatch");
  check(state.rank() == 2 && state.dim(0) == S && state.dim(1) == d,
        "causal_depthwise_conv1d: state must be [K-1,d]");
  check(T >= 1, "causal_depthwise_conv1d: empty input");

  // Extended input: [state; x]. y[t,c] reads K consecutive frames ending at x[t].
  Tensor xe({S + T, d}, x.dtype());
  for (int64_t t = 0; t < S; ++t)
    for (int64_t c = 0; c < d; ++c) xe.set2(t, c, state.get2(t, c));
  for (int64_t t = 0; t < T; ++t)
    for (int64_t c = 0; c < d; ++c) xe.set2(S + t, c, x.get2(t, c));

  Tensor y({T, d}, x.dtype());
  for (int64_t t = 0; t < T; ++t) {
    for (int64_t c = 0; c < d; ++c) {
      double acc = b.get(c);
      for (int64_t i = 0; i < K; ++i) acc += w.get2(i, c) * xe.get2(t + i, c);
      y.set2(t, c, acc);
    }
  }
  Tensor new_state({S, d}, x.dtype());
  for (int64_t t = 0; t < S; ++t)
    for (int64_t c = 0; c < d; ++c) new_state.set2(t, c, xe.get2(T + t, c));

  if (want_tape(tape, {&x, &w, &b})) {
    tape->record({parent_id(tape, x), parent_id(tape, w), parent_id(tape, b)},
                 [xe, w, T, K, S, d, dt = x.dtype()](const Tensor& g) {
                   Tensor dx({T, d}, dt);
                   for (int64_t u = 0; u < T; ++u) {
                     for (int64_t c = 0; c < d; ++c) {
                       double acc = 0;
                       for (int64_t i = 0; i < K; ++i) {
                         const int64_t t = u + S - i;
                         if (t >= 0 && t < T) acc += w.get2(i, c) * g.get2(t, c);
                       }
                       dx.set2(u, c, acc);
                     }
                   }
                   Tensor dw({K, d}, dt);
                   for (int64_t i = 0; i < K; ++i) {
                     for (int64_t c = 0; c < d; ++c) {
                       double acc = 0;
                       for (int64_t t = 0; t < T; ++t) acc += xe.get2(t + i, c) * g.get2(t, c);
                       dw.set2(i, c, acc);
                     }
                   }
                   return std::vector<Tensor>{std::move(dx), std::move(dw), col_sum(g)};
                 },
                 y);
  }
  return {std::move(y), std::move(new_state)};
}

Tensor depthwise_conv1d_same(const Tensor& x, const Tensor& w, const Tensor& b,
                             GradTape* tape) {
  require_same_dtype(x, w, "depthwise_conv1d_same");
  check(x.rank() == 2 && w.rank() == 2, "depthwise_conv1d_same: x[T,d], w[K,d]");
  const int64_t T = x.dim(0), d = x.dim(1), K = w.dim(0), P = (K - 1) / 2;
  check(K % 2 == 1, "depthwise_conv1d_same: kernel width must be odd");
  check(w.dim(1) == d, "depthwise_conv1d_same: channel-count mismatch");
  check(b.rank() == 1 && b.dim(0) == d, "depthwise_conv1d_same: bias width mismatch");

  Tensor y({T, d}, x.dtype());
  for (int64_t t = 0; t < T; ++t) {
    for (int64_t c = 0; c < d; ++c) {
      double acc = b.get(c);
      for (int64_t i = 0; i < K; ++i) {
        const int64_t u = t + i - P;
        if (u >= 0 && u < T) acc += w.get2(i, c) * x.get2(u, c);
      }
      y.set2(t, c, acc);
    }
  }
  if (want_tape(tape, {&x, &w, &b})) {
    tape->record({parent_id(tape, x), parent_id(tape, w), parent_id(tape, b)},
                 [x, w, T, K, P, d, dt = x.dtype()](const Tensor& g) {
                   Tensor dx({T, d}, dt);
                   Tensor dw({K, d}, dt);
                   for (int64_t t = 0; t < T; ++t) {
                     for (int64_t i = 0; i < K; ++i) {
                       const int64_t u = t + i - P;
                       if (u < 0 || u >= T) continue;
                       for (int64_t c = 0; c < d; ++c) {
                         dx.set2(u, c, dx.get2(u, c) + w.get2(i, c) * g.get2(t, c));
                         dw.set2(i, c, dw.get2(i, c) + x.get2(u, c) * g.get2(t, c));
                       }
                     }
                   }
                   return std::vector<Tensor>{std::move(dx), std::move(dw), col_sum(g)};
                 },
                 y);
  }
  return y;
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int64_t stride,
              int64_t pad, GradTape* tape) {
  require_same_dtype(x, w, "conv2d");
  check(x.rank() == 3 && w.rank() == 4, "conv2d: expected x[C,H,W], w[OC,C,kh,kw]");
  const int64_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const int64_t OC = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  check(w.dim(1) == C, "conv2d: channel-count mismatch");
  check(b.rank() == 1 && b.dim(0) == OC, "conv2d: bias width mismatch");
  check(stride >= 1 && pad >= 0, "conv2d: bad stride/pad");
  const int64_t OH = (H + 2 * pad - kh) / stride + 1;
  const int64_t OW = (W + 2 * pad - kw) / stride + 1;
  check(OH >= 1 && OW >= 1, "conv2d: output would be empty");

  auto x_at = [&](int64_t c, int64_t h, int64_t ww) -> double {
    if (h < 0 || h >= H || ww < 0 || ww >= W) return 0.0;
    return x.get((c * H + h) * W + ww);
  };
  Tensor y({OC, OH, OW}, x.dtype());
  for (int64_t oc = 0; oc < OC; ++oc) {
    for (int64_t oh = 0; oh < OH; ++oh) {
      for (int64_t ow = 0; ow < OW; ++ow) {
        double acc = b.get(oc);
        for (int64_t c = 0; c < C; ++c) {
          for (int64_t i = 0; i < kh; ++i) {
            for (int64_t j = 0; j < kw; ++j) {
              acc += w.get(((oc * C + c) * kh + i) * kw + j) *
                     x_at(c, oh * stride - pad + i, ow * stride - pad + j);
            }
          }
        }
        y.set((oc * OH + oh) * OW + ow, acc);
      }
    }
  }
  if (want_tape(tape, {&x, &w, &b})) {
    tape->record(
        {parent_id(tape, x), parent_id(tape, w), parent_id(tape, b)},
        [x, w, stride, pad, C, H, W, OC, kh, kw, OH, OW](const Tensor& g) {
          Tensor dx(x.shape(), x.dtype());
          Tensor dw(w.shape(), w.dtype());
          Tensor db({OC}, x.dtype());
          for (int64_t oc = 0; oc < OC; ++oc) {
            for (int64_t oh = 0; oh < OH; ++oh) {
              for (int64_t ow = 0; ow < OW; ++ow) {
                const double go = g.get((oc * OH + oh) * OW + ow);
                db.set(oc, db.get(oc) + go);
                for (int64_t c = 0; c < C; ++c) {
                  for (int64_t i = 0; i < kh; ++i) {
                    for (int64_t j = 0; j < kw; ++j) {
                      const int64_t h = oh * stride - pad + i;
                      const int64_t ww = ow * stride - pad + j;
                      if (h < 0 || h >= H || ww < 0 || ww >= W) continue;
                      const int64_t xi = (c * H + h) * W + ww;
                      const int64_t wi = ((oc * C + c) * kh + i) * kw + j;
                      dx.set(xi, dx.get(xi) + w.get(wi) * go);
                      dw.set(wi, dw.get(wi) + x.get(xi) * go);
                    }
                  }
                }
              }
            }
          }
          return std::vector<Tensor>{std::move(dx), std::move(dw), std::move(db)};
        },
        y);
  }
  return y;
}

Tensor chw_to_time_major(const Tensor& x, GradTape* tape) {
  check(x.rank() == 3, "chw_to_time_major: expected [C,H,W]");
  const int64_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  Tensor y({H, C * W}, x.dtype());
  for (int64_t c = 0; c < C; ++c)
    for (int64_t h = 0; h < H; ++h)
      for (int64_t ww = 0; ww < W; ++ww)
        y.set2(h, c * W + ww, x.get((c * H + h) * W + ww));
  if (want_tape(tape, {&x})) {
    tape->record({x.tape_id()},
                 [C, H, W, dt = x.dtype()](const Tensor& g) {
                   Tensor dx({C, H, W}, dt);
                   for (int64_t c = 0; c < C; ++c)
                     for (int64_t h = 0; h < H; ++h)
                       for (int64_t ww = 0; ww < W; ++ww)
                         dx.set((c * H + h) * W + ww, g.get2(h, c * W + ww));
                   return std::vector<Tensor>{std::move(dx)};
                 },
                 y);
  }
  return y;
}

// ============================================================================
// Normalization and losses
// ============================================================================

Tensor rms_norm(const Tensor& x, const Tensor& gamma, double eps, GradTape* tape) {
  require_same_dtype(x, gamma, "rms_norm");
  check(gamma.rank() == 1 && gamma.dim(0) == x.cols(), "rms_norm: gamma width mismatch");
  check(x.rank() == 1 || x.rank() == 2, "rms_norm: input must be rank-1/2");
  const int64_t T = x.rows(), d = x.cols();
  check(d >= 1, "rms_norm: empty rows");
  Tensor y(x.shape(), x.dtype());
  for (int64_t t = 0; t < T; ++t) {
    double s = 0;
    for (int64_t j = 0; j < d; ++j) {
      const double v = x.get(t * d + j);
      s += v * v;
    }
    const double r = std::sqrt(s / static_cast<double>(d) + eps);
    for (int64_t j = 0; j < d; ++j)
      y.set(t * d + j, x.get(t * d + j) * gamma.get(j) / r);
  }
  if (want_tape(tape, {&x, &gamma})) {
    tape->record(
        {parent_id(tape, x), parent_id(tape, gamma)},
        [x, gamma, eps, T, d](const Tensor& g) {
          Tensor dx(x.shape(), x.dtype());
          Tensor dgamma({d}, x.dtype());
          for (int64_t t = 0; t < T; ++t) {
            double s = 0;
            for (int64_t j = 0; j < d; ++j) {
              const double v = x.get(t * d + j);
              s += v * v;
            }
            const double r = std::sqrt(s / static_cast<double>(d) + eps);
            double dot = 0;  // sum_i g_i * gamma_i * x_i
            for (int64_t j = 0; j < d; ++j)
              dot += g.get(t * d + j) * gamma.get(j) * x.get(t * d + j);
            for (int64_t j = 0; j < d; ++j) {
              const double xv = x.get(t * d + j);
              const double gv = g.get(t * d + j);
              dx.set(t * d + j, gv * gamma.get(j) / r -
                                    xv * dot / (static_cast<double>(d) * r * r * r));
              dgamma.set(j, dgamma.get(j) + gv * xv / r);
            }
          }
          return std::vector<Tensor>{std::move(dx), std::move(dgamma)};
        },
        y);
  }
  return y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps, GradTape* tape) {
  require_same_dtype(x, gamma, "layer_norm");
  require_same_dtype(x, beta, "layer_norm");
  check(gamma.rank() == 1 && gamma.dim(0) == x.cols(), "layer_norm: gamma width mismatch");
  check(beta.rank() == 1 && beta.dim(0) == x.cols(), "layer_norm: beta width mismatch");
  check(x.rank() == 1 || x.rank() == 2, "layer_norm: input must be rank-1/2");
  const int64_t T = x.rows(), d = x.cols();
  check(d >= 1, "layer_norm: empty rows");
  Tensor y(x.shape(), x.dtype());
  for (int64_t t = 0; t < T; ++t) {
    double mu = 0;
    for (int64_t j = 0; j < d; ++j) mu += x.get(t * d + j);
    mu /= static_cast<double>(d);
    double var = 0;
    for (int64_t j = 0; j < d; ++j) {
      const double c = x.get(t * d + j) - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (int64_t j = 0; j < d; ++j) {
      const double xh = (x.get(t * d + j) - mu) * inv;
      y.set(t * d + j, gamma.get(j) * xh + beta.get(j));
    }
  }
  if (want_tape(tape, {&x, &gamma, &beta})) {
    tape->record(
        {parent_id(tape, x), parent_id(tape, gamma), parent_id(tape, beta)},
        [x, gamma, eps, T, d](const Tensor& g) {
          Tensor dx(x.shape(), x.dtype());
          Tensor dgamma({d}, x.dtype());
          Tensor dbeta({d}, x.dtype());
          for (int64_t t = 0; t < T; ++t) {
            double mu = 0;
            for (int64_t j = 0; j < d; ++j) mu += x.get(t * d + j);
            mu /= static_cast<double>(d);
            double var = 0;
            for (int64_t j = 0; j < d; ++j) {
              const double c = x.get(t * d + j) - mu;
              var += c * c;
            }
            var /= static_cast<double>(d);
            const double inv = 1.0 / std::sqrt(var + eps);
            double mean_a = 0, mean_axh = 0;
            std::vector<double> xh(static_cast<size_t>(d)), a(static_cast<size_t>(d));
            for (int64_t j = 0; j < d; ++j) {
              xh[static_cast<size_t>(j)] = (x.get(t * d + j) - mu) * inv;
              a[static_cast<size_t>(j)] = g.get(t * d + j) * gamma.get(j);
              mean_a += a[static_cast<size_t>(j)];
              mean_axh += a[static_cast<size_t>(j)] * xh[static_cast<size_t>(j)];
            }
            mean_a /= static_cast<double>(d);
            mean_axh /= static_cast<double>(d);
            for (int64_t j = 0; j < d; ++j) {
              dx.set(t * d + j, inv * (a[static_cast<size_t>(j)] - mean_a -
                                       xh[static_cast<size_t>(j)] * mean_axh));
              dgamma.set(j, dgamma.get(j) + g.get(t * d + j) * xh[static_cast<size_t>(j)]);
              dbeta.set(j, dbeta.get(j) + g.get(t * d + j));
            }
          }
          return std::vector<Tensor>{std::move(dx), std::move(dgamma), std::move(dbeta)};
        },
        y);
  }
  return y;
}

// Shared core: per-row softmax cross-entropy with max-shift.
static double ce_row(const Tensor& logits, int64_t row, int64_t target,
                     std::vector<double>* probs_out) {
  const int64_t V = logits.cols();
  double m = logits.get(row * V);
  for (int64_t j = 1; j < V; ++j) m = std::max(m, logits.get(row * V + j));
  double z = 0;
  for (int64_t j = 0; j < V; ++j) z += std::exp(logits.get(row * V + j) - m);
  if (probs_out) {
    probs_out->resize(static_cast<size_t>(V));
    for (int64_t j = 0; j < V; ++j)
      (*probs_out)[static_cast<size_t>(j)] = std::exp(logits.get(row * V + j) - m) / z;
  }
  return std::log(z) - (logits.get(row * V + target) - m);
}

Tensor cross_entropy(const Tensor& logits, int64_t target, GradTape* tape) {
  check(logits.rank() == 1, "cross_entropy: logits must be rank-1");
  const int64_t V = logits.dim(0);
  check(V >= 1, "cross_entropy: empty logits");
  check(target >= 0 && target < V, "cross_entropy: target out of range");
  Tensor loss = Tensor::scalar(ce_row(logits, 0, target, nullptr), logits.dtype());
  if (want_tape(tape, {&logits})) {
    tape->record({logits.tape_id()},
                 [logits, target, V](const Tensor& g) {
                   std::vector<double> probs;
                   ce_row(logits, 0, target, &probs);
                   Tensor dl({V}, logits.dtype());
                   const double gs = g.item();
                   for (int64_t j = 0; j < V; ++j) {
                     double v = probs[static_cast<size_t>(j)];
                     if (j == target) v -= 1.0;
                     dl.set(j, gs * v);
                   }
                   return std::vector<Tensor>{std::move(dl)};
                 },
                 loss);
  }
  return loss;
}

Tensor cross_entropy_mean(const Tensor& logits, std::span<const int64_t> targets,
                          GradTape* tape) {
  check(logits.rank() == 2, "cross_entropy_mean: logits must be rank-2 [n,V]");
  const int64_t n = logits.dim(0), V = logits.dim(1);
  check(n >= 1, "cross_entropy_mean: no rows");
  check(static_cast<int64_t>(targets.size()) == n,
        "cross_entropy_mean: target count does not match rows");
  double acc = 0;
  for (int64_t i = 0; i < n; ++i) {
    check(targets[static_cast<size_t>(i)] >= 0 && targets[static_cast<size_t>(i)] < V,
          "cross_entropy_mean: target out of range");
    acc += ce_row(logits, i, targets[static_cast<size_t>(i)], nullptr);
  }
  Tensor loss = Tensor::scalar(acc / static_cast<double>(n), logits.dtype());
  if (want_tape(tape, {&logits})) {
    std::vector<int64_t> tgt(targets.begin(), targets.end());
    tape->record({logits.tape_id()},
                 [logits, tgt, n, V](const Tensor& g) {
                   Tensor dl(logits.shape(), logits.dtype());
                   const double gs = g.item() / static_cast<double>(n);
                   std::vector<double> probs;
                   for (int64_t i = 0; i < n; ++i) {
                     ce_row(logits, i, tgt[static_cast<size_t>(i)], &probs);
                     for (int64_t j = 0; j < V; ++j) {
                       double v = probs[static_cast<size_t>(j)];
                       if (j == tgt[static_cast<size_t>(i)]) v -= 1.0;
                       dl.set2(i, j, gs * v);
                     }
                   }
                   return std::vector<Tensor>{std::move(dl)};
                 },
                 loss);
  }
  return loss;
}

Tensor sum_all(const Tensor& x, GradTape* tape) {
  double acc = 0;
  for (int64_t i = 0; i < x.numel(); ++i) acc += x.get(i);
  Tensor y = Tensor::scalar(acc, x.dtype());
  if (want_tape(tape, {&x})) {
    tape->record({x.tape_id()},
                 [shape = x.shape(), dt = x.dtype()](const Tensor& g) {
                   return std::vector<Tensor>{Tensor::full(shape, g.item(), dt)};
                 },
                 y);
  }
  return y;
}

Tensor mean_all(const Tensor& x, GradTape* tape) {
  check(x.numel() >= 1, "mean_all: empty tensor");
  const double n = static_cast<double>(x.numel());
  double acc = 0;
  for (int64_t i = 0; i < x.numel(); ++i) acc += x.get(i);
  Tensor y = Tensor::scalar(acc / n, x.dtype());
  if (want_tape(tape, {&x})) {
    tape->record({x.tape_id()},
                 [shape = x.shape(), dt = x.dtype(), n](const Tensor& g) {
                   return std::vector<Tensor>{Tensor::full(shape, g.item() / n, dt)};
                 },
                 y);
  }
  return y;
}

// ============================================================================
// Shape ops
// ============================================================================

Tensor reshape(const Tensor& x, std::vector<int64_t> new_shape, GradTape* tape) {
  Tensor y(new_shape, x.dtype());
  check(y.numel() == x.numel(), "reshape: element count mismatch");
  for (int64_t i = 0; i < x.numel(); ++i) y.set(i, x.get(i));
  if (want_tape(tape, {&x})) {
    tape->record({x.tape_id()},
                 [shape = x.shape()](const Tensor& g) {
                   return std::vector<Tensor>{reshape(g, shape)};
                 },
                 y);
  }
  return y;
}

Tensor concat_rows(std::span<const Tensor> parts, GradTape* tape) {
  check(!parts.empty(), "concat_rows: nothing to concatenate");
  const int64_t d = parts[0].cols();
  const Dtype dt = parts[0].dtype();
  int64_t total = 0;
  for (const Tensor& p : parts) {
    check(p.dtype() == dt, "concat_rows: dtype mismatch");
    check(p.cols() == d, "concat_rows: width mismatch");
    total += p.rows();
  }
  Tensor y({total, d}, dt);
  int64_t r = 0;
  for (const Tensor& p : parts) {
    for (int64_t t = 0; t < p.rows(); ++t, ++r)
      for (int64_t j = 0; j < d; ++j) y.set2(r, j, p.get(t * d + j));
  }
  bool tracked = false;
  if (tape) {
    for (const Tensor& p : parts) tracked = tracked || tape->tracks(p);
  }
  if (tracked) {
    std::vector<int64_t> ids;
    std::vector<std::vector<int64_t>> shapes;
    std::vector<int64_t> row_counts;
    for (const Tensor& p : parts) {
      ids.push_back(parent_id(tape, p));
      shapes.push_back(p.shape());
      row_counts.push_back(p.rows());
    }
    tape->record(std::move(ids),
                 [shapes, row_counts, d](const Tensor& g) {
                   std::vector<Tensor> out;
                   int64_t r0 = 0;
                   for (size_t k = 0; k < shapes.size(); ++k) {
                     Tensor gk = slice_rows(g, r0, r0 + row_counts[k]);
                     if (shapes[k].size() == 1) gk = reshape(gk, shapes[k]);
                     out.push_back(std::move(gk));
                     r0 += row_counts[k];
                   }
                   return out;
                 },
                 y);
  }
  return y;
}

Tensor slice_rows(const Tensor& x, int64_t r0, int64_t r1, GradTape* tape) {
  check(x.rank() == 2, "slice_rows: expected rank-2 input");
  check(0 <= r0 && r0 <= r1 && r1 <= x.dim(0), "slice_rows: range out of bounds");
  const int64_t d = x.dim(1);
  Tensor y({r1 - r0, d}, x.dtype());
  for (int64_t t = r0; t < r1; ++t)
    for (int64_t j = 0; j < d; ++j) y.set2(t - r0, j, x.get2(t, j));
  if (want_tape(tape, {&x})) {
    tape->record({x.tape_id()},
                 [shape = x.shape(), r0, d, dt = x.dtype()](const Tensor& g) {
                   Tensor dx(shape, dt);
                   for (int64_t t = 0; t < g.dim(0); ++t)
                     for (int64_t j = 0; j < d; ++j) dx.set2(r0 + t, j, g.get2(t, j));
                   return std::vector<Tensor>{std::move(dx)};
                 },
                 y);
  }
  return y;
}

Tensor split_cols(const Tensor& x, int64_t c0, int64_t c1, GradTape* tape) {
  check(x.rank() == 1 || x.rank() == 2, "split_cols: expected rank-1/2 input");
  check(0 <= c0 && c0 <= c1 && c1 <= x.cols(), "split_cols: range out of bounds");
  const int64_t T = x.rows(), d = x.cols(), w = c1 - c0;
  Tensor y = x.rank() == 1 ? Tensor({w}, x.dtype()) : Tensor({T, w}, x.dtype());
  for (int64_t t = 0; t < T; ++t)
    for (int64_t j = 0; j < w; ++j) y.set(t * w + j, x.get(t * d + c0 + j));
  if (want_tape(tape, {&x})) {
    tape->record({x.tape_id()},
                 [shape = x.shape(), c0, w, T, d, dt = x.dtype()](const Tensor& g) {
                   Tensor dx(shape, dt);
                   for (int64_t t = 0; t < T; ++t)
                     for (int64_t j = 0; j < w; ++j) dx.set(t * d + c0 + j, g.get(t * w + j));
                   return std::vector<Tensor>{std::move(dx)};
                 },
                 y);
  }
  return y;
}

Tensor reverse_rows(const Tensor& x, GradTape* tape) {
  check(x.rank() == 2, "reverse_rows: expected rank-2 input");
  const int64_t T = x.dim(0), d = x.dim(1);
  Tensor y({T, d}, x.dtype());
  for (int64_t t = 0; t < T; ++t)
    for (int64_t j = 0; j < d; ++j) y.set2(t, j, x.get2(T - 1 - t, j));
  if (want_tape(tape, {&x})) {
    tape->record({x.tape_id()},
                 [](const Tensor& g) { return std::vector<Tensor>{reverse_rows(g)}; }, y);
  }
  return y;
}

Tensor gather_rows(const Tensor& x, std::span<const int64_t> indices, GradTape* tape) {
  check(x.rank() == 2, "gather_rows: expected rank-2 input");
  const int64_t N = x.dim(0), d = x.dim(1);
  Tensor y({static_cast<int64_t>(indices.size()), d}, x.dtype());
  for (size_t k = 0; k < indices.size(); ++k) {
    const int64_t i = indices[k];
    check(i >= 0 && i < N, "gather_rows: index out of range");
    for (int64_t j = 0; j < d; ++j) y.set2(static_cast<int64_t>(k), j, x.get2(i, j));
  }
  if (want_tape(tape, {&x})) {
    std::vector<int64_t> idx(indices.begin(), indices.end());
    tape->record({x.tape_id()},
                 [idx, N, d, dt = x.dtype()](const Tensor& g) {
                   Tensor dx({N, d}, dt);  // duplicate indices accumulate
                   for (size_t k = 0; k < idx.size(); ++k)
                     for (int64_t j = 0; j < d; ++j)
                       dx.set2(idx[k], j, dx.get2(idx[k], j) + g.get2(static_cast<int64_t>(k), j));
                   return std::vector<Tensor>{std::move(dx)};
                 },
                 y);
  }
  return y;
}

// ============================================================================
// grad_check
// ============================================================================

double grad_check(const std::function<Tensor(GradTape*)>& f,
                  std::span<Tensor* const> params, double eps) {
  check(eps > 0, "grad_check: eps must be positive");
  GradTape tape;
  for (Tensor* p : params) {
    check(p != nullptr, "grad_check: null parameter");
    tape.watch(*p);
  }
  Tensor loss = f(&tape);
  check(loss.numel() == 1, "grad_check: loss must be a single element");
  check(std::isfinite(loss.item()), "grad_check: loss is not finite");
  tape.backward(loss);

  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (Tensor* p : params) {
    Tensor g = tape.grad(*p);
    check(g.all_finite(), "grad_check: analytic gradient is not finite");
    analytic.push_back(std::move(g));
  }

  double max_rel = 0;
  for (size_t k = 0; k < params.size(); ++k) {
    Tensor* p = params[k];
    for (int64_t i = 0; i < p->numel(); ++i) {
      const double orig = p->get(i);
      p->set(i, orig + eps);
      const double fp = f(nullptr).item();
      p->set(i, orig - eps);
      const double fm = f(nullptr).item();
      p->set(i, orig);
      check(std::isfinite(fp) && std::isfinite(fm),
            "grad_check: perturbed loss is not finite");
      const double num = (fp - fm) / (2.0 * eps);
      const double ana = analytic[k].get(i);
      const double denom = std::max({std::abs(ana), std::abs(num), 1e-8});
      max_rel = std::max(max_rel, std::abs(ana - num) / denom);
    }
  }
  return max_rel;
}

}  // namespace dssm
