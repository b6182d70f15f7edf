#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

// ============================================================================
// Tensor storage, elementwise ops, linear algebra, norms, losses, the
// gradient tape, and the optimizer-facing numerics. Expected values are
// either exact by construction or independently computed constants.
// ============================================================================

#include <cmath>

#include "dssm/ops.hpp"
#include "dssm/training.hpp"

using namespace dssm;

namespace {

Tensor from_values(std::vector<int64_t> shape, std::vector<double> v, Dtype dt) {
  Tensor t(std::move(shape), dt);
  REQUIRE(t.numel() == static_cast<int64_t>(v.size()));
  for (size_t i = 0; i < v.size(); ++i) t.set(static_cast<int64_t>(i), v[i]);
  return t;
}

}  // namespace

// ============================================================================
// Tensor basics
// ============================================================================

TEST_CASE("tensor shape, element access, and equality") {
  Tensor t({2, 3}, Dtype::F32);
  CHECK(t.numel() == 6);
  CHECK(t.dim(0) == 2);
  CHECK(t.dim(1) == 3);
  CHECK(t.rows() == 2);
  t.set2(1, 2, 5.5);
  CHECK(t.get2(1, 2) == doctest::Approx(5.5));
  CHECK(t.get(5) == doctest::Approx(5.5));  // row-major layout

  Tensor u = t.clone();
  CHECK(bitwise_equal(t, u));
  u.set2(0, 0, 1.0);
  CHECK(!bitwise_equal(t, u));
  CHECK(!bitwise_equal(t, Tensor({3, 2}, Dtype::F32)));  // same numel, new shape
}

TEST_CASE("dtype conversion and byte sizes") {
  Tensor a = from_values({3}, {1.0, -2.0, 0.5}, Dtype::F64);
  CHECK(a.byte_size() == 24);
  Tensor b = a.astype(Dtype::F32);
  CHECK(b.byte_size() == 12);
  CHECK(b.dtype() == Dtype::F32);
  for (int64_t i = 0; i < 3; ++i) CHECK(b.get(i) == doctest::Approx(a.get(i)));
  CHECK(dtype_size(Dtype::F32) == 4);
  CHECK(dtype_size(Dtype::F64) == 8);
  CHECK(dtype_from_name(dtype_name(Dtype::F64)) == Dtype::F64);
  CHECK_THROWS(dtype_from_name("f16"));
}

TEST_CASE("scalar construction and finiteness") {
  Tensor s = Tensor::scalar(2.5, Dtype::F64);
  CHECK(s.numel() == 1);
  CHECK(s.item() == doctest::Approx(2.5));
  CHECK(s.all_finite());
  s.set(0, std::numeric_limits<double>::infinity());
  CHECK(!s.all_finite());
}

TEST_CASE("deterministic rng and distribution sanity") {
  Rng a(42), b(42), c(43);
  CHECK(a.uniform_int(0, 1000) == b.uniform_int(0, 1000));
  bool diverged = false;
  for (int i = 0; i < 16 && !diverged; ++i) {
    diverged = a.uniform_int(0, 1000000) != c.uniform_int(0, 1000000);
  }
  CHECK(diverged);

  Rng r(7);
  double sum = 0, sq = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    sum += x;
    sq += x * x;
  }
  CHECK(std::abs(sum / n) < 0.05);        // mean near 0
  CHECK(std::abs(sq / n - 1.0) < 0.05);   // variance near 1
  for (int i = 0; i < 1000; ++i) {
    const int64_t v = r.uniform_int(3, 5);
    CHECK(v >= 3);
    CHECK(v <= 5);
  }

  Rng forked = r.fork(1);  // decorrelated child stream
  CHECK(forked.uniform_int(0, 1 << 30) != r.uniform_int(0, 1 << 30));
}

TEST_CASE("hash is the reference fnv1a-64") {
  CHECK(fnv1a(nullptr, 0) == 0xcbf29ce484222325ull);
  const std::byte a{0x61};  // 'a'
  CHECK(fnv1a(&a, 1) == 0xaf63dc4c8601ec8cull);
}

// ============================================================================
// Elementwise ops
// ============================================================================

TEST_CASE("unary op values at known points") {
  Tensor x = from_values({5}, {-2.0, -1.0, 0.0, 1.0, 2.0}, Dtype::F64);
  Tensor r = relu(x);
  CHECK(r.get(0) == 0.0);
  CHECK(r.get(4) == 2.0);
  CHECK(silu(x).get(2) == 0.0);                              // x * sigmoid(x) at 0
  CHECK(sigmoid(x).get(2) == doctest::Approx(0.5));
  CHECK(softplus(from_values({1}, {0.0}, Dtype::F64)).get(0) ==
        doctest::Approx(0.69314718055994529).epsilon(1e-15));  // log 2
  CHECK(exp_op(from_values({1}, {1.0}, Dtype::F64)).get(0) ==
        doctest::Approx(std::exp(1.0)).epsilon(1e-15));
  // softplus must not overflow for large arguments
  CHECK(softplus(from_values({1}, {800.0}, Dtype::F64)).get(0) ==
        doctest::Approx(800.0).epsilon(1e-12));
}

TEST_CASE("arithmetic ops and shape guards") {
  Tensor a = from_values({2, 2}, {1, 2, 3, 4}, Dtype::F64);
  Tensor b = from_values({2, 2}, {10, 20, 30, 40}, Dtype::F64);
  CHECK(add(a, b).get(3) == 44.0);
  CHECK(sub(b, a).get(0) == 9.0);
  CHECK(mul(a, b).get(1) == 40.0);
  CHECK(scale(a, -2.0).get(2) == -6.0);
  CHECK_THROWS(add(a, from_values({3}, {1, 2, 3}, Dtype::F64)));
  CHECK_THROWS(add(a, b.astype(Dtype::F32)));  // mixed precision is an error

  Tensor bias = from_values({2}, {100, 200}, Dtype::F64);
  Tensor ab = add_row_bias(a, bias);
  CHECK(ab.get2(0, 1) == 202.0);
  CHECK(ab.get2(1, 0) == 103.0);

  Tensor s = from_values({2}, {2, -1}, Dtype::F64);
  Tensor sr = scale_rows(a, s);
  CHECK(sr.get2(0, 1) == 4.0);
  CHECK(sr.get2(1, 0) == -3.0);

  Tensor o = outer(from_values({2}, {1, 2}, Dtype::F64),
                   from_values({3}, {3, 4, 5}, Dtype::F64));
  CHECK(o.dim(0) == 2);
  CHECK(o.dim(1) == 3);
  CHECK(o.get2(1, 2) == 10.0);
}

// ============================================================================
// Linear algebra
// ============================================================================

TEST_CASE("matmul and linear against hand values") {
  Tensor a = from_values({2, 2}, {1, 2, 3, 4}, Dtype::F64);
  Tensor b = from_values({2, 2}, {5, 6, 7, 8}, Dtype::F64);
  Tensor c = matmul(a, b);
  CHECK(c.get2(0, 0) == 19.0);
  CHECK(c.get2(0, 1) == 22.0);
  CHECK(c.get2(1, 0) == 43.0);
  CHECK(c.get2(1, 1) == 50.0);
  CHECK_THROWS(matmul(a, from_values({3, 2}, {0, 0, 0, 0, 0, 0}, Dtype::F64)));

  // linear contracts against the rows of w: y[i] = x . w[i]
  Tensor w = from_values({3, 2}, {1, 0, 0, 1, 1, 1}, Dtype::F64);
  Tensor x = from_values({2}, {2, 5}, Dtype::F64);
  Tensor y = linear(x, w);
  CHECK(y.dim(0) == 3);
  CHECK(y.get(0) == 2.0);
  CHECK(y.get(1) == 5.0);
  CHECK(y.get(2) == 7.0);

  Tensor xt = from_values({2, 2}, {2, 5, 1, 1}, Dtype::F64);
  Tensor yt = linear_bias(xt, w, from_values({3}, {10, 20, 30}, Dtype::F64));
  CHECK(yt.get2(0, 2) == 37.0);
  CHECK(yt.get2(1, 0) == 11.0);
}

// ============================================================================
// Convolutions
// ============================================================================

TEST_CASE("causal depthwise conv: identity tap, carried window, chunk equality") {
  const int64_t k = 4, d = 2, t = 6;
  // Last tap selects the current frame: w[k-1][.] = 1.
  Tensor w = Tensor::zeros({k, d}, Dtype::F64);
  w.set2(k - 1, 0, 1.0);
  w.set2(k - 1, 1, 1.0);
  Tensor bias = Tensor::zeros({d}, Dtype::F64);
  Rng rng(5);
  Tensor x = randn({t, d}, 1.0, rng, Dtype::F64);

  auto [y, st] = causal_depthwise_conv1d(x, w, bias, Tensor::zeros({k - 1, d}, Dtype::F64));
  CHECK(bitwise_equal(y, x));  // pure pass-through
  // The carried window is exactly the trailing K-1 input frames.
  for (int64_t i = 0; i < k - 1; ++i) {
    for (int64_t c = 0; c < d; ++c) {
      CHECK(st.get2(i, c) == x.get2(t - (k - 1) + i, c));
    }
  }

  // A shifting tap reads across the chunk boundary.
  Tensor w2 = Tensor::zeros({k, d}, Dtype::F64);
  w2.set2(0, 0, 1.0);  // channel 0 reads x[t-3]
  w2.set2(3, 1, 1.0);  // channel 1 reads x[t]
  auto [full, fs] = causal_depthwise_conv1d(x, w2, bias, Tensor::zeros({k - 1, d}, Dtype::F64));
  auto [y1, s1] = causal_depthwise_conv1d(slice_rows(x, 0, 2), w2, bias,
                                          Tensor::zeros({k - 1, d}, Dtype::F64));
  auto [y2, s2] = causal_depthwise_conv1d(slice_rows(x, 2, t), w2, bias, s1);
  for (int64_t i = 0; i < 2; ++i)
    for (int64_t c = 0; c < d; ++c) CHECK(y1.get2(i, c) == full.get2(i, c));
  for (int64_t i = 0; i < t - 2; ++i)
    for (int64_t c = 0; c < d; ++c) CHECK(y2.get2(i, c) == full.get2(2 + i, c));
  CHECK(bitwise_equal(s2, fs));
}

TEST_CASE("same-padded depthwise conv centers the kernel") {
  // K=3 identity at the center tap leaves the signal unchanged.
  Tensor w = Tensor::zeros({3, 1}, Dtype::F64);
  w.set2(1, 0, 1.0);
  Tensor x = from_values({4, 1}, {1, 2, 3, 4}, Dtype::F64);
  Tensor y = depthwise_conv1d_same(x, w, Tensor::zeros({1}, Dtype::F64));
  CHECK(bitwise_equal(y, x));

  // An off-center tap shifts and zero-pads at the edge.
  Tensor wl = Tensor::zeros({3, 1}, Dtype::F64);
  wl.set2(0, 0, 1.0);  // y[t] = x[t-1]
  Tensor yl = depthwise_conv1d_same(x, wl, Tensor::zeros({1}, Dtype::F64));
  CHECK(yl.get2(0, 0) == 0.0);
  CHECK(yl.get2(1, 0) == 1.0);
  CHECK(yl.get2(3, 0) == 3.0);
  CHECK_THROWS(depthwise_conv1d_same(x, Tensor::zeros({2, 1}, Dtype::F64),
                                     Tensor::zeros({1}, Dtype::F64)));  // even K
}

TEST_CASE("strided conv2d at known points") {
  // 1 channel, 4x4 ramp, 3x3 kernel that picks the center, stride 2, pad 1:
  // output (i,j) = x(2i, 2j).
  Tensor x({1, 4, 4}, Dtype::F64);
  for (int64_t i = 0; i < 16; ++i) x.set(i, static_cast<double>(i));
  Tensor w = Tensor::zeros({1, 1, 3, 3}, Dtype::F64);
  w.set(4, 1.0);  // center of the 3x3
  Tensor y = conv2d(x, w, Tensor::zeros({1}, Dtype::F64), 2, 1);
  CHECK(y.dim(0) == 1);
  CHECK(y.dim(1) == 2);
  CHECK(y.dim(2) == 2);
  CHECK(y.get(0) == 0.0);
  CHECK(y.get(1) == 2.0);
  CHECK(y.get(2) == 8.0);
  CHECK(y.get(3) == 10.0);

  Tensor tm = chw_to_time_major(y);
  CHECK(tm.dim(0) == 2);
  CHECK(tm.dim(1) == 2);
  CHECK(tm.get2(0, 0) == 0.0);
  CHECK(tm.get2(1, 0) == 8.0);
}

// ============================================================================
// Norms and losses
// ============================================================================

TEST_CASE("rms norm against the computed constant") {
  Tensor x = from_values({1, 2}, {3.0, 4.0}, Dtype::F64);
  Tensor gamma = from_values({2}, {1.0, 1.0}, Dtype::F64);
  Tensor y = rms_norm(x, gamma, 0.0);
  CHECK(y.get2(0, 0) == doctest::Approx(0.84852813742385702).epsilon(1e-15));
  CHECK(y.get2(0, 1) == doctest::Approx(1.131370849898476).epsilon(1e-15));
  // gamma scales per column
  Tensor y2 = rms_norm(x, from_values({2}, {2.0, -1.0}, Dtype::F64), 0.0);
  CHECK(y2.get2(0, 0) == doctest::Approx(2 * 0.84852813742385702));
  CHECK(y2.get2(0, 1) == doctest::Approx(-1.131370849898476));
}

TEST_CASE("layer norm is shift-invariant; rms norm is not") {
  Rng rng(9);
  Tensor x = randn({3, 8}, 1.0, rng, Dtype::F64);
  Tensor shifted = add(x, from_values({3, 8}, std::vector<double>(24, 5.0), Dtype::F64));
  Tensor gamma = from_values({8}, std::vector<double>(8, 1.0), Dtype::F64);
  Tensor beta = Tensor::zeros({8}, Dtype::F64);
  CHECK(allclose(layer_norm(x, gamma, beta, 1e-6), layer_norm(shifted, gamma, beta, 1e-6),
                 1e-9));
  CHECK(!allclose(rms_norm(x, gamma, 1e-6), rms_norm(shifted, gamma, 1e-6), 1e-3));

  // Mean 0, variance 1 per row (up to eps).
  Tensor n = layer_norm(x, gamma, beta, 1e-12);
  for (int64_t i = 0; i < 3; ++i) {
    double m = 0, v = 0;
    for (int64_t j = 0; j < 8; ++j) m += n.get2(i, j);
    m /= 8;
    for (int64_t j = 0; j < 8; ++j) v += (n.get2(i, j) - m) * (n.get2(i, j) - m);
    CHECK(std::abs(m) < 1e-12);
    CHECK(v / 8 == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("cross entropy at the uniform point and under shift invariance") {
  Tensor logits = Tensor::zeros({10}, Dtype::F64);
  CHECK(cross_entropy(logits, 4).item() ==
        doctest::Approx(2.3025850929940459).epsilon(1e-15));  // log 10

  Rng rng(3);
  Tensor l = randn({6}, 1.0, rng, Dtype::F64);
  Tensor l_shift = add(l, from_values({6}, std::vector<double>(6, 123.0), Dtype::F64));
  CHECK(cross_entropy(l, 2).item() ==
        doctest::Approx(cross_entropy(l_shift, 2).item()).epsilon(1e-12));
  CHECK_THROWS(cross_entropy(l, 6));   // target out of range
  CHECK_THROWS(cross_entropy(l, -1));

  // A huge correct logit drives the loss to zero; stays finite either way.
  Tensor peak = Tensor::zeros({4}, Dtype::F64);
  peak.set(1, 1000.0);
  CHECK(cross_entropy(peak, 1).item() == doctest::Approx(0.0));
  CHECK(cross_entropy(peak, 0).item() == doctest::Approx(1000.0).epsilon(1e-9));

  Tensor rows = Tensor::zeros({2, 10}, Dtype::F64);
  const std::vector<int64_t> targets = {0, 9};
  CHECK(cross_entropy_mean(rows, targets).item() ==
        doctest::Approx(2.3025850929940459).epsilon(1e-15));
  CHECK_THROWS(cross_entropy_mean(rows, std::vector<int64_t>{0}));  // count mismatch
}

TEST_CASE("reductions") {
  Tensor x = from_values({2, 3}, {1, 2, 3, 4, 5, 6}, Dtype::F64);
  CHECK(sum_all(x).item() == 21.0);
  CHECK(mean_all(x).item() == doctest::Approx(3.5));
}

// ============================================================================
// Shape ops
// ============================================================================

TEST_CASE("reshape, concat, slice, split, reverse, gather") {
  Tensor x = from_values({2, 3}, {1, 2, 3, 4, 5, 6}, Dtype::F64);
  Tensor r = reshape(x, {3, 2});
  CHECK(r.get2(2, 1) == 6.0);
  CHECK_THROWS(reshape(x, {4, 2}));

  Tensor y = from_values({1, 3}, {7, 8, 9}, Dtype::F64);
  std::vector<Tensor> parts = {x, y};
  Tensor c = concat_rows(parts);
  CHECK(c.dim(0) == 3);
  CHECK(c.get2(2, 0) == 7.0);

  Tensor s = slice_rows(c, 1, 3);
  CHECK(s.dim(0) == 2);
  CHECK(s.get2(0, 0) == 4.0);
  CHECK(slice_rows(c, 2, 2).dim(0) == 0);  // empty range is legal
  CHECK_THROWS(slice_rows(c, 0, 4));
  CHECK_THROWS(slice_rows(c, 2, 1));

  Tensor sc = split_cols(x, 1, 3);
  CHECK(sc.dim(1) == 2);
  CHECK(sc.get2(1, 0) == 5.0);

  Tensor rev = reverse_rows(x);
  CHECK(rev.get2(0, 0) == 4.0);
  CHECK(rev.get2(1, 2) == 3.0);

  const std::vector<int64_t> idx = {1, 1, 0};
  Tensor g = gather_rows(x, idx);
  CHECK(g.dim(0) == 3);
  CHECK(g.get2(0, 0) == 4.0);
  CHECK(g.get2(2, 2) == 3.0);
  const std::vector<int64_t> bad = {2};
  CHECK_THROWS(gather_rows(x, bad));
}

// ============================================================================
// Gradient tape
// ============================================================================

TEST_CASE("tape: chain rule on a hand-checked expression") {
  // f = sum((a*b + a)^2); df/da = 2(ab+a)(b+1), df/db = 2(ab+a)a
  Tensor a = from_values({2}, {1.5, -2.0}, Dtype::F64);
  Tensor b = from_values({2}, {0.5, 3.0}, Dtype::F64);
  GradTape tape;
  tape.watch(a);
  tape.watch(b);
  Tensor u = add(mul(a, b, &tape), a, &tape);
  Tensor loss = sum_all(mul(u, u, &tape), &tape);
  tape.backward(loss);
  Tensor ga = tape.grad(a);
  Tensor gb = tape.grad(b);
  for (int64_t i = 0; i < 2; ++i) {
    const double av = a.get(i), bv = b.get(i), uv = av * bv + av;
    CHECK(ga.get(i) == doctest::Approx(2 * uv * (bv + 1)).epsilon(1e-12));
    CHECK(gb.get(i) == doctest::Approx(2 * uv * av).epsilon(1e-12));
  }
}

TEST_CASE("tape: constants, unreached leaves, and misuse") {
  Tensor w = from_values({2}, {1.0, 2.0}, Dtype::F64);
  Tensor c = from_values({2}, {3.0, 4.0}, Dtype::F64);  // never watched
  GradTape tape;
  tape.watch(w);
  Tensor loss = sum_all(mul(w, c, &tape), &tape);
  tape.backward(loss);
  CHECK(tape.grad(w).get(0) == 3.0);     // constants act as fixed coefficients
  CHECK_THROWS(tape.grad(c));            // never watched -> no gradient slot

  GradTape t2;
  Tensor reached = from_values({1}, {2.0}, Dtype::F64);
  Tensor unreached = from_values({3}, {1, 1, 1}, Dtype::F64);
  t2.watch(reached);
  t2.watch(unreached);
  Tensor l2 = sum_all(mul(reached, reached, &t2), &t2);
  t2.backward(l2);
  Tensor gu = t2.grad(unreached);        // watched but unused -> zeros
  CHECK(gu.dim(0) == 3);
  for (int64_t i = 0; i < 3; ++i) CHECK(gu.get(i) == 0.0);

  GradTape t3;
  Tensor x = from_values({2}, {1, 2}, Dtype::F64);
  t3.watch(x);
  Tensor vec = mul(x, x, &t3);
  CHECK_THROWS(t3.backward(vec));        // loss must be a single element
}

TEST_CASE("tape: gradients accumulate across reuse") {
  Tensor x = from_values({1}, {3.0}, Dtype::F64);
  GradTape tape;
  tape.watch(x);
  // f = x*x + x*x -> df/dx = 4x
  Tensor loss = add(mul(x, x, &tape), mul(x, x, &tape), &tape);
  tape.backward(loss);
  CHECK(tape.grad(x).item() == doctest::Approx(12.0));
}

TEST_CASE("finite differences cover each op family") {
  Rng rng(77);
  struct Case {
    const char* name;
    std::function<Tensor(std::vector<Tensor>&, GradTape*)> f;
    std::vector<std::vector<int64_t>> shapes;
  };
  const std::vector<Case> cases = {
      {"silu-matmul", [](std::vector<Tensor>& p, GradTape* t) {
         return mean_all(silu(matmul(p[0], p[1], t), t), t);
       }, {{3, 4}, {4, 2}}},
      {"rms-norm", [](std::vector<Tensor>& p, GradTape* t) {
         return mean_all(rms_norm(p[0], p[1], 1e-6, t), t);
       }, {{3, 5}, {5}}},
      {"layer-norm", [](std::vector<Tensor>& p, GradTape* t) {
         return mean_all(layer_norm(p[0], p[1], p[2], 1e-6, t), t);
       }, {{3, 5}, {5}, {5}}},
      {"softplus-sigmoid", [](std::vector<Tensor>& p, GradTape* t) {
         return sum_all(mul(softplus(p[0], t), sigmoid(p[1], t), t), t);
       }, {{6}, {6}}},
      {"conv2d", [](std::vector<Tensor>& p, GradTape* t) {
         return mean_all(conv2d(p[0], p[1], p[2], 2, 1, t), t);
       }, {{2, 5, 4}, {3, 2, 3, 3}, {3}}},
      {"causal-conv", [](std::vector<Tensor>& p, GradTape* t) {
         auto [y, st] = causal_depthwise_conv1d(p[0], p[1], p[2],
                                                Tensor::zeros({2, 3}, Dtype::F64), t);
         return mean_all(y, t);
       }, {{5, 3}, {3, 3}, {3}}},
      {"gather-reverse", [](std::vector<Tensor>& p, GradTape* t) {
         const std::vector<int64_t> idx = {0, 2, 2, 1};
         return sum_all(gather_rows(reverse_rows(p[0], t), idx, t), t);
       }, {{4, 3}}},
      {"cross-entropy-mean", [](std::vector<Tensor>& p, GradTape* t) {
         const std::vector<int64_t> targets = {1, 0, 3};
         return cross_entropy_mean(p[0], targets, t);
       }, {{3, 4}}},
  };
  for (const auto& c : cases) {
    CAPTURE(c.name);
    std::vector<Tensor> params;
    for (const auto& s : c.shapes) params.push_back(randn(s, 1.0, rng, Dtype::F64));
    std::vector<Tensor*> ptrs;
    for (auto& p : params) ptrs.push_back(&p);
    const double err =
        grad_check([&](GradTape* t) { return c.f(params, t); }, ptrs, 1e-5);
    CHECK(err < 1e-6);
  }
}

// ============================================================================
// Optimizer numerics
// ============================================================================

TEST_CASE("adam drives a quadratic to its optimum") {
  // f(x) = (x-3)^2 elementwise; gradient fed by hand each step.
  Tensor x = from_values({2}, {10.0, -4.0}, Dtype::F64);
  ParamMap params = {{"x", &x}};
  AdamConfig cfg;
  cfg.lr = 0.1;
  Adam opt(params, cfg);
  for (int i = 0; i < 200; ++i) {
    Tensor g({2}, Dtype::F64);
    for (int64_t j = 0; j < 2; ++j) g.set(j, 2 * (x.get(j) - 3.0));
    std::vector<Tensor> grads = {g};
    opt.step(grads);
  }
  for (int64_t j = 0; j < 2; ++j) {
    CHECK(std::abs(x.get(j) - 3.0) < 1e-2);
    CHECK((x.get(j) - 3.0) * (x.get(j) - 3.0) < 1e-4);
  }
  CHECK(opt.steps_taken() == 200);
}

TEST_CASE("adam: zero gradient leaves the parameter bit-identical") {
  Tensor x = from_values({3}, {1.0, -2.0, 0.25}, Dtype::F32);
  Tensor before = x.clone();
  ParamMap params = {{"x", &x}};
  Adam opt(params, AdamConfig{});
  for (int i = 0; i < 100; ++i) {
    std::vector<Tensor> grads = {Tensor::zeros({3}, Dtype::F32)};
    opt.step(grads);
  }
  CHECK(bitwise_equal(x, before));
}

TEST_CASE("adam rejects bad gradients") {
  Tensor x = from_values({2}, {1.0, 2.0}, Dtype::F64);
  ParamMap params = {{"x", &x}};
  Adam opt(params, AdamConfig{});
  Tensor bad({2}, Dtype::F64);
  bad.set(0, std::numeric_limits<double>::quiet_NaN());
  std::vector<Tensor> grads = {bad};
  CHECK_THROWS(opt.step(grads));
  std::vector<Tensor> wrong_shape = {Tensor::zeros({3}, Dtype::F64)};
  CHECK_THROWS(opt.step(wrong_shape));
}

TEST_CASE("warmup factor rises to one then decays") {
  const int64_t w = 100;
  CHECK(noam_factor(w, w) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(noam_factor(1, w) < noam_factor(50, w));
  CHECK(noam_factor(50, w) < noam_factor(100, w));
  CHECK(noam_factor(400, w) < noam_factor(100, w));
  CHECK(noam_factor(400, w) == doctest::Approx(0.5).epsilon(1e-12));  // 1/sqrt(4)
  CHECK_THROWS(noam_factor(10, 0));  // warmup must be positive
  CHECK_THROWS(noam_factor(0, w));   // steps are 1-based
}
