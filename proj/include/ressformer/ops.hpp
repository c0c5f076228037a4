#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>

#include "tensor.hpp"

extern "C" {
void openblas_set_num_threads(int);
void cblas_dgemm(int order, int transa, int transb, int m, int n, int k, double alpha,
                 const double* a, int lda, const double* b, int ldb, double beta, double* c,
                 int ldc);
}

namespace ressformer {

namespace blas {
constexpr int kRowMajor = 101;
constexpr int kNoTrans = 111;
constexpr int kTrans = 112;

inline void init_once() {
  static const bool done = [] {
    setenv("OPENBLAS_NUM_THREADS", "1", 0);
    openblas_set_num_threads(1);
    return true;
  }();
  (void)done;
}

// c[m x n] += a ( ta ? transposed ) * b ( tb ? transposed ), row-major.
inline void gemm_acc(bool ta, bool tb, long m, long n, long k, const double* a, const double* b,
                     double* c, double alpha = 1.0, double beta = 1.0) {
  init_once();
  cblas_dgemm(kRowMajor, ta ? kTrans : kNoTrans, tb ? kTrans : kNoTrans, (int)m, (int)n, (int)k,
              alpha, a, (int)(ta ? m : k), b, (int)(tb ? k : n), beta, c, (int)n);
}
}  // namespace blas

inline void check_2d(const Tensor& t, const char* op) {
  if (t.ndim() != 2)
    throw std::invalid_argument(std::string(op) + ": expected 2-d tensor, got " +
                                shape_str(t.shape));
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  check_2d(a, "matmul");
  check_2d(b, "matmul");
  if (a.dim(1) != b.dim(0))
    throw std::invalid_argument("matmul: inner extents differ, " + shape_str(a.shape) + " vs " +
                                shape_str(b.shape));
  long n = a.dim(0), k = a.dim(1), p = b.dim(1);
  Tensor out = Tensor::zeros({n, p});
  blas::gemm_acc(false, false, n, p, k, a.data(), b.data(), out.data(), 1.0, 0.0);
  Tensor A = a, B = b, O = out;
  return mark_op(out, {&a, &b}, [A, B, O, n, k, p]() mutable {
    if (!O.has_grad()) return;
    if (wants_grad(A)) {
      A.ensure_grad();
      blas::gemm_acc(false, true, n, k, p, O.grad(), B.data(), A.grad());
    }
    if (wants_grad(B)) {
      B.ensure_grad();
      blas::gemm_acc(true, false, k, p, n, A.data(), O.grad(), B.grad());
    }
  });
}

// a[n x k] * b[p x k]^T; used for the tied-embedding output head.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  check_2d(a, "matmul_nt");
  check_2d(b, "matmul_nt");
  if (a.dim(1) != b.dim(1))
    throw std::invalid_argument("matmul_nt: inner extents differ, " + shape_str(a.shape) +
                                " vs " + shape_str(b.shape));
  long n = a.dim(0), k = a.dim(1), p = b.dim(0);
  Tensor out = Tensor::zeros({n, p});
  blas::gemm_acc(false, true, n, p, k, a.data(), b.data(), out.data(), 1.0, 0.0);
  Tensor A = a, B = b, O = out;
  return mark_op(out, {&a, &b}, [A, B, O, n, k, p]() mutable {
    if (!O.has_grad()) return;
    if (wants_grad(A)) {
      A.ensure_grad();
      blas::gemm_acc(false, false, n, k, p, O.grad(), B.data(), A.grad());
    }
    if (wants_grad(B)) {
      B.ensure_grad();
      blas::gemm_acc(true, false, p, k, n, O.grad(), A.data(), B.grad());
    }
  });
}

// Leading-axis broadcast: the smaller shape must equal the trailing suffix of
// the larger; the smaller operand is repeated over the leading axes.
enum class Bcast { none, left, right };

inline Bcast bcast_kind(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return Bcast::none;
  auto suffix = [](const Shape& big, const Shape& small) {
    if (small.size() > big.size()) return false;
    return std::equal(small.rbegin(), small.rend(), big.rbegin());
  };
  if (suffix(a, b)) return Bcast::right;  // b broadcast
  if (suffix(b, a)) return Bcast::left;   // a broadcast
  throw std::invalid_argument(std::string(op) + ": shapes not broadcastable, " + shape_str(a) +
                              " vs " + shape_str(b));
}

template <class Fwd, class BwdA, class BwdB>
inline Tensor binary_elementwise(const char* name, const Tensor& a, const Tensor& b, Fwd fwd,
                                 BwdA dfa, BwdB dfb) {
  Bcast kind = bcast_kind(a.shape, b.shape, name);
  const Tensor& big = (kind == Bcast::left) ? b : a;
  const Tensor& small = (kind == Bcast::left) ? a : (kind == Bcast::right ? b : a);
  long nb = big.size(), ns = small.size();
  Tensor out = Tensor::zeros(big.shape);
  for (long i = 0; i < nb; ++i) {
    double av = (kind == Bcast::left) ? small.st->data[i % ns] : a.st->data[i];
    double bv = (kind == Bcast::right) ? small.st->data[i % ns] : b.st->data[i];
    out.st->data[i] = fwd(av, bv);
  }
  Tensor A = a, B = b, O = out;
  return mark_op(out, {&a, &b}, [A, B, O, kind, dfa, dfb]() mutable {
    if (!O.has_grad()) return;
    long nb = O.size();
    long nsA = A.size(), nsB = B.size();
    bool ga = wants_grad(A), gb = wants_grad(B);
    if (ga) A.ensure_grad();
    if (gb) B.ensure_grad();
    for (long i = 0; i < nb; ++i) {
      double av = (kind == Bcast::left) ? A.st->data[i % nsA] : A.st->data[i];
      double bv = (kind == Bcast::right) ? B.st->data[i % nsB] : B.st->data[i];
      double g = O.st->grad[i];
      if (ga) A.st->grad[(kind == Bcast::left) ? i % nsA : i] += g * dfa(av, bv);
      if (gb) B.st->grad[(kind == Bcast::right) ? i % nsB : i] += g * dfb(av, bv);
    }
  });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

template <class Fwd, class Dfn>
inline Tensor unary_elementwise(const Tensor& a, Fwd fwd, Dfn dfn) {
  Tensor out = Tensor::zeros(a.shape);
  long n = a.size();
  for (long i = 0; i < n; ++i) out.st->data[i] = fwd(a.st->data[i]);
  Tensor A = a, O = out;
  return mark_op(out, {&a}, [A, O, dfn]() mutable {
    if (!O.has_grad() || !wants_grad(A)) return;
    A.ensure_grad();
    long n = A.size();
    for (long i = 0; i < n; ++i) A.st->grad[i] += O.st->grad[i] * dfn(A.st->data[i]);
  });
}

inline double sigmoid_val(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline Tensor sigmoid(const Tensor& a) {
  return unary_elementwise(a, sigmoid_val, [](double x) {
    double s = sigmoid_val(x);
    return s * (1.0 - s);
  });
}

inline Tensor relu(const Tensor& a) {
  return unary_elementwise(a, [](double x) { return x > 0 ? x : 0.0; },
                           [](double x) { return x > 0 ? 1.0 : 0.0; });
}

// tanh approximation of gelu; the approximation is the definition here.
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

inline double gelu_val(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
}

inline double gelu_grad_val(double x) {
  double u = kGeluC * (x + kGeluA * x * x * x);
  double t = std::tanh(u);
  double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

inline Tensor gelu(const Tensor& a) { return unary_elementwise(a, gelu_val, gelu_grad_val); }

inline Tensor scale(const Tensor& a, double c) {
  return unary_elementwise(a, [c](double x) { return c * x; }, [c](double) { return c; });
}

// c0 * x + c1 elementwise; covers (1 - alpha) style gate complements.
inline Tensor affine(const Tensor& a, double c0, double c1) {
  return unary_elementwise(a, [c0, c1](double x) { return c0 * x + c1; },
                           [c0](double) { return c0; });
}

inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (x.ndim() < 1) throw std::invalid_argument("layer_norm: rank-0 input");
  long d = x.shape.back();
  if (gain.size() != d || bias.size() != d)
    throw std::invalid_argument("layer_norm: feature extent " + std::to_string(d) +
                                " does not match gain " + shape_str(gain.shape) + " / bias " +
                                shape_str(bias.shape));
  if (eps <= 0) throw std::invalid_argument("layer_norm: eps must be positive");
  long rows = x.size() / d;
  Tensor out = Tensor::zeros(x.shape);
  std::vector<double> inv_std(rows), xhat(x.size());
  for (long r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * d;
    double mean = 0;
    for (long j = 0; j < d; ++j) mean += xr[j];
    mean /= d;
    double var = 0;
    for (long j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= d;
    double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (long j = 0; j < d; ++j) {
      double xh = (xr[j] - mean) * is;
      xhat[r * d + j] = xh;
      out.st->data[r * d + j] = gain.st->data[j] * xh + bias.st->data[j];
    }
  }
  Tensor X = x, G = gain, Bi = bias, O = out;
  auto is_saved = std::make_shared<std::vector<double>>(std::move(inv_std));
  auto xh_saved = std::make_shared<std::vector<double>>(std::move(xhat));
  return mark_op(out, {&x, &gain, &bias}, [X, G, Bi, O, is_saved, xh_saved, rows, d]() mutable {
    if (!O.has_grad()) return;
    bool gx = wants_grad(X), gg = wants_grad(G), gb = wants_grad(Bi);
    if (gx) X.ensure_grad();
    if (gg) G.ensure_grad();
    if (gb) Bi.ensure_grad();
    for (long r = 0; r < rows; ++r) {
      const double* go = O.st->grad.data() + r * d;
      const double* xh = xh_saved->data() + r * d;
      if (gg)
        for (long j = 0; j < d; ++j) G.st->grad[j] += go[j] * xh[j];
      if (gb)
        for (long j = 0; j < d; ++j) Bi.st->grad[j] += go[j];
      if (gx) {
        double mean_h = 0, mean_hx = 0;
        for (long j = 0; j < d; ++j) {
          double h = go[j] * G.st->data[j];
          mean_h += h;
          mean_hx += h * xh[j];
        }
        mean_h /= d;
        mean_hx /= d;
        double is = (*is_saved)[r];
        for (long j = 0; j < d; ++j) {
          double h = go[j] * G.st->data[j];
          X.st->grad[r * d + j] += (h - mean_h - xh[j] * mean_hx) * is;
        }
      }
    }
  });
}

inline Tensor softmax_rows(const Tensor& x) {
  if (x.ndim() < 1) throw std::invalid_argument("softmax_rows: rank-0 input");
  long d = x.shape.back();
  long rows = x.size() / d;
  for (long i = 0; i < x.size(); ++i)
    if (std::isnan(x.st->data[i])) throw std::runtime_error("softmax_rows: NaN in input");
  Tensor out = Tensor::zeros(x.shape);
  for (long r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * d;
    double* pr = out.data() + r * d;
    double mx = xr[0];
    for (long j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
    double z = 0;
    for (long j = 0; j < d; ++j) {
      pr[j] = std::exp(xr[j] - mx);
      z += pr[j];
    }
    for (long j = 0; j < d; ++j) pr[j] /= z;
  }
  Tensor X = x, O = out;
  return mark_op(out, {&x}, [X, O, rows, d]() mutable {
    if (!O.has_grad() || !wants_grad(X)) return;
    X.ensure_grad();
    for (long r = 0; r < rows; ++r) {
      const double* p = O.st->data.data() + r * d;
      const double* g = O.st->grad.data() + r * d;
      double dot = 0;
      for (long j = 0; j < d; ++j) dot += p[j] * g[j];
      for (long j = 0; j < d; ++j) X.st->grad[r * d + j] += p[j] * (g[j] - dot);
    }
  });
}

inline Tensor sum(const Tensor& a) {
  double s = 0;
  for (long i = 0; i < a.size(); ++i) s += a.st->data[i];
  Tensor out = Tensor::scalar(s);
  Tensor A = a, O = out;
  return mark_op(out, {&a}, [A, O]() mutable {
    if (!O.has_grad() || !wants_grad(A)) return;
    A.ensure_grad();
    double g = O.st->grad[0];
    for (long i = 0; i < A.size(); ++i) A.st->grad[i] += g;
  });
}

// Weighted scalarization; used by gradient checks to probe all outputs.
inline Tensor weighted_sum(const Tensor& a, const std::vector<double>& w) {
  if ((long)w.size() != a.size())
    throw std::invalid_argument("weighted_sum: weight count mismatch for " + shape_str(a.shape));
  double s = 0;
  for (long i = 0; i < a.size(); ++i) s += w[i] * a.st->data[i];
  Tensor out = Tensor::scalar(s);
  Tensor A = a, O = out;
  auto ws = std::make_shared<std::vector<double>>(w);
  return mark_op(out, {&a}, [A, O, ws]() mutable {
    if (!O.has_grad() || !wants_grad(A)) return;
    A.ensure_grad();
    double g = O.st->grad[0];
    for (long i = 0; i < A.size(); ++i) A.st->grad[i] += g * (*ws)[i];
  });
}

// Rows of a 2-d matrix gathered by index; also serves as embedding lookup.
inline Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
  check_2d(table, "gather_rows");
  long v = table.dim(0), d = table.dim(1);
  for (int id : ids)
    if (id < 0 || id >= v)
      throw std::invalid_argument("gather_rows: index " + std::to_string(id) +
                                  " out of range for table " + shape_str(table.shape));
  long n = (long)ids.size();
  Tensor out = Tensor::zeros({n, d});
  for (long i = 0; i < n; ++i)
    std::memcpy(out.data() + i * d, table.data() + (long)ids[i] * d, sizeof(double) * d);
  Tensor T = table, O = out;
  auto idx = std::make_shared<std::vector<int>>(ids);
  return mark_op(out, {&table}, [T, O, idx, d]() mutable {
    if (!O.has_grad() || !wants_grad(T)) return;
    T.ensure_grad();
    for (long i = 0; i < (long)idx->size(); ++i) {
      const double* g = O.st->grad.data() + i * d;
      double* tg = T.st->grad.data() + (long)(*idx)[i] * d;
      for (long j = 0; j < d; ++j) tg[j] += g[j];
    }
  });
}

// [a | b] along columns for 2-d tensors with equal row counts.
inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
  check_2d(a, "concat_cols");
  check_2d(b, "concat_cols");
  if (a.dim(0) != b.dim(0))
    throw std::invalid_argument("concat_cols: row counts differ, " + shape_str(a.shape) + " vs " +
                                shape_str(b.shape));
  long r = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  Tensor out = Tensor::zeros({r, ca + cb});
  for (long i = 0; i < r; ++i) {
    std::memcpy(out.data() + i * (ca + cb), a.data() + i * ca, sizeof(double) * ca);
    std::memcpy(out.data() + i * (ca + cb) + ca, b.data() + i * cb, sizeof(double) * cb);
  }
  Tensor A = a, B = b, O = out;
  return mark_op(out, {&a, &b}, [A, B, O, r, ca, cb]() mutable {
    if (!O.has_grad()) return;
    bool ga = wants_grad(A), gb = wants_grad(B);
    if (ga) A.ensure_grad();
    if (gb) B.ensure_grad();
    for (long i = 0; i < r; ++i) {
      const double* g = O.st->grad.data() + i * (ca + cb);
      if (ga)
        for (long j = 0; j < ca; ++j) A.st->grad[i * ca + j] += g[j];
      if (gb)
        for (long j = 0; j < cb; ++j) B.st->grad[i * cb + j] += g[ca + j];
    }
  });
}

// Per-sequence row concatenation: a holds B blocks of ra rows, b holds B
// blocks of rb rows; output holds B blocks of (ra + rb) rows.
inline Tensor concat_rows_blocked(const Tensor& a, const Tensor& b, long nblocks) {
  check_2d(a, "concat_rows_blocked");
  check_2d(b, "concat_rows_blocked");
  if (a.dim(1) != b.dim(1) || a.dim(0) % nblocks || b.dim(0) % nblocks)
    throw std::invalid_argument("concat_rows_blocked: incompatible " + shape_str(a.shape) +
                                " vs " + shape_str(b.shape) + " for " + std::to_string(nblocks) +
                                " blocks");
  long d = a.dim(1), ra = a.dim(0) / nblocks, rb = b.dim(0) / nblocks;
  Tensor out = Tensor::zeros({nblocks * (ra + rb), d});
  for (long blk = 0; blk < nblocks; ++blk) {
    std::memcpy(out.data() + blk * (ra + rb) * d, a.data() + blk * ra * d,
                sizeof(double) * ra * d);
    std::memcpy(out.data() + (blk * (ra + rb) + ra) * d, b.data() + blk * rb * d,
                sizeof(double) * rb * d);
  }
  Tensor A = a, B_ = b, O = out;
  return mark_op(out, {&a, &b}, [A, B_, O, nblocks, ra, rb, d]() mutable {
    if (!O.has_grad()) return;
    bool ga = wants_grad(A), gb = wants_grad(B_);
    if (ga) A.ensure_grad();
    if (gb) B_.ensure_grad();
    for (long blk = 0; blk < nblocks; ++blk) {
      const double* g = O.st->grad.data() + blk * (ra + rb) * d;
      if (ga)
        for (long i = 0; i < ra * d; ++i) A.st->grad[blk * ra * d + i] += g[i];
      if (gb)
        for (long i = 0; i < rb * d; ++i) B_.st->grad[blk * rb * d + i] += g[ra * d + i];
    }
  });
}

// Each row of x scaled by the matching scalar of s (shape [rows] or [rows,1]).
inline Tensor scale_rows(const Tensor& x, const Tensor& s) {
  check_2d(x, "scale_rows");
  if (s.size() != x.dim(0))
    throw std::invalid_argument("scale_rows: scale count " + shape_str(s.shape) +
                                " does not match rows of " + shape_str(x.shape));
  long r = x.dim(0), d = x.dim(1);
  Tensor out = Tensor::zeros(x.shape);
  for (long i = 0; i < r; ++i)
    for (long j = 0; j < d; ++j) out.st->data[i * d + j] = x.st->data[i * d + j] * s.st->data[i];
  Tensor X = x, S = s, O = out;
  return mark_op(out, {&x, &s}, [X, S, O, r, d]() mutable {
    if (!O.has_grad()) return;
    bool gx = wants_grad(X), gs = wants_grad(S);
    if (gx) X.ensure_grad();
    if (gs) S.ensure_grad();
    for (long i = 0; i < r; ++i) {
      const double* g = O.st->grad.data() + i * d;
      if (gx)
        for (long j = 0; j < d; ++j) X.st->grad[i * d + j] += g[j] * S.st->data[i];
      if (gs) {
        double acc = 0;
        for (long j = 0; j < d; ++j) acc += g[j] * X.st->data[i * d + j];
        S.st->grad[i] += acc;
      }
    }
  });
}

inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add(matmul(x, w), b);
}

// Mean cross-entropy over rows whose target is >= 0; fused log-softmax.
inline Tensor cross_entropy_rows(const Tensor& logits, const std::vector<long>& targets) {
  check_2d(logits, "cross_entropy_rows");
  long rows = logits.dim(0), v = logits.dim(1);
  if ((long)targets.size() != rows)
    throw std::invalid_argument("cross_entropy_rows: " + std::to_string(targets.size()) +
                                " targets for " + shape_str(logits.shape));
  long counted = 0;
  double total = 0;
  std::vector<double> lse(rows), mx(rows);
  for (long r = 0; r < rows; ++r) {
    if (targets[r] < 0) continue;
    if (targets[r] >= v)
      throw std::invalid_argument("cross_entropy_rows: target " + std::to_string(targets[r]) +
                                  " out of range for " + shape_str(logits.shape));
    const double* z = logits.data() + r * v;
    double m = z[0];
    for (long j = 1; j < v; ++j) m = std::max(m, z[j]);
    double s = 0;
    for (long j = 0; j < v; ++j) s += std::exp(z[j] - m);
    mx[r] = m;
    lse[r] = m + std::log(s);
    total += lse[r] - z[targets[r]];
    ++counted;
  }
  if (counted == 0) throw std::invalid_argument("cross_entropy_rows: no scored rows");
  Tensor out = Tensor::scalar(total / counted);
  Tensor L = logits, O = out;
  auto tg = std::make_shared<std::vector<long>>(targets);
  auto lse_s = std::make_shared<std::vector<double>>(std::move(lse));
  return mark_op(out, {&logits}, [L, O, tg, lse_s, rows, v, counted]() mutable {
    if (!O.has_grad() || !wants_grad(L)) return;
    L.ensure_grad();
    double g = O.st->grad[0] / counted;
    for (long r = 0; r < rows; ++r) {
      if ((*tg)[r] < 0) continue;
      const double* z = L.st->data.data() + r * v;
      double* gr = L.st->grad.data() + r * v;
      for (long j = 0; j < v; ++j) gr[j] += g * std::exp(z[j] - (*lse_s)[r]);
      gr[(*tg)[r]] -= g;
    }
  });
}

}  // namespace ressformer
