#pragma once

#include <cmath>
#include <memory>

#include "ops.hpp"
#include "tensor.hpp"

namespace ressformer {

// Detach points are recordable and replayable so a finite-difference oracle
// can evaluate exactly the function the tape differentiates (values at the
// stop-gradient points held fixed while parameters move).
struct DetachLog {
  std::vector<std::vector<double>> values;
  size_t cursor = 0;
};

struct ForwardHooks {
  DetachLog* record = nullptr;
  const DetachLog* replay = nullptr;
};

inline Tensor hooked_detach(const Tensor& x, const ForwardHooks& hooks) {
  if (hooks.replay) {
    auto& log = *const_cast<DetachLog*>(hooks.replay);
    if (log.cursor >= log.values.size())
      throw std::logic_error("hooked_detach: replay log exhausted");
    const auto& vals = log.values[log.cursor++];
    if ((long)vals.size() != x.size())
      throw std::logic_error("hooked_detach: replay size mismatch");
    return Tensor::from(x.shape, vals);
  }
  Tensor d = x.detach();
  if (hooks.record) hooks.record->values.push_back(d.st->data);
  return d;
}

// Two-level memory for a batch of sequences: per-sequence token cache
// (detached previous hidden states) and an m-slot segment memory S.
// Footprint is O(n*d + m*d) per sequence, independent of the iteration count.
struct HierMemory {
  Tensor token_cache;  // [B*n x d] or undefined before the first update
  Tensor S;            // [B*m x d]
  Tensor alpha;        // [B*m] gate values of the latest update (empty at t=0)
  long batch = 1;
  long m = 0;
  int t = 0;  // updates applied so far
};

struct MemoryParams {
  Tensor pool_q;  // [m x d]
  Tensor gate_w;  // [2d x 1]
  Tensor gate_b;  // [1]
};

struct PoolTrace {
  std::vector<double> weights;  // [B*m x n], convex per row
};

// S_hat[s] = sum_i w_si h_i with w_s = softmax_i(pool_q_s . h_i / sqrt(d)),
// per sequence. Each output row is a convex combination of that sequence's
// input rows.
inline Tensor pool_segment(const Tensor& h, const Tensor& pool_q, long batch,
                           PoolTrace* trace = nullptr) {
  check_2d(h, "pool_segment");
  check_2d(pool_q, "pool_segment");
  long d = h.dim(1);
  if (pool_q.dim(1) != d)
    throw std::invalid_argument("pool_segment: width mismatch " + shape_str(h.shape) + " vs " +
                                shape_str(pool_q.shape));
  if (h.dim(0) % batch || h.dim(0) == 0)
    throw std::invalid_argument("pool_segment: rows " + std::to_string(h.dim(0)) +
                                " not a positive multiple of batch " + std::to_string(batch));
  long n = h.dim(0) / batch, m = pool_q.dim(0);
  double inv_sqrt = 1.0 / std::sqrt((double)d);

  Tensor out = Tensor::zeros({batch * m, d});
  auto weights = std::make_shared<std::vector<double>>(batch * m * n);
  std::vector<double> srow(n);
  for (long b = 0; b < batch; ++b) {
    for (long s = 0; s < m; ++s) {
      const double* q = pool_q.data() + s * d;
      double mx = -1e300;
      for (long i = 0; i < n; ++i) {
        const double* hi = h.data() + (b * n + i) * d;
        double v = 0;
        for (long c = 0; c < d; ++c) v += q[c] * hi[c];
        srow[i] = v * inv_sqrt;
        mx = std::max(mx, srow[i]);
      }
      double z = 0;
      for (long i = 0; i < n; ++i) {
        srow[i] = std::exp(srow[i] - mx);
        z += srow[i];
      }
      double* w = weights->data() + (b * m + s) * n;
      double* o = out.data() + (b * m + s) * d;
      for (long i = 0; i < n; ++i) {
        w[i] = srow[i] / z;
        const double* hi = h.data() + (b * n + i) * d;
        for (long c = 0; c < d; ++c) o[c] += w[i] * hi[c];
      }
    }
  }
  if (trace) trace->weights = *weights;

  Tensor H = h, Q = pool_q, O = out;
  return mark_op(out, {&h, &pool_q}, [H, Q, O, weights, batch, n, m, d, inv_sqrt]() mutable {
    if (!O.has_grad()) return;
    bool gh = wants_grad(H), gq = wants_grad(Q);
    if (gh) H.ensure_grad();
    if (gq) Q.ensure_grad();
    std::vector<double> dw(n), ds(n);
    for (long b = 0; b < batch; ++b) {
      for (long s = 0; s < m; ++s) {
        const double* go = O.st->grad.data() + (b * m + s) * d;
        const double* w = weights->data() + (b * m + s) * n;
        const double* q = Q.st->data.data() + s * d;
        double dot_wdw = 0;
        for (long i = 0; i < n; ++i) {
          const double* hi = H.st->data.data() + (b * n + i) * d;
          double acc = 0;
          for (long c = 0; c < d; ++c) acc += go[c] * hi[c];
          dw[i] = acc;  // value path: d out / d w_i
          if (gh) {
            double* hg = H.st->grad.data() + (b * n + i) * d;
            for (long c = 0; c < d; ++c) hg[c] += w[i] * go[c];
          }
          dot_wdw += w[i] * dw[i];
        }
        for (long i = 0; i < n; ++i) ds[i] = w[i] * (dw[i] - dot_wdw);  // softmax jvp
        for (long i = 0; i < n; ++i) {
          if (ds[i] == 0) continue;
          const double* hi = H.st->data.data() + (b * n + i) * d;
          if (gq) {
            double* qg = Q.st->grad.data() + s * d;
            for (long c = 0; c < d; ++c) qg[c] += ds[i] * hi[c] * inv_sqrt;
          }
          if (gh) {
            double* hg = H.st->grad.data() + (b * n + i) * d;
            for (long c = 0; c < d; ++c) hg[c] += ds[i] * q[c] * inv_sqrt;
          }
        }
      }
    }
  });
}

// S_new = alpha . S_prev + (1 - alpha) . S_hat, alpha = sigmoid of a linear
// map of [S_prev | S_hat], one scalar gate per slot broadcast over d.
// alpha_override is a test hook forcing the gate to a constant.
inline std::pair<Tensor, Tensor> gated_update(const Tensor& s_prev, const Tensor& s_hat,
                                              const MemoryParams& params,
                                              const double* alpha_override = nullptr) {
  if (s_prev.shape != s_hat.shape)
    throw std::invalid_argument("gated_update: shape mismatch " + shape_str(s_prev.shape) +
                                " vs " + shape_str(s_hat.shape));
  Tensor alpha;
  if (alpha_override) {
    alpha = Tensor::full({s_prev.dim(0)}, *alpha_override);
  } else {
    Tensor gate_in = concat_cols(s_prev, s_hat);
    alpha = sigmoid(add(matmul(gate_in, params.gate_w), params.gate_b));
  }
  Tensor s_new = add(scale_rows(s_prev, alpha), scale_rows(s_hat, affine(alpha, -1.0, 1.0)));
  return {s_new, alpha};
}

// Algorithm step: cache <- detached h; S <- gate(S_prev, pool(h)); the first
// update initializes S from the pooled summary directly.
inline HierMemory update_memory(const Tensor& h, const HierMemory& mem,
                                const MemoryParams& params, long batch,
                                const ForwardHooks& hooks = {}, PoolTrace* pool_trace = nullptr,
                                const double* alpha_override = nullptr) {
  HierMemory next;
  next.batch = batch;
  next.m = params.pool_q.dim(0);
  next.t = mem.t + 1;
  next.token_cache = hooked_detach(h, hooks);
  Tensor s_hat = pool_segment(h, params.pool_q, batch, pool_trace);
  if (mem.t == 0) {
    next.S = s_hat;
  } else {
    Tensor s_prev = hooked_detach(mem.S, hooks);
    auto [s_new, alpha] = gated_update(s_prev, s_hat, params, alpha_override);
    next.S = s_new;
    next.alpha = alpha;
  }
  return next;
}

// Extra key/value rows exposed to attention: per sequence, the token cache
// followed by the segment slots. Queries never come from memory rows.
inline Tensor memory_kv(const HierMemory& mem) {
  if (!mem.S.defined()) throw std::invalid_argument("memory_kv: memory not initialized");
  if (!mem.token_cache.defined() || mem.token_cache.size() == 0) return mem.S;
  return concat_rows_blocked(mem.token_cache, mem.S, mem.batch);
}

}  // namespace ressformer
