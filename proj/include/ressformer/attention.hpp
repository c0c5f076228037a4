#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "ops.hpp"
#include "sparse.hpp"
#include "tensor.hpp"

namespace ressformer {

// Per-query key selection and per-token expert assignment for one forward.
struct RoutingDecision {
  std::vector<std::vector<int>> key_sets;     // per query, |set| = min(k_top, n_keys)
  std::vector<std::vector<int>> expert_sets;  // per token, |set| = e, ascending
  std::vector<std::vector<double>> gate_values;  // renormalized, aligned with expert_sets
  Tensor router_probs;                           // [tokens x E], full softmax (on tape)
  Tensor gates;                                  // [tokens x e], renormalized (on tape)
};

// Indices of the k largest entries per row; ties broken by lower index.
inline std::vector<std::vector<int>> select_topk(const double* scores, long n_q, long n_k,
                                                 long k_top) {
  if (k_top < 1) throw std::invalid_argument("select_topk: k_top must be >= 1");
  long k = std::min(k_top, n_k);
  std::vector<std::vector<int>> sets(n_q);
  std::vector<int> idx(n_k);
  for (long q = 0; q < n_q; ++q) {
    const double* row = scores + q * n_k;
    std::iota(idx.begin(), idx.end(), 0);
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [row](int a, int b) {
      if (row[a] != row[b]) return row[a] > row[b];
      return a < b;
    });
    sets[q].assign(idx.begin(), idx.begin() + k);
    std::sort(sets[q].begin(), sets[q].end());
  }
  return sets;
}

inline std::vector<std::vector<int>> select_topk(const Tensor& scores, long k_top) {
  check_2d(scores, "select_topk");
  return select_topk(scores.data(), scores.dim(0), scores.dim(1), k_top);
}

// Observability record for one (sequence, head) attention call.
struct AttnHeadTrace {
  std::vector<std::vector<int>> selected;   // I_i, ascending
  std::vector<std::vector<int>> support;    // subset of I_i with weight > 0
  std::vector<std::vector<double>> weights; // aligned with selected
  std::vector<char> empty_row;              // all candidates masked away
};

struct AttnTrace {
  // indexed [sequence][head]
  std::vector<std::vector<AttnHeadTrace>> heads;
};

// Multi-head attention with per-query top-k key selection and a sparse
// activation applied after restriction. One tape node; the backward rule
// composes the phi Jacobian-vector products.
//
//   q_cur/k_cur/v_cur: [B*n x d]   projections of the current tokens
//   k_mem/v_mem:       [B*nm x d]  projections of memory rows (optional)
//   bias:              [B*n x n]   additive scores for current-token keys only
//
// Keys for sequence b are its n current rows followed by its nm memory rows.
// Output is [B*n x d], heads concatenated (output projection is external).
inline Tensor sparse_attention(const Tensor& q_cur, const Tensor& k_cur, const Tensor& v_cur,
                               const Tensor* k_mem, const Tensor* v_mem, const Tensor* bias,
                               long batch, long n_heads, long k_top, Phi phi,
                               AttnTrace* trace = nullptr) {
  check_2d(q_cur, "sparse_attention");
  long d = q_cur.dim(1);
  if (d % n_heads)
    throw std::invalid_argument("sparse_attention: width " + std::to_string(d) +
                                " not divisible by " + std::to_string(n_heads) + " heads");
  if (q_cur.shape != k_cur.shape || q_cur.shape != v_cur.shape)
    throw std::invalid_argument("sparse_attention: q/k/v shapes differ: " +
                                shape_str(q_cur.shape) + " " + shape_str(k_cur.shape) + " " +
                                shape_str(v_cur.shape));
  if (q_cur.dim(0) % batch)
    throw std::invalid_argument("sparse_attention: rows " + std::to_string(q_cur.dim(0)) +
                                " not a multiple of batch " + std::to_string(batch));
  long n = q_cur.dim(0) / batch;
  long nm = 0;
  if (k_mem && k_mem->defined()) {
    if (!v_mem || !v_mem->defined() || k_mem->shape != v_mem->shape)
      throw std::invalid_argument("sparse_attention: memory k/v shapes differ");
    if (k_mem->dim(1) != d || k_mem->dim(0) % batch)
      throw std::invalid_argument("sparse_attention: bad memory shape " +
                                  shape_str(k_mem->shape));
    nm = k_mem->dim(0) / batch;
  }
  if (bias && bias->defined() &&
      (bias->dim(0) != batch * n || bias->dim(1) != n))
    throw std::invalid_argument("sparse_attention: bias shape " + shape_str(bias->shape) +
                                " does not match " + std::to_string(batch * n) + "x" +
                                std::to_string(n));
  if (k_top < 1) throw std::invalid_argument("sparse_attention: k_top must be >= 1");

  long dh = d / n_heads;
  long n_tot = n + nm;
  double inv_sqrt = 1.0 / std::sqrt((double)dh);
  const double neg_inf = -std::numeric_limits<double>::infinity();

  Tensor out = Tensor::zeros({batch * n, d});
  if (trace) trace->heads.assign(batch, std::vector<AttnHeadTrace>(n_heads));

  // Saved per (b, h, query): candidate indices and their weights.
  struct Saved {
    std::vector<int> cand;
    SparseDist dist;
  };
  auto saved = std::make_shared<std::vector<Saved>>(batch * n_heads * n);

  std::vector<double> srow(n_tot);
  for (long b = 0; b < batch; ++b) {
    for (long h = 0; h < n_heads; ++h) {
      AttnHeadTrace* ht = trace ? &trace->heads[b][h] : nullptr;
      if (ht) {
        ht->selected.resize(n);
        ht->support.resize(n);
        ht->weights.resize(n);
        ht->empty_row.assign(n, 0);
      }
      for (long i = 0; i < n; ++i) {
        const double* q = q_cur.data() + (b * n + i) * d + h * dh;
        for (long j = 0; j < n_tot; ++j) {
          const double* kj = (j < n) ? k_cur.data() + (b * n + j) * d + h * dh
                                     : k_mem->data() + (b * nm + (j - n)) * d + h * dh;
          double s = 0;
          for (long c = 0; c < dh; ++c) s += q[c] * kj[c];
          s *= inv_sqrt;
          if (bias && bias->defined() && j < n) s += bias->at(b * n + i, j);
          srow[j] = s;
        }
        auto sel = select_topk(srow.data(), 1, n_tot, k_top);
        Saved& sv = (*saved)[(b * n_heads + h) * n + i];
        std::vector<double> zs;
        for (int j : sel[0]) {
          if (srow[j] == neg_inf) continue;  // masked out; weight is exactly 0
          sv.cand.push_back(j);
          zs.push_back(srow[j]);
        }
        double* o = out.data() + (b * n + i) * d + h * dh;
        if (sv.cand.empty()) {
          if (ht) {
            ht->selected[i] = sel[0];
            ht->empty_row[i] = 1;
          }
          continue;  // defined result: zero output row
        }
        sv.dist = apply_phi(phi, zs);
        for (size_t c = 0; c < sv.cand.size(); ++c) {
          double w = sv.dist.probs[c];
          if (w == 0) continue;
          const double* vj = (sv.cand[c] < (int)n)
                                 ? v_cur.data() + (b * n + sv.cand[c]) * d + h * dh
                                 : v_mem->data() + (b * nm + (sv.cand[c] - n)) * d + h * dh;
          for (long cc = 0; cc < dh; ++cc) o[cc] += w * vj[cc];
        }
        if (ht) {
          ht->selected[i] = sel[0];
          ht->weights[i].assign(sel[0].size(), 0.0);
          size_t c = 0;
          for (size_t s = 0; s < sel[0].size(); ++s) {
            if (c < sv.cand.size() && sel[0][s] == sv.cand[c]) {
              ht->weights[i][s] = sv.dist.probs[c];
              if (sv.dist.probs[c] > 0) ht->support[i].push_back(sv.cand[c]);
              ++c;
            }
          }
        }
      }
    }
  }

  Tensor Q = q_cur, K = k_cur, V = v_cur, O = out;
  Tensor Km = (k_mem && k_mem->defined()) ? *k_mem : Tensor();
  Tensor Vm = (v_mem && v_mem->defined()) ? *v_mem : Tensor();
  Tensor Bi = (bias && bias->defined()) ? *bias : Tensor();
  return mark_op(out, {&q_cur, &k_cur, &v_cur, k_mem, v_mem, bias},
                 [Q, K, V, Km, Vm, Bi, O, saved, batch, n_heads, n, nm, dh, d, phi,
                  inv_sqrt]() mutable {
    if (!O.has_grad()) return;
    bool gq = wants_grad(Q), gk = wants_grad(K), gv = wants_grad(V);
    bool gkm = Km.defined() && wants_grad(Km), gvm = Vm.defined() && wants_grad(Vm);
    bool gb = Bi.defined() && wants_grad(Bi);
    if (gq) Q.ensure_grad();
    if (gk) K.ensure_grad();
    if (gv) V.ensure_grad();
    if (gkm) Km.ensure_grad();
    if (gvm) Vm.ensure_grad();
    if (gb) Bi.ensure_grad();
    std::vector<double> da, ds;
    for (long b = 0; b < batch; ++b) {
      for (long h = 0; h < n_heads; ++h) {
        for (long i = 0; i < n; ++i) {
          const Saved& sv = (*saved)[(b * n_heads + h) * n + i];
          if (sv.cand.empty()) continue;
          const double* go = O.st->grad.data() + (b * n + i) * d + h * dh;
          const double* q = Q.st->data.data() + (b * n + i) * d + h * dh;
          long nc = (long)sv.cand.size();
          da.assign(nc, 0.0);
          for (long c = 0; c < nc; ++c) {
            long j = sv.cand[c];
            const double* vj = (j < n) ? V.st->data.data() + (b * n + j) * d + h * dh
                                       : Vm.st->data.data() + (b * nm + (j - n)) * d + h * dh;
            double w = sv.dist.probs[c];
            double dot = 0;
            for (long cc = 0; cc < dh; ++cc) dot += go[cc] * vj[cc];
            da[c] = dot;
            if (w != 0) {
              if (j < n && gv) {
                double* vg = V.st->grad.data() + (b * n + j) * d + h * dh;
                for (long cc = 0; cc < dh; ++cc) vg[cc] += w * go[cc];
              } else if (j >= n && gvm) {
                double* vg = Vm.st->grad.data() + (b * nm + (j - n)) * d + h * dh;
                for (long cc = 0; cc < dh; ++cc) vg[cc] += w * go[cc];
              }
            }
          }
          ds = phi_jvp(phi, sv.dist, da);
          for (long c = 0; c < nc; ++c) {
            if (ds[c] == 0) continue;
            long j = sv.cand[c];
            const double* kj = (j < n) ? K.st->data.data() + (b * n + j) * d + h * dh
                                       : Km.st->data.data() + (b * nm + (j - n)) * d + h * dh;
            if (gq) {
              double* qg = Q.st->grad.data() + (b * n + i) * d + h * dh;
              for (long cc = 0; cc < dh; ++cc) qg[cc] += ds[c] * kj[cc] * inv_sqrt;
            }
            if (j < n && gk) {
              double* kg = K.st->grad.data() + (b * n + j) * d + h * dh;
              for (long cc = 0; cc < dh; ++cc) kg[cc] += ds[c] * q[cc] * inv_sqrt;
            } else if (j >= n && gkm) {
              double* kg = Km.st->grad.data() + (b * nm + (j - n)) * d + h * dh;
              for (long cc = 0; cc < dh; ++cc) kg[cc] += ds[c] * q[cc] * inv_sqrt;
            }
            if (gb && j < n) Bi.st->grad[(b * n + i) * n + j] += ds[c];
          }
        }
      }
    }
  });
}

// Gather chosen router probabilities and renormalize them to sum 1.
inline Tensor renorm_gather(const Tensor& probs, const std::vector<std::vector<int>>& sets) {
  check_2d(probs, "renorm_gather");
  long t_count = probs.dim(0), e_count = (long)sets.at(0).size();
  Tensor out = Tensor::zeros({t_count, e_count});
  for (long t = 0; t < t_count; ++t) {
    double s = 0;
    for (int j : sets[t]) s += probs.at(t, j);
    for (long c = 0; c < e_count; ++c) out.at(t, c) = probs.at(t, sets[t][c]) / s;
  }
  Tensor P = probs, O = out;
  auto sets_s = std::make_shared<std::vector<std::vector<int>>>(sets);
  return mark_op(out, {&probs}, [P, O, sets_s, t_count, e_count]() mutable {
    if (!O.has_grad() || !wants_grad(P)) return;
    P.ensure_grad();
    for (long t = 0; t < t_count; ++t) {
      const auto& set = (*sets_s)[t];
      double s = 0, mix = 0;
      for (int j : set) s += P.st->data[t * P.dim(1) + j];
      for (long c = 0; c < e_count; ++c)
        mix += O.st->grad[t * e_count + c] * P.st->data[t * P.dim(1) + set[c]];
      for (long c = 0; c < e_count; ++c)
        P.st->grad[t * P.dim(1) + set[c]] +=
            O.st->grad[t * e_count + c] / s - mix / (s * s);
    }
  });
}

// Router: bias-free linear scores over E experts, temperature-scaled softmax,
// top-e kept per token, kept weights renormalized to sum 1.
inline RoutingDecision route_experts(const Tensor& h, const Tensor& router_w, double temp,
                                     long e_active) {
  check_2d(h, "route_experts");
  check_2d(router_w, "route_experts");
  long e_total = router_w.dim(1);
  if (e_active < 1 || e_active > e_total)
    throw std::invalid_argument("route_experts: need 1 <= e <= E, got e=" +
                                std::to_string(e_active) + " E=" + std::to_string(e_total));
  RoutingDecision dec;
  Tensor logits = scale(matmul(h, router_w), 1.0 / temp);
  dec.router_probs = softmax_rows(logits);
  dec.expert_sets = select_topk(dec.router_probs.data(), h.dim(0), e_total, e_active);
  dec.gates = renorm_gather(dec.router_probs, dec.expert_sets);
  dec.gate_values.resize(h.dim(0));
  for (long t = 0; t < h.dim(0); ++t)
    dec.gate_values[t].assign(dec.gates.data() + t * e_active,
                              dec.gates.data() + (t + 1) * e_active);
  return dec;
}

struct ExpertParams {
  Tensor w1, b1, w2, b2;  // d -> 4d -> d
};

// output_i = sum_j gate_ij * FFN_j(h_i), FFN = linear - gelu - linear.
// Experts that receive no token are never touched: their gradient stays zero.
inline Tensor moe_ffn(const Tensor& h, const RoutingDecision& dec,
                      const std::vector<ExpertParams>& experts) {
  check_2d(h, "moe_ffn");
  long t_count = h.dim(0), d = h.dim(1);
  long e_total = (long)experts.size();
  if ((long)dec.expert_sets.size() != t_count)
    throw std::invalid_argument("moe_ffn: routing covers " +
                                std::to_string(dec.expert_sets.size()) + " tokens, input has " +
                                std::to_string(t_count));
  long hidden = experts.empty() ? 0 : experts[0].w1.dim(1);
  long e_active = dec.expert_sets.empty() ? 0 : (long)dec.expert_sets[0].size();

  // Token lists per expert, ascending; slot = which gate column points at it.
  std::vector<std::vector<long>> tok_of(e_total);
  std::vector<std::vector<long>> slot_of(e_total);
  for (long t = 0; t < t_count; ++t)
    for (long c = 0; c < e_active; ++c) {
      int j = dec.expert_sets[t][c];
      if (j < 0 || j >= e_total)
        throw std::invalid_argument("moe_ffn: expert index " + std::to_string(j) +
                                    " out of range");
      tok_of[j].push_back(t);
      slot_of[j].push_back(c);
    }

  Tensor out = Tensor::zeros({t_count, d});
  struct Cache {
    std::vector<double> x, pre, act, y;  // per expert, gathered rows
  };
  auto caches = std::make_shared<std::vector<Cache>>(e_total);
  for (long j = 0; j < e_total; ++j) {
    long cnt = (long)tok_of[j].size();
    if (!cnt) continue;
    Cache& c = (*caches)[j];
    c.x.resize(cnt * d);
    c.pre.assign(cnt * hidden, 0.0);
    c.act.resize(cnt * hidden);
    c.y.assign(cnt * d, 0.0);
    for (long r = 0; r < cnt; ++r)
      std::memcpy(c.x.data() + r * d, h.data() + tok_of[j][r] * d, sizeof(double) * d);
    blas::gemm_acc(false, false, cnt, hidden, d, c.x.data(), experts[j].w1.data(), c.pre.data(),
                   1.0, 0.0);
    for (long r = 0; r < cnt; ++r)
      for (long k = 0; k < hidden; ++k) c.pre[r * hidden + k] += experts[j].b1.st->data[k];
    for (long i = 0; i < cnt * hidden; ++i) c.act[i] = gelu_val(c.pre[i]);
    blas::gemm_acc(false, false, cnt, d, hidden, c.act.data(), experts[j].w2.data(), c.y.data(),
                   1.0, 0.0);
    for (long r = 0; r < cnt; ++r) {
      double g = dec.gates.at(tok_of[j][r], slot_of[j][r]);
      double* o = out.data() + tok_of[j][r] * d;
      for (long k = 0; k < d; ++k) {
        c.y[r * d + k] += experts[j].b2.st->data[k];
        o[k] += g * c.y[r * d + k];
      }
    }
  }

  std::vector<const Tensor*> ins = {&h, &dec.gates};
  for (const auto& ep : experts) {
    ins.push_back(&ep.w1);
    ins.push_back(&ep.b1);
    ins.push_back(&ep.w2);
    ins.push_back(&ep.b2);
  }
  Tensor H = h, G = dec.gates, O = out;
  auto eps = std::make_shared<std::vector<ExpertParams>>(experts);
  auto tok_s = std::make_shared<std::vector<std::vector<long>>>(std::move(tok_of));
  auto slot_s = std::make_shared<std::vector<std::vector<long>>>(std::move(slot_of));

  bool needs = false;
  for (const Tensor* in : ins)
    if (in->defined() && (in->requires_grad() || in->node)) needs = true;
  if (!needs) return out;
  out.st->requires_grad = true;
  auto node = std::make_shared<TapeNode>();
  for (const Tensor* in : ins)
    if (in->defined() && in->node) node->parents.push_back(in->node);
  node->backward = [H, G, O, eps, caches, tok_s, slot_s, t_count, d, hidden, e_total]() mutable {
    if (!O.has_grad()) return;
    bool gh = wants_grad(H);
    if (gh) H.ensure_grad();
    bool gg = wants_grad(G);
    if (gg) G.ensure_grad();
    std::vector<double> gy, gact, gpre, gx;
    for (long j = 0; j < e_total; ++j) {
      const auto& toks = (*tok_s)[j];
      long cnt = (long)toks.size();
      if (!cnt) continue;
      Cache& c = (*caches)[j];
      ExpertParams& ep = (*eps)[j];
      gy.assign(cnt * d, 0.0);
      for (long r = 0; r < cnt; ++r) {
        long t = toks[r];
        double gate = G.st->data[t * G.dim(1) + (*slot_s)[j][r]];
        const double* go = O.st->grad.data() + t * d;
        for (long k = 0; k < d; ++k) gy[r * d + k] = gate * go[k];
        if (gg) {
          double acc = 0;
          for (long k = 0; k < d; ++k) acc += go[k] * c.y[r * d + k];
          G.st->grad[t * G.dim(1) + (*slot_s)[j][r]] += acc;
        }
      }
      if (wants_grad(ep.w2)) {
        ep.w2.ensure_grad();
        blas::gemm_acc(true, false, hidden, d, cnt, c.act.data(), gy.data(), ep.w2.grad());
      }
      if (wants_grad(ep.b2)) {
        ep.b2.ensure_grad();
        for (long r = 0; r < cnt; ++r)
          for (long k = 0; k < d; ++k) ep.b2.st->grad[k] += gy[r * d + k];
      }
      gact.assign(cnt * hidden, 0.0);
      blas::gemm_acc(false, true, cnt, hidden, d, gy.data(), ep.w2.data(), gact.data());
      gpre.resize(cnt * hidden);
      for (long i = 0; i < cnt * hidden; ++i) gpre[i] = gact[i] * gelu_grad_val(c.pre[i]);
      if (wants_grad(ep.w1)) {
        ep.w1.ensure_grad();
        blas::gemm_acc(true, false, d, hidden, cnt, c.x.data(), gpre.data(), ep.w1.grad());
      }
      if (wants_grad(ep.b1)) {
        ep.b1.ensure_grad();
        for (long r = 0; r < cnt; ++r)
          for (long k = 0; k < hidden; ++k) ep.b1.st->grad[k] += gpre[r * hidden + k];
      }
      if (gh) {
        gx.assign(cnt * d, 0.0);
        blas::gemm_acc(false, true, cnt, d, hidden, gpre.data(), ep.w1.data(), gx.data());
        for (long r = 0; r < cnt; ++r) {
          double* hg = H.st->grad.data() + toks[r] * d;
          for (long k = 0; k < d; ++k) hg[k] += gx[r * d + k];
        }
      }
    }
  };
  out.node = node;
  return out;
}

// E * sum_j f_j * pbar_j with f_j = count_j / (tokens * e). Uniform routing
// gives 1; full concentration with e = 1 gives E. Gradient flows through the
// mean router probabilities only; the counts are piecewise constant.
inline Tensor load_balance_loss(const Tensor& router_probs,
                                const std::vector<std::vector<int>>& expert_sets) {
  check_2d(router_probs, "load_balance_loss");
  long t_count = router_probs.dim(0), e_total = router_probs.dim(1);
  if ((long)expert_sets.size() != t_count)
    throw std::invalid_argument("load_balance_loss: set count mismatch");
  long e_active = expert_sets.empty() ? 1 : (long)expert_sets[0].size();
  std::vector<double> f(e_total, 0.0);
  for (const auto& set : expert_sets)
    for (int j : set) f[j] += 1.0;
  for (double& x : f) x /= (double)(t_count * e_active);
  double val = 0;
  for (long j = 0; j < e_total; ++j) {
    double pbar = 0;
    for (long t = 0; t < t_count; ++t) pbar += router_probs.at(t, j);
    pbar /= (double)t_count;
    val += f[j] * pbar;
  }
  Tensor out = Tensor::scalar(val * e_total);
  Tensor P = router_probs, O = out;
  auto fs = std::make_shared<std::vector<double>>(std::move(f));
  return mark_op(out, {&router_probs}, [P, O, fs, t_count, e_total]() mutable {
    if (!O.has_grad() || !wants_grad(P)) return;
    P.ensure_grad();
    double g = O.st->grad[0] * e_total / (double)t_count;
    for (long t = 0; t < t_count; ++t)
      for (long j = 0; j < e_total; ++j) P.st->grad[t * e_total + j] += g * (*fs)[j];
  });
}

}  // namespace ressformer
