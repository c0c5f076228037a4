#pragma once

#include <cmath>
#include <fstream>
#include <sstream>

#include "attention.hpp"
#include "ops.hpp"
#include "tensor.hpp"

namespace ressformer {

// Content-only edge scores for one iteration. Permuting tokens conjugates the
// score matrix exactly; nothing here depends on token position.
struct LatentGraph {
  long n = 0;
  int iteration = 0;
  std::vector<double> scores;                    // n x n snapshot
  std::vector<std::pair<int, int>> selected;     // edges kept per query row
};

// e = (h Wq)(h Wk)^T / sqrt(d_s) per sequence; returns [B*n x n] on the tape.
inline Tensor score_edges(const Tensor& h, const Tensor& wq, const Tensor& wk, long batch) {
  check_2d(h, "score_edges");
  long ds = wq.dim(1);
  if (wk.dim(1) != ds || wq.dim(0) != h.dim(1) || wk.dim(0) != h.dim(1))
    throw std::invalid_argument("score_edges: projection shapes " + shape_str(wq.shape) + ", " +
                                shape_str(wk.shape) + " do not fit " + shape_str(h.shape));
  if (h.dim(0) % batch)
    throw std::invalid_argument("score_edges: rows not a multiple of batch");
  long n = h.dim(0) / batch;
  Tensor q = matmul(h, wq);
  Tensor k = matmul(h, wk);
  double inv_sqrt = 1.0 / std::sqrt((double)ds);

  Tensor out = Tensor::zeros({batch * n, n});
  for (long b = 0; b < batch; ++b)
    blas::gemm_acc(false, true, n, n, ds, q.data() + b * n * ds, k.data() + b * n * ds,
                   out.data() + b * n * n, inv_sqrt, 0.0);
  Tensor Q = q, K = k, O = out;
  return mark_op(out, {&q, &k}, [Q, K, O, batch, n, ds, inv_sqrt]() mutable {
    if (!O.has_grad()) return;
    bool gq = wants_grad(Q), gk = wants_grad(K);
    if (gq) Q.ensure_grad();
    if (gk) K.ensure_grad();
    for (long b = 0; b < batch; ++b) {
      const double* go = O.st->grad.data() + b * n * n;
      if (gq)
        blas::gemm_acc(false, false, n, ds, n, go, K.st->data.data() + b * n * ds,
                       Q.st->grad.data() + b * n * ds, inv_sqrt, 1.0);
      if (gk)
        blas::gemm_acc(true, false, n, ds, n, go, Q.st->data.data() + b * n * ds,
                       K.st->grad.data() + b * n * ds, inv_sqrt, 1.0);
    }
  });
}

// sum over t >= 2 of sum_ij (e^t_ij - e^(t-1)_ij)^2, on the tape.
inline Tensor struct_loss(const std::vector<Tensor>& graphs) {
  if (graphs.size() < 2)
    throw std::invalid_argument("struct_loss: needs >= 2 graphs, got " +
                                std::to_string(graphs.size()));
  for (size_t t = 1; t < graphs.size(); ++t)
    if (graphs[t].shape != graphs[0].shape)
      throw std::invalid_argument("struct_loss: graph " + std::to_string(t) + " has shape " +
                                  shape_str(graphs[t].shape) + ", expected " +
                                  shape_str(graphs[0].shape));
  Tensor total = Tensor::scalar(0.0);
  for (size_t t = 1; t < graphs.size(); ++t) {
    Tensor d = sub(graphs[t], graphs[t - 1]);
    total = add(total, sum(mul(d, d)));
  }
  return total;
}

// Additive attention bias; lambda = 0 leaves attention untouched exactly.
inline Tensor graph_bias(const Tensor& edge_scores, double lambda_bias) {
  return scale(edge_scores, lambda_bias);
}

// Sort tokens by a learned scalar projection; each query's candidates are its
// own bucket plus both adjacent buckets. Candidate sets are returned in
// ascending token order. Pure function of values; used by the O(nk) path.
inline std::vector<std::vector<int>> bucket_candidates(const double* h, long n, long d,
                                                       const double* proj_w, long bucket_size) {
  if (bucket_size < 1) throw std::invalid_argument("bucket_candidates: bucket_size must be >= 1");
  if (n <= bucket_size) {
    std::vector<int> all(n);
    std::iota(all.begin(), all.end(), 0);
    return std::vector<std::vector<int>>(n, all);
  }
  std::vector<std::pair<double, int>> keyed(n);
  for (long i = 0; i < n; ++i) {
    double v = 0;
    for (long c = 0; c < d; ++c) v += h[i * d + c] * proj_w[c];
    keyed[i] = {v, (int)i};
  }
  std::sort(keyed.begin(), keyed.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first < b.first;
    return a.second < b.second;
  });
  long n_buckets = (n + bucket_size - 1) / bucket_size;
  std::vector<long> bucket_of(n);
  std::vector<std::vector<int>> members(n_buckets);
  for (long r = 0; r < n; ++r) {
    long bkt = r / bucket_size;
    bucket_of[keyed[r].second] = bkt;
    members[bkt].push_back(keyed[r].second);
  }
  std::vector<std::vector<int>> cands(n);
  for (long i = 0; i < n; ++i) {
    long bkt = bucket_of[i];
    for (long nb = std::max(0L, bkt - 1); nb <= std::min(n_buckets - 1, bkt + 1); ++nb)
      cands[i].insert(cands[i].end(), members[nb].begin(), members[nb].end());
    std::sort(cands[i].begin(), cands[i].end());
  }
  return cands;
}

inline std::vector<std::vector<int>> bucket_candidates(const Tensor& h, const Tensor& proj_w,
                                                       long bucket_size) {
  check_2d(h, "bucket_candidates");
  if (proj_w.size() != h.dim(1))
    throw std::invalid_argument("bucket_candidates: projection size " + shape_str(proj_w.shape) +
                                " vs " + shape_str(h.shape));
  return bucket_candidates(h.data(), h.dim(0), h.dim(1), proj_w.data(), bucket_size);
}

// Per-iteration observability record for one sequence.
struct IterTrace {
  LatentGraph graph;
  std::vector<AttnHeadTrace> attn_heads;
  std::vector<double> alpha;                  // gate values, empty at t=0
  std::vector<std::vector<int>> expert_sets;  // per token
  double hidden_norm = 0;
};

struct StepTrace {
  std::vector<std::string> token_text;  // optional labels for export
  std::vector<IterTrace> iterations;    // length K after a forward pass
};

inline LatentGraph make_latent_graph(const double* scores, long n, int iteration, long k_keep) {
  LatentGraph g;
  g.n = n;
  g.iteration = iteration;
  g.scores.assign(scores, scores + n * n);
  auto sets = select_topk(scores, n, n, std::max(1L, std::min(k_keep, n)));
  for (long i = 0; i < n; ++i)
    for (int j : sets[i]) g.selected.push_back({(int)i, j});
  return g;
}

inline std::string dot_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += (c == '\n') ? ' ' : c;
  }
  return out;
}

// One digraph per trace; each iteration becomes a subgraph cluster_t whose
// nodes are the token indices (labelled with text when available).
inline void export_graph(const StepTrace& trace, const std::string& path) {
  bool any = false;
  for (const auto& it : trace.iterations) any = any || it.graph.n > 0;
  if (!any) throw std::invalid_argument("export_graph: trace holds no graphs");
  std::ostringstream os;
  os << "digraph latent_structure {\n";
  for (size_t t = 0; t < trace.iterations.size(); ++t) {
    const LatentGraph& g = trace.iterations[t].graph;
    if (g.n == 0) continue;
    os << "  subgraph cluster_" << t << " {\n";
    os << "    label=\"iteration " << t << "\";\n";
    for (long i = 0; i < g.n; ++i) {
      std::string label = std::to_string(i);
      if (i < (long)trace.token_text.size())
        label += ":" + dot_escape(trace.token_text[i]);
      os << "    t" << t << "_n" << i << " [label=\"" << label << "\"];\n";
    }
    for (const auto& [i, j] : g.selected) {
      os << "    t" << t << "_n" << i << " -> t" << t << "_n" << j << " [weight=\""
         << g.scores[i * g.n + j] << "\"];\n";
    }
    os << "  }\n";
  }
  os << "}\n";
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("export_graph: cannot open " + path);
  f << os.str();
  if (!f) throw std::runtime_error("export_graph: write failed for " + path);
}

}  // namespace ressformer
