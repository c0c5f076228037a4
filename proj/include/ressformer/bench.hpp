#pragma once

#include <chrono>
#include <map>

#include "attention.hpp"
#include "rng.hpp"
#include "structure.hpp"

namespace ressformer {

struct BenchRow {
  std::string mode;
  long n = 0;
  long k_top = 0;
  double median_ms = 0;
  long trials = 0;
};

struct BenchSummary {
  std::vector<BenchRow> rows;
  std::map<std::string, double> exponent;  // fitted log-log slope per mode
};

namespace bench_detail {

// Per-query softmax over every key: the quadratic baseline.
inline void dense_attention(const std::vector<double>& q, const std::vector<double>& k,
                            const std::vector<double>& v, long n, long d, long heads,
                            std::vector<double>& out) {
  long dh = d / heads;
  double inv = 1.0 / std::sqrt((double)dh);
  std::vector<double> z(n);
  std::fill(out.begin(), out.end(), 0.0);
  for (long h = 0; h < heads; ++h) {
    long off = h * dh;
    for (long i = 0; i < n; ++i) {
      double mx = -1e300;
      for (long j = 0; j < n; ++j) {
        double s = 0;
        for (long c = 0; c < dh; ++c) s += q[i * d + off + c] * k[j * d + off + c];
        z[j] = s * inv;
        mx = std::max(mx, z[j]);
      }
      double denom = 0;
      for (long j = 0; j < n; ++j) {
        z[j] = std::exp(z[j] - mx);
        denom += z[j];
      }
      for (long j = 0; j < n; ++j) {
        double a = z[j] / denom;
        for (long c = 0; c < dh; ++c) out[i * d + off + c] += a * v[j * d + off + c];
      }
    }
  }
}

// Scores only the candidate lists produced by content bucketing, then the
// usual top-k + phi + weighted sum. Work per query is bounded by the
// candidate-set size, so total time grows ~linearly in n.
inline void bucketed_attention(const std::vector<double>& q, const std::vector<double>& k,
                               const std::vector<double>& v,
                               const std::vector<std::vector<int>>& cands, long n, long d,
                               long heads, long k_top, Phi phi, std::vector<double>& out) {
  long dh = d / heads;
  double inv = 1.0 / std::sqrt((double)dh);
  std::fill(out.begin(), out.end(), 0.0);
  std::vector<double> z;
  for (long h = 0; h < heads; ++h) {
    long off = h * dh;
    for (long i = 0; i < n; ++i) {
      const auto& cand = cands[i];
      long nc = (long)cand.size();
      z.resize(nc);
      for (long u = 0; u < nc; ++u) {
        double s = 0;
        long j = cand[u];
        for (long c = 0; c < dh; ++c) s += q[i * d + off + c] * k[j * d + off + c];
        z[u] = s * inv;
      }
      auto sel = select_topk(z.data(), 1, nc, std::min(k_top, nc))[0];
      std::vector<double> zr(sel.size());
      for (size_t u = 0; u < sel.size(); ++u) zr[u] = z[sel[u]];
      SparseDist dist = phi == Phi::softmax    ? softmax_vec(zr)
                        : phi == Phi::sparsemax ? sparsemax(zr)
                                                : entmax15(zr);
      for (size_t u = 0; u < sel.size(); ++u) {
        double a = dist.probs[u];
        if (a == 0.0) continue;
        long j = cand[sel[u]];
        for (long c = 0; c < dh; ++c) out[i * d + off + c] += a * v[j * d + off + c];
      }
    }
  }
}

inline double median(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  size_t n = xs.size();
  return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

}  // namespace bench_detail

// Times one attention forward per (mode, n); median of `trials` runs after
// two warmups. Modes: dense (softmax over all keys), exact (full scoring,
// top-k, phi), bucketed (candidate lists from content bucketing).
inline BenchSummary run_bench(const std::vector<std::string>& modes,
                              const std::vector<long>& lengths, long k_top, long trials = 5,
                              long d = 64, long heads = 4, Phi phi = Phi::entmax15,
                              std::ostream* log = nullptr) {
  using clock = std::chrono::steady_clock;
  if (trials < 5) trials = 5;
  BenchSummary summary;
  std::map<std::string, std::vector<std::pair<double, double>>> loglog;

  for (const auto& mode : modes) {
    for (long n : lengths) {
      Rng rng(1234 + n);
      std::vector<double> q(n * d), k(n * d), v(n * d), out(n * d);
      for (auto& x : q) x = rng.normal(0.0, 1.0);
      for (auto& x : k) x = rng.normal(0.0, 1.0);
      for (auto& x : v) x = rng.normal(0.0, 1.0);

      std::function<void()> once;
      Tensor qt, kt, vt;
      std::vector<double> proj(d);
      if (mode == "dense") {
        once = [&] { bench_detail::dense_attention(q, k, v, n, d, heads, out); };
      } else if (mode == "exact") {
        qt = Tensor::from({n, d}, q);
        kt = Tensor::from({n, d}, k);
        vt = Tensor::from({n, d}, v);
        once = [&] {
          Tensor o = sparse_attention(qt, kt, vt, nullptr, nullptr, nullptr, 1, heads,
                                      std::min(k_top, n), phi);
          out[0] = o.at(0, 0);
        };
      } else if (mode == "bucketed") {
        for (auto& x : proj) x = rng.normal(0.0, 1.0);
        long bucket = std::max<long>(k_top, 32);
        once = [&, bucket] {
          auto cands = bucket_candidates(k.data(), n, d, proj.data(), bucket);
          bench_detail::bucketed_attention(q, k, v, cands, n, d, heads, k_top, phi, out);
        };
      } else {
        throw std::invalid_argument("bench: unknown mode '" + mode +
                                    "' (expected dense, exact, or bucketed)");
      }

      once();
      once();
      std::vector<double> ms;
      for (long t = 0; t < trials; ++t) {
        auto t0 = clock::now();
        once();
        ms.push_back(std::chrono::duration<double, std::milli>(clock::now() - t0).count());
      }
      BenchRow row{mode, n, k_top, bench_detail::median(ms), trials};
      summary.rows.push_back(row);
      loglog[mode].push_back({std::log((double)n), std::log(std::max(row.median_ms, 1e-6))});
      if (log)
        (*log) << mode << " n=" << n << " median_ms=" << row.median_ms << "\n" << std::flush;
    }
  }

  for (auto& [mode, pts] : loglog) {
    double xm = 0, ym = 0;
    for (auto& [x, y] : pts) {
      xm += x;
      ym += y;
    }
    xm /= pts.size();
    ym /= pts.size();
    double num = 0, den = 0;
    for (auto& [x, y] : pts) {
      num += (x - xm) * (y - ym);
      den += (x - xm) * (x - xm);
    }
    summary.exponent[mode] = den > 0 ? num / den : 0.0;
  }
  return summary;
}

inline void write_bench_csv(const std::string& path, const BenchSummary& s) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write '" + path + "'");
  f << "mode,n,k_top,median_ms,trials\n";
  for (const auto& r : s.rows)
    f << r.mode << "," << r.n << "," << r.k_top << "," << r.median_ms << "," << r.trials << "\n";
}

}  // namespace ressformer
