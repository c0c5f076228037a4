#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace ressformer {

// Entries equal to -infinity are treated as excluded and get probability 0;
// that is what score masking produces upstream.
struct SparseDist {
  std::vector<double> probs;
  std::vector<int> support;  // indices with probs > 0
  double tau = 0.0;
};

enum class Phi { softmax, sparsemax, entmax15 };

inline std::string phi_name(Phi p) {
  switch (p) {
    case Phi::softmax: return "softmax";
    case Phi::sparsemax: return "sparsemax";
    case Phi::entmax15: return "entmax15";
  }
  return "?";
}

inline Phi phi_from_name(const std::string& s) {
  if (s == "softmax") return Phi::softmax;
  if (s == "sparsemax") return Phi::sparsemax;
  if (s == "entmax15") return Phi::entmax15;
  throw std::invalid_argument("unknown activation '" + s +
                              "' (expected softmax, sparsemax, or entmax15)");
}

namespace detail {
inline void check_nonempty(const std::vector<double>& z, const char* op) {
  if (z.empty()) throw std::invalid_argument(std::string(op) + ": empty input vector");
}

inline void finish_support(SparseDist& d) {
  d.support.clear();
  for (int i = 0; i < (int)d.probs.size(); ++i)
    if (d.probs[i] > 0) d.support.push_back(i);
}
}  // namespace detail

inline SparseDist softmax_vec(const std::vector<double>& z) {
  detail::check_nonempty(z, "softmax");
  SparseDist d;
  d.probs.assign(z.size(), 0.0);
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : z) mx = std::max(mx, v);
  if (std::isinf(mx) && mx < 0) {  // everything excluded
    return d;
  }
  double s = 0;
  for (size_t i = 0; i < z.size(); ++i) {
    d.probs[i] = std::isinf(z[i]) && z[i] < 0 ? 0.0 : std::exp(z[i] - mx);
    s += d.probs[i];
  }
  for (double& p : d.probs) p /= s;
  detail::finish_support(d);
  return d;
}

// Euclidean projection onto the probability simplex, by sort and threshold:
// keep the largest k with 1 + k*z_(k) > sum_{j<=k} z_(j), tau = (sum - 1)/k.
inline SparseDist sparsemax(const std::vector<double>& z) {
  detail::check_nonempty(z, "sparsemax");
  SparseDist d;
  d.probs.assign(z.size(), 0.0);
  std::vector<int> order;
  order.reserve(z.size());
  for (int i = 0; i < (int)z.size(); ++i)
    if (!(std::isinf(z[i]) && z[i] < 0)) order.push_back(i);
  if (order.empty()) return d;
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (z[a] != z[b]) return z[a] > z[b];
    return a < b;  // ties by lower index; unobservable in the output
  });
  double cum = 0, tau = 0;
  long k_keep = 0;
  for (long k = 1; k <= (long)order.size(); ++k) {
    double zk = z[order[k - 1]];
    cum += zk;
    if (1.0 + k * zk > cum) {
      k_keep = k;
      tau = (cum - 1.0) / k;
    }
  }
  d.tau = tau;
  for (long k = 0; k < k_keep; ++k) {
    int i = order[k];
    d.probs[i] = std::max(z[i] - tau, 0.0);
  }
  detail::finish_support(d);
  return d;
}

// probs[i] = (max(z[i]/2 - tau, 0))^2 with tau located by bisection on the
// bracket [max(z)/2 - 1, max(z)/2]; the residual is monotone in tau.
inline SparseDist entmax15(const std::vector<double>& z) {
  detail::check_nonempty(z, "entmax15");
  SparseDist d;
  d.probs.assign(z.size(), 0.0);
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : z) mx = std::max(mx, v);
  if (std::isinf(mx) && mx < 0) return d;
  double lo = mx / 2 - 1.0, hi = mx / 2;
  auto mass = [&](double tau) {
    double s = 0;
    for (double v : z) {
      if (std::isinf(v) && v < 0) continue;
      double t = v / 2 - tau;
      if (t > 0) s += t * t;
    }
    return s;
  };
  for (int it = 0; it < 100; ++it) {
    double mid = 0.5 * (lo + hi);
    if (mass(mid) >= 1.0)
      lo = mid;
    else
      hi = mid;
  }
  double tau = 0.5 * (lo + hi);
  d.tau = tau;
  double s = 0;
  for (size_t i = 0; i < z.size(); ++i) {
    if (std::isinf(z[i]) && z[i] < 0) continue;
    double t = z[i] / 2 - tau;
    if (t > 0) {
      d.probs[i] = t * t;
      s += d.probs[i];
    }
  }
  if (std::abs(s - 1.0) > 1e-9)
    throw std::runtime_error("entmax15: bisection residual " + std::to_string(s - 1.0));
  detail::finish_support(d);
  return d;
}

inline SparseDist apply_phi(Phi phi, const std::vector<double>& z) {
  switch (phi) {
    case Phi::softmax: return softmax_vec(z);
    case Phi::sparsemax: return sparsemax(z);
    case Phi::entmax15: return entmax15(z);
  }
  throw std::logic_error("apply_phi: bad selector");
}

namespace detail {
inline void check_same_size(const SparseDist& d, const std::vector<double>& u, const char* op) {
  if (d.probs.size() != u.size())
    throw std::invalid_argument(std::string(op) + ": upstream size " + std::to_string(u.size()) +
                                " vs dist size " + std::to_string(d.probs.size()));
}
}  // namespace detail

// s . (u - mean_support(u)) where s is the support indicator.
inline std::vector<double> sparsemax_jvp(const SparseDist& d, const std::vector<double>& u) {
  detail::check_same_size(d, u, "sparsemax_jvp");
  std::vector<double> out(u.size(), 0.0);
  if (d.support.empty()) return out;
  double mean = 0;
  for (int i : d.support) mean += u[i];
  mean /= (double)d.support.size();
  for (int i : d.support) out[i] = u[i] - mean;
  return out;
}

// With d_i = sqrt(p_i) on support: d.u - d * (sum(d.u) / sum(d)).
inline std::vector<double> entmax15_jvp(const SparseDist& dist, const std::vector<double>& u) {
  detail::check_same_size(dist, u, "entmax15_jvp");
  std::vector<double> out(u.size(), 0.0);
  if (dist.support.empty()) return out;
  double sd = 0, sdu = 0;
  for (int i : dist.support) {
    double di = std::sqrt(dist.probs[i]);
    sd += di;
    sdu += di * u[i];
  }
  double c = sdu / sd;
  for (int i : dist.support) {
    double di = std::sqrt(dist.probs[i]);
    out[i] = di * u[i] - di * c;
  }
  return out;
}

inline std::vector<double> softmax_jvp(const SparseDist& d, const std::vector<double>& u) {
  detail::check_same_size(d, u, "softmax_jvp");
  std::vector<double> out(u.size(), 0.0);
  double dot = 0;
  for (size_t i = 0; i < u.size(); ++i) dot += d.probs[i] * u[i];
  for (size_t i = 0; i < u.size(); ++i) out[i] = d.probs[i] * (u[i] - dot);
  return out;
}

inline std::vector<double> phi_jvp(Phi phi, const SparseDist& d, const std::vector<double>& u) {
  switch (phi) {
    case Phi::softmax: return softmax_jvp(d, u);
    case Phi::sparsemax: return sparsemax_jvp(d, u);
    case Phi::entmax15: return entmax15_jvp(d, u);
  }
  throw std::logic_error("phi_jvp: bad selector");
}

}  // namespace ressformer
