#pragma once

// Independent reference implementations used by the unit and acceptance
// tests. None of them share code with the library routine they check.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "brltm/metrics.hpp"
#include "brltm/model.hpp"
#include "brltm/tensor.hpp"

namespace brltm::oracle {

// Pairwise count over every (positive, negative) pair.
inline double roc_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1 && y[j] == 0) {
        pairs += 1.0;
        if (s[i] > s[j]) wins += 1.0;
        else if (s[i] == s[j]) wins += 0.5;
      }
  return wins / pairs;
}

// Direct rank walk: the rank of item i is one plus the number of items
// ahead of it (higher score, or equal score and lower index).
inline double pr_auc(const std::vector<double>& s, const std::vector<int>& y) {
  const std::size_t n = s.size();
  auto ahead = [&](std::size_t j, std::size_t i) { return s[j] > s[i] || (s[j] == s[i] && j < i); };
  double total = 0.0;
  std::size_t positives = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (y[i] != 1) continue;
    ++positives;
    std::size_t rank = 1, hits = 1;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i && ahead(j, i)) {
        ++rank;
        if (y[j] == 1) ++hits;
      }
    total += static_cast<double>(hits) / static_cast<double>(rank);
  }
  return total / static_cast<double>(positives);
}

// Exact minimizer of sum w_i (x_i - y_i)^2 subject to x non-decreasing.
// The optimum is constant on consecutive blocks, each at its weighted mean;
// enumerating all 2^(n-1) block partitions with non-decreasing means and
// keeping the cheapest gives the quadratic program's solution.
inline std::vector<double> isotonic(const std::vector<double>& y, const std::vector<double>& w) {
  const std::size_t n = y.size();
  if (n == 0) return {};
  double best_cost = std::numeric_limits<double>::infinity();
  std::vector<double> best;
  for (std::size_t mask = 0; mask < (std::size_t{1} << (n - 1)); ++mask) {
    std::vector<double> x(n);
    double prev = -std::numeric_limits<double>::infinity(), cost = 0.0;
    bool ok = true;
    std::size_t start = 0;
    for (std::size_t i = 0; i < n && ok; ++i) {
      const bool cut = i == n - 1 || (mask >> i & 1U);
      if (!cut) continue;
      double sw = 0.0, swy = 0.0;
      for (std::size_t k = start; k <= i; ++k) {
        sw += w[k];
        swy += w[k] * y[k];
      }
      const double m = swy / sw;
      if (m < prev - 1e-15) ok = false;
      prev = m;
      for (std::size_t k = start; k <= i; ++k) {
        x[k] = m;
        cost += w[k] * (y[k] - m) * (y[k] - m);
      }
      start = i + 1;
    }
    if (ok && cost < best_cost) {
      best_cost = cost;
      best = x;
    }
  }
  return best;
}

// Adaptive Simpson quadrature.
inline double integrate(const std::function<double(double)>& f, double a, double b, double tol, int depth = 50) {
  std::function<double(double, double, double, double, double, double, int, double)> rec =
      [&](double lo, double hi, double flo, double fmid, double fhi, double whole, int d, double eps) {
        const double mid = 0.5 * (lo + hi), lm = 0.5 * (lo + mid), rm = 0.5 * (mid + hi);
        const double flm = f(lm), frm = f(rm);
        const double left = (mid - lo) / 6.0 * (flo + 4.0 * flm + fmid);
        const double right = (hi - mid) / 6.0 * (fmid + 4.0 * frm + fhi);
        if (d <= 0 || std::abs(left + right - whole) <= 15.0 * eps) return left + right + (left + right - whole) / 15.0;
        return rec(lo, mid, flo, flm, fmid, left, d - 1, eps / 2.0) + rec(mid, hi, fmid, frm, fhi, right, d - 1, eps / 2.0);
      };
  const double fa = f(a), fb = f(b), fm = f(0.5 * (a + b));
  return rec(a, b, fa, fm, fb, (b - a) / 6.0 * (fa + 4.0 * fm + fb), depth, tol);
}

// Two-tailed p-value of Student's t with nu degrees of freedom, by
// integrating the density over [0, |t|].
inline double t_two_tailed(double t, double nu) {
  const double c = std::exp(std::lgamma((nu + 1.0) / 2.0) - std::lgamma(nu / 2.0)) / std::sqrt(nu * M_PI);
  auto pdf = [&](double x) { return c * std::pow(1.0 + x * x / nu, -(nu + 1.0) / 2.0); };
  return 1.0 - 2.0 * integrate(pdf, 0.0, std::abs(t), 1e-13);
}

struct TTest {
  double t, p;
};

inline TTest paired_t(const std::vector<double>& a, const std::vector<double>& b) {
  const std::size_t n = a.size();
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean += (a[i] - b[i]) / static_cast<double>(n);
  double ss = 0.0;
  for (std::size_t i = 0; i < n; ++i) ss += (a[i] - b[i] - mean) * (a[i] - b[i] - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  const double t = mean / (sd / std::sqrt(static_cast<double>(n)));
  return {t, t_two_tailed(t, static_cast<double>(n - 1))};
}

// Central finite-difference check of every element of every trainable
// tensor. Relative error is |a - n| / max(|a|, |n|, floor); the floor keeps
// gradients that are zero or tiny from dividing by round-off.
struct GradCheck {
  std::size_t probes = 0;
  double max_rel_error = 0.0;
  std::string worst;
};

template <class Params>
GradCheck finite_difference_check(const Params& params, const std::function<Tensor<double>()>& loss,
                                  double h = 1e-5, double floor = 1e-5,
                                  std::size_t stride = 1) {
  params.zero_grad();
  loss().backward();
  GradCheck out;
  for (auto np : params.named(false)) {
    if (!np.trainable) continue;
    const std::vector<double> analytic(np.tensor.grad().begin(), np.tensor.grad().end());
    auto values = np.tensor.mutable_values();
    for (std::size_t i = 0; i < values.size(); i += stride) {
      const double x = values[i];
      values[i] = x + h;
      const double up = loss().item();
      values[i] = x - h;
      const double down = loss().item();
      values[i] = x;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic.empty() ? 0.0 : analytic[i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      ++out.probes;
      if (rel > out.max_rel_error) {
        out.max_rel_error = rel;
        out.worst = np.name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return out;
}

}  // namespace brltm::oracle
