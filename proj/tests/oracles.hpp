#pragma once

// Independent reference computations used as test oracles. Each one is a
// direct, unoptimised transcription of a definition and shares no code with
// the library beyond its data types.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "attnhd/trace.hpp"

namespace oracle {

// ---------------------------------------------------------------------------
// Attention metrics, computed head by head straight from the definitions.

inline std::optional<double> ratio(const attnhd::StepHeadRecord& r) {
  double a = 0.0;
  for (float x : r.audio) a += x;
  const double d = a + r.art_mass;
  if (d == 0.0) return std::nullopt;
  return a / d;
}

inline std::optional<double> corr(const std::vector<float>& x, const std::vector<float>& y) {
  const std::size_t n = x.size();
  if (n < 2) return std::nullopt;
  // Textbook single-pass form, different from the library's centred form.
  long double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sx += x[i];
    sy += y[i];
    sxx += static_cast<long double>(x[i]) * x[i];
    syy += static_cast<long double>(y[i]) * y[i];
    sxy += static_cast<long double>(x[i]) * y[i];
  }
  const bool cx = std::all_of(x.begin(), x.end(), [&](float v) { return v == x[0]; });
  const bool cy = std::all_of(y.begin(), y.end(), [&](float v) { return v == y[0]; });
  if (cx || cy) return std::nullopt;
  const long double nn = static_cast<long double>(n);
  const long double num = nn * sxy - sx * sy;
  const long double den = std::sqrt((nn * sxx - sx * sx) * (nn * syy - sy * sy));
  return static_cast<double>(num / den);
}

inline std::optional<double> entropy(const std::vector<float>& w) {
  double s = 0.0;
  for (float x : w) s += x;
  if (w.empty() || s == 0.0) return std::nullopt;
  double h = 0.0;
  for (float x : w) {
    if (x == 0.0f) continue;
    const double p = x / s;
    h -= p * std::log(p);
  }
  return h;
}

// 4 * L * H values in metric-major, then (l, h) row-major order, with
// fallbacks AR 0.5, AC 0, AE 0, TE 0 for heads never defined.
inline std::vector<double> features(const attnhd::AttentionTrace& tr) {
  const auto& hd = tr.header;
  const std::size_t L = hd.num_layers, H = hd.num_heads, T = hd.gen_len;
  std::vector<double> out(4 * L * H);
  const double fallback[4] = {0.5, 0.0, 0.0, 0.0};
  for (std::size_t l = 0; l < L; ++l) {
    for (std::size_t h = 0; h < H; ++h) {
      std::vector<double> vals[4];
      for (std::size_t t = 0; t < T; ++t) {
        const auto& r = tr.at(t, l, h);
        if (auto v = ratio(r)) vals[0].push_back(*v);
        if (t >= 1) {
          if (auto v = corr(r.audio, tr.at(t - 1, l, h).audio)) vals[1].push_back(*v);
        }
        if (auto v = entropy(r.audio)) vals[2].push_back(*v);
        if (auto v = entropy(r.text)) vals[3].push_back(*v);
      }
      for (std::size_t m = 0; m < 4; ++m) {
        double mean = fallback[m];
        if (!vals[m].empty()) mean = std::accumulate(vals[m].begin(), vals[m].end(), 0.0) / vals[m].size();
        out[m * L * H + l * H + h] = mean;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Word edit distance: full (n+1) x (m+1) table.

inline std::size_t edit_distance(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::vector<std::vector<std::size_t>> d(a.size() + 1, std::vector<std::size_t>(b.size() + 1, 0));
  for (std::size_t i = 0; i <= a.size(); ++i) d[i][0] = i;
  for (std::size_t j = 0; j <= b.size(); ++j) d[0][j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i)
    for (std::size_t j = 1; j <= b.size(); ++j)
      d[i][j] = std::min({d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (a[i - 1] == b[j - 1] ? 0u : 1u)});
  return d[a.size()][b.size()];
}

// ---------------------------------------------------------------------------
// Average precision by enumerating every distinct score as a threshold.

inline double average_precision(const std::vector<int>& labels, const std::vector<double>& scores) {
  std::vector<double> thresholds(scores);
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  const double P = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
  double ap = 0.0, prev_recall = 0.0;
  for (double th : thresholds) {
    double tp = 0.0, pred = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (scores[i] >= th) {
        pred += 1.0;
        tp += labels[i];
      }
    }
    const double recall = tp / P;
    ap += (recall - prev_recall) * (tp / pred);
    prev_recall = recall;
  }
  return ap;
}

// ---------------------------------------------------------------------------
// Rejection curves and PRR, by direct averaging and clipped integration.

// Points (i / n, mean of the items not among the first i of `order`).
inline std::vector<std::pair<double, double>> curve(const std::vector<double>& q, const std::vector<std::size_t>& order) {
  const std::size_t n = q.size();
  std::vector<std::pair<double, double>> pts;
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = i; j < n; ++j) s += q[order[j]];
    pts.emplace_back(static_cast<double>(i) / n, s / static_cast<double>(n - i));
  }
  return pts;
}

// Integral over [0, k] of the piecewise-linear curve, flat after the last point.
inline double area(const std::vector<std::pair<double, double>>& pts, double k) {
  auto value_at = [&](double x) {
    for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
      if (x <= pts[i + 1].first) {
        const double f = (x - pts[i].first) / (pts[i + 1].first - pts[i].first);
        return pts[i].second + f * (pts[i + 1].second - pts[i].second);
      }
    }
    return pts.back().second;
  };
  std::vector<double> xs{0.0};
  for (const auto& p : pts)
    if (p.first > 0.0 && p.first < k) xs.push_back(p.first);
  xs.push_back(k);
  double a = 0.0;
  for (std::size_t i = 0; i + 1 < xs.size(); ++i) a += 0.5 * (value_at(xs[i]) + value_at(xs[i + 1])) * (xs[i + 1] - xs[i]);
  return a;
}

// Rejects in descending score order, ties in input order.
inline std::vector<std::size_t> by_descending(const std::vector<double>& s) {
  std::vector<std::size_t> o(s.size());
  std::iota(o.begin(), o.end(), 0);
  std::stable_sort(o.begin(), o.end(), [&](std::size_t a, std::size_t b) { return s[a] > s[b]; });
  return o;
}

inline std::optional<double> prr(const std::vector<double>& q, const std::vector<double>& p, double k) {
  std::vector<std::size_t> worst_first(q.size());
  std::iota(worst_first.begin(), worst_first.end(), 0);
  std::stable_sort(worst_first.begin(), worst_first.end(), [&](std::size_t a, std::size_t b) { return q[a] < q[b]; });
  const double mean = std::accumulate(q.begin(), q.end(), 0.0) / q.size();
  const double a_prob = area(curve(q, by_descending(p)), k);
  const double a_oracle = area(curve(q, worst_first), k);
  const double a_random = mean * k;
  if (std::abs(a_oracle - a_random) < 1e-12) return std::nullopt;
  return (a_prob - a_random) / (a_oracle - a_random);
}

// ---------------------------------------------------------------------------
// Weighted logistic objective, written without vectorisation.

inline double logistic_objective(const std::vector<std::vector<double>>& X, const std::vector<int>& y,
                                 const std::vector<double>& w, double b, double C, double pos_weight, bool l1) {
  double loss = 0.0;
  for (std::size_t i = 0; i < X.size(); ++i) {
    double z = b;
    for (std::size_t j = 0; j < w.size(); ++j) z += w[j] * X[i][j];
    const double m = y[i] == 1 ? z : -z;
    // log(1 + exp(-m)), stable
    const double l = m > 0 ? std::log1p(std::exp(-m)) : -m + std::log1p(std::exp(m));
    loss += (y[i] == 1 ? pos_weight : 1.0) * l;
  }
  double pen = 0.0;
  for (double v : w) pen += l1 ? std::abs(v) : 0.5 * v * v;
  return pen + C * loss;
}

// Minimum of the 3-parameter objective (w1, w2, b) by repeatedly refining a
// 21^3 grid around the best point found so far.
struct GridResult {
  double w1, w2, b, value;
};

inline GridResult grid_minimum(const std::vector<std::vector<double>>& X, const std::vector<int>& y, double C,
                               double pos_weight, bool l1, double radius = 8.0, int levels = 40) {
  GridResult best{0.0, 0.0, 0.0, logistic_objective(X, y, {0.0, 0.0}, 0.0, C, pos_weight, l1)};
  constexpr int K = 10;
  double r = radius;
  for (int level = 0; level < levels; ++level) {
    const GridResult centre = best;
    for (int i = -K; i <= K; ++i)
      for (int j = -K; j <= K; ++j)
        for (int k = -K; k <= K; ++k) {
          const double w1 = centre.w1 + r * i / K, w2 = centre.w2 + r * j / K, b = centre.b + r * k / K;
          const double v = logistic_objective(X, y, {w1, w2}, b, C, pos_weight, l1);
          if (v < best.value) best = {w1, w2, b, v};
        }
    r *= 0.35;
  }
  return best;
}

}  // namespace oracle
