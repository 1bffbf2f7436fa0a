#pragma once

// Detection-quality metrics: threshold metrics, average-precision PR-AUC,
// rejection curves, and the prediction rejection ratio (PRR@k).

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attnhd/errors.hpp"

namespace attnhd {

struct ConfusionMetrics {
  double accuracy = 0.0;
  double f1 = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double predicted_rate = 0.0;
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
};

// A sample is predicted positive when its probability exceeds the threshold.
// Precision and recall are 0 when their denominators are 0.
inline ConfusionMetrics confusion_metrics(std::span<const int> labels, std::span<const double> probabilities,
                                          double threshold = 0.5) {
  if (labels.size() != probabilities.size()) throw DomainError("confusion_metrics: length mismatch");
  if (labels.empty()) throw DomainError("confusion_metrics: empty input");
  ConfusionMetrics m;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool pred = probabilities[i] > threshold;
    const bool pos = labels[i] == 1;
    if (pred && pos) ++m.tp;
    else if (pred) ++m.fp;
    else if (pos) ++m.fn;
    else ++m.tn;
  }
  const double n = static_cast<double>(labels.size());
  m.accuracy = static_cast<double>(m.tp + m.tn) / n;
  m.predicted_rate = static_cast<double>(m.tp + m.fp) / n;
  m.precision = m.tp + m.fp > 0 ? static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fp) : 0.0;
  m.recall = m.tp + m.fn > 0 ? static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fn) : 0.0;
  m.f1 = m.precision + m.recall > 0.0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
  return m;
}

// Indices sorted by descending score; equal scores keep input order.
inline std::vector<std::size_t> descending_order(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

// Average precision. Samples sharing a score form one cut.
inline double pr_auc(std::span<const int> labels, std::span<const double> scores) {
  if (labels.size() != scores.size()) throw DomainError("pr_auc: length mismatch");
  const auto total_pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  if (total_pos == 0) throw DomainError("pr_auc: no positive labels");
  const auto order = descending_order(scores);
  double ap = 0.0;
  std::size_t tp = 0, seen = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i, group_pos = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      group_pos += labels[order[j]] == 1 ? 1 : 0;
      ++j;
    }
    tp += group_pos;
    seen += j - i;
    if (group_pos > 0) ap += static_cast<double>(group_pos) * (static_cast<double>(tp) / static_cast<double>(seen));
    i = j;
  }
  return ap / static_cast<double>(total_pos);
}

struct CurvePoint {
  double rejected = 0.0;  // fraction rejected
  double quality = 0.0;   // mean quality of the retained samples
};

// Retained quality after rejecting the samples in `order` one at a time.
// Point i = (i / n, mean quality of the n - i still retained), i = 0..n-1.
inline std::vector<CurvePoint> rejection_curve_for_order(std::span<const double> qualities,
                                                         std::span<const std::size_t> order) {
  const std::size_t n = qualities.size();
  std::vector<CurvePoint> curve(n);
  // Suffix sums of quality in rejection order give each retained mean.
  double retained = 0.0;
  for (std::size_t i = n; i-- > 0;) {
    retained += qualities[order[i]];
    curve[i] = {static_cast<double>(i) / static_cast<double>(n), retained / static_cast<double>(n - i)};
  }
  return curve;
}

// Rejects the most hallucination-like samples (highest probability) first;
// ties are rejected in input order.
inline std::vector<CurvePoint> rejection_curve(std::span<const double> qualities,
                                               std::span<const double> probabilities) {
  if (qualities.size() != probabilities.size()) throw DomainError("rejection_curve: length mismatch");
  if (qualities.size() < 2) throw DomainError("rejection_curve: need at least two samples");
  const auto order = descending_order(probabilities);
  return rejection_curve_for_order(qualities, order);
}

// Trapezoidal area under a rejection curve over rejected fraction [0, k].
// Beyond the last point ((n-1)/n) the curve is held at its last value.
inline double rejection_area(std::span<const CurvePoint> curve, double k) {
  double area = 0.0;
  for (std::size_t i = 0; i + 1 < curve.size(); ++i) {
    const auto& a = curve[i];
    const auto& b = curve[i + 1];
    if (a.rejected >= k) return area;
    if (b.rejected <= k) {
      area += 0.5 * (a.quality + b.quality) * (b.rejected - a.rejected);
    } else {
      const double qk = a.quality + (b.quality - a.quality) * (k - a.rejected) / (b.rejected - a.rejected);
      area += 0.5 * (a.quality + qk) * (k - a.rejected);
      return area;
    }
  }
  if (!curve.empty() && curve.back().rejected < k) area += curve.back().quality * (k - curve.back().rejected);
  return area;
}

struct PrrResult {
  std::optional<double> prr;  // nullopt when oracle and random areas coincide
  double auc_prob = 0.0;
  double auc_random = 0.0;
  double auc_oracle = 0.0;
};

// (AUC_prob - AUC_random) / (AUC_oracle - AUC_random) over rejected fraction
// [0, k]. The oracle rejects lowest quality first; the random baseline is
// the flat line at the mean quality.
inline PrrResult prr_at_k(std::span<const double> qualities, std::span<const double> probabilities, double k) {
  const std::size_t n = qualities.size();
  if (!(k > 0.0 && k <= 1.0)) throw DomainError("prr_at_k: k must lie in (0, 1]");
  if (static_cast<double>(n) * k < 1.0 - 1e-12) throw DomainError("prr_at_k: n * k must be at least 1");
  const auto curve = rejection_curve(qualities, probabilities);
  std::vector<double> neg_q(qualities.begin(), qualities.end());
  for (double& q : neg_q) q = -q;
  const auto oracle = rejection_curve_for_order(qualities, descending_order(neg_q));
  const double mean = std::accumulate(qualities.begin(), qualities.end(), 0.0) / static_cast<double>(n);
  PrrResult r;
  r.auc_prob = rejection_area(curve, k);
  r.auc_oracle = rejection_area(oracle, k);
  r.auc_random = mean * k;
  const double denom = r.auc_oracle - r.auc_random;
  const double scale = std::max(std::abs(r.auc_oracle), std::abs(r.auc_random));
  if (std::abs(denom) > 1e-12 * std::max(scale, 1e-300)) r.prr = (r.auc_prob - r.auc_random) / denom;
  return r;
}

struct EvalReport {
  std::size_t num_records = 0;
  std::optional<ConfusionMetrics> threshold_metrics;
  double threshold = 0.5;
  std::optional<double> pr_auc;
  std::optional<double> prr_at_k;
  double k = 0.1;
  std::vector<CurvePoint> rejection_curve;
  std::string score_source;
  std::string quality_key;
};

// Assembles a report from per-record scores. Labels enable threshold metrics
// and PR-AUC; qualities enable the rejection curve and PRR@k.
inline EvalReport evaluate_scores(std::span<const double> scores, std::optional<std::span<const int>> labels,
                                  std::optional<std::span<const double>> qualities, double threshold, double k) {
  EvalReport rep;
  rep.num_records = scores.size();
  rep.threshold = threshold;
  rep.k = k;
  if (labels) {
    rep.threshold_metrics = confusion_metrics(*labels, scores, threshold);
    if (std::count(labels->begin(), labels->end(), 1) > 0) rep.pr_auc = pr_auc(*labels, scores);
  }
  if (qualities) {
    rep.rejection_curve = rejection_curve(*qualities, scores);
    rep.prr_at_k = prr_at_k(*qualities, scores, k).prr;
  }
  return rep;
}

inline nlohmann::json report_to_json(const EvalReport& r, std::size_t max_curve_points = 200) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  nlohmann::json j{{"num_records", r.num_records},
                   {"score_source", r.score_source},
                   {"threshold", r.threshold},
                   {"k", r.k},
                   {"pr_auc", opt(r.pr_auc)},
                   {"prr_at_k", opt(r.prr_at_k)}};
  if (r.threshold_metrics) {
    const auto& m = *r.threshold_metrics;
    j["predicted_hallucination_rate"] = m.predicted_rate;
    j["accuracy"] = m.accuracy;
    j["f1"] = m.f1;
    j["precision"] = m.precision;
    j["recall"] = m.recall;
  }
  if (!r.quality_key.empty()) j["quality_key"] = r.quality_key;
  nlohmann::json curve = nlohmann::json::array();
  if (!r.rejection_curve.empty()) {
    const std::size_t n = r.rejection_curve.size();
    const std::size_t stride = std::max<std::size_t>(1, (n + max_curve_points - 1) / max_curve_points);
    for (std::size_t i = 0; i < n; i += stride) curve.push_back({r.rejection_curve[i].rejected, r.rejection_curve[i].quality});
    if ((n - 1) % stride != 0) curve.push_back({r.rejection_curve.back().rejected, r.rejection_curve.back().quality});
  }
  j["rejection_curve"] = curve;
  return j;
}

}  // namespace attnhd
