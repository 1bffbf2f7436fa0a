#pragma once

// Hallucination detectors on attention features: MinMax scaling, training,
// prediction, head importance, and the two feature-selection procedures.
// Models persist as MODEL-v1 JSON documents.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "attnhd/digest.hpp"
#include "attnhd/errors.hpp"
#include "attnhd/features.hpp"
#include "attnhd/logreg.hpp"

namespace attnhd {

inline std::string head_name(const HeadKey& k) {
  return std::string(metric_name(k.metric)) + "[" + std::to_string(k.layer) + "," + std::to_string(k.head) + "]";
}

// Metrics that are MinMax-scaled by default: the two entropies.
inline constexpr std::array<Metric, 2> kDefaultScaledMetrics = {Metric::AudioEntropy, Metric::TextEntropy};

// ---------------------------------------------------------------------------
// Design matrices

inline std::vector<std::size_t> all_rows(const FeatureSet& set) {
  std::vector<std::size_t> rows(set.records.size());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  return rows;
}

inline std::vector<std::size_t> columns_for(const FeatureSet& set, std::span<const HeadKey> heads) {
  std::vector<std::size_t> cols;
  cols.reserve(heads.size());
  for (const auto& k : heads) {
    auto c = set.column(k);
    if (!c) throw DataError("feature set has no column for head " + head_name(k));
    cols.push_back(*c);
  }
  return cols;
}

// Raw (unscaled) features of the selected rows and heads; rejects non-finite values.
inline Eigen::MatrixXd raw_matrix(const FeatureSet& set, std::span<const std::size_t> rows,
                                  std::span<const HeadKey> heads) {
  const auto cols = columns_for(set, heads);
  Eigen::MatrixXd X(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& rec = set.records.at(rows[i]);
    if (rec.values.size() != set.width()) throw FormatError("record '" + rec.utterance_id + "' has the wrong width");
    for (std::size_t j = 0; j < cols.size(); ++j) {
      const float v = rec.values[cols[j]];
      if (!std::isfinite(v)) {
        throw DataError("non-finite value of feature " + head_name(heads[j]) + " in record '" + rec.utterance_id + "'");
      }
      X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v;
    }
  }
  return X;
}

inline std::vector<int> labels_of(const FeatureSet& set, std::span<const std::size_t> rows) {
  std::vector<int> y;
  y.reserve(rows.size());
  for (auto r : rows) {
    const auto& rec = set.records.at(r);
    if (!rec.label) throw DataError("record '" + rec.utterance_id + "' has no label");
    y.push_back(*rec.label);
  }
  return y;
}

// Population standard deviation of each column.
inline std::vector<double> column_stds(const Eigen::MatrixXd& X) {
  std::vector<double> out(static_cast<std::size_t>(X.cols()), 0.0);
  if (X.rows() == 0) return out;
  for (Eigen::Index j = 0; j < X.cols(); ++j) {
    const double mean = X.col(j).mean();
    out[static_cast<std::size_t>(j)] = std::sqrt((X.col(j).array() - mean).square().mean());
  }
  return out;
}

// ---------------------------------------------------------------------------
// MinMax scaling

struct ScalerParams {
  std::vector<double> min;
  std::vector<double> max;
  std::vector<bool> scaled;  // false: identity

  std::size_t size() const { return min.size(); }

  // Constant features map to 0.5; test values are clamped to [0, 1].
  double apply(std::size_t j, double x) const {
    if (!scaled[j]) return x;
    const double range = max[j] - min[j];
    if (range <= 0.0) return 0.5;
    return std::clamp((x - min[j]) / range, 0.0, 1.0);
  }

  void apply_inplace(Eigen::MatrixXd& X) const {
    for (Eigen::Index j = 0; j < X.cols(); ++j) {
      const auto jj = static_cast<std::size_t>(j);
      if (!scaled[jj]) continue;
      for (Eigen::Index i = 0; i < X.rows(); ++i) X(i, j) = apply(jj, X(i, j));
    }
  }

  friend bool operator==(const ScalerParams&, const ScalerParams&) = default;
};

inline ScalerParams fit_minmax(const Eigen::MatrixXd& raw, std::span<const HeadKey> heads,
                               std::span<const Metric> metrics_to_scale = kDefaultScaledMetrics) {
  if (raw.rows() == 0) throw DataError("fit_minmax: no training records");
  ScalerParams p;
  for (Eigen::Index j = 0; j < raw.cols(); ++j) {
    const auto jj = static_cast<std::size_t>(j);
    const bool scale =
        std::find(metrics_to_scale.begin(), metrics_to_scale.end(), heads[jj].metric) != metrics_to_scale.end();
    p.scaled.push_back(scale);
    p.min.push_back(scale ? raw.col(j).minCoeff() : 0.0);
    p.max.push_back(scale ? raw.col(j).maxCoeff() : 0.0);
  }
  return p;
}

inline ScalerParams fit_minmax(const FeatureSet& set, std::span<const HeadKey> heads,
                               std::span<const Metric> metrics_to_scale = kDefaultScaledMetrics) {
  const auto rows = all_rows(set);
  return fit_minmax(raw_matrix(set, rows, heads), heads, metrics_to_scale);
}

// Scaled copy of the active features of one record.
inline std::vector<double> apply_minmax(const ScalerParams& params, std::span<const double> active_raw) {
  std::vector<double> out(active_raw.size());
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = params.apply(j, active_raw[j]);
  return out;
}

// ---------------------------------------------------------------------------
// Detector model

struct Provenance {
  std::string training_digest;
  std::string toolkit_version{kToolkitVersion};
  std::size_t training_records = 0;
  nlohmann::json extra = nlohmann::json::object();

  friend bool operator==(const Provenance&, const Provenance&) = default;
};

struct DetectorModel {
  std::vector<HeadKey> active_heads;
  std::vector<double> weights;
  double bias = 0.0;
  ScalerParams scaler;
  HyperParams hyperparams;
  double decision_threshold = 0.5;
  // Population std of each active feature on the raw training data.
  std::vector<double> feature_stds;
  Provenance provenance;

  // Probability from the raw (unscaled) active feature values.
  double probability(std::span<const double> active_raw) const {
    if (active_raw.size() != weights.size()) throw DataError("model expects " + std::to_string(weights.size()) + " features");
    double z = bias;
    for (std::size_t j = 0; j < weights.size(); ++j) z += weights[j] * scaler.apply(j, active_raw[j]);
    return sigmoid(z);
  }

  friend bool operator==(const DetectorModel&, const DetectorModel&) = default;
};

inline double predict_proba(const DetectorModel& model, const FeatureSet& set, const FeatureRecord& rec) {
  if (rec.values.size() != set.width()) throw DataError("record '" + rec.utterance_id + "' has the wrong width");
  std::vector<double> raw(model.active_heads.size());
  for (std::size_t j = 0; j < raw.size(); ++j) {
    auto c = set.column(model.active_heads[j]);
    if (!c) throw DataError("record '" + rec.utterance_id + "' lacks head " + head_name(model.active_heads[j]));
    raw[j] = rec.values[*c];
  }
  return model.probability(raw);
}

inline std::vector<double> predict_all(const DetectorModel& model, const FeatureSet& set) {
  std::vector<double> p;
  p.reserve(set.records.size());
  for (const auto& r : set.records) p.push_back(predict_proba(model, set, r));
  return p;
}

inline int classify(const DetectorModel& model, double probability) {
  return probability > model.decision_threshold ? 1 : 0;
}

inline std::string training_digest(const Eigen::MatrixXd& raw, std::span<const int> labels,
                                   std::span<const HeadKey> heads) {
  Sha256 h;
  for (const auto& k : heads) h.update(head_name(k)).update(";");
  h.update_values(std::span<const double>(raw.data(), static_cast<std::size_t>(raw.size())));
  h.update_values(labels);
  return h.hex();
}

// Fits scaler and logistic regression on the given rows and heads.
inline DetectorModel train_detector(const FeatureSet& set, std::span<const std::size_t> rows,
                                    std::span<const HeadKey> active_heads, const HyperParams& hp,
                                    std::span<const Metric> metrics_to_scale = kDefaultScaledMetrics) {
  hp.validate();
  if (active_heads.empty()) throw TrainingError("no active heads to train on");
  Eigen::MatrixXd raw = raw_matrix(set, rows, active_heads);
  const auto labels = labels_of(set, rows);
  DetectorModel m;
  m.active_heads.assign(active_heads.begin(), active_heads.end());
  m.hyperparams = hp;
  m.feature_stds = column_stds(raw);
  m.scaler = fit_minmax(raw, active_heads, metrics_to_scale);
  m.provenance.training_digest = training_digest(raw, labels, active_heads);
  m.provenance.training_records = rows.size();
  m.scaler.apply_inplace(raw);
  const LogisticProblem problem(std::move(raw), labels, hp.positive_class_weight);
  const FitResult fit = fit_logistic(problem, hp);
  m.weights.assign(fit.weights.data(), fit.weights.data() + fit.weights.size());
  m.bias = fit.bias;
  m.provenance.extra["objective"] = fit.objective;
  m.provenance.extra["iterations"] = fit.iterations;
  m.provenance.extra["converged"] = fit.converged;
  return m;
}

inline DetectorModel train_detector(const FeatureSet& set, std::span<const HeadKey> active_heads,
                                    const HyperParams& hp) {
  const auto rows = all_rows(set);
  return train_detector(set, rows, active_heads, hp);
}

// ---------------------------------------------------------------------------
// Feature selection

struct HeadImportance {
  HeadKey key;
  double importance = 0.0;
};

// |w_j| * std_j, sorted descending; ties keep (metric, layer, head) order.
inline std::vector<HeadImportance> head_importance(std::span<const HeadKey> heads, std::span<const double> weights,
                                                   std::span<const double> stds) {
  if (heads.size() != weights.size() || heads.size() != stds.size())
    throw DataError("head_importance: size mismatch");
  std::vector<HeadImportance> out;
  for (std::size_t j = 0; j < heads.size(); ++j) out.push_back({heads[j], std::abs(weights[j]) * stds[j]});
  std::sort(out.begin(), out.end(), [](const HeadImportance& a, const HeadImportance& b) {
    if (a.importance != b.importance) return a.importance > b.importance;
    return a.key < b.key;
  });
  return out;
}

inline std::vector<HeadImportance> head_importance(const DetectorModel& model) {
  return head_importance(model.active_heads, model.weights, model.feature_stds);
}

// The n most important heads of each metric, returned in (metric, layer, head) order.
inline std::vector<HeadKey> select_top_n(std::span<const HeadImportance> ranked, std::size_t n) {
  if (n == 0) throw ConfigError("top-N selection needs n >= 1");
  std::map<Metric, std::size_t> taken;
  std::vector<HeadKey> out;
  for (const auto& r : ranked) {
    auto& t = taken[r.key.metric];
    if (t < n) {
      out.push_back(r.key);
      ++t;
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

// Top-n heads of a single metric (used by the scaling sweep).
inline std::vector<HeadKey> select_top_n_of(std::span<const HeadImportance> ranked, Metric metric, std::size_t n) {
  std::vector<HeadKey> out;
  for (const auto& r : ranked) {
    if (out.size() == n) break;
    if (r.key.metric == metric) out.push_back(r.key);
  }
  std::sort(out.begin(), out.end());
  return out;
}

// Stratified k-fold assignment: positives and negatives are shuffled
// separately and dealt round-robin. Returns the fold index of each row.
inline std::vector<std::size_t> stratified_folds(std::span<const int> labels, std::size_t k, std::uint64_t seed) {
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < labels.size(); ++i) (labels[i] == 1 ? pos : neg).push_back(i);
  std::mt19937_64 rng(seed);
  std::shuffle(pos.begin(), pos.end(), rng);
  std::shuffle(neg.begin(), neg.end(), rng);
  std::vector<std::size_t> fold(labels.size());
  std::size_t next = 0;
  for (auto i : pos) fold[i] = next++ % k;
  for (auto i : neg) fold[i] = next++ % k;
  return fold;
}

struct StableSelection {
  std::vector<HeadKey> kept;
  std::vector<HeadKey> candidates;
  std::vector<std::size_t> nonzero_folds;  // per candidate
  std::size_t folds = 0;
  std::size_t required = 0;
};

inline constexpr double kNonZeroWeight = 1e-10;

// Heads with |w| > 1e-10 in at least ceil(keep_threshold * k) of the k
// per-fold L1 models.
inline StableSelection stable_feature_selection(const FeatureSet& set, std::span<const std::size_t> rows,
                                                std::span<const HeadKey> candidates, const HyperParams& l1_hp,
                                                std::size_t k_folds = 5, double keep_threshold = 0.8) {
  if (k_folds < 2) throw ConfigError("stable selection needs at least 2 folds");
  if (!(keep_threshold > 0.0 && keep_threshold <= 1.0)) throw ConfigError("keep threshold must lie in (0, 1]");
  const auto labels = labels_of(set, rows);
  const auto fold = stratified_folds(labels, k_folds, l1_hp.seed);
  StableSelection sel;
  sel.candidates.assign(candidates.begin(), candidates.end());
  sel.nonzero_folds.assign(candidates.size(), 0);
  sel.folds = k_folds;
  sel.required = static_cast<std::size_t>(std::ceil(keep_threshold * static_cast<double>(k_folds) - 1e-9));
  for (std::size_t f = 0; f < k_folds; ++f) {
    std::vector<std::size_t> train;
    for (std::size_t i = 0; i < rows.size(); ++i)
      if (fold[i] != f) train.push_back(rows[i]);
    const auto model = train_detector(set, train, candidates, l1_hp);
    for (std::size_t j = 0; j < candidates.size(); ++j)
      if (std::abs(model.weights[j]) > kNonZeroWeight) ++sel.nonzero_folds[j];
  }
  for (std::size_t j = 0; j < candidates.size(); ++j)
    if (sel.nonzero_folds[j] >= sel.required) sel.kept.push_back(candidates[j]);
  if (sel.kept.empty()) {
    throw SelectionError("stable selection kept no heads; use a larger L1 C or a lower keep threshold");
  }
  return sel;
}

// ---------------------------------------------------------------------------
// MODEL-v1 persistence

inline nlohmann::json hyperparams_to_json(const HyperParams& hp) {
  return {{"penalty", std::string(penalty_name(hp.penalty))},
          {"C", hp.C},
          {"positive_class_weight", hp.positive_class_weight},
          {"max_iterations", hp.max_iterations},
          {"convergence_tol", hp.convergence_tol},
          {"seed", hp.seed}};
}

inline HyperParams hyperparams_from_json(const nlohmann::json& j) {
  HyperParams hp;
  hp.penalty = parse_penalty(j.at("penalty").get<std::string>());
  hp.C = j.at("C").get<double>();
  hp.positive_class_weight = j.at("positive_class_weight").get<double>();
  hp.max_iterations = j.at("max_iterations").get<int>();
  hp.convergence_tol = j.at("convergence_tol").get<double>();
  hp.seed = j.at("seed").get<std::uint64_t>();
  return hp;
}

inline nlohmann::json head_to_json(const HeadKey& k) {
  return {{"metric", std::string(metric_name(k.metric))}, {"layer", k.layer}, {"head", k.head}};
}

inline HeadKey head_from_json(const nlohmann::json& j) {
  const auto name = j.at("metric").get<std::string>();
  auto m = parse_metric(name);
  if (!m) throw FormatError("unknown metric '" + name + "'");
  return {*m, j.at("layer").get<std::uint32_t>(), j.at("head").get<std::uint32_t>()};
}

inline constexpr int kModelVersion = 1;

inline nlohmann::json model_to_json(const DetectorModel& m) {
  nlohmann::json heads = nlohmann::json::array();
  for (const auto& k : m.active_heads) heads.push_back(head_to_json(k));
  std::vector<int> scaled(m.scaler.scaled.begin(), m.scaler.scaled.end());
  return {{"version", kModelVersion},
          {"hyperparams", hyperparams_to_json(m.hyperparams)},
          {"active_heads", heads},
          {"weights", m.weights},
          {"bias", m.bias},
          {"scaler", {{"min", m.scaler.min}, {"max", m.scaler.max}, {"scaled", scaled}}},
          {"decision_threshold", m.decision_threshold},
          {"feature_stds", m.feature_stds},
          {"provenance",
           {{"training_digest", m.provenance.training_digest},
            {"toolkit_version", m.provenance.toolkit_version},
            {"training_records", m.provenance.training_records},
            {"extra", m.provenance.extra}}}};
}

inline DetectorModel model_from_json(const nlohmann::json& j) {
  try {
    if (j.at("version").get<int>() != kModelVersion) throw UnsupportedFormatError("unsupported model version");
    DetectorModel m;
    m.hyperparams = hyperparams_from_json(j.at("hyperparams"));
    for (const auto& h : j.at("active_heads")) m.active_heads.push_back(head_from_json(h));
    m.weights = j.at("weights").get<std::vector<double>>();
    m.bias = j.at("bias").get<double>();
    const auto& s = j.at("scaler");
    m.scaler.min = s.at("min").get<std::vector<double>>();
    m.scaler.max = s.at("max").get<std::vector<double>>();
    for (int v : s.at("scaled").get<std::vector<int>>()) m.scaler.scaled.push_back(v != 0);
    m.decision_threshold = j.at("decision_threshold").get<double>();
    m.feature_stds = j.at("feature_stds").get<std::vector<double>>();
    const auto& p = j.at("provenance");
    m.provenance.training_digest = p.at("training_digest").get<std::string>();
    m.provenance.toolkit_version = p.at("toolkit_version").get<std::string>();
    m.provenance.training_records = p.at("training_records").get<std::size_t>();
    if (p.contains("extra")) m.provenance.extra = p.at("extra");
    const std::size_t n = m.active_heads.size();
    if (m.weights.size() != n || m.scaler.min.size() != n || m.scaler.max.size() != n ||
        m.scaler.scaled.size() != n || m.feature_stds.size() != n) {
      throw FormatError("model arrays disagree with the number of active heads");
    }
    if (!(m.decision_threshold > 0.0 && m.decision_threshold < 1.0))
      throw FormatError("decision threshold must lie in (0, 1)");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed model document: ") + e.what());
  }
}

inline void save_model(const std::filesystem::path& path, const DetectorModel& m) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
  out << model_to_json(m).dump(2) << '\n';
  if (!out) throw DataError("failed writing '" + path.string() + "'");
}

inline DetectorModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open model '" + path.string() + "'");
  try {
    return model_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("model '" + path.string() + "' is not valid JSON: " + e.what());
  }
}

}  // namespace attnhd
