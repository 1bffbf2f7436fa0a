#pragma once

// End-to-end commands: extract, label, train, evaluate, sweep, head-overlap,
// synth and validate. Each command reads and writes files described by a
// PipelineConfig and embeds provenance (input digests, configuration
// snapshot, toolkit version) in what it writes. No timestamps are written,
// so identical inputs give byte-identical outputs.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "attnhd/classifier.hpp"
#include "attnhd/digest.hpp"
#include "attnhd/errors.hpp"
#include "attnhd/evaluation.hpp"
#include "attnhd/features.hpp"
#include "attnhd/labelling.hpp"
#include "attnhd/metrics.hpp"
#include "attnhd/parallel.hpp"
#include "attnhd/sidecar.hpp"
#include "attnhd/synth.hpp"
#include "attnhd/trace.hpp"
#include "attnhd/tsv.hpp"

namespace attnhd {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Configuration

struct SelectionStrategy {
  enum class Kind { All, AudioRatioOnly, TopN, Stable };
  Kind kind = Kind::All;
  std::size_t n = 0;
  double threshold = 0.8;

  static SelectionStrategy parse(std::string_view s) {
    SelectionStrategy st;
    if (s == "all") return st;
    if (s == "audio_ratio_only") {
      st.kind = Kind::AudioRatioOnly;
      return st;
    }
    const auto colon = s.find(':');
    const auto name = s.substr(0, colon);
    const std::string arg = colon == std::string_view::npos ? "" : std::string(s.substr(colon + 1));
    try {
      if (name == "top_n" && !arg.empty()) {
        st.kind = Kind::TopN;
        const long v = std::stol(arg);
        if (v < 1) throw ConfigError("top_n needs n >= 1");
        st.n = static_cast<std::size_t>(v);
        return st;
      }
      if (name == "stable") {
        st.kind = Kind::Stable;
        if (!arg.empty()) st.threshold = std::stod(arg);
        return st;
      }
    } catch (const std::logic_error&) {
    }
    throw ConfigError("unknown selection strategy '" + std::string(s) +
                      "' (expected all, audio_ratio_only, top_n:N or stable[:THRESHOLD])");
  }

  std::string str() const {
    switch (kind) {
      case Kind::All: return "all";
      case Kind::AudioRatioOnly: return "audio_ratio_only";
      case Kind::TopN: return "top_n:" + std::to_string(n);
      case Kind::Stable: {
        std::ostringstream os;
        os << "stable:" << threshold;
        return os.str();
      }
    }
    return "all";
  }
};

struct PipelineConfig {
  // Paths
  std::string trace_dir;
  std::string feature_file;
  std::string eval_feature_file;
  std::string label_file;
  std::string eval_label_file;
  std::string model_file;
  std::string model_file_b;
  std::string report_dir;
  std::string output;
  std::string refs_file;
  std::string hyps_file;
  std::string sidecar_file;
  std::string scores_file;

  // Features and training
  std::vector<Metric> metrics{kAllMetrics.begin(), kAllMetrics.end()};
  HyperParams detector = default_l2_params();
  HyperParams selector = default_l1_params();
  std::string selection = "all";
  std::size_t folds = 5;
  double decision_threshold = 0.5;

  // Evaluation
  double k = 0.1;
  std::string quality_key = kShsKey;
  std::string quality_transform = "auto";  // auto | identity | one_minus
  std::string baseline;                    // empty: use the model
  std::vector<std::size_t> n_values{5, 25, 100};
  std::size_t top_k = 50;

  // Labelling
  std::string label_mode = "threshold";  // threshold | percentile
  double label_threshold = kDefaultLabelThreshold;
  double bottom_fraction = 0.05;
  ShsConfig shs;

  // Synthetic data
  SynthConfig synth;
  std::size_t n_train = 2000;
  std::size_t n_test = 500;
  std::string synth_format = "feat";  // feat | trace | both

  std::uint64_t seed = 0;
  unsigned threads = 1;
};

namespace detail {

inline nlohmann::json metrics_json(const std::vector<Metric>& ms) {
  nlohmann::json a = nlohmann::json::array();
  for (Metric m : ms) a.push_back(std::string(metric_name(m)));
  return a;
}

inline std::vector<Metric> metrics_from_json(const nlohmann::json& j) {
  std::vector<Metric> out;
  for (const auto& v : j) {
    auto m = parse_metric(v.get<std::string>());
    if (!m) throw ConfigError("unknown metric '" + v.get<std::string>() + "'");
    if (std::find(out.begin(), out.end(), *m) == out.end()) out.push_back(*m);
  }
  if (out.empty()) throw ConfigError("at least one metric must be enabled");
  return out;
}

inline const std::set<std::string>& path_keys() {
  static const std::set<std::string> keys{"trace_dir",  "feature_file", "eval_feature_file", "label_file",
                                          "eval_label_file", "model_file", "model_file_b", "report_dir",
                                          "output", "refs_file", "hyps_file", "sidecar_file", "scores_file"};
  return keys;
}

}  // namespace detail

// Flat key/value form of the configuration.
inline nlohmann::json config_to_json(const PipelineConfig& c) {
  return {{"trace_dir", c.trace_dir},
          {"feature_file", c.feature_file},
          {"eval_feature_file", c.eval_feature_file},
          {"label_file", c.label_file},
          {"eval_label_file", c.eval_label_file},
          {"model_file", c.model_file},
          {"model_file_b", c.model_file_b},
          {"report_dir", c.report_dir},
          {"output", c.output},
          {"refs_file", c.refs_file},
          {"hyps_file", c.hyps_file},
          {"sidecar_file", c.sidecar_file},
          {"scores_file", c.scores_file},
          {"metrics", detail::metrics_json(c.metrics)},
          {"penalty", std::string(penalty_name(c.detector.penalty))},
          {"C", c.detector.C},
          {"positive_class_weight", c.detector.positive_class_weight},
          {"max_iterations", c.detector.max_iterations},
          {"convergence_tol", c.detector.convergence_tol},
          {"l1_C", c.selector.C},
          {"l1_positive_class_weight", c.selector.positive_class_weight},
          {"selection", c.selection},
          {"folds", c.folds},
          {"decision_threshold", c.decision_threshold},
          {"k", c.k},
          {"quality_key", c.quality_key},
          {"quality_transform", c.quality_transform},
          {"baseline", c.baseline},
          {"n_values", c.n_values},
          {"top_k", c.top_k},
          {"label_mode", c.label_mode},
          {"label_threshold", c.label_threshold},
          {"bottom_fraction", c.bottom_fraction},
          {"shs_windows", c.shs.windows},
          {"shs_window_weights", c.shs.window_weights},
          {"shs_component_weights", std::vector<double>{c.shs.w_local, c.shs.w_distance, c.shs.w_coherence}},
          {"synth_layers", c.synth.num_layers},
          {"synth_heads", c.synth.num_heads},
          {"synth_audio_len", std::vector<std::uint32_t>{c.synth.audio_len.lo, c.synth.audio_len.hi}},
          {"synth_prompt_len", std::vector<std::uint32_t>{c.synth.prompt_len.lo, c.synth.prompt_len.hi}},
          {"synth_gen_len", std::vector<std::uint32_t>{c.synth.gen_len.lo, c.synth.gen_len.hi}},
          {"synth_hallucination_rate", c.synth.hallucination_rate},
          {"synth_collapse_heads", c.synth.collapse_heads},
          {"synth_noise_scale", c.synth.noise_scale},
          {"synth_signature_heads", c.synth.signature_heads},
          {"n_train", c.n_train},
          {"n_test", c.n_test},
          {"synth_format", c.synth_format},
          {"seed", c.seed},
          {"threads", c.threads}};
}

// Applies the keys present in `j` on top of `base`. Unknown keys and type
// mismatches are configuration errors.
inline PipelineConfig config_from_json(const nlohmann::json& j, PipelineConfig c = {}) {
  if (!j.is_object()) throw ConfigError("configuration must be a flat JSON object");
  const auto known = config_to_json(c);
  for (const auto& [key, value] : j.items())
    if (!known.contains(key)) throw ConfigError("unknown configuration key '" + key + "'");
  auto range = [](const nlohmann::json& v) {
    const auto a = v.get<std::vector<std::uint32_t>>();
    if (a.size() != 2) throw ConfigError("ranges are written as [lo, hi]");
    return Range{a[0], a[1]};
  };
  try {
    auto get = [&](const char* key, auto& field) {
      if (auto it = j.find(key); it != j.end()) field = it->get<std::decay_t<decltype(field)>>();
    };
    get("trace_dir", c.trace_dir);
    get("feature_file", c.feature_file);
    get("eval_feature_file", c.eval_feature_file);
    get("label_file", c.label_file);
    get("eval_label_file", c.eval_label_file);
    get("model_file", c.model_file);
    get("model_file_b", c.model_file_b);
    get("report_dir", c.report_dir);
    get("output", c.output);
    get("refs_file", c.refs_file);
    get("hyps_file", c.hyps_file);
    get("sidecar_file", c.sidecar_file);
    get("scores_file", c.scores_file);
    if (j.contains("metrics")) c.metrics = detail::metrics_from_json(j.at("metrics"));
    if (j.contains("penalty")) c.detector.penalty = parse_penalty(j.at("penalty").get<std::string>());
    get("C", c.detector.C);
    get("positive_class_weight", c.detector.positive_class_weight);
    get("max_iterations", c.detector.max_iterations);
    get("convergence_tol", c.detector.convergence_tol);
    get("l1_C", c.selector.C);
    get("l1_positive_class_weight", c.selector.positive_class_weight);
    get("selection", c.selection);
    get("folds", c.folds);
    get("decision_threshold", c.decision_threshold);
    get("k", c.k);
    get("quality_key", c.quality_key);
    get("quality_transform", c.quality_transform);
    get("baseline", c.baseline);
    get("n_values", c.n_values);
    get("top_k", c.top_k);
    get("label_mode", c.label_mode);
    get("label_threshold", c.label_threshold);
    get("bottom_fraction", c.bottom_fraction);
    get("shs_windows", c.shs.windows);
    get("shs_window_weights", c.shs.window_weights);
    if (j.contains("shs_component_weights")) {
      const auto w = j.at("shs_component_weights").get<std::vector<double>>();
      if (w.size() != 3) throw ConfigError("shs_component_weights needs three values");
      c.shs.w_local = w[0];
      c.shs.w_distance = w[1];
      c.shs.w_coherence = w[2];
    }
    get("synth_layers", c.synth.num_layers);
    get("synth_heads", c.synth.num_heads);
    if (j.contains("synth_audio_len")) c.synth.audio_len = range(j.at("synth_audio_len"));
    if (j.contains("synth_prompt_len")) c.synth.prompt_len = range(j.at("synth_prompt_len"));
    if (j.contains("synth_gen_len")) c.synth.gen_len = range(j.at("synth_gen_len"));
    get("synth_hallucination_rate", c.synth.hallucination_rate);
    get("synth_collapse_heads", c.synth.collapse_heads);
    get("synth_noise_scale", c.synth.noise_scale);
    get("synth_signature_heads", c.synth.signature_heads);
    get("n_train", c.n_train);
    get("n_test", c.n_test);
    get("synth_format", c.synth_format);
    get("seed", c.seed);
    get("threads", c.threads);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("configuration type error: ") + e.what());
  }
  c.detector.seed = c.seed;
  c.selector.seed = c.seed;
  c.synth.seed = c.seed;
  c.detector.penalty = Penalty::L2;
  c.selector.penalty = Penalty::L1;
  c.selector.max_iterations = c.detector.max_iterations;
  c.selector.convergence_tol = c.detector.convergence_tol;
  return c;
}

inline PipelineConfig load_config(const fs::path& path, PipelineConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open configuration '" + path.string() + "'");
  try {
    return config_from_json(nlohmann::json::parse(in), std::move(base));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("configuration '" + path.string() + "' is not valid JSON: " + e.what());
  }
}

inline void save_config(const fs::path& path, const PipelineConfig& c) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot write configuration '" + path.string() + "'");
  out << config_to_json(c).dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Provenance and small file helpers

// Configuration snapshot without paths: paths are represented by input digests.
inline nlohmann::json config_snapshot(const PipelineConfig& c) {
  auto j = config_to_json(c);
  for (const auto& k : detail::path_keys()) j.erase(k);
  j.erase("threads");
  return j;
}

inline nlohmann::json provenance(std::string_view command, const PipelineConfig& c,
                                 const std::vector<fs::path>& inputs) {
  nlohmann::json digests = nlohmann::json::object();
  for (const auto& p : inputs) digests[p.filename().string()] = sha256_file(p);
  return {{"toolkit_version", std::string(kToolkitVersion)},
          {"command", std::string(command)},
          {"inputs", digests},
          {"config", config_snapshot(c)}};
}

inline std::string format_number(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline void require_path(const std::string& value, const char* what) {
  if (value.empty()) throw ConfigError(std::string("missing required setting: ") + what);
}

inline void require_existing(const std::string& value, const char* what) {
  require_path(value, what);
  if (!fs::exists(value)) throw ConfigError(std::string(what) + " '" + value + "' does not exist");
}

inline void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

// Attaches labels and quality columns to records with matching ids.
inline std::size_t merge_labels(FeatureSet& set, const LabelTable& table) {
  std::size_t matched = 0;
  for (auto& r : set.records) {
    auto it = table.find(r.utterance_id);
    if (it == table.end()) continue;
    ++matched;
    if (it->second.label) r.label = it->second.label;
    for (const auto& [k, v] : it->second.quality) r.quality[k] = v;
  }
  return matched;
}

inline FeatureSet load_features(const std::string& feature_file, const std::string& label_file,
                                std::vector<fs::path>& inputs) {
  require_existing(feature_file, "feature file");
  auto set = read_feature_file(feature_file);
  inputs.emplace_back(feature_file);
  if (!label_file.empty()) {
    require_existing(label_file, "label file");
    const auto matched = merge_labels(set, read_label_table(label_file));
    inputs.emplace_back(label_file);
    spdlog::info("merged labels for {} of {} records", matched, set.records.size());
  }
  return set;
}

inline std::vector<std::size_t> labelled_rows(const FeatureSet& set) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < set.records.size(); ++i)
    if (set.records[i].label) rows.push_back(i);
  return rows;
}

// Heads of the enabled metrics that the feature set actually carries.
inline std::vector<HeadKey> candidate_heads(const FeatureSet& set, const std::vector<Metric>& enabled) {
  std::vector<HeadKey> out;
  for (Metric m : set.metrics) {
    if (std::find(enabled.begin(), enabled.end(), m) == enabled.end()) continue;
    auto hs = set.heads_of(m);
    out.insert(out.end(), hs.begin(), hs.end());
  }
  if (out.empty()) throw ConfigError("none of the enabled metrics is present in the feature file");
  std::sort(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------------------
// extract

struct ExtractResult {
  FeatureSet features;
  std::size_t processed = 0;
  std::vector<std::string> skipped;
};

inline std::vector<fs::path> list_files(const fs::path& dir, std::string_view extension) {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == extension) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  return files;
}

inline ExtractResult cmd_extract(const PipelineConfig& c) {
  require_existing(c.trace_dir, "trace directory");
  require_path(c.output, "output feature file");
  const auto files = list_files(c.trace_dir, ".atrc");
  std::vector<std::optional<FeatureRecord>> recs(files.size());
  std::vector<std::optional<TraceHeader>> headers(files.size());
  std::vector<std::string> errors(files.size());
  parallel_for(files.size(), c.threads, [&](std::size_t i) {
    try {
      TraceReader reader(files[i]);
      headers[i] = reader.header();
      recs[i] = aggregate_trace(reader);
    } catch (const DataError& e) {
      errors[i] = e.what();
    }
  });
  ExtractResult res;
  std::optional<TraceHeader> shape;
  for (std::size_t i = 0; i < files.size(); ++i) {
    if (!recs[i]) {
      spdlog::warn("skipping {}: {}", files[i].filename().string(), errors[i]);
      res.skipped.push_back(files[i].filename().string());
      continue;
    }
    if (!shape) {
      shape = headers[i];
    } else if (headers[i]->num_layers != shape->num_layers || headers[i]->num_heads != shape->num_heads) {
      throw DataError("trace " + files[i].filename().string() + " has a different layer/head count");
    }
    res.features.records.push_back(std::move(*recs[i]));
    if ((++res.processed) % 500 == 0) spdlog::info("extracted {} traces", res.processed);
  }
  if (res.processed == 0) throw DataError("no valid traces found in '" + c.trace_dir + "'");
  res.features.num_layers = shape->num_layers;
  res.features.num_heads = shape->num_heads;
  res.features.metrics.assign(kAllMetrics.begin(), kAllMetrics.end());
  std::vector<fs::path> inputs;
  if (!c.label_file.empty()) {
    require_existing(c.label_file, "label file");
    merge_labels(res.features, read_label_table(c.label_file));
    inputs.emplace_back(c.label_file);
  }
  auto prov = provenance("extract", c, inputs);
  prov["traces"] = res.processed;
  prov["skipped"] = res.skipped;
  res.features.provenance = prov;
  ensure_parent(c.output);
  write_feature_file(c.output, res.features);
  spdlog::info("wrote {} records to {}", res.processed, c.output);
  return res;
}

// ---------------------------------------------------------------------------
// label

struct LabelResult {
  std::size_t rows = 0;
  std::size_t positives = 0;
};

inline std::map<std::string, std::string> read_text_pairs(const fs::path& path) {
  std::map<std::string, std::string> out;
  for (const auto& row : read_tsv_rows(path)) {
    if (row.size() != 2) throw DataError("'" + path.string() + "': expected utterance_id<TAB>text rows");
    out[row[0]] = row[1];
  }
  return out;
}

inline LabelResult cmd_label(const PipelineConfig& c) {
  require_path(c.output, "output label file");
  LabelResult res;
  std::ostringstream out;
  if (c.label_mode == "threshold") {
    require_existing(c.refs_file, "reference file");
    require_existing(c.hyps_file, "hypothesis file");
    require_existing(c.sidecar_file, "sidecar file");
    c.shs.validate();
    const auto refs = read_text_pairs(c.refs_file);
    const auto hyps = read_text_pairs(c.hyps_file);
    auto backend = SidecarBackend::from_file(c.sidecar_file);
    auto prov = provenance("label", c, {c.refs_file, c.hyps_file, c.sidecar_file});
    out << "# provenance: " << prov.dump() << '\n';
    out << "utterance_id\twer\tshs\tlabel\n";
    for (const auto& [id, ref] : refs) {
      auto it = hyps.find(id);
      if (it == hyps.end()) throw DataError("no hypothesis for utterance '" + id + "'");
      const auto rec = label_pair(id, ref, it->second, backend, c.shs, c.label_threshold);
      out << id << '\t' << format_number(rec.wer) << '\t' << format_number(rec.shs) << '\t' << rec.label << '\n';
      ++res.rows;
      res.positives += static_cast<std::size_t>(rec.label);
    }
  } else if (c.label_mode == "percentile") {
    require_existing(c.scores_file, "scores file");
    require_path(c.quality_key, "quality key");
    const auto table = read_label_table(c.scores_file);
    std::vector<ScoredItem> items;
    for (const auto& [id, e] : table) {
      auto it = e.quality.find(c.quality_key);
      if (it == e.quality.end()) throw DataError("scores file has no column '" + c.quality_key + "'");
      items.push_back({id, it->second});
    }
    const auto labels = percentile_label(items, c.bottom_fraction);
    auto prov = provenance("label", c, {c.scores_file});
    out << "# provenance: " << prov.dump() << '\n';
    out << "utterance_id\t" << c.quality_key << "\tlabel\n";
    for (std::size_t i = 0; i < items.size(); ++i) {
      out << items[i].utterance_id << '\t' << format_number(items[i].score) << '\t' << labels[i] << '\n';
      ++res.rows;
      res.positives += static_cast<std::size_t>(labels[i]);
    }
  } else {
    throw ConfigError("label_mode must be 'threshold' or 'percentile'");
  }
  ensure_parent(c.output);
  std::ofstream f(c.output, std::ios::trunc);
  if (!f) throw DataError("cannot write '" + c.output + "'");
  f << out.str();
  spdlog::info("labelled {} utterances, {} hallucinations", res.rows, res.positives);
  return res;
}

// ---------------------------------------------------------------------------
// train

struct TrainResult {
  DetectorModel model;
  std::vector<HeadKey> selected;
};

// Runs the selection strategy and trains the final L2 detector.
inline TrainResult train_with_strategy(const FeatureSet& set, std::span<const std::size_t> rows,
                                       const PipelineConfig& c) {
  const auto strategy = SelectionStrategy::parse(c.selection);
  const auto candidates = candidate_heads(set, c.metrics);
  TrainResult res;
  nlohmann::json info{{"strategy", strategy.str()}};
  switch (strategy.kind) {
    case SelectionStrategy::Kind::All:
      res.selected = candidates;
      break;
    case SelectionStrategy::Kind::AudioRatioOnly:
      for (const auto& k : candidates)
        if (k.metric == Metric::AudioRatio) res.selected.push_back(k);
      if (res.selected.empty()) throw ConfigError("audio_ratio_only needs audio_ratio features");
      break;
    case SelectionStrategy::Kind::TopN: {
      if (strategy.n > set.heads()) {
        spdlog::warn("top_n {} exceeds the {} heads per metric; using all heads", strategy.n, set.heads());
      }
      const auto full = train_detector(set, rows, candidates, c.detector);
      res.selected = select_top_n(head_importance(full), strategy.n);
      break;
    }
    case SelectionStrategy::Kind::Stable: {
      const auto sel = stable_feature_selection(set, rows, candidates, c.selector, c.folds, strategy.threshold);
      res.selected = sel.kept;
      info["folds"] = sel.folds;
      info["required_folds"] = sel.required;
      break;
    }
  }
  info["selected_features"] = res.selected.size();
  res.model = train_detector(set, rows, res.selected, c.detector);
  res.model.decision_threshold = c.decision_threshold;
  res.model.provenance.extra["selection"] = info;
  return res;
}

inline TrainResult cmd_train(const PipelineConfig& c) {
  require_path(c.output, "output model file");
  if (!(c.decision_threshold > 0.0 && c.decision_threshold < 1.0))
    throw ConfigError("decision_threshold must lie in (0, 1)");
  std::vector<fs::path> inputs;
  const auto set = load_features(c.feature_file, c.label_file, inputs);
  const auto rows = labelled_rows(set);
  if (rows.empty()) throw DataError("no labelled records to train on");
  auto res = train_with_strategy(set, rows, c);
  res.model.provenance.extra["run"] = provenance("train", c, inputs);
  ensure_parent(c.output);
  save_model(c.output, res.model);
  spdlog::info("trained on {} records with {} features", rows.size(), res.selected.size());
  return res;
}

// ---------------------------------------------------------------------------
// evaluate

inline bool invert_quality(const PipelineConfig& c) {
  if (c.quality_transform == "auto") return c.quality_key == kShsKey;
  if (c.quality_transform == "one_minus") return true;
  if (c.quality_transform == "identity") return false;
  throw ConfigError("quality_transform must be auto, identity or one_minus");
}

// Scores from the model, or from a stored baseline column when configured.
inline std::vector<double> score_records(const FeatureSet& set, const PipelineConfig& c,
                                         const std::optional<DetectorModel>& model) {
  if (!c.baseline.empty()) {
    std::vector<double> s;
    for (const auto& r : set.records) {
      auto it = r.baselines.find(c.baseline);
      if (it == r.baselines.end())
        throw DataError("record '" + r.utterance_id + "' has no baseline '" + c.baseline + "'");
      s.push_back(it->second);
    }
    return s;
  }
  return predict_all(*model, set);
}

inline EvalReport evaluate_set(const FeatureSet& set, const std::vector<double>& scores, const PipelineConfig& c,
                               double threshold) {
  std::vector<int> labels;
  const bool all_labelled =
      std::all_of(set.records.begin(), set.records.end(), [](const FeatureRecord& r) { return r.label.has_value(); });
  if (all_labelled)
    for (const auto& r : set.records) labels.push_back(*r.label);
  std::vector<double> qualities;
  if (!c.quality_key.empty()) {
    const bool invert = invert_quality(c);
    for (const auto& r : set.records) {
      auto it = r.quality.find(c.quality_key);
      if (it == r.quality.end())
        throw DataError("record '" + r.utterance_id + "' has no quality '" + c.quality_key + "'");
      qualities.push_back(invert ? 1.0 - std::min(it->second, 1.0) : it->second);
    }
  }
  auto rep = evaluate_scores(scores, all_labelled ? std::optional<std::span<const int>>(labels) : std::nullopt,
                             c.quality_key.empty() ? std::nullopt : std::optional<std::span<const double>>(qualities),
                             threshold, c.k);
  rep.score_source = c.baseline.empty() ? "model" : c.baseline;
  rep.quality_key = c.quality_key;
  return rep;
}

struct EvaluateResult {
  EvalReport report;
  fs::path json_path;
  fs::path curve_path;
};

inline EvaluateResult cmd_evaluate(const PipelineConfig& c) {
  require_path(c.report_dir, "report directory");
  if (!(c.k > 0.0 && c.k <= 1.0)) throw ConfigError("k must lie in (0, 1]");
  std::vector<fs::path> inputs;
  const auto set = load_features(c.feature_file, c.label_file, inputs);
  if (set.records.empty()) throw DataError("feature file has no records");
  std::optional<DetectorModel> model;
  double threshold = c.decision_threshold;
  if (c.baseline.empty()) {
    require_existing(c.model_file, "model file");
    model = load_model(c.model_file);
    threshold = model->decision_threshold;
    inputs.emplace_back(c.model_file);
  }
  const auto scores = score_records(set, c, model);
  EvaluateResult res;
  res.report = evaluate_set(set, scores, c, threshold);
  auto j = report_to_json(res.report);
  j["provenance"] = provenance("evaluate", c, inputs);
  fs::create_directories(c.report_dir);
  res.json_path = fs::path(c.report_dir) / "report.json";
  res.curve_path = fs::path(c.report_dir) / "curve.tsv";
  {
    std::ofstream f(res.json_path, std::ios::trunc);
    f << j.dump(2) << '\n';
    if (!f) throw DataError("cannot write '" + res.json_path.string() + "'");
  }
  {
    std::ofstream f(res.curve_path, std::ios::trunc);
    f << "fraction\tretained_quality\n";
    for (const auto& p : res.report.rejection_curve)
      f << format_number(p.rejected) << '\t' << format_number(p.quality) << '\n';
    if (!f) throw DataError("cannot write '" + res.curve_path.string() + "'");
  }
  return res;
}

// ---------------------------------------------------------------------------
// sweep

struct SweepRow {
  std::string metric;  // metric name or "combined"
  std::size_t n = 0;
  std::size_t num_features = 0;
  double pr_auc = 0.0;
};

inline std::vector<SweepRow> run_sweep(const FeatureSet& train, const FeatureSet& eval, const PipelineConfig& c) {
  const auto rows = labelled_rows(train);
  if (rows.empty()) throw DataError("no labelled training records");
  std::vector<int> eval_labels;
  for (const auto& r : eval.records) {
    if (!r.label) throw DataError("evaluation record '" + r.utterance_id + "' has no label");
    eval_labels.push_back(*r.label);
  }
  const auto candidates = candidate_heads(train, c.metrics);
  const auto ranked = head_importance(train_detector(train, rows, candidates, c.detector));
  std::vector<SweepRow> out;
  auto run = [&](const std::string& name, std::size_t n, const std::vector<HeadKey>& heads) {
    const auto model = train_detector(train, rows, heads, c.detector);
    out.push_back({name, n, heads.size(), pr_auc(eval_labels, predict_all(model, eval))});
  };
  for (Metric m : c.metrics) {
    if (std::find(train.metrics.begin(), train.metrics.end(), m) == train.metrics.end()) continue;
    for (auto n : c.n_values) run(std::string(metric_name(m)), n, select_top_n_of(ranked, m, n));
  }
  for (auto n : c.n_values) run("combined", n, select_top_n(ranked, n));
  return out;
}

inline std::vector<SweepRow> cmd_sweep(const PipelineConfig& c) {
  require_path(c.output, "output table");
  if (c.n_values.empty()) throw ConfigError("n_values must not be empty");
  for (auto n : c.n_values)
    if (n == 0) throw ConfigError("n_values entries must be >= 1");
  std::vector<fs::path> inputs;
  const auto train = load_features(c.feature_file, c.label_file, inputs);
  const auto eval = load_features(c.eval_feature_file, c.eval_label_file.empty() ? c.label_file : c.eval_label_file, inputs);
  if (train.num_layers != eval.num_layers || train.num_heads != eval.num_heads)
    throw DataError("training and evaluation feature files differ in shape");
  const auto rows = run_sweep(train, eval, c);
  ensure_parent(c.output);
  std::ofstream f(c.output, std::ios::trunc);
  f << "# provenance: " << provenance("sweep", c, inputs).dump() << '\n';
  f << "metric\tn\tnum_features\tpr_auc\n";
  for (const auto& r : rows) f << r.metric << '\t' << r.n << '\t' << r.num_features << '\t' << format_number(r.pr_auc) << '\n';
  if (!f) throw DataError("cannot write '" + c.output + "'");
  return rows;
}

// ---------------------------------------------------------------------------
// head-overlap

struct OverlapRow {
  Metric metric;
  std::size_t k = 0;
  double overlap = 0.0;  // |A ∩ B| / k
};

inline std::vector<OverlapRow> head_overlap(const DetectorModel& a, const DetectorModel& b, std::size_t top_k) {
  if (top_k == 0) throw ConfigError("top_k must be >= 1");
  const auto ra = head_importance(a);
  const auto rb = head_importance(b);
  std::vector<OverlapRow> out;
  for (Metric m : kAllMetrics) {
    const auto count = [&](const std::vector<HeadImportance>& r) {
      return static_cast<std::size_t>(
          std::count_if(r.begin(), r.end(), [&](const HeadImportance& h) { return h.key.metric == m; }));
    };
    const std::size_t available = std::min(count(ra), count(rb));
    if (available == 0) continue;
    std::size_t k = top_k;
    if (k > available) {
      spdlog::warn("top_k {} exceeds the {} {} heads available; clamping", top_k, available, metric_name(m));
      k = available;
    }
    const auto ta = select_top_n_of(ra, m, k);
    const auto tb = select_top_n_of(rb, m, k);
    std::vector<HeadKey> common;
    std::set_intersection(ta.begin(), ta.end(), tb.begin(), tb.end(), std::back_inserter(common));
    out.push_back({m, k, static_cast<double>(common.size()) / static_cast<double>(k)});
  }
  return out;
}

inline std::vector<OverlapRow> cmd_head_overlap(const PipelineConfig& c) {
  require_existing(c.model_file, "first model");
  require_existing(c.model_file_b, "second model");
  require_path(c.output, "output table");
  const auto rows = head_overlap(load_model(c.model_file), load_model(c.model_file_b), c.top_k);
  ensure_parent(c.output);
  std::ofstream f(c.output, std::ios::trunc);
  f << "# provenance: " << provenance("head-overlap", c, {c.model_file, c.model_file_b}).dump() << '\n';
  f << "metric\ttop_k\toverlap\n";
  for (const auto& r : rows) f << metric_name(r.metric) << '\t' << r.k << '\t' << format_number(r.overlap) << '\n';
  if (!f) throw DataError("cannot write '" + c.output + "'");
  return rows;
}

// ---------------------------------------------------------------------------
// synth

struct SynthResult {
  std::size_t positives = 0;
  std::size_t total = 0;
};

inline void write_ground_truth(const fs::path& path, const std::vector<GroundTruth>& truth,
                               const nlohmann::json& prov) {
  std::ofstream f(path, std::ios::trunc);
  f << "# provenance: " << prov.dump() << '\n';
  f << "utterance_id\tlabel\t" << kShsKey << '\n';
  for (const auto& t : truth) f << t.utterance_id << '\t' << t.label << '\t' << format_number(t.shs) << '\n';
  if (!f) throw DataError("cannot write '" + path.string() + "'");
}

inline SynthResult cmd_synth(const PipelineConfig& c) {
  require_path(c.output, "output directory");
  if (c.synth_format != "feat" && c.synth_format != "trace" && c.synth_format != "both")
    throw ConfigError("synth_format must be feat, trace or both");
  c.synth.validate();
  if (c.n_train == 0 || c.n_test == 0) throw ConfigError("n_train and n_test must be >= 1");
  const fs::path out(c.output);
  fs::create_directories(out);
  const auto prov = provenance("synth", c, {});
  const std::size_t n = c.n_train + c.n_test;
  std::vector<GroundTruth> truth(n);
  if (c.synth_format != "feat") {
    fs::create_directories(out / "traces" / "train");
    fs::create_directories(out / "traces" / "test");
    parallel_for(n, c.threads, [&](std::size_t i) {
      auto u = generate_utterance(c.synth, i, c.n_train);
      write_trace_file(out / "traces" / u.truth.split / (u.truth.utterance_id + ".atrc"), u.trace);
      truth[i] = std::move(u.truth);
    });
  }
  if (c.synth_format != "trace") {
    auto ds = generate_dataset(c.synth, c.n_train, c.n_test, c.threads);
    ds.train.provenance = prov;
    ds.test.provenance = prov;
    write_feature_file(out / "train.feat", ds.train);
    write_feature_file(out / "test.feat", ds.test);
    truth = std::move(ds.truth);
  }
  write_ground_truth(out / "labels.tsv", truth, prov);
  SynthResult res;
  res.total = n;
  for (const auto& t : truth) res.positives += static_cast<std::size_t>(t.label);
  spdlog::info("generated {} utterances ({} hallucinated)", res.total, res.positives);
  return res;
}

// ---------------------------------------------------------------------------
// validate

inline std::size_t cmd_validate(const std::vector<std::string>& paths, std::ostream& out) {
  if (paths.empty()) throw ConfigError("validate needs at least one trace file");
  std::size_t total = 0;
  for (const auto& p : paths) {
    const auto report = validate_trace_file(p);
    for (const auto& v : report.violations) {
      out << p << "\tt=" << v.step + 1 << "\tl=" << v.layer << "\th=" << v.head << '\t' << violation_name(v.kind)
          << '\t' << v.detail << '\n';
    }
    if (report.ok()) out << p << "\tok\n";
    total += report.violations.size();
  }
  return total;
}

}  // namespace attnhd
