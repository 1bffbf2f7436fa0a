// attnhd: command-line front end.
//
// Settings come from the built-in defaults, then the --config file, then
// command-line flags (later sources win).

#include <cstdlib>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "attnhd/pipeline.hpp"

namespace {

using attnhd::ConfigError;
using nlohmann::json;

struct FlagSpec {
  const char* flag;
  const char* key;
  const char* help;
};

// Raw flag values for one subcommand, converted to JSON using the type of the
// default value stored under the same configuration key.
class FlagOverlay {
 public:
  void add(CLI::App* app, const FlagSpec& spec) {
    auto& slot = values_[spec.key];
    options_.push_back({app->add_option(spec.flag, slot, spec.help), spec.key});
  }

  void apply(json& target) const {
    const auto defaults = attnhd::config_to_json(attnhd::PipelineConfig{});
    for (const auto& [opt, key] : options_) {
      if (opt->count() == 0) continue;
      target[key] = convert(defaults.at(key), values_.at(key), key);
    }
  }

 private:
  static json scalar(const json& like, const std::string& text, const std::string& key) {
    try {
      if (like.is_string()) return text;
      if (like.is_number_unsigned()) {
        if (!text.empty() && text.front() == '-') throw std::invalid_argument(text);
        return std::stoull(text);
      }
      if (like.is_number_integer()) return std::stoll(text);
      if (like.is_number()) return std::stod(text);
    } catch (const std::logic_error&) {
    }
    throw ConfigError("--" + key + ": '" + text + "' is not a valid value");
  }

  static json convert(const json& like, const std::string& text, const std::string& key) {
    if (!like.is_array()) return scalar(like, text, key);
    json arr = json::array();
    const json element = like.empty() ? json(0.0) : like.front();
    std::size_t start = 0;
    while (start <= text.size()) {
      const auto comma = text.find(',', start);
      const auto piece = text.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
      if (!piece.empty()) arr.push_back(scalar(element, piece, key));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    return arr;
  }

  std::map<std::string, std::string> values_;
  std::vector<std::pair<CLI::Option*, std::string>> options_;
};

void add_flags(CLI::App* app, FlagOverlay& overlay, const std::vector<FlagSpec>& specs) {
  for (const auto& s : specs) overlay.add(app, s);
}

int run(int argc, char** argv) {
  CLI::App app{"Attention-based hallucination detection toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_path;
  std::string seed, threads;
  bool quiet = false;
  app.add_option("--config", config_path, "JSON configuration file");
  auto* seed_opt = app.add_option("--seed", seed, "Random seed");
  auto* threads_opt = app.add_option("--threads", threads, "Worker threads");
  app.add_flag("--quiet", quiet, "Only log warnings and errors");

  std::map<std::string, FlagOverlay> overlays;
  std::vector<std::string> validate_paths;
  std::string write_config;

  auto sub = [&](const char* name, const char* help, const std::vector<FlagSpec>& specs) {
    auto* s = app.add_subcommand(name, help);
    add_flags(s, overlays[name], specs);
    return s;
  };

  sub("extract", "Aggregate a directory of traces into a feature file",
      {{"--trace-dir", "trace_dir", "Directory of .atrc traces"},
       {"--labels", "label_file", "Optional label TSV to attach"},
       {"-o,--output", "output", "Output feature file"}});
  sub("label", "Label utterances by WER + SHS or by percentile of a quality score",
      {{"--mode", "label_mode", "threshold or percentile"},
       {"--refs", "refs_file", "Reference TSV (utterance_id, text)"},
       {"--hyps", "hyps_file", "Hypothesis TSV (utterance_id, text)"},
       {"--sidecar", "sidecar_file", "Semantic sidecar (JSON lines)"},
       {"--scores", "scores_file", "Score TSV for percentile mode"},
       {"--quality-key", "quality_key", "Score column for percentile mode"},
       {"--bottom-fraction", "bottom_fraction", "Fraction labelled positive in percentile mode"},
       {"--threshold", "label_threshold", "Threshold on WER + SHS"},
       {"--shs-windows", "shs_windows", "Comma-separated window sizes"},
       {"--shs-window-weights", "shs_window_weights", "Comma-separated window weights"},
       {"--shs-component-weights", "shs_component_weights", "Local, distance and coherence weights"},
       {"-o,--output", "output", "Output label TSV"}});
  sub("train", "Train a detector",
      {{"--features", "feature_file", "Training feature file"},
       {"--labels", "label_file", "Optional label TSV"},
       {"--metrics", "metrics", "Comma-separated metrics to use"},
       {"--selection", "selection", "all, audio_ratio_only, top_n:N or stable[:T]"},
       {"--C", "C", "Inverse L2 regularisation strength"},
       {"--positive-class-weight", "positive_class_weight", "Weight of the hallucination class"},
       {"--max-iterations", "max_iterations", "Solver iteration limit"},
       {"--tol", "convergence_tol", "Relative objective tolerance"},
       {"--l1-C", "l1_C", "Inverse L1 strength for stable selection"},
       {"--l1-positive-class-weight", "l1_positive_class_weight", "Class weight for stable selection"},
       {"--folds", "folds", "Folds for stable selection"},
       {"--decision-threshold", "decision_threshold", "Probability threshold stored in the model"},
       {"-o,--output", "output", "Output model file"}});
  sub("evaluate", "Evaluate a model or a baseline score on a feature file",
      {{"--features", "feature_file", "Evaluation feature file"},
       {"--labels", "label_file", "Optional label TSV"},
       {"--model", "model_file", "Model file"},
       {"--baseline", "baseline", "Baseline score instead of a model (mean_entropy, perplexity)"},
       {"--threshold", "decision_threshold", "Threshold for baseline scores"},
       {"--k", "k", "Rejection fraction for PRR"},
       {"--quality-key", "quality_key", "Quality column for PRR (empty disables)"},
       {"--quality-transform", "quality_transform", "auto, identity or one_minus"},
       {"--report-dir", "report_dir", "Output directory"}});
  sub("sweep", "PR-AUC as a function of the number of selected heads",
      {{"--features", "feature_file", "Training feature file"},
       {"--labels", "label_file", "Optional label TSV"},
       {"--eval-features", "eval_feature_file", "Evaluation feature file"},
       {"--eval-labels", "eval_label_file", "Optional evaluation label TSV"},
       {"--metrics", "metrics", "Comma-separated metrics to use"},
       {"--n-values", "n_values", "Comma-separated head counts"},
       {"--C", "C", "Inverse L2 regularisation strength"},
       {"--positive-class-weight", "positive_class_weight", "Weight of the hallucination class"},
       {"-o,--output", "output", "Output TSV"}});
  sub("head-overlap", "Overlap of the most important heads of two models",
      {{"--model-a", "model_file", "First model"},
       {"--model-b", "model_file_b", "Second model"},
       {"--top-k", "top_k", "Heads per metric to compare"},
       {"-o,--output", "output", "Output TSV"}});
  sub("synth", "Generate synthetic traces or features with a planted signature",
      {{"--n-train", "n_train", "Training utterances"},
       {"--n-test", "n_test", "Test utterances"},
       {"--layers", "synth_layers", "Layers"},
       {"--heads", "synth_heads", "Heads per layer"},
       {"--audio-len", "synth_audio_len", "lo,hi audio length"},
       {"--prompt-len", "synth_prompt_len", "lo,hi prompt length"},
       {"--gen-len", "synth_gen_len", "lo,hi generated length"},
       {"--hallucination-rate", "synth_hallucination_rate", "Fraction of hallucinated utterances"},
       {"--collapse-heads", "synth_collapse_heads", "Fraction of heads carrying the signature"},
       {"--noise-scale", "synth_noise_scale", "Noise multiplier"},
       {"--signature-heads", "synth_signature_heads", "Explicit flat head indices"},
       {"--format", "synth_format", "feat, trace or both"},
       {"-o,--output", "output", "Output directory"}});
  auto* validate = app.add_subcommand("validate", "Check trace files for structural violations");
  validate->add_option("traces", validate_paths, "Trace files")->required();
  for (auto* s : app.get_subcommands({})) {
    if (s->get_name() != "validate")
      s->add_option("--write-config", write_config, "Also write the effective configuration here");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  auto logger = spdlog::stderr_color_mt("attnhd");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%l] %v");
  spdlog::set_level(quiet ? spdlog::level::warn : spdlog::level::info);

  auto* chosen = app.get_subcommands().front();
  const std::string name = chosen->get_name();
  if (name == "validate") {
    const auto violations = attnhd::cmd_validate(validate_paths, std::cout);
    return violations == 0 ? 0 : 1;
  }

  json overlay = json::object();
  if (seed_opt->count()) overlay["seed"] = json::parse(seed);
  if (threads_opt->count()) overlay["threads"] = json::parse(threads);
  overlays.at(name).apply(overlay);
  attnhd::PipelineConfig config;
  if (!config_path.empty()) config = attnhd::load_config(config_path);
  config = attnhd::config_from_json(overlay, config);
  if (!write_config.empty()) attnhd::save_config(write_config, config);

  if (name == "extract") {
    attnhd::cmd_extract(config);
  } else if (name == "label") {
    attnhd::cmd_label(config);
  } else if (name == "train") {
    attnhd::cmd_train(config);
  } else if (name == "evaluate") {
    const auto res = attnhd::cmd_evaluate(config);
    auto summary = attnhd::report_to_json(res.report);
    summary.erase("rejection_curve");
    std::cout << summary.dump(2) << '\n';
  } else if (name == "sweep") {
    attnhd::cmd_sweep(config);
  } else if (name == "head-overlap") {
    for (const auto& r : attnhd::cmd_head_overlap(config))
      std::cout << attnhd::metric_name(r.metric) << '\t' << r.k << '\t' << r.overlap << '\n';
  } else if (name == "synth") {
    attnhd::cmd_synth(config);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const attnhd::DataError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const json::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
