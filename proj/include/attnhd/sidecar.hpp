#pragma once

// File-backed SemanticBackend. Each line of the sidecar is one JSON object:
//
//   {"utterance_id": "u1", "role": "ref", "window": "2:0", "vector": [...]}
//   {"utterance_id": "u1", "role": "hyp", "window": "sentence", "vector": [...]}
//   {"utterance_id": "u1", "bertscore": 0.91, "entailment": 0.84}
//
// "window" is "<size>:<start>" over whitespace tokens of the raw text, or
// "sentence" for the sentence embedding. Vectors are renormalised to unit
// length on load.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <istream>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "attnhd/errors.hpp"
#include "attnhd/labelling.hpp"

namespace attnhd {

inline std::string window_descriptor(Window w) { return std::to_string(w.size) + ":" + std::to_string(w.start); }

class SidecarBackend final : public SemanticBackend {
 public:
  SidecarBackend() = default;

  static SidecarBackend from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open sidecar '" + path.string() + "'");
    SidecarBackend b;
    b.load(in);
    return b;
  }

  void load(std::istream& in) {
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      try {
        add(nlohmann::json::parse(line));
      } catch (const nlohmann::json::exception& e) {
        throw FormatError("sidecar line " + std::to_string(lineno) + ": " + e.what());
      } catch (const FormatError& e) {
        throw FormatError("sidecar line " + std::to_string(lineno) + ": " + e.what());
      }
    }
  }

  void add(const nlohmann::json& j) {
    const auto id = j.at("utterance_id").get<std::string>();
    if (j.contains("vector")) {
      const auto role = j.at("role").get<std::string>();
      if (role != "ref" && role != "hyp") throw FormatError("role must be 'ref' or 'hyp'");
      auto v = j.at("vector").get<std::vector<float>>();
      double norm = 0.0;
      for (float x : v) norm += double{x} * x;
      norm = std::sqrt(norm);
      if (!(norm > 0.0) || !std::isfinite(norm)) throw FormatError("zero or non-finite vector for '" + id + "'");
      for (float& x : v) x = static_cast<float>(x / norm);
      vectors_[key(id, role, j.at("window").get<std::string>())] = std::move(v);
    }
    if (j.contains("bertscore")) scores_[id].bertscore = checked_prob(j.at("bertscore"), id);
    if (j.contains("entailment")) scores_[id].entailment = checked_prob(j.at("entailment"), id);
  }

  std::vector<float> contextual_embed(const Passage& p, Window w) override {
    return vector_for(p, window_descriptor(w));
  }

  std::vector<float> sentence_embed(const Passage& p) override { return vector_for(p, "sentence"); }

  double bertscore(const Passage&, const Passage& hyp) override {
    const auto& s = scores_for(hyp.utterance_id);
    if (s.bertscore < 0.0) throw DataError("sidecar has no bertscore for utterance '" + std::string(hyp.utterance_id) + "'");
    return s.bertscore;
  }

  double entailment_prob(const Passage&, const Passage& hyp) override {
    const auto& s = scores_for(hyp.utterance_id);
    if (s.entailment < 0.0) throw DataError("sidecar has no entailment for utterance '" + std::string(hyp.utterance_id) + "'");
    return s.entailment;
  }

  bool has_utterance(std::string_view id) const {
    return scores_.count(std::string(id)) > 0 || vectors_.count(key(std::string(id), "hyp", "sentence")) > 0;
  }

 private:
  struct Scores {
    double bertscore = -1.0;
    double entailment = -1.0;
  };

  static std::string key(const std::string& id, std::string_view role, std::string_view window) {
    std::string k = id;
    k.push_back('\x1f');
    k += role;
    k.push_back('\x1f');
    k += window;
    return k;
  }

  static double checked_prob(const nlohmann::json& v, const std::string& id) {
    const double p = v.get<double>();
    if (!(p >= 0.0 && p <= 1.0)) throw FormatError("score outside [0, 1] for '" + id + "'");
    return p;
  }

  std::vector<float> vector_for(const Passage& p, const std::string& window) const {
    auto it = vectors_.find(key(std::string(p.utterance_id), role_name(p.role), window));
    if (it == vectors_.end()) {
      throw DataError("sidecar has no " + std::string(role_name(p.role)) + " embedding '" + window +
                      "' for utterance '" + std::string(p.utterance_id) + "'");
    }
    return it->second;
  }

  const Scores& scores_for(std::string_view id) const {
    auto it = scores_.find(std::string(id));
    if (it == scores_.end()) throw DataError("sidecar has no scores for utterance '" + std::string(id) + "'");
    return it->second;
  }

  std::unordered_map<std::string, std::vector<float>> vectors_;
  std::unordered_map<std::string, Scores> scores_;
};

}  // namespace attnhd
