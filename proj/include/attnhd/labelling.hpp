#pragma once

// Automatic hallucination labels: word error rate, the semantic
// hallucination score (SHS) over a pluggable embedding backend, the
// WER + SHS threshold rule, and bottom-fraction labelling from external
// quality scores.
//
// WER and SHS are fractions (0.13, not 13.0) everywhere in this module.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "attnhd/errors.hpp"

namespace attnhd {

// ---------------------------------------------------------------------------
// Text normalisation and WER

namespace detail {

inline bool is_word_byte(unsigned char c) { return std::isalnum(c) || c >= 0x80; }

}  // namespace detail

// Lowercases ASCII letters, deletes ASCII punctuation except apostrophes
// between two word characters, and collapses runs of whitespace. Bytes of
// multi-byte UTF-8 sequences are kept as word characters.
inline std::string normalize_text(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  bool pending_space = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (std::isspace(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (c < 0x80 && std::ispunct(c)) {
      const bool intra_word = c == '\'' && !out.empty() && !pending_space &&
                              detail::is_word_byte(static_cast<unsigned char>(out.back())) &&
                              i + 1 < text.size() && detail::is_word_byte(static_cast<unsigned char>(text[i + 1]));
      if (!intra_word) continue;
    }
    if (pending_space) {
      out.push_back(' ');
      pending_space = false;
    }
    out.push_back(static_cast<char>(c < 0x80 ? std::tolower(c) : c));
  }
  return out;
}

inline std::vector<std::string> split_whitespace(std::string_view text) {
  std::vector<std::string> tokens;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    const std::size_t start = i;
    while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    if (i > start) tokens.emplace_back(text.substr(start, i - start));
  }
  return tokens;
}

// Unit-cost Levenshtein distance over tokens.
template <typename T>
std::size_t edit_distance(std::span<const T> a, std::span<const T> b) {
  std::vector<std::size_t> prev(b.size() + 1), curr(b.size() + 1);
  std::iota(prev.begin(), prev.end(), std::size_t{0});
  for (std::size_t i = 1; i <= a.size(); ++i) {
    curr[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      curr[j] = std::min({sub, prev[j] + 1, curr[j - 1] + 1});
    }
    std::swap(prev, curr);
  }
  return prev[b.size()];
}

inline double wer(std::string_view reference, std::string_view hypothesis) {
  const auto ref = split_whitespace(normalize_text(reference));
  const auto hyp = split_whitespace(normalize_text(hypothesis));
  if (ref.empty()) throw DomainError("wer: reference is empty after normalisation");
  return static_cast<double>(edit_distance<std::string>(ref, hyp)) / static_cast<double>(ref.size());
}

// ---------------------------------------------------------------------------
// Semantic backend

enum class Role { Reference, Hypothesis };

inline std::string_view role_name(Role r) { return r == Role::Reference ? "ref" : "hyp"; }

// A text seen by the backend: its utterance, role, and whitespace tokens.
struct Passage {
  std::string_view utterance_id;
  Role role = Role::Reference;
  std::span<const std::string> tokens;

  std::string text() const {
    std::string s;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (i) s.push_back(' ');
      s += tokens[i];
    }
    return s;
  }
};

// Token span [start, start + size) of a passage.
struct Window {
  std::size_t start = 0;
  std::size_t size = 0;
};

// Boundary to the external embedding, BERTScore and NLI models. Vectors are
// expected to be unit norm; scores lie in [0, 1].
class SemanticBackend {
 public:
  virtual ~SemanticBackend() = default;
  // Embedding of a window, computed in the context of the whole passage.
  virtual std::vector<float> contextual_embed(const Passage& passage, Window window) = 0;
  virtual std::vector<float> sentence_embed(const Passage& passage) = 0;
  virtual double bertscore(const Passage& reference, const Passage& hypothesis) = 0;
  virtual double entailment_prob(const Passage& premise, const Passage& hypothesis) = 0;
};

inline double cosine(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw DomainError("cosine: embedding dimensions differ");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += double{a[i]} * b[i];
    na += double{a[i]} * a[i];
    nb += double{b[i]} * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw DomainError("cosine: zero-norm embedding");
  return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

struct ShsConfig {
  std::vector<std::size_t> windows{1, 2, 3};
  // Per-window-size weights; empty means proportional to 1/size.
  std::vector<double> window_weights;
  double w_local = 1.0 / 3.0;
  double w_distance = 1.0 / 3.0;
  double w_coherence = 1.0 / 3.0;

  // Normalised per-size weights, validated.
  std::vector<double> resolved_window_weights() const {
    if (windows.empty()) throw ConfigError("SHS: at least one window size is required");
    for (auto s : windows)
      if (s == 0) throw ConfigError("SHS: window sizes must be positive");
    std::vector<double> w = window_weights;
    if (w.empty()) {
      for (auto s : windows) w.push_back(1.0 / static_cast<double>(s));
    }
    if (w.size() != windows.size()) throw ConfigError("SHS: one weight per window size is required");
    double total = 0.0;
    for (double x : w) {
      if (!(x > 0.0)) throw ConfigError("SHS: window weights must be positive");
      total += x;
    }
    for (double& x : w) x /= total;
    return w;
  }

  void validate() const {
    resolved_window_weights();
    if (!(w_local > 0.0 && w_distance > 0.0 && w_coherence > 0.0))
      throw ConfigError("SHS: component weights must be positive");
    if (std::abs(w_local + w_distance + w_coherence - 1.0) > 1e-9)
      throw ConfigError("SHS: component weights must sum to 1");
  }
};

namespace detail {

inline std::vector<Window> windows_of(std::size_t length, std::size_t size) {
  std::vector<Window> out;
  if (length <= size) {
    out.push_back({0, length});
    return out;
  }
  for (std::size_t s = 0; s + size <= length; ++s) out.push_back({s, size});
  return out;
}

// Mean over hypothesis windows of (1 - best cosine against any reference window).
inline double window_error(const Passage& ref, const Passage& hyp, std::size_t size, SemanticBackend& backend) {
  std::vector<std::vector<float>> ref_embeddings;
  for (const auto& w : windows_of(ref.tokens.size(), size)) ref_embeddings.push_back(backend.contextual_embed(ref, w));
  const auto hyp_windows = windows_of(hyp.tokens.size(), size);
  double total = 0.0;
  for (const auto& w : hyp_windows) {
    const auto e = backend.contextual_embed(hyp, w);
    double best = -1.0;
    for (const auto& r : ref_embeddings) best = std::max(best, cosine(e, r));
    total += 1.0 - best;
  }
  return total / static_cast<double>(hyp_windows.size());
}

}  // namespace detail

// Multi-scale sliding-window local error in [0, 1].
//
// Window sizes longer than the hypothesis are skipped and the remaining
// weights renormalised; if every size is longer, the whole hypothesis is
// one window. Reference windows shorter than requested collapse to the
// whole reference.
inline double shs_local(const Passage& reference, const Passage& hypothesis, SemanticBackend& backend,
                        const ShsConfig& config = {}) {
  const auto weights = config.resolved_window_weights();
  const std::size_t nh = hypothesis.tokens.size();
  const std::size_t nr = reference.tokens.size();
  if (nh == 0) return nr == 0 ? 0.0 : 1.0;
  if (nr == 0) return 1.0;
  double score = 0.0, used = 0.0;
  for (std::size_t i = 0; i < config.windows.size(); ++i) {
    const std::size_t s = config.windows[i];
    if (s > nh) continue;
    score += weights[i] * detail::window_error(reference, hypothesis, s, backend);
    used += weights[i];
  }
  if (used == 0.0) {
    score = detail::window_error(reference, hypothesis, nh, backend);
    used = 1.0;
  }
  return std::clamp(score / used, 0.0, 1.0);
}

struct GlobalShs {
  double distance = 0.0;         // (1 - cos) / 2 of sentence embeddings
  double coherence_error = 0.0;  // 1 - (BERTScore + entailment) / 2
};

inline GlobalShs shs_global(const Passage& reference, const Passage& hypothesis, SemanticBackend& backend) {
  const double cos = cosine(backend.sentence_embed(reference), backend.sentence_embed(hypothesis));
  const double bs = backend.bertscore(reference, hypothesis);
  const double ent = backend.entailment_prob(reference, hypothesis);
  return {std::clamp((1.0 - cos) / 2.0, 0.0, 1.0), std::clamp(1.0 - (bs + ent) / 2.0, 0.0, 1.0)};
}

inline double combine_shs(double local, const GlobalShs& global, const ShsConfig& config) {
  return config.w_local * local + config.w_distance * global.distance + config.w_coherence * global.coherence_error;
}

// Full semantic hallucination score. Backend failures are rethrown with the
// utterance id attached.
inline double shs(const Passage& reference, const Passage& hypothesis, SemanticBackend& backend,
                  const ShsConfig& config = {}) {
  config.validate();
  try {
    const double local = shs_local(reference, hypothesis, backend, config);
    return combine_shs(local, shs_global(reference, hypothesis, backend), config);
  } catch (const Error& e) {
    throw DataError("SHS for utterance '" + std::string(hypothesis.utterance_id) + "': " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Labels

inline constexpr double kDefaultLabelThreshold = 0.7;

// Strict: a sum exactly at the threshold is not a hallucination.
inline int threshold_label(double wer_value, double shs_value, double threshold = kDefaultLabelThreshold) {
  return wer_value + shs_value > threshold ? 1 : 0;
}

struct LabelRecord {
  std::string utterance_id;
  std::string reference;
  std::string hypothesis;
  double wer = 0.0;
  double shs = 0.0;
  int label = 0;
};

inline LabelRecord label_pair(std::string utterance_id, std::string reference, std::string hypothesis,
                              SemanticBackend& backend, const ShsConfig& config = {},
                              double threshold = kDefaultLabelThreshold) {
  LabelRecord rec;
  rec.utterance_id = std::move(utterance_id);
  rec.reference = std::move(reference);
  rec.hypothesis = std::move(hypothesis);
  try {
    rec.wer = wer(rec.reference, rec.hypothesis);
  } catch (const DomainError& e) {
    throw DataError("utterance '" + rec.utterance_id + "': " + e.what());
  }
  const auto ref_tokens = split_whitespace(rec.reference);
  const auto hyp_tokens = split_whitespace(rec.hypothesis);
  rec.shs = shs({rec.utterance_id, Role::Reference, ref_tokens}, {rec.utterance_id, Role::Hypothesis, hyp_tokens},
                backend, config);
  rec.label = threshold_label(rec.wer, rec.shs, threshold);
  return rec;
}

struct ScoredItem {
  std::string utterance_id;
  double score = 0.0;
};

// Marks exactly floor(n * fraction) items as hallucinations: the lowest
// scores, ties broken by utterance id. Labels are returned in input order.
inline std::vector<int> percentile_label(std::span<const ScoredItem> items, double bottom_fraction) {
  if (!(bottom_fraction > 0.0 && bottom_fraction < 1.0))
    throw DomainError("percentile_label: bottom fraction must lie in (0, 1)");
  if (items.empty()) throw DomainError("percentile_label: no scores");
  for (const auto& it : items)
    if (!std::isfinite(it.score)) throw DomainError("percentile_label: non-finite score for '" + it.utterance_id + "'");
  // The epsilon keeps products such as 100 * 0.29 from flooring one short.
  const auto k = static_cast<std::size_t>(std::floor(static_cast<double>(items.size()) * bottom_fraction + 1e-9));
  std::vector<std::size_t> order(items.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (items[a].score != items[b].score) return items[a].score < items[b].score;
    return items[a].utterance_id < items[b].utterance_id;
  });
  std::vector<int> labels(items.size(), 0);
  for (std::size_t i = 0; i < k; ++i) labels[order[i]] = 1;
  return labels;
}

}  // namespace attnhd
