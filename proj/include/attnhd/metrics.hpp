#pragma once

// Per-step attention metrics, their aggregation over decoding steps, and the
// token-level uncertainty baselines.
//
// All entropies are in nats. A step metric that cannot be evaluated (zero
// denominator, zero variance, empty region) is std::nullopt and is left out
// of the step mean. A head with no defined step at all gets a neutral value.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "attnhd/errors.hpp"
#include "attnhd/features.hpp"
#include "attnhd/trace.hpp"

namespace attnhd {

// Value stored for a head whose metric was undefined at every step.
inline constexpr float fallback_value(Metric m) {
  switch (m) {
    case Metric::AudioRatio: return 0.5f;
    case Metric::AudioConsistency:
    case Metric::AudioEntropy:
    case Metric::TextEntropy: return 0.0f;
  }
  return 0.0f;
}

inline double sum_of(std::span<const float> v) {
  double s = 0.0;
  for (float x : v) s += x;
  return s;
}

// Share of attention on audio relative to audio plus the generated prefix.
inline std::optional<double> audio_ratio_step(const StepHeadRecord& rec) {
  const double audio = sum_of(rec.audio);
  const double denom = audio + static_cast<double>(rec.art_mass);
  if (denom == 0.0) return std::nullopt;
  return audio / denom;
}

// Sample Pearson correlation of two raw attention vectors.
inline std::optional<double> pearson(std::span<const float> x, std::span<const float> y) {
  if (x.size() != y.size()) throw DomainError("pearson: vectors differ in length");
  const std::size_t n = x.size();
  if (n < 2) return std::nullopt;
  auto constant = [](std::span<const float> v) {
    return std::all_of(v.begin(), v.end(), [&](float a) { return a == v.front(); });
  };
  if (constant(x) || constant(y)) return std::nullopt;
  const double mx = sum_of(x) / static_cast<double>(n);
  const double my = sum_of(y) / static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx <= 0.0 || syy <= 0.0) return std::nullopt;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

inline std::optional<double> audio_consistency_step(const StepHeadRecord& curr, const StepHeadRecord& prev) {
  return pearson(curr.audio, prev.audio);
}

// Entropy of w / sum(w), with 0 ln 0 = 0.
inline std::optional<double> renormalized_entropy(std::span<const float> weights) {
  double total = 0.0;
  for (float w : weights) {
    if (!(w >= 0.0f)) throw DomainError("renormalized_entropy: negative or NaN weight");
    total += w;
  }
  if (total == 0.0) return std::nullopt;
  double h = 0.0;
  for (float w : weights) {
    if (w > 0.0f) {
      const double p = w / total;
      h -= p * std::log(p);
    }
  }
  return std::max(h, 0.0);
}

inline std::optional<double> audio_entropy_step(const StepHeadRecord& rec) {
  return renormalized_entropy(rec.audio);
}

inline std::optional<double> text_entropy_step(const StepHeadRecord& rec) {
  if (rec.text.empty()) return std::nullopt;
  return renormalized_entropy(rec.text);
}

inline double mean_entropy_baseline(std::span<const TokenStats> stats) {
  if (stats.empty()) throw DomainError("mean_entropy_baseline: no tokens");
  double s = 0.0;
  for (const auto& t : stats) s += t.entropy;
  return s / static_cast<double>(stats.size());
}

inline double perplexity_baseline(std::span<const TokenStats> stats) {
  if (stats.empty()) throw DomainError("perplexity_baseline: no tokens");
  double s = 0.0;
  for (const auto& t : stats) s += t.logprob;
  return std::exp(-s / static_cast<double>(stats.size()));
}

inline constexpr const char* kMeanEntropyKey = "mean_entropy";
inline constexpr const char* kPerplexityKey = "perplexity";

// Streaming step-mean accumulator. Memory is O(L*H*N) for the previous
// step's audio rows, independent of the number of steps.
class FeatureAccumulator {
 public:
  explicit FeatureAccumulator(const TraceHeader& header)
      : header_(header),
        sums_(kAllMetrics.size() * header.heads_per_step(), 0.0),
        counts_(sums_.size(), 0),
        prev_audio_(header.heads_per_step()) {}

  void add_step(std::span<const StepHeadRecord> step) {
    const std::size_t lh = header_.heads_per_step();
    if (step.size() != lh) throw FormatError("accumulator: step has wrong number of heads");
    for (std::size_t i = 0; i < lh; ++i) {
      const auto& rec = step[i];
      add(Metric::AudioRatio, i, audio_ratio_step(rec));
      if (steps_ > 0) add(Metric::AudioConsistency, i, pearson(rec.audio, prev_audio_[i]));
      add(Metric::AudioEntropy, i, audio_entropy_step(rec));
      add(Metric::TextEntropy, i, text_entropy_step(rec));
      prev_audio_[i] = rec.audio;
    }
    ++steps_;
  }

  std::size_t steps() const { return steps_; }

  // Number of steps at which (metric, head) was defined.
  std::size_t defined_count(Metric m, std::size_t head_index) const { return counts_[slot(m, head_index)]; }

  FeatureRecord finish(std::optional<std::span<const TokenStats>> stats = std::nullopt) const {
    FeatureRecord rec;
    rec.utterance_id = header_.utterance_id;
    rec.values.resize(sums_.size());
    const std::size_t lh = header_.heads_per_step();
    for (std::size_t mi = 0; mi < kAllMetrics.size(); ++mi) {
      for (std::size_t i = 0; i < lh; ++i) {
        const std::size_t s = mi * lh + i;
        rec.values[s] = counts_[s] > 0 ? static_cast<float>(sums_[s] / static_cast<double>(counts_[s]))
                                       : fallback_value(kAllMetrics[mi]);
      }
    }
    if (stats && !stats->empty()) {
      rec.baselines[kMeanEntropyKey] = mean_entropy_baseline(*stats);
      rec.baselines[kPerplexityKey] = perplexity_baseline(*stats);
    }
    return rec;
  }

 private:
  std::size_t slot(Metric m, std::size_t i) const {
    return static_cast<std::size_t>(m) * header_.heads_per_step() + i;
  }

  void add(Metric m, std::size_t i, std::optional<double> v) {
    if (!v) return;
    sums_[slot(m, i)] += *v;
    ++counts_[slot(m, i)];
  }

  TraceHeader header_;
  std::vector<double> sums_;
  std::vector<std::size_t> counts_;
  std::vector<std::vector<float>> prev_audio_;
  std::size_t steps_ = 0;
};

// Collapses a whole trace to one FeatureRecord over all four metrics.
inline FeatureRecord aggregate_trace(const AttentionTrace& trace) {
  FeatureAccumulator acc(trace.header);
  for (std::size_t t = 0; t < trace.header.gen_len; ++t) acc.add_step(trace.step(t));
  if (trace.token_stats) return acc.finish(std::span<const TokenStats>(*trace.token_stats));
  return acc.finish();
}

// Same as aggregate_trace but reads the file step by step.
inline FeatureRecord aggregate_trace(TraceReader& reader) {
  FeatureAccumulator acc(reader.header());
  std::vector<StepHeadRecord> step;
  while (reader.next_step(step)) acc.add_step(step);
  auto stats = reader.read_token_stats();
  if (stats) return acc.finish(std::span<const TokenStats>(*stats));
  return acc.finish();
}

inline FeatureRecord aggregate_trace_file(const std::filesystem::path& path) {
  TraceReader reader(path);
  return aggregate_trace(reader);
}

}  // namespace attnhd
