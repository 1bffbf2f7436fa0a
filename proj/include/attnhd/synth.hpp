#pragma once

// Synthetic attention traces with a planted hallucination signature.
//
// Signature heads of faithful utterances carry a Gaussian bump over audio
// positions that moves along the diagonal (centre floor(t * N / T) for a
// zero-based step t). Hallucinated utterances keep the bump at an early
// frame and shift attention mass from audio to the generated prefix. All
// other heads are Dirichlet noise drawn identically for both classes, and
// token statistics are class independent.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "attnhd/errors.hpp"
#include "attnhd/features.hpp"
#include "attnhd/metrics.hpp"
#include "attnhd/parallel.hpp"
#include "attnhd/trace.hpp"

namespace attnhd {

struct Range {
  std::uint32_t lo = 1;
  std::uint32_t hi = 1;
};

struct SynthConfig {
  std::uint32_t num_layers = 4;
  std::uint32_t num_heads = 8;
  Range audio_len{24, 48};
  Range prompt_len{4, 8};
  Range gen_len{6, 12};
  double hallucination_rate = 0.05;
  // Fraction of L*H heads carrying the signature.
  double collapse_heads = 0.1;
  double noise_scale = 1.0;
  // Standard deviation of the audio bump, in frames.
  double bump_width = 2.0;
  std::uint64_t seed = 0;
  // Explicit signature heads (flat l * H + h); empty means derive from seed.
  std::vector<std::uint32_t> signature_heads;
  std::string model_id = "synthetic";

  std::size_t heads() const { return std::size_t{num_layers} * num_heads; }

  void validate() const {
    if (num_layers == 0 || num_heads == 0) throw ConfigError("synth: L and H must be positive");
    for (const Range* r : {&audio_len, &gen_len})
      if (r->lo == 0 || r->lo > r->hi) throw ConfigError("synth: bad N or T range");
    if (prompt_len.lo > prompt_len.hi) throw ConfigError("synth: bad M range");
    if (!(hallucination_rate > 0.0 && hallucination_rate < 1.0))
      throw ConfigError("synth: hallucination_rate must lie in (0, 1)");
    if (!(collapse_heads > 0.0 && collapse_heads < 1.0)) throw ConfigError("synth: collapse_heads must lie in (0, 1)");
    if (!(noise_scale > 0.0)) throw ConfigError("synth: noise_scale must be positive");
    if (!(bump_width > 0.0)) throw ConfigError("synth: bump_width must be positive");
    for (auto h : signature_heads)
      if (h >= heads()) throw ConfigError("synth: signature head index out of range");
  }

  // Weight of Dirichlet noise mixed into signature-head audio rows.
  double signature_noise() const { return std::min(0.9, 0.05 * noise_scale); }
};

// Entropy-equivalent width of the continuous Gaussian bump.
inline double effective_bump_width(double sigma) {
  return sigma * std::sqrt(2.0 * 3.14159265358979323846 * std::exp(1.0));
}

// Flat head indices carrying the signature, sorted.
inline std::vector<std::uint32_t> signature_heads(const SynthConfig& cfg) {
  if (!cfg.signature_heads.empty()) {
    auto s = cfg.signature_heads;
    std::sort(s.begin(), s.end());
    s.erase(std::unique(s.begin(), s.end()), s.end());
    return s;
  }
  const auto count = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(cfg.collapse_heads * static_cast<double>(cfg.heads()))));
  std::vector<std::uint32_t> all(cfg.heads());
  std::iota(all.begin(), all.end(), 0u);
  std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32), 0x5167u};
  std::mt19937_64 rng(seq);
  std::shuffle(all.begin(), all.end(), rng);
  all.resize(count);
  std::sort(all.begin(), all.end());
  return all;
}

// Independent stream for utterance `index`.
inline std::mt19937_64 utterance_rng(std::uint64_t seed, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32), 0xA77Eu};
  return std::mt19937_64(seq);
}

namespace detail {

inline std::uint32_t draw(const Range& r, std::mt19937_64& rng) {
  return std::uniform_int_distribution<std::uint32_t>(r.lo, r.hi)(rng);
}

// Flat Dirichlet(alpha) sample of size n.
inline std::vector<double> dirichlet(std::size_t n, double alpha, std::mt19937_64& rng) {
  std::gamma_distribution<double> gamma(alpha, 1.0);
  std::vector<double> v(n);
  double total = 0.0;
  for (auto& x : v) total += (x = gamma(rng));
  if (total <= 0.0) {
    std::fill(v.begin(), v.end(), 1.0 / static_cast<double>(n));
    return v;
  }
  for (auto& x : v) x /= total;
  return v;
}

inline std::vector<float> to_float(const std::vector<double>& v, double scale) {
  std::vector<float> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i] * scale);
  return out;
}

}  // namespace detail

inline AttentionTrace generate_trace(const SynthConfig& cfg, bool is_hallucination, std::mt19937_64& rng,
                                     std::string utterance_id = "synthetic") {
  cfg.validate();
  AttentionTrace trace;
  auto& hd = trace.header;
  hd.utterance_id = std::move(utterance_id);
  hd.model_id = cfg.model_id;
  hd.task = Task::ASR;
  hd.language = "en";
  hd.num_layers = cfg.num_layers;
  hd.num_heads = cfg.num_heads;
  hd.audio_len = detail::draw(cfg.audio_len, rng);
  hd.prompt_len = detail::draw(cfg.prompt_len, rng);
  hd.gen_len = detail::draw(cfg.gen_len, rng);
  hd.has_token_stats = true;

  const std::size_t N = hd.audio_len, M = hd.prompt_len, T = hd.gen_len;
  const auto sig = signature_heads(cfg);
  std::vector<bool> is_sig(cfg.heads(), false);
  for (auto h : sig) is_sig[h] = true;

  std::normal_distribution<double> jitter(0.0, 0.04 * cfg.noise_scale);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double audio_base = (is_hallucination ? 0.35 : 0.6) + jitter(rng);
  const std::size_t early = is_hallucination ? std::uniform_int_distribution<std::size_t>(0, std::min<std::size_t>(2, N - 1))(rng) : 0;
  const double nu = cfg.signature_noise();

  trace.records.reserve(T * cfg.heads());
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t head = 0; head < cfg.heads(); ++head) {
      StepHeadRecord rec;
      if (is_sig[head]) {
        const double centre =
            is_hallucination ? static_cast<double>(early) : std::floor(static_cast<double>(t * N) / static_cast<double>(T));
        std::vector<double> bump(N);
        double bsum = 0.0;
        for (std::size_t i = 0; i < N; ++i) {
          const double d = (static_cast<double>(i) - centre) / cfg.bump_width;
          bsum += (bump[i] = std::exp(-0.5 * d * d));
        }
        const auto noise = detail::dirichlet(N, 1.0, rng);
        for (std::size_t i = 0; i < N; ++i) bump[i] = (1.0 - nu) * bump[i] / bsum + nu * noise[i];

        const double text_share = M > 0 ? 0.1 * (0.5 + unit(rng)) : 0.0;
        double audio_share = std::clamp(audio_base + 0.02 * cfg.noise_scale * (unit(rng) - 0.5), 0.05, 0.85);
        double art_share = 1.0 - audio_share - text_share;
        if (t == 0) {
          // No generated prefix yet: its share goes back to audio.
          audio_share += art_share;
          art_share = 0.0;
        }
        rec.audio = detail::to_float(bump, audio_share);
        if (M > 0) rec.text = detail::to_float(detail::dirichlet(M, 1.0, rng), text_share);
        rec.art_mass = static_cast<float>(art_share);
      } else {
        const auto row = detail::dirichlet(N + M + t, 0.5, rng);
        const auto split_at = [&](std::size_t k) { return row.begin() + static_cast<std::ptrdiff_t>(k); };
        rec.audio = detail::to_float({row.begin(), split_at(N)}, 1.0);
        rec.text = detail::to_float({split_at(N), split_at(N + M)}, 1.0);
        rec.art_mass = static_cast<float>(std::accumulate(split_at(N + M), row.end(), 0.0));
      }
      trace.records.push_back(std::move(rec));
    }
  }

  std::gamma_distribution<double> entropy(2.0, 0.1);
  std::uniform_real_distribution<double> ratio(0.5, 1.5);
  std::vector<TokenStats> stats(T);
  for (auto& s : stats) {
    const double e = entropy(rng);
    s.entropy = static_cast<float>(e);
    s.logprob = static_cast<float>(-e * ratio(rng));
  }
  trace.token_stats = std::move(stats);
  return trace;
}

struct GroundTruth {
  std::string utterance_id;
  std::string split;  // "train" or "test"
  int label = 0;
  double shs = 0.0;  // synthetic quality: higher means worse
};

// Utterance `index` (0-based across train then test) of a dataset.
struct SynthUtterance {
  GroundTruth truth;
  AttentionTrace trace;
};

inline SynthUtterance generate_utterance(const SynthConfig& cfg, std::size_t index, std::size_t n_train) {
  auto rng = utterance_rng(cfg.seed, index);
  const bool train = index < n_train;
  char id[32];
  std::snprintf(id, sizeof id, "%s-%06zu", train ? "train" : "test", train ? index : index - n_train);
  SynthUtterance u;
  u.truth.utterance_id = id;
  u.truth.split = train ? "train" : "test";
  u.truth.label = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < cfg.hallucination_rate ? 1 : 0;
  u.truth.shs = u.truth.label ? std::uniform_real_distribution<double>(0.4, 1.0)(rng)
                              : std::uniform_real_distribution<double>(0.0, 0.5)(rng);
  u.trace = generate_trace(cfg, u.truth.label == 1, rng, id);
  return u;
}

struct SynthDataset {
  FeatureSet train;
  FeatureSet test;
  std::vector<GroundTruth> truth;
};

inline constexpr const char* kShsKey = "shs";

// Generates traces, aggregates them to features, and attaches labels and the
// synthetic SHS quality.
inline SynthDataset generate_dataset(const SynthConfig& cfg, std::size_t n_train, std::size_t n_test,
                                     unsigned threads = 1) {
  cfg.validate();
  if (n_train == 0 || n_test == 0) throw ConfigError("synth: n_train and n_test must be >= 1");
  const std::size_t n = n_train + n_test;
  std::vector<FeatureRecord> records(n);
  std::vector<GroundTruth> truth(n);
  parallel_for(n, threads, [&](std::size_t i) {
    auto u = generate_utterance(cfg, i, n_train);
    records[i] = aggregate_trace(u.trace);
    records[i].label = u.truth.label;
    records[i].quality[kShsKey] = u.truth.shs;
    truth[i] = std::move(u.truth);
  });
  SynthDataset ds;
  for (FeatureSet* fs : {&ds.train, &ds.test}) {
    fs->num_layers = cfg.num_layers;
    fs->num_heads = cfg.num_heads;
    fs->metrics.assign(kAllMetrics.begin(), kAllMetrics.end());
  }
  for (std::size_t i = 0; i < n; ++i) (i < n_train ? ds.train : ds.test).records.push_back(std::move(records[i]));
  ds.truth = std::move(truth);
  return ds;
}

}  // namespace attnhd
