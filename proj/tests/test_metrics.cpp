#include <cmath>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "attnhd/metrics.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace attnhd;
using testing_support::random_trace;

namespace {

StepHeadRecord rec(std::vector<float> audio, std::vector<float> text = {}, float art = 0.0f) {
  return {std::move(audio), std::move(text), art};
}

double ln(double x) { return std::log(x); }

}  // namespace

TEST(AudioRatio, Examples) {
  EXPECT_NEAR(*audio_ratio_step(rec({0.3f, 0.3f}, {}, 0.2f)), 0.75, 1e-7);
  EXPECT_EQ(*audio_ratio_step(rec({0.1f, 0.2f}, {0.5f}, 0.0f)), 1.0);
  EXPECT_FALSE(audio_ratio_step(rec({0.0f, 0.0f}, {0.4f}, 0.0f)).has_value());
}

TEST(AudioRatio, ScaleInvariant) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<float> u(0.01f, 0.2f);
  for (int i = 0; i < 200; ++i) {
    auto r = rec({u(rng), u(rng), u(rng)}, {}, u(rng));
    const float c = std::uniform_real_distribution<float>(0.1f, 4.0f)(rng);
    auto s = r;
    for (auto& x : s.audio) x *= c;
    s.art_mass *= c;
    EXPECT_NEAR(*audio_ratio_step(r), *audio_ratio_step(s), 1e-6);
    EXPECT_GE(*audio_ratio_step(r), 0.0);
    EXPECT_LE(*audio_ratio_step(r), 1.0);
  }
}

TEST(AudioConsistency, Examples) {
  const auto a = rec({0.1f, 0.4f, 0.2f, 0.3f});
  EXPECT_NEAR(*audio_consistency_step(a, a), 1.0, 1e-9);
  EXPECT_NEAR(*audio_consistency_step(rec({1, 0, 0, 0}), rec({0, 1, 0, 0})), -1.0 / 3.0, 1e-12);
  EXPECT_FALSE(audio_consistency_step(rec({0.25f, 0.25f, 0.25f, 0.25f}), a).has_value());
  EXPECT_FALSE(audio_consistency_step(a, rec({0.25f, 0.25f, 0.25f, 0.25f})).has_value());
  EXPECT_FALSE(audio_consistency_step(rec({0.5f}), rec({0.2f})).has_value());
}

TEST(AudioConsistency, InvariantUnderSharedAffineMaps) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (int i = 0; i < 200; ++i) {
    StepHeadRecord x, y;
    for (int j = 0; j < 6; ++j) {
      x.audio.push_back(u(rng));
      y.audio.push_back(u(rng));
    }
    const float a = 0.2f + 3.0f * u(rng), b = u(rng);
    auto fx = x, fy = y;
    for (auto& v : fx.audio) v = a * v + b;
    for (auto& v : fy.audio) v = a * v + b;
    const double r = *audio_consistency_step(x, y);
    EXPECT_NEAR(r, *audio_consistency_step(fx, fy), 1e-5);
    EXPECT_LE(std::abs(r), 1.0);
  }
}

TEST(Entropy, Examples) {
  const std::vector<float> uniform4(4, 0.25f);
  EXPECT_NEAR(*renormalized_entropy(uniform4), ln(4), 1e-9);
  const std::vector<float> onehot{0.0f, 0.7f, 0.0f};
  EXPECT_EQ(*renormalized_entropy(onehot), 0.0);
  const std::vector<float> w{0.2f, 0.1f, 0.1f, 0.0f};
  EXPECT_NEAR(*renormalized_entropy(w), -(0.5 * ln(0.5) + 2 * 0.25 * ln(0.25)), 1e-7);
  const std::vector<float> zero(3, 0.0f);
  EXPECT_FALSE(renormalized_entropy(zero).has_value());
  const std::vector<float> negative{0.5f, -0.1f};
  EXPECT_THROW(renormalized_entropy(negative), DomainError);
}

TEST(Entropy, AudioAndTextSlices) {
  EXPECT_NEAR(*audio_entropy_step(rec(std::vector<float>(8, 0.1f))), ln(8), 1e-9);
  EXPECT_FALSE(text_entropy_step(rec({0.5f}, {0.0f, 0.0f})).has_value());
  EXPECT_FALSE(text_entropy_step(rec({0.5f}, {})).has_value());
  EXPECT_NEAR(*audio_entropy_step(rec({0.3f, 0.0f, 0.3f, 0.0f})), ln(2), 1e-9);
}

TEST(Entropy, ScaleInvariantAndBounded) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (int i = 0; i < 300; ++i) {
    const std::size_t n = 1 + i % 9;
    std::vector<float> w(n);
    for (auto& x : w) x = u(rng) < 0.3f ? 0.0f : u(rng);
    w[0] = 0.01f + u(rng);
    auto scaled = w;
    const float c = 0.05f + 10.0f * u(rng);
    for (auto& x : scaled) x *= c;
    const double h = *renormalized_entropy(w);
    EXPECT_NEAR(h, *renormalized_entropy(scaled), 1e-5);
    EXPECT_GE(h, 0.0);
    EXPECT_LE(h, ln(static_cast<double>(n)) + 1e-9);
  }
}

TEST(Baselines, Examples) {
  const std::vector<TokenStats> e{{-0.1f, 0.1f}, {-0.2f, 0.3f}};
  EXPECT_NEAR(mean_entropy_baseline(e), 0.2, 1e-7);
  const float l2 = static_cast<float>(-ln(2));
  const std::vector<TokenStats> c{{l2, 0}, {l2, 0}, {l2, 0}};
  EXPECT_NEAR(perplexity_baseline(c), 2.0, 1e-6);
  const std::vector<TokenStats> p{{-1.0f, 0}, {-3.0f, 0}};
  EXPECT_NEAR(perplexity_baseline(p), std::exp(2.0), 1e-9);
  EXPECT_THROW(mean_entropy_baseline({}), DomainError);
  EXPECT_THROW(perplexity_baseline({}), DomainError);
}

namespace {

AttentionTrace single_head(std::vector<StepHeadRecord> steps) {
  AttentionTrace tr;
  tr.header.num_layers = 1;
  tr.header.num_heads = 1;
  tr.header.audio_len = static_cast<std::uint32_t>(steps[0].audio.size());
  tr.header.prompt_len = static_cast<std::uint32_t>(steps[0].text.size());
  tr.header.gen_len = static_cast<std::uint32_t>(steps.size());
  tr.records = std::move(steps);
  return tr;
}

}  // namespace

TEST(Aggregate, MeanOverSteps) {
  // audio sums 0.5, 0.7, 0.9 with art mass 1 - audio: AR = 0.5, 0.7, 0.9.
  auto tr = single_head({rec({0.25f, 0.25f}, {}, 0.5f), rec({0.35f, 0.35f}, {}, 0.3f), rec({0.45f, 0.45f}, {}, 0.1f)});
  EXPECT_NEAR(aggregate_trace(tr).values[0], 0.7, 1e-6);
}

TEST(Aggregate, UndefinedStepsAreExcluded) {
  auto tr = single_head({rec({0.25f, 0.25f}, {}, 0.5f), rec({0.0f, 0.0f}, {}, 0.0f), rec({0.45f, 0.45f}, {}, 0.1f)});
  EXPECT_NEAR(aggregate_trace(tr).values[0], 0.7, 1e-6);
}

TEST(Aggregate, SingleStepFallsBackForConsistency) {
  std::mt19937_64 rng(4);
  const auto tr = random_trace({2, 2, 4, 2, 1}, rng, false, 0.0);
  const auto r = aggregate_trace(tr);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(r.values[4 + i], 0.0f);
}

TEST(Aggregate, FallbacksForHeadsNeverDefined) {
  auto tr = single_head({rec({0.0f, 0.0f}, {0.0f}, 0.0f), rec({0.0f, 0.0f}, {0.0f}, 0.0f)});
  const auto r = aggregate_trace(tr);
  EXPECT_EQ(r.values, (std::vector<float>{0.5f, 0.0f, 0.0f, 0.0f}));
  for (float v : r.values) EXPECT_FALSE(std::isnan(v));
}

TEST(Aggregate, TinyTraceMatchesNaiveOracle) {
  std::mt19937_64 rng(5);
  const auto tr = random_trace({2, 2, 4, 2, 3}, rng);
  const auto got = aggregate_trace(tr);
  const auto want = oracle::features(tr);
  ASSERT_EQ(got.values.size(), want.size());
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(got.values[i], want[i], 1e-6) << "entry " << i;
}

TEST(Aggregate, RandomTracesMatchNaiveOracle) {
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<std::uint32_t> L(1, 3), H(1, 4), N(1, 8), M(0, 4), T(1, 6);
  for (int trial = 0; trial < 300; ++trial) {
    const auto tr = random_trace({L(rng), H(rng), N(rng), M(rng), T(rng)}, rng, trial % 2 == 0, 0.15);
    const auto got = aggregate_trace(tr);
    const auto want = oracle::features(tr);
    for (std::size_t i = 0; i < want.size(); ++i) ASSERT_NEAR(got.values[i], want[i], 1e-6) << "trial " << trial;
  }
}

TEST(Aggregate, ZeroRowChangesOnlyTheDivisorOfAffectedHeads) {
  std::mt19937_64 rng(7);
  auto tr = random_trace({2, 2, 5, 2, 4}, rng, false, 0.0);
  const auto before = aggregate_trace(tr);
  FeatureAccumulator ref(tr.header);
  for (std::size_t t = 0; t < 4; ++t) ref.add_step(tr.step(t));

  // Zero the audio row (and ART mass) of head (1, 0) at step 2: AR and AE lose that step,
  // and AC loses the pairs (1,2) and (2,3).
  const std::size_t head = 2;
  const auto& target = tr.records[tr.index(2, 1, 0)];
  const double ar = *audio_ratio_step(target), ae = *audio_entropy_step(target);
  const double ac12 = *pearson(target.audio, tr.at(1, 1, 0).audio);
  const double ac23 = *pearson(tr.at(3, 1, 0).audio, target.audio);
  tr.records[tr.index(2, 1, 0)].audio.assign(5, 0.0f);
  tr.records[tr.index(2, 1, 0)].art_mass = 0.0f;
  const auto after = aggregate_trace(tr);

  const std::size_t lh = 4;
  for (std::size_t m = 0; m < 4; ++m) {
    for (std::size_t i = 0; i < lh; ++i) {
      const std::size_t k = m * lh + i;
      if (i != head || m == 3) {
        EXPECT_EQ(after.values[k], before.values[k]);
        continue;
      }
      const double n = static_cast<double>(ref.defined_count(kAllMetrics[m], i));
      double expect = 0.0;
      if (m == 0) expect = (before.values[k] * n - ar) / (n - 1);
      if (m == 1) expect = (before.values[k] * n - ac12 - ac23) / (n - 2);
      if (m == 2) expect = (before.values[k] * n - ae) / (n - 1);
      EXPECT_NEAR(after.values[k], expect, 1e-5) << "metric " << m;
    }
  }
}

TEST(Aggregate, StreamingAndInMemoryAgree) {
  std::mt19937_64 rng(8);
  const auto tr = random_trace({3, 2, 6, 3, 5}, rng);
  std::istringstream in(testing_support::trace_bytes(tr));
  TraceReader reader(in);
  EXPECT_EQ(aggregate_trace(reader), aggregate_trace(tr));
}

TEST(Aggregate, BaselinesFilledFromTokenStats) {
  std::mt19937_64 rng(9);
  const auto tr = random_trace({1, 1, 3, 1, 4}, rng, true);
  const auto r = aggregate_trace(tr);
  EXPECT_NEAR(r.baselines.at(kMeanEntropyKey), mean_entropy_baseline(*tr.token_stats), 1e-12);
  EXPECT_NEAR(r.baselines.at(kPerplexityKey), perplexity_baseline(*tr.token_stats), 1e-12);
  const auto without = random_trace({1, 1, 3, 1, 4}, rng, false);
  EXPECT_TRUE(aggregate_trace(without).baselines.empty());
}
