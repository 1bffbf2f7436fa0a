#include <cmath>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <stdexcept>
#include <tuple>
#include <sstream>

#include <gtest/gtest.h>

#include "attnhd/labelling.hpp"
#include "attnhd/sidecar.hpp"
#include "oracles.hpp"

using namespace attnhd;

namespace {

std::string window_text(const Passage& p, Window w) {
  std::string s;
  for (std::size_t i = w.start; i < w.start + w.size; ++i) s += (i > w.start ? " " : "") + p.tokens[i];
  return s;
}

// Embeds every distinct window text as its own basis vector, so identical
// windows have cosine 1 and different windows cosine 0.
class OneHotBackend : public SemanticBackend {
 public:
  double bs = 1.0, ent = 1.0;

  std::vector<float> contextual_embed(const Passage& p, Window w) override { return basis(window_text(p, w)); }
  std::vector<float> sentence_embed(const Passage& p) override { return basis("sentence:" + p.text()); }
  double bertscore(const Passage&, const Passage&) override { return bs; }
  double entailment_prob(const Passage&, const Passage&) override { return ent; }

 private:
  std::vector<float> basis(const std::string& key) {
    auto [it, inserted] = ids_.try_emplace(key, ids_.size());
    std::vector<float> v(64, 0.0f);
    v[it->second % 64] = 1.0f;
    return v;
  }
  std::map<std::string, std::size_t> ids_;
};

// Backend whose embeddings come from a caller-supplied table.
class TableBackend : public SemanticBackend {
 public:
  std::map<std::string, std::vector<float>> table;
  double bs = 0.5, ent = 0.5;

  std::vector<float> contextual_embed(const Passage& p, Window w) override {
    return table.at(std::string(role_name(p.role)) + ":" + window_text(p, w));
  }
  std::vector<float> sentence_embed(const Passage& p) override {
    return table.at(std::string(role_name(p.role)) + ":sentence");
  }
  double bertscore(const Passage&, const Passage&) override { return bs; }
  double entailment_prob(const Passage&, const Passage&) override { return ent; }
};

struct Texts {
  std::vector<std::string> ref, hyp;
  Passage r() const { return {"u", Role::Reference, ref}; }
  Passage h() const { return {"u", Role::Hypothesis, hyp}; }
};

ShsConfig single_window(std::size_t s) {
  ShsConfig c;
  c.windows = {s};
  return c;
}

}  // namespace

TEST(Normalize, LowercasesStripsPunctuationKeepsApostrophes) {
  EXPECT_EQ(normalize_text("Hello, World!"), "hello world");
  EXPECT_EQ(normalize_text("  It's   the  dog's 'bone'. "), "it's the dog's bone");
  EXPECT_EQ(normalize_text("well-known"), "wellknown");
  EXPECT_EQ(normalize_text("Über café"), "Über café");
  EXPECT_EQ(normalize_text("\t\n"), "");
}

TEST(Wer, Examples) {
  EXPECT_EQ(wer("a b c", "a b c"), 0.0);
  EXPECT_NEAR(wer("a b c", "a x c"), 1.0 / 3.0, 1e-15);
  EXPECT_EQ(wer("a b", ""), 1.0);
  EXPECT_EQ(wer("A, b.", "a B"), 0.0);
  EXPECT_EQ(wer("a", "a b c d"), 3.0);
  EXPECT_THROW(wer("", "a"), DomainError);
  EXPECT_THROW(wer(" ?! ", "a"), DomainError);
}

TEST(Wer, MatchesQuadraticDpOracle) {
  std::mt19937_64 rng(1);
  const std::vector<std::string> vocab{"a", "b", "c", "dd", "e", "ff"};
  std::uniform_int_distribution<std::size_t> len(1, 12), pick(0, vocab.size() - 1);
  for (int i = 0; i < 500; ++i) {
    std::vector<std::string> ref(len(rng)), hyp(len(rng) - 1);
    for (auto& w : ref) w = vocab[pick(rng)];
    for (auto& w : hyp) w = vocab[pick(rng)];
    std::string rs, hs;
    for (auto& w : ref) rs += w + " ";
    for (auto& w : hyp) hs += w + " ";
    const double expect = static_cast<double>(oracle::edit_distance(ref, hyp)) / ref.size();
    ASSERT_EQ(wer(rs, hs), expect);
    ASSERT_EQ(wer(rs, rs), 0.0);
    ASSERT_LE(wer(rs, hs), static_cast<double>(std::max(ref.size(), hyp.size())) / ref.size());
  }
}

TEST(Wer, InvariantUnderTokenRelabelling) {
  EXPECT_EQ(wer("a b c d", "a c c e"), wer("w x y z", "w y y q"));
}

TEST(ShsLocal, IdenticalTextsScoreZero) {
  OneHotBackend b;
  Texts t{{"the", "cat", "sat", "down"}, {"the", "cat", "sat", "down"}};
  EXPECT_NEAR(shs_local(t.r(), t.h(), b), 0.0, 1e-12);
}

TEST(ShsLocal, DisjointTextsWithOrthogonalEmbeddingsScoreOne) {
  OneHotBackend b;
  Texts t{{"a", "b", "c"}, {"x", "y", "z", "w"}};
  EXPECT_NEAR(shs_local(t.r(), t.h(), b), 1.0, 1e-12);
}

TEST(ShsLocal, TwoWindowHandExample) {
  TableBackend b;
  b.table["ref:p"] = {1.0f, 0.0f};
  b.table["hyp:p"] = {1.0f, 0.0f};
  b.table["hyp:q"] = {0.5f, std::sqrt(0.75f)};
  Texts t{{"p"}, {"p", "q"}};
  EXPECT_NEAR(shs_local(t.r(), t.h(), b, single_window(1)), 0.25, 1e-7);
}

TEST(ShsLocal, WindowWeightsDefaultToInverseSize) {
  ShsConfig c;
  const auto w = c.resolved_window_weights();
  ASSERT_EQ(w.size(), 3u);
  EXPECT_NEAR(w[0], 6.0 / 11.0, 1e-15);
  EXPECT_NEAR(w[1], 3.0 / 11.0, 1e-15);
  EXPECT_NEAR(w[2], 2.0 / 11.0, 1e-15);
  c.window_weights = {1.0, 1.0};
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ShsLocal, ShortHypothesisUsesWholeHypothesisWindow) {
  TableBackend b;
  b.table["ref:a b"] = {1.0f, 0.0f};
  b.table["ref:b c"] = {0.0f, 1.0f};
  b.table["ref:c d"] = {0.0f, 1.0f};
  b.table["hyp:a b"] = {0.6f, 0.8f};
  Texts t{{"a", "b", "c", "d"}, {"a", "b"}};
  EXPECT_NEAR(shs_local(t.r(), t.h(), b, single_window(3)), 0.2, 1e-6);
}

TEST(ShsLocal, OversizedWindowsAreSkippedAndWeightsRenormalised) {
  OneHotBackend b;
  Texts t{{"a", "b", "c"}, {"a", "z"}};
  ShsConfig c;
  c.windows = {1, 3};
  c.window_weights = {0.25, 0.75};
  // Only size 1 applies: windows "a" (match) and "z" (miss) -> 0.5.
  EXPECT_NEAR(shs_local(t.r(), t.h(), b, c), 0.5, 1e-12);
}

TEST(ShsGlobal, Examples) {
  TableBackend b;
  b.table["ref:sentence"] = {1.0f, 0.0f};
  b.table["hyp:sentence"] = {1.0f, 0.0f};
  b.bs = 1.0;
  b.ent = 1.0;
  Texts t{{"a"}, {"a"}};
  auto g = shs_global(t.r(), t.h(), b);
  EXPECT_NEAR(g.distance, 0.0, 1e-12);
  EXPECT_NEAR(g.coherence_error, 0.0, 1e-12);

  b.table["hyp:sentence"] = {-1.0f, 0.0f};
  b.bs = 0.8;
  b.ent = 0.6;
  g = shs_global(t.r(), t.h(), b);
  EXPECT_NEAR(g.distance, 1.0, 1e-12);
  EXPECT_NEAR(g.coherence_error, 0.3, 1e-12);
}

TEST(Shs, CombinesComponents) {
  ShsConfig c;
  EXPECT_NEAR(combine_shs(0.0, {0.0, 0.0}, c), 0.0, 1e-15);
  EXPECT_NEAR(combine_shs(0.3, {0.3, 0.3}, c), 0.3, 1e-15);
  EXPECT_NEAR(combine_shs(0.25, {1.0, 0.3}, c), 0.516666666666667, 1e-12);
  c.w_local = 0.5;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Shs, PerfectBackendOnIdenticalTextsGivesZero) {
  OneHotBackend b;
  Texts t{{"one", "two", "three", "four", "five"}, {"one", "two", "three", "four", "five"}};
  EXPECT_NEAR(shs(t.r(), t.h(), b), 0.0, 1e-12);
}

TEST(Shs, BackendFailureNamesTheUtterance) {
  class Failing : public OneHotBackend {
   public:
    double bertscore(const Passage&, const Passage&) override { throw DomainError("scorer unavailable"); }
  } b;
  std::vector<std::string> ref{"a"}, hyp{"b"};
  try {
    shs({"utt-42", Role::Reference, ref}, {"utt-42", Role::Hypothesis, hyp}, b);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("utt-42"), std::string::npos) << e.what();
  }
}

TEST(ThresholdLabel, StrictInequality) {
  EXPECT_EQ(threshold_label(0.5, 0.3), 1);
  EXPECT_EQ(threshold_label(0.0, 0.0), 0);
  EXPECT_EQ(threshold_label(0.35, 0.35), 0);
}

TEST(ThresholdLabel, MonotoneInBothArguments) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 1000; ++i) {
    const double w = u(rng), s = u(rng), dw = u(rng) * 0.2, ds = u(rng) * 0.2;
    EXPECT_LE(threshold_label(w, s), threshold_label(w + dw, s));
    EXPECT_LE(threshold_label(w, s), threshold_label(w, s + ds));
  }
}

TEST(PercentileLabel, BottomFivePercent) {
  std::vector<ScoredItem> items;
  for (int i = 100; i >= 1; --i) items.push_back({"u" + std::to_string(1000 + i), static_cast<double>(i)});
  const auto labels = percentile_label(items, 0.05);
  for (std::size_t i = 0; i < items.size(); ++i) EXPECT_EQ(labels[i], items[i].score <= 5.0 ? 1 : 0);
}

TEST(PercentileLabel, TiesBrokenByUtteranceId) {
  std::vector<ScoredItem> items;
  for (int i = 0; i < 60; ++i) items.push_back({"id" + std::to_string(100 + (i * 37) % 60), 1.0});
  const auto labels = percentile_label(items, 0.05);
  std::vector<std::string> positives;
  for (std::size_t i = 0; i < items.size(); ++i)
    if (labels[i]) positives.push_back(items[i].utterance_id);
  std::sort(positives.begin(), positives.end());
  EXPECT_EQ(positives, (std::vector<std::string>{"id100", "id101", "id102"}));
}

TEST(PercentileLabel, ExactCountAgainstSortOracle) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 1 + trial % 97;
    const double f = 0.01 + 0.98 * u(rng);
    std::vector<ScoredItem> items;
    for (std::size_t i = 0; i < n; ++i)
      items.push_back({"u" + std::to_string(i), std::floor(u(rng) * 10.0)});  // many ties
    const auto labels = percentile_label(items, f);
    auto sorted = items;
    std::sort(sorted.begin(), sorted.end(), [](const ScoredItem& a, const ScoredItem& b) {
      return std::tie(a.score, a.utterance_id) < std::tie(b.score, b.utterance_id);
    });
    const auto k = static_cast<std::size_t>(std::floor(n * f + 1e-9));
    std::set<std::string> expected;
    for (std::size_t i = 0; i < k; ++i) expected.insert(sorted[i].utterance_id);
    std::set<std::string> got;
    for (std::size_t i = 0; i < n; ++i)
      if (labels[i]) got.insert(items[i].utterance_id);
    ASSERT_EQ(got, expected);
  }
}

TEST(PercentileLabel, RejectsBadInput) {
  std::vector<ScoredItem> items{{"a", 1.0}};
  EXPECT_THROW(percentile_label(items, 0.0), DomainError);
  EXPECT_THROW(percentile_label(items, 1.0), DomainError);
  EXPECT_THROW(percentile_label({}, 0.5), DomainError);
}

namespace {

std::string sidecar_for_identical(const std::string& id, const std::vector<std::string>& tokens) {
  // Every window gets a distinct basis vector shared by ref and hyp.
  std::ostringstream os;
  std::size_t basis = 0;
  auto vec = [&](std::size_t k) {
    nlohmann::json v = nlohmann::json::array();
    for (std::size_t i = 0; i < 32; ++i) v.push_back(i == k % 32 ? 2.0 : 0.0);
    return v;
  };
  for (std::size_t s = 1; s <= 3; ++s) {
    for (std::size_t i = 0; i + s <= tokens.size(); ++i, ++basis) {
      for (const char* role : {"ref", "hyp"}) {
        os << nlohmann::json{{"utterance_id", id}, {"role", role}, {"window", window_descriptor({i, s})},
                             {"vector", vec(basis)}}
                  .dump()
           << '\n';
      }
    }
  }
  for (const char* role : {"ref", "hyp"})
    os << nlohmann::json{{"utterance_id", id}, {"role", role}, {"window", "sentence"}, {"vector", vec(31)}}.dump()
       << '\n';
  os << nlohmann::json{{"utterance_id", id}, {"bertscore", 1.0}, {"entailment", 1.0}}.dump() << '\n';
  return os.str();
}

}  // namespace

TEST(Sidecar, IdenticalPairScoresZero) {
  SidecarBackend b;
  std::istringstream in(sidecar_for_identical("u1", {"the", "cat", "sat", "down"}));
  b.load(in);
  EXPECT_TRUE(b.has_utterance("u1"));
  const auto rec = label_pair("u1", "The cat sat down.", "the cat sat down", b);
  EXPECT_EQ(rec.wer, 0.0);
  EXPECT_NEAR(rec.shs, 0.0, 1e-6);
  EXPECT_EQ(rec.label, 0);
}

TEST(Sidecar, VectorsAreRenormalised) {
  SidecarBackend b;
  b.add({{"utterance_id", "u"}, {"role", "ref"}, {"window", "1:0"}, {"vector", {3.0, 4.0}}});
  std::vector<std::string> tokens{"x"};
  const auto v = b.contextual_embed({"u", Role::Reference, tokens}, {0, 1});
  EXPECT_NEAR(v[0], 0.6, 1e-7);
  EXPECT_NEAR(v[1], 0.8, 1e-7);
}

TEST(Sidecar, MissingEntryNamesTheUtterance) {
  SidecarBackend b;
  try {
    label_pair("utt-7", "a b", "a c", b);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("utt-7"), std::string::npos) << e.what();
  }
}

TEST(Sidecar, MalformedLinesAreFormatErrors) {
  SidecarBackend b;
  std::istringstream bad_json("{not json}\n");
  EXPECT_THROW(b.load(bad_json), FormatError);
  std::istringstream zero(R"({"utterance_id":"u","role":"ref","window":"1:0","vector":[0,0]})");
  EXPECT_THROW(b.load(zero), FormatError);
  std::istringstream role(R"({"utterance_id":"u","role":"x","window":"1:0","vector":[1]})");
  EXPECT_THROW(b.load(role), FormatError);
  std::istringstream prob(R"({"utterance_id":"u","bertscore":1.5})");
  EXPECT_THROW(b.load(prob), FormatError);
}

TEST(LabelPair, HandComputedThresholdExample) {
  // ref "a b", hyp "a c": WER = 0.5. Windows: size 1 -> "a" matches, "c" has
  // cosine 0.6 with "b" -> local(1) = 0.2; size 2 -> "a c" vs "a b" cosine 0.8
  // -> 0.2; size 3 is skipped. Local = 0.2. Sentence cosine 0 -> distance 0.5.
  // Coherence 1 - (0.7 + 0.5) / 2 = 0.4. SHS = (0.2 + 0.5 + 0.4) / 3.
  SidecarBackend b;
  auto line = [&](const char* role, const char* window, std::vector<double> v) {
    b.add({{"utterance_id", "p"}, {"role", role}, {"window", window}, {"vector", v}});
  };
  line("ref", "1:0", {1, 0, 0});
  line("ref", "1:1", {0, 1, 0});
  line("hyp", "1:0", {1, 0, 0});
  line("hyp", "1:1", {0, 0.6, 0.8});
  line("ref", "2:0", {0, 0, 1});
  line("hyp", "2:0", {0, 0.6, 0.8});
  line("ref", "sentence", {1, 0, 0});
  line("hyp", "sentence", {0, 1, 0});
  b.add({{"utterance_id", "p"}, {"bertscore", 0.7}, {"entailment", 0.5}});
  const auto rec = label_pair("p", "a b", "a c", b);
  EXPECT_NEAR(rec.wer, 0.5, 1e-15);
  EXPECT_NEAR(rec.shs, 1.1 / 3.0, 1e-6);
  EXPECT_EQ(rec.label, 1);
  EXPECT_EQ(label_pair("p", "a b", "a c", b, {}, 0.9).label, 0);
}
