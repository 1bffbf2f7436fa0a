#include <cstring>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "attnhd/features.hpp"
#include "attnhd/tsv.hpp"
#include "test_support.hpp"

using namespace attnhd;

namespace {

FeatureSet random_set(std::mt19937_64& rng, std::uint32_t L, std::uint32_t H, std::size_t n) {
  FeatureSet set;
  set.num_layers = L;
  set.num_heads = H;
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  for (std::size_t i = 0; i < n; ++i) {
    FeatureRecord r;
    r.utterance_id = "utt-" + std::to_string(i);
    for (std::size_t j = 0; j < set.width(); ++j) r.values.push_back(u(rng));
    if (i % 3 != 0) r.label = static_cast<int>(i % 2);
    if (i % 2 == 0) r.quality["shs"] = 0.25 * static_cast<double>(i);
    if (i % 4 == 1) r.baselines["perplexity"] = 1.0 + static_cast<double>(i) / 7.0;
    set.records.push_back(std::move(r));
  }
  return set;
}

std::string bytes_of(const FeatureSet& set) {
  std::ostringstream os(std::ios::binary);
  write_feature_set(os, set);
  return os.str();
}

FeatureSet parse(const std::string& bytes) {
  std::istringstream in(bytes);
  return read_feature_set(in);
}

}  // namespace

TEST(FeatFormat, ThreeRecordsRoundTrip) {
  std::mt19937_64 rng(1);
  const auto set = random_set(rng, 2, 3, 3);
  EXPECT_EQ(parse(bytes_of(set)), set);
}

TEST(FeatFormat, RandomisedRoundTrip) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 30; ++trial) {
    std::uniform_int_distribution<std::uint32_t> d(1, 5);
    auto set = random_set(rng, d(rng), d(rng), d(rng) - 1);
    if (trial % 2) set.metrics = {Metric::TextEntropy, Metric::AudioRatio};
    for (auto& r : set.records) r.values.resize(set.width(), 0.5f);
    ASSERT_EQ(parse(bytes_of(set)), set);
  }
}

TEST(FeatFormat, LabelWithoutQualityIsAccepted) {
  FeatureSet set;
  set.num_layers = 1;
  set.num_heads = 1;
  set.records.push_back({"a", {0.1f, 0.2f, 0.3f, 0.4f}, 1, {}, {}});
  const auto back = parse(bytes_of(set));
  ASSERT_EQ(back.records.size(), 1u);
  EXPECT_EQ(back.records[0].label, 1);
  EXPECT_TRUE(back.records[0].quality.empty());
}

TEST(FeatFormat, HeterogeneousDimensionsAreRejected) {
  std::mt19937_64 rng(3);
  auto set = random_set(rng, 2, 2, 3);
  set.records[1].values.pop_back();
  std::ostringstream os;
  EXPECT_THROW(write_feature_set(os, set), FormatError);

  FeatureWriter w(os, 2, 2, {kAllMetrics.begin(), kAllMetrics.end()});
  FeatureRecord wide{"x", std::vector<float>(3 * 4 * 4, 0.0f), std::nullopt, {}, {}};
  EXPECT_THROW(w.write(wide), FormatError);
}

TEST(FeatFormat, LayoutIsMetricMajor) {
  FeatureSet set;
  set.num_layers = 1;
  set.num_heads = 2;
  set.metrics = {Metric::AudioRatio, Metric::AudioEntropy};
  set.records.push_back({"r", {1.0f, 2.0f, 3.0f, 4.0f}, std::nullopt, {}, {}});
  const auto bytes = bytes_of(set);
  ASSERT_EQ(bytes.substr(0, 4), "AFEA");
  float tail[4];
  std::memcpy(tail, bytes.data() + bytes.size() - 16, 16);
  EXPECT_EQ(tail[0], 1.0f);
  EXPECT_EQ(tail[3], 4.0f);
  EXPECT_EQ(*set.column({Metric::AudioEntropy, 0, 1}), 3u);
  EXPECT_FALSE(set.column({Metric::TextEntropy, 0, 0}).has_value());

  const std::size_t hlen = io::get_u64(reinterpret_cast<const unsigned char*>(bytes.data() + 8));
  const auto header = nlohmann::json::parse(bytes.substr(16, hlen));
  EXPECT_EQ(header.at("metrics"), nlohmann::json({"audio_ratio", "audio_entropy"}));
  const std::size_t rlen = io::get_u64(reinterpret_cast<const unsigned char*>(bytes.data() + 16 + hlen));
  const auto rec = nlohmann::json::parse(bytes.substr(24 + hlen, rlen));
  EXPECT_EQ(rec.at("utterance_id"), "r");
  EXPECT_FALSE(rec.contains("label"));
  EXPECT_EQ(bytes.size(), 24 + hlen + rlen + 16);
}

TEST(FeatFormat, ProvenanceRoundTripsInHeader) {
  std::mt19937_64 rng(4);
  auto set = random_set(rng, 1, 2, 2);
  set.provenance = {{"command", "extract"}, {"inputs", {{"a.tsv", "00ff"}}}};
  EXPECT_EQ(parse(bytes_of(set)).provenance, set.provenance);
}

TEST(FeatFormat, CorruptInputsAreReported) {
  std::mt19937_64 rng(5);
  const auto bytes = bytes_of(random_set(rng, 2, 2, 4));
  EXPECT_THROW(parse("AFEB" + bytes.substr(4)), UnsupportedFormatError);
  EXPECT_THROW(parse(bytes.substr(0, 2)), UnsupportedFormatError);
  EXPECT_THROW(parse(bytes.substr(0, bytes.size() - 5)), CorruptionError);
  auto bad_version = bytes;
  bad_version[4] = 9;
  EXPECT_THROW(parse(bad_version), UnsupportedFormatError);
}

TEST(FeatFormat, NonBinaryLabelIsRejected) {
  FeatureSet set;
  set.records.push_back({"a", {0, 0, 0, 0}, 2, {}, {}});
  std::ostringstream os;
  EXPECT_THROW(write_feature_set(os, set), FormatError);
}

TEST(FeatFormat, HeadEnumerationsAreConsistent) {
  FeatureSet set;
  set.num_layers = 3;
  set.num_heads = 2;
  const auto all = set.all_heads();
  ASSERT_EQ(all.size(), set.width());
  for (std::size_t i = 0; i < all.size(); ++i) EXPECT_EQ(*set.column(all[i]), i);
  EXPECT_EQ(set.heads_of(Metric::TextEntropy).size(), 6u);
  EXPECT_TRUE(std::is_sorted(all.begin(), all.end()));
}

TEST(LabelTable, ParsesLabelsAndQualities) {
  testing_support::TempDir dir("tsv");
  testing_support::spit(dir / "l.tsv", "# comment\nutterance_id\tlabel\tshs\na\t1\t0.5\nb\t0\t0.25\n");
  const auto t = read_label_table(dir / "l.tsv");
  ASSERT_EQ(t.size(), 2u);
  EXPECT_EQ(t.at("a").label, 1);
  EXPECT_DOUBLE_EQ(t.at("b").quality.at("shs"), 0.25);
}

TEST(LabelTable, RejectsMalformedFiles) {
  testing_support::TempDir dir("tsv-bad");
  testing_support::spit(dir / "a.tsv", "id\tlabel\nx\t1\n");
  EXPECT_THROW(read_label_table(dir / "a.tsv"), DataError);
  testing_support::spit(dir / "b.tsv", "utterance_id\tlabel\nx\t3\n");
  EXPECT_THROW(read_label_table(dir / "b.tsv"), DataError);
  testing_support::spit(dir / "c.tsv", "utterance_id\tshs\nx\tabc\n");
  EXPECT_THROW(read_label_table(dir / "c.tsv"), DataError);
  testing_support::spit(dir / "d.tsv", "utterance_id\tshs\nx\n");
  EXPECT_THROW(read_label_table(dir / "d.tsv"), DataError);
}
