#pragma once

// Per-utterance feature vectors and the FEAT-v1 container.
//
// Layout (little-endian):
//   "AFEA" | u32 version = 1 | u64 header_len | JSON {num_layers, num_heads, metrics}
//   per record: u64 json_len | JSON {utterance_id, label?, quality?, baselines?}
//               | metrics.size() * L * H x f32, metric-major then (l, h) row-major
// Records continue until end of file.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "attnhd/binary_io.hpp"
#include "attnhd/errors.hpp"

namespace attnhd {

enum class Metric : std::uint8_t { AudioRatio, AudioConsistency, AudioEntropy, TextEntropy };

inline constexpr std::array<Metric, 4> kAllMetrics = {Metric::AudioRatio, Metric::AudioConsistency,
                                                      Metric::AudioEntropy, Metric::TextEntropy};

inline std::string_view metric_name(Metric m) {
  switch (m) {
    case Metric::AudioRatio: return "audio_ratio";
    case Metric::AudioConsistency: return "audio_consistency";
    case Metric::AudioEntropy: return "audio_entropy";
    case Metric::TextEntropy: return "text_entropy";
  }
  return "unknown";
}

inline std::optional<Metric> parse_metric(std::string_view s) {
  for (Metric m : kAllMetrics)
    if (metric_name(m) == s) return m;
  return std::nullopt;
}

// One attention head of one metric: the unit of feature selection.
struct HeadKey {
  Metric metric = Metric::AudioRatio;
  std::uint32_t layer = 0;
  std::uint32_t head = 0;

  friend auto operator<=>(const HeadKey&, const HeadKey&) = default;
};

struct FeatureRecord {
  std::string utterance_id;
  // metrics.size() * L * H values in the owning FeatureSet's metric order.
  std::vector<float> values;
  std::optional<int> label;
  std::map<std::string, double> quality;
  std::map<std::string, double> baselines;

  friend bool operator==(const FeatureRecord&, const FeatureRecord&) = default;
};

struct FeatureSet {
  std::uint32_t num_layers = 1;
  std::uint32_t num_heads = 1;
  std::vector<Metric> metrics{kAllMetrics.begin(), kAllMetrics.end()};
  std::vector<FeatureRecord> records;
  // Optional metadata stored in the file header (null when absent).
  nlohmann::json provenance;

  std::size_t heads() const { return std::size_t{num_layers} * num_heads; }
  std::size_t width() const { return metrics.size() * heads(); }

  std::optional<std::size_t> column(const HeadKey& key) const {
    auto it = std::find(metrics.begin(), metrics.end(), key.metric);
    if (it == metrics.end() || key.layer >= num_layers || key.head >= num_heads) return std::nullopt;
    return static_cast<std::size_t>(it - metrics.begin()) * heads() + std::size_t{key.layer} * num_heads +
           key.head;
  }

  // Every (metric, layer, head) in storage order.
  std::vector<HeadKey> all_heads() const {
    std::vector<HeadKey> keys;
    keys.reserve(width());
    for (Metric m : metrics)
      for (std::uint32_t l = 0; l < num_layers; ++l)
        for (std::uint32_t h = 0; h < num_heads; ++h) keys.push_back({m, l, h});
    return keys;
  }

  std::vector<HeadKey> heads_of(Metric m) const {
    std::vector<HeadKey> keys;
    for (std::uint32_t l = 0; l < num_layers; ++l)
      for (std::uint32_t h = 0; h < num_heads; ++h) keys.push_back({m, l, h});
    return keys;
  }

  friend bool operator==(const FeatureSet&, const FeatureSet&) = default;
};

namespace detail {

inline constexpr char kFeatMagic[4] = {'A', 'F', 'E', 'A'};
inline constexpr std::uint32_t kFeatVersion = 1;

inline nlohmann::json numeric_map_to_json(const std::map<std::string, double>& m, const char* what) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : m) {
    if (!std::isfinite(v)) throw FormatError(std::string("non-finite ") + what + " value for '" + k + "'");
    j[k] = v;
  }
  return j;
}

inline std::map<std::string, double> numeric_map_from_json(const nlohmann::json& j, const char* what) {
  if (!j.is_object()) throw FormatError(std::string(what) + " must be a JSON object");
  std::map<std::string, double> m;
  for (const auto& [k, v] : j.items()) {
    if (!v.is_number()) throw FormatError(std::string(what) + " entry '" + k + "' is not a number");
    m[k] = v.get<double>();
  }
  return m;
}

}  // namespace detail

inline void check_feature_set(const FeatureSet& set) {
  if (set.num_layers == 0 || set.num_heads == 0) throw FormatError("feature set: L*H must be >= 1");
  if (set.metrics.empty()) throw FormatError("feature set: empty metric list");
  for (const auto& r : set.records) {
    if (r.values.size() != set.width()) {
      throw FormatError("feature record '" + r.utterance_id + "' has " + std::to_string(r.values.size()) +
                        " values; expected " + std::to_string(set.width()));
    }
    if (r.label && *r.label != 0 && *r.label != 1) {
      throw FormatError("feature record '" + r.utterance_id + "' has a non-binary label");
    }
  }
}

class FeatureWriter {
 public:
  FeatureWriter(std::ostream& out, std::uint32_t num_layers, std::uint32_t num_heads,
                std::vector<Metric> metrics, const nlohmann::json& provenance = nullptr)
      : out_(&out) {
    shape_.num_layers = num_layers;
    shape_.num_heads = num_heads;
    shape_.metrics = std::move(metrics);
    check_feature_set(shape_);
    nlohmann::json names = nlohmann::json::array();
    for (Metric m : shape_.metrics) names.push_back(std::string(metric_name(m)));
    nlohmann::json header{{"num_layers", num_layers}, {"num_heads", num_heads}, {"metrics", names}};
    if (!provenance.is_null()) header["provenance"] = provenance;
    const std::string json = header.dump();
    std::string pre(detail::kFeatMagic, 4);
    io::put_u32(pre, detail::kFeatVersion);
    io::put_u64(pre, json.size());
    pre += json;
    out_->write(pre.data(), static_cast<std::streamsize>(pre.size()));
  }

  void write(const FeatureRecord& r) {
    if (r.values.size() != shape_.width()) {
      throw FormatError("feature record '" + r.utterance_id + "' has " + std::to_string(r.values.size()) +
                        " values; file expects " + std::to_string(shape_.width()));
    }
    nlohmann::json j{{"utterance_id", r.utterance_id}};
    if (r.label) {
      if (*r.label != 0 && *r.label != 1) throw FormatError("non-binary label in '" + r.utterance_id + "'");
      j["label"] = *r.label;
    }
    if (!r.quality.empty()) j["quality"] = detail::numeric_map_to_json(r.quality, "quality");
    if (!r.baselines.empty()) j["baselines"] = detail::numeric_map_to_json(r.baselines, "baseline");
    const std::string json = j.dump();
    buf_.clear();
    io::put_u64(buf_, json.size());
    buf_ += json;
    io::put_f32s(buf_, r.values);
    out_->write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
  }

  void finish() {
    out_->flush();
    if (!*out_) throw DataError("feature writer: output stream failed");
  }

 private:
  std::ostream* out_;
  FeatureSet shape_;
  std::string buf_;
};

inline void write_feature_set(std::ostream& out, const FeatureSet& set) {
  check_feature_set(set);
  FeatureWriter w(out, set.num_layers, set.num_heads, set.metrics, set.provenance);
  for (const auto& r : set.records) w.write(r);
  w.finish();
}

inline void write_feature_file(const std::filesystem::path& path, const FeatureSet& set) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
  write_feature_set(out, set);
}

inline FeatureSet read_feature_set(std::istream& in) {
  io::CountingReader r(in);
  std::string magic;
  try {
    magic = r.bytes(4, "preamble");
  } catch (const CorruptionError&) {
    throw UnsupportedFormatError("not a FEAT-v1 file: too short");
  }
  if (magic != std::string_view(detail::kFeatMagic, 4)) throw UnsupportedFormatError("not a FEAT-v1 file: bad magic");
  const std::uint32_t version = r.u32("version");
  if (version != detail::kFeatVersion) {
    throw UnsupportedFormatError("unsupported FEAT version " + std::to_string(version));
  }
  const std::uint64_t hlen = r.u64("header length");
  if (hlen > (std::uint64_t{1} << 24)) throw CorruptionError("implausible header length", r.offset() - 8);
  FeatureSet set;
  try {
    const auto j = nlohmann::json::parse(r.bytes(hlen, "header"));
    set.num_layers = j.at("num_layers").get<std::uint32_t>();
    set.num_heads = j.at("num_heads").get<std::uint32_t>();
    set.metrics.clear();
    for (const auto& name : j.at("metrics")) {
      auto m = parse_metric(name.get<std::string>());
      if (!m) throw FormatError("unknown metric '" + name.get<std::string>() + "'");
      set.metrics.push_back(*m);
    }
    if (auto it = j.find("provenance"); it != j.end()) set.provenance = *it;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad FEAT header: ") + e.what());
  }
  check_feature_set(set);
  const std::size_t width = set.width();
  while (!r.at_eof()) {
    const std::uint64_t len = r.u64("record length");
    if (len > (std::uint64_t{1} << 24)) throw CorruptionError("implausible record length", r.offset() - 8);
    FeatureRecord rec;
    try {
      const auto j = nlohmann::json::parse(r.bytes(len, "record metadata"));
      rec.utterance_id = j.at("utterance_id").get<std::string>();
      if (auto it = j.find("label"); it != j.end() && !it->is_null()) {
        const int label = it->get<int>();
        if (label != 0 && label != 1) throw FormatError("non-binary label for '" + rec.utterance_id + "'");
        rec.label = label;
      }
      if (auto it = j.find("quality"); it != j.end()) rec.quality = detail::numeric_map_from_json(*it, "quality");
      if (auto it = j.find("baselines"); it != j.end())
        rec.baselines = detail::numeric_map_from_json(*it, "baselines");
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("bad FEAT record metadata: ") + e.what());
    }
    r.f32s(rec.values, width, "feature values");
    set.records.push_back(std::move(rec));
  }
  return set;
}

inline FeatureSet read_feature_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  return read_feature_set(in);
}

}  // namespace attnhd
