#pragma once

// Attention-trace data model and the TRACE-v1 container.
//
// Layout (all integers and floats little-endian):
//   "ATRC" | u32 version = 1 | u64 header_len | UTF-8 JSON header
//   for t in 1..T, l in 0..L-1, h in 0..H-1:  N x f32 audio | M x f32 text | f32 art_mass
//   if has_token_stats: T x (f32 logprob, f32 entropy)

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "attnhd/binary_io.hpp"
#include "attnhd/errors.hpp"

namespace attnhd {

enum class Task { ASR, S2TT };

inline std::string_view task_name(Task t) { return t == Task::ASR ? "ASR" : "S2TT"; }

inline Task parse_task(std::string_view s) {
  if (s == "ASR") return Task::ASR;
  if (s == "S2TT") return Task::S2TT;
  throw FormatError("unknown task '" + std::string(s) + "'");
}

struct TraceHeader {
  std::string utterance_id;
  std::string model_id;
  Task task = Task::ASR;
  std::string language;
  std::uint32_t num_layers = 1;
  std::uint32_t num_heads = 1;
  std::uint32_t audio_len = 1;   // N
  std::uint32_t prompt_len = 0;  // M
  std::uint32_t gen_len = 1;     // T
  bool has_token_stats = false;

  std::size_t heads_per_step() const { return std::size_t{num_layers} * num_heads; }
  std::size_t record_count() const { return heads_per_step() * gen_len; }
  // Bytes of one StepHeadRecord in the payload.
  std::size_t record_bytes() const { return 4 * (std::size_t{audio_len} + prompt_len + 1); }

  friend bool operator==(const TraceHeader&, const TraceHeader&) = default;
};

// Attention of one head at one decoding step, split into the three visible
// regions. The auto-regressive prefix is stored pre-summed.
struct StepHeadRecord {
  std::vector<float> audio;  // N entries
  std::vector<float> text;   // M entries
  float art_mass = 0.0f;

  friend bool operator==(const StepHeadRecord&, const StepHeadRecord&) = default;
};

struct TokenStats {
  float logprob = 0.0f;  // natural log, <= 0
  float entropy = 0.0f;  // nats, >= 0

  friend bool operator==(const TokenStats&, const TokenStats&) = default;
};

struct AttentionTrace {
  TraceHeader header;
  // Row-major over (t, l, h): index = (t * L + l) * H + h, t zero-based.
  std::vector<StepHeadRecord> records;
  std::optional<std::vector<TokenStats>> token_stats;

  std::size_t index(std::size_t t, std::size_t l, std::size_t h) const {
    return (t * header.num_layers + l) * header.num_heads + h;
  }
  const StepHeadRecord& at(std::size_t t, std::size_t l, std::size_t h) const {
    return records[index(t, l, h)];
  }
  // All L*H records of decoding step t (zero-based).
  std::span<const StepHeadRecord> step(std::size_t t) const {
    const std::size_t lh = header.heads_per_step();
    return std::span<const StepHeadRecord>(records).subspan(t * lh, lh);
  }

  friend bool operator==(const AttentionTrace&, const AttentionTrace&) = default;
};

namespace detail {

inline constexpr char kTraceMagic[4] = {'A', 'T', 'R', 'C'};
inline constexpr std::uint32_t kTraceVersion = 1;
inline constexpr std::uint64_t kMaxHeaderBytes = std::uint64_t{1} << 24;

inline void check_header(const TraceHeader& h) {
  if (h.num_layers == 0 || h.num_heads == 0) throw FormatError("trace header: L*H must be >= 1");
  if (h.audio_len == 0) throw FormatError("trace header: audio_len must be >= 1");
  if (h.gen_len == 0) throw FormatError("trace header: gen_len must be >= 1");
}

inline nlohmann::json header_to_json(const TraceHeader& h) {
  return nlohmann::json{{"utterance_id", h.utterance_id},
                        {"model_id", h.model_id},
                        {"task", std::string(task_name(h.task))},
                        {"language", h.language},
                        {"num_layers", h.num_layers},
                        {"num_heads", h.num_heads},
                        {"audio_len", h.audio_len},
                        {"prompt_len", h.prompt_len},
                        {"gen_len", h.gen_len},
                        {"has_token_stats", h.has_token_stats}};
}

template <typename T>
T json_field(const nlohmann::json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end()) throw FormatError(std::string("trace header: missing key '") + key + "'");
  try {
    return it->get<T>();
  } catch (const nlohmann::json::exception&) {
    throw FormatError(std::string("trace header: key '") + key + "' has the wrong type");
  }
}

inline TraceHeader header_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw FormatError("trace header: not a JSON object");
  TraceHeader h;
  h.utterance_id = json_field<std::string>(j, "utterance_id");
  h.model_id = json_field<std::string>(j, "model_id");
  h.task = parse_task(json_field<std::string>(j, "task"));
  h.language = json_field<std::string>(j, "language");
  h.num_layers = json_field<std::uint32_t>(j, "num_layers");
  h.num_heads = json_field<std::uint32_t>(j, "num_heads");
  h.audio_len = json_field<std::uint32_t>(j, "audio_len");
  h.prompt_len = json_field<std::uint32_t>(j, "prompt_len");
  h.gen_len = json_field<std::uint32_t>(j, "gen_len");
  h.has_token_stats = json_field<bool>(j, "has_token_stats");
  check_header(h);
  return h;
}

inline std::string position(std::size_t t, std::size_t l, std::size_t h) {
  return "(t=" + std::to_string(t + 1) + ", l=" + std::to_string(l) + ", h=" + std::to_string(h) + ")";
}

}  // namespace detail

// Streams a TRACE-v1 file. Records must arrive in (t, l, h) order; the
// writer checks vector lengths and the total count against the header.
class TraceWriter {
 public:
  TraceWriter(std::ostream& out, TraceHeader header) : out_(&out), header_(std::move(header)) {
    detail::check_header(header_);
    const std::string json = detail::header_to_json(header_).dump();
    std::string pre(detail::kTraceMagic, 4);
    io::put_u32(pre, detail::kTraceVersion);
    io::put_u64(pre, json.size());
    pre += json;
    out_->write(pre.data(), static_cast<std::streamsize>(pre.size()));
    buf_.reserve(header_.record_bytes());
  }

  const TraceHeader& header() const { return header_; }

  void write(const StepHeadRecord& rec) {
    const std::size_t lh = header_.heads_per_step();
    const std::size_t t = written_ / lh;
    const std::size_t l = (written_ % lh) / header_.num_heads;
    const std::size_t h = written_ % header_.num_heads;
    if (written_ >= header_.record_count()) {
      throw FormatError("trace writer: more records than T*L*H = " +
                        std::to_string(header_.record_count()));
    }
    if (rec.audio.size() != header_.audio_len || rec.text.size() != header_.prompt_len) {
      throw FormatError("trace writer: record " + detail::position(t, l, h) + " has audio length " +
                        std::to_string(rec.audio.size()) + " (expected " +
                        std::to_string(header_.audio_len) + ") and text length " +
                        std::to_string(rec.text.size()) + " (expected " +
                        std::to_string(header_.prompt_len) + ")");
    }
    buf_.clear();
    io::put_f32s(buf_, rec.audio);
    io::put_f32s(buf_, rec.text);
    io::put_f32(buf_, rec.art_mass);
    out_->write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
    ++written_;
  }

  void finish(std::optional<std::span<const TokenStats>> stats = std::nullopt) {
    if (written_ != header_.record_count()) {
      const std::size_t lh = header_.heads_per_step();
      throw FormatError("trace writer: missing record " +
                        detail::position(written_ / lh, (written_ % lh) / header_.num_heads,
                                         written_ % header_.num_heads) +
                        "; wrote " + std::to_string(written_) + " of " +
                        std::to_string(header_.record_count()));
    }
    if (header_.has_token_stats != stats.has_value()) {
      throw FormatError("trace writer: has_token_stats does not match supplied token statistics");
    }
    if (stats) {
      if (stats->size() != header_.gen_len) {
        throw FormatError("trace writer: expected " + std::to_string(header_.gen_len) +
                          " token statistics, got " + std::to_string(stats->size()));
      }
      buf_.clear();
      for (const auto& s : *stats) {
        io::put_f32(buf_, s.logprob);
        io::put_f32(buf_, s.entropy);
      }
      out_->write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
    }
    out_->flush();
    if (!*out_) throw DataError("trace writer: output stream failed");
  }

 private:
  std::ostream* out_;
  TraceHeader header_;
  std::size_t written_ = 0;
  std::string buf_;
};

inline void write_trace(std::ostream& out, const AttentionTrace& trace) {
  TraceWriter w(out, trace.header);
  for (const auto& rec : trace.records) w.write(rec);
  if (trace.token_stats) {
    w.finish(std::span<const TokenStats>(*trace.token_stats));
  } else {
    w.finish();
  }
}

inline void write_trace_file(const std::filesystem::path& path, const AttentionTrace& trace) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
  write_trace(out, trace);
}

// Step-at-a-time TRACE-v1 reader. The header is parsed on construction;
// each next_step() call holds only one step's L*H records in memory.
class TraceReader {
 public:
  explicit TraceReader(const std::filesystem::path& path)
      : file_(path, std::ios::binary), reader_(file_) {
    if (!file_) throw DataError("cannot open '" + path.string() + "'");
    read_preamble();
  }

  // The stream must outlive the reader.
  explicit TraceReader(std::istream& in) : reader_(in) { read_preamble(); }

  const TraceHeader& header() const { return header_; }
  std::size_t steps_read() const { return step_; }

  // Fills `out` with the L*H records of the next step. Returns false once
  // all T steps have been consumed.
  bool next_step(std::vector<StepHeadRecord>& out) {
    if (step_ >= header_.gen_len) return false;
    const std::size_t lh = header_.heads_per_step();
    out.resize(lh);
    const std::size_t n = header_.audio_len;
    const std::size_t m = header_.prompt_len;
    for (std::size_t i = 0; i < lh; ++i) {
      auto& rec = out[i];
      // A short read reports the offset of the record's first byte.
      reader_.f32s(row_, n + m + 1, "step-head record");
      rec.audio.assign(row_.begin(), row_.begin() + static_cast<std::ptrdiff_t>(n));
      rec.text.assign(row_.begin() + static_cast<std::ptrdiff_t>(n),
                      row_.begin() + static_cast<std::ptrdiff_t>(n + m));
      rec.art_mass = row_[n + m];
    }
    ++step_;
    return true;
  }

  // Reads the trailing token statistics. Only valid after all steps.
  std::optional<std::vector<TokenStats>> read_token_stats() {
    if (step_ != header_.gen_len) throw DataError("trace reader: token statistics follow the last step");
    if (!header_.has_token_stats) return std::nullopt;
    std::vector<float> raw;
    reader_.f32s(raw, 2 * std::size_t{header_.gen_len}, "token statistics");
    std::vector<TokenStats> stats(header_.gen_len);
    for (std::size_t t = 0; t < stats.size(); ++t) stats[t] = {raw[2 * t], raw[2 * t + 1]};
    return stats;
  }

  std::uint64_t offset() const { return reader_.offset(); }

 private:
  void read_preamble() {
    const std::string magic = read_or_unsupported(4);
    if (magic != std::string_view(detail::kTraceMagic, 4)) {
      throw UnsupportedFormatError("not a TRACE-v1 file: bad magic");
    }
    const std::string ver = read_or_unsupported(4);
    const auto version = io::get_u32(reinterpret_cast<const unsigned char*>(ver.data()));
    if (version != detail::kTraceVersion) {
      throw UnsupportedFormatError("unsupported TRACE version " + std::to_string(version));
    }
    const std::uint64_t len = reader_.u64("header length");
    if (len > detail::kMaxHeaderBytes) {
      throw CorruptionError("implausible header length " + std::to_string(len), reader_.offset() - 8);
    }
    const std::string json = reader_.bytes(len, "header");
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(json);
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(std::string("trace header is not valid JSON: ") + e.what());
    }
    header_ = detail::header_from_json(j);
  }

  std::string read_or_unsupported(std::size_t n) {
    try {
      return reader_.bytes(n, "preamble");
    } catch (const CorruptionError&) {
      throw UnsupportedFormatError("not a TRACE-v1 file: too short");
    }
  }

  std::ifstream file_;
  io::CountingReader reader_;
  TraceHeader header_;
  std::size_t step_ = 0;
  std::vector<float> row_;
};

inline AttentionTrace read_trace(TraceReader& reader) {
  AttentionTrace trace;
  trace.header = reader.header();
  trace.records.reserve(trace.header.record_count());
  std::vector<StepHeadRecord> step;
  while (reader.next_step(step)) {
    for (auto& rec : step) trace.records.push_back(std::move(rec));
  }
  trace.token_stats = reader.read_token_stats();
  return trace;
}

inline AttentionTrace read_trace(std::istream& in) {
  TraceReader reader(in);
  return read_trace(reader);
}

inline AttentionTrace read_trace_file(const std::filesystem::path& path) {
  TraceReader reader(path);
  return read_trace(reader);
}

// ---------------------------------------------------------------------------
// Validation

enum class ViolationKind { LengthMismatch, NonFinite, Negative, MassBound, TokenStats };

inline std::string_view violation_name(ViolationKind k) {
  switch (k) {
    case ViolationKind::LengthMismatch: return "length_mismatch";
    case ViolationKind::NonFinite: return "non_finite";
    case ViolationKind::Negative: return "negative";
    case ViolationKind::MassBound: return "mass_bound";
    case ViolationKind::TokenStats: return "token_stats";
  }
  return "unknown";
}

struct Violation {
  std::size_t step = 0;  // zero-based
  std::size_t layer = 0;
  std::size_t head = 0;
  ViolationKind kind = ViolationKind::Negative;
  std::string detail;
};

struct ValidationReport {
  std::vector<Violation> violations;
  bool ok() const { return violations.empty(); }
};

// Slack on the visible-row mass: special tokens and float32 rounding.
inline constexpr double kRowMassSlack = 1e-4;

// At most one violation per record: the first failing check wins.
inline void validate_record(const StepHeadRecord& rec, const TraceHeader& header, std::size_t t,
                            std::size_t l, std::size_t h, ValidationReport& report) {
  auto flag = [&](ViolationKind kind, std::string detail) {
    report.violations.push_back({t, l, h, kind, std::move(detail)});
  };
  if (rec.audio.size() != header.audio_len || rec.text.size() != header.prompt_len) {
    flag(ViolationKind::LengthMismatch, "vector lengths do not match header");
    return;
  }
  double mass = rec.art_mass;
  bool finite = std::isfinite(rec.art_mass);
  bool negative = rec.art_mass < 0.0f;
  for (auto part : {std::span<const float>(rec.audio), std::span<const float>(rec.text)}) {
    for (float v : part) {
      finite = finite && std::isfinite(v);
      negative = negative || v < 0.0f;
      mass += v;
    }
  }
  if (!finite) {
    flag(ViolationKind::NonFinite, "non-finite attention value");
  } else if (negative) {
    flag(ViolationKind::Negative, "negative attention value");
  } else if (mass > 1.0 + kRowMassSlack) {
    flag(ViolationKind::MassBound, "row mass " + std::to_string(mass) + " exceeds 1");
  }
}

inline void validate_token_stats(std::span<const TokenStats> stats, ValidationReport& report) {
  for (std::size_t t = 0; t < stats.size(); ++t) {
    const auto& s = stats[t];
    if (!std::isfinite(s.logprob) || !std::isfinite(s.entropy) || s.logprob > 0.0f || s.entropy < 0.0f) {
      report.violations.push_back({t, 0, 0, ViolationKind::TokenStats,
                                   "token statistics out of range (logprob <= 0, entropy >= 0)"});
    }
  }
}

inline ValidationReport validate_trace(const AttentionTrace& trace) {
  ValidationReport report;
  const auto& hd = trace.header;
  if (trace.records.size() != hd.record_count()) {
    report.violations.push_back({0, 0, 0, ViolationKind::LengthMismatch,
                                 "record count " + std::to_string(trace.records.size()) +
                                     " != T*L*H = " + std::to_string(hd.record_count())});
    return report;
  }
  for (std::size_t t = 0; t < hd.gen_len; ++t)
    for (std::size_t l = 0; l < hd.num_layers; ++l)
      for (std::size_t h = 0; h < hd.num_heads; ++h) validate_record(trace.at(t, l, h), hd, t, l, h, report);
  if (trace.token_stats) {
    if (trace.token_stats->size() != hd.gen_len) {
      report.violations.push_back({0, 0, 0, ViolationKind::LengthMismatch, "token statistics length != T"});
    } else {
      validate_token_stats(*trace.token_stats, report);
    }
  }
  return report;
}

// Streams a trace file and validates it without loading it whole.
inline ValidationReport validate_trace_file(const std::filesystem::path& path) {
  TraceReader reader(path);
  const auto& hd = reader.header();
  ValidationReport report;
  std::vector<StepHeadRecord> step;
  std::size_t t = 0;
  while (reader.next_step(step)) {
    for (std::size_t i = 0; i < step.size(); ++i)
      validate_record(step[i], hd, t, i / hd.num_heads, i % hd.num_heads, report);
    ++t;
  }
  if (auto stats = reader.read_token_stats()) validate_token_stats(*stats, report);
  return report;
}

}  // namespace attnhd
