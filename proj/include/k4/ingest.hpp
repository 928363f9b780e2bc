#pragma once

// Log ingestion: per-line labels, fixed-size chunks, sliding windows,
// keyword-based training-pool curation, and seeded train/test sampling.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "k4/core.hpp"
#include "k4/rng.hpp"

namespace k4 {

enum class LogFormat { kHdfs, kBglTbird, kGeneric };

inline LogFormat parse_log_format(std::string_view s) {
  if (s == "hdfs") return LogFormat::kHdfs;
  if (s == "bgl_tbird" || s == "bgl" || s == "thunderbird") return LogFormat::kBglTbird;
  if (s == "generic") return LogFormat::kGeneric;
  throw InvalidInput("unknown log format '" + std::string(s) + "'");
}

inline std::string_view to_string(LogFormat f) {
  switch (f) {
    case LogFormat::kHdfs: return "hdfs";
    case LogFormat::kBglTbird: return "bgl_tbird";
    case LogFormat::kGeneric: return "generic";
  }
  return "unknown";
}

struct LabeledLine {
  std::size_t index = 0;
  std::string text;
  bool anomalous = false;
};

struct Chunk {
  std::size_t chunk_id = 0;
  std::vector<LabeledLine> lines;
};

struct ParseStats {
  std::size_t lines = 0;
  std::size_t anomalous = 0;
  std::size_t skipped_empty = 0;
  std::size_t unknown_block_ids = 0;
  std::size_t repaired_utf8 = 0;
};

// Replaces invalid UTF-8 sequences with U+FFFD. Returns true if anything changed.
inline bool sanitize_utf8(std::string& s) {
  auto valid_at = [&](std::size_t i) -> std::size_t {
    const auto c = static_cast<unsigned char>(s[i]);
    if (c < 0x80) return 1;
    std::size_t len;
    std::uint32_t cp;
    if ((c & 0xe0) == 0xc0) len = 2, cp = c & 0x1f;
    else if ((c & 0xf0) == 0xe0) len = 3, cp = c & 0x0f;
    else if ((c & 0xf8) == 0xf0) len = 4, cp = c & 0x07;
    else return 0;
    if (i + len > s.size()) return 0;
    for (std::size_t k = 1; k < len; ++k) {
      const auto cc = static_cast<unsigned char>(s[i + k]);
      if ((cc & 0xc0) != 0x80) return 0;
      cp = (cp << 6) | (cc & 0x3f);
    }
    static constexpr std::uint32_t min_cp[] = {0, 0, 0x80, 0x800, 0x10000};
    if (cp < min_cp[len] || cp > 0x10ffff || (cp >= 0xd800 && cp <= 0xdfff)) return 0;
    return len;
  };
  bool ok = true;
  for (std::size_t i = 0; i < s.size();) {
    const std::size_t n = valid_at(i);
    if (n == 0) {
      ok = false;
      break;
    }
    i += n;
  }
  if (ok) return false;
  std::string out;
  out.reserve(s.size() + 8);
  for (std::size_t i = 0; i < s.size();) {
    const std::size_t n = valid_at(i);
    if (n == 0) {
      out += "\xEF\xBF\xBD";
      ++i;
    } else {
      out.append(s, i, n);
      i += n;
    }
  }
  s = std::move(out);
  return true;
}

// Block id -> anomalous, from a "BlockId,Label" CSV (Label is Normal or Anomaly).
using BlockLabels = std::unordered_map<std::string, bool>;

inline BlockLabels load_block_labels(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open block label table " + path.string());
  BlockLabels labels;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos)
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected BlockId,Label");
    std::string id = line.substr(0, comma), label = line.substr(comma + 1);
    if (lineno == 1 && id == "BlockId") continue;
    if (label == "Anomaly") labels[id] = true;
    else if (label == "Normal") labels[id] = false;
    else throw FormatError(path.string() + ":" + std::to_string(lineno) + ": unknown label '" + label + "'");
  }
  return labels;
}

// All "blk_<digits>" / "blk_-<digits>" tokens in a line.
inline std::vector<std::string_view> find_block_ids(std::string_view line) {
  std::vector<std::string_view> ids;
  for (std::size_t pos = line.find("blk_"); pos != std::string_view::npos; pos = line.find("blk_", pos + 1)) {
    std::size_t e = pos + 4;
    if (e < line.size() && line[e] == '-') ++e;
    const std::size_t digits = e;
    while (e < line.size() && std::isdigit(static_cast<unsigned char>(line[e]))) ++e;
    if (e > digits) ids.push_back(line.substr(pos, e - pos));
  }
  return ids;
}

// Turns raw lines into labeled lines. Empty messages are skipped.
class LineLabeler {
 public:
  LineLabeler(LogFormat format, const BlockLabels* blocks = nullptr) : format_(format), blocks_(blocks) {
    if (format_ == LogFormat::kHdfs && !blocks_) throw InvalidInput("hdfs format needs a block label table");
  }

  std::optional<LabeledLine> label(std::string raw, std::size_t source_line) {
    if (!raw.empty() && raw.back() == '\r') raw.pop_back();
    if (sanitize_utf8(raw)) ++stats_.repaired_utf8;
    LabeledLine out;
    switch (format_) {
      case LogFormat::kHdfs: {
        bool unknown = false;
        for (auto id : find_block_ids(raw)) {
          auto it = blocks_->find(std::string(id));
          if (it == blocks_->end()) unknown = true;
          else if (it->second) out.anomalous = true;
        }
        stats_.unknown_block_ids += unknown;
        out.text = std::move(raw);
        break;
      }
      case LogFormat::kBglTbird: {
        const auto tok_end = raw.find_first_of(" \t");
        const std::string_view tag = std::string_view(raw).substr(0, tok_end);
        out.anomalous = !tag.empty() && tag != "-";
        const auto rest = tok_end == std::string::npos ? std::string::npos : raw.find_first_not_of(" \t", tok_end);
        out.text = rest == std::string::npos ? std::string() : raw.substr(rest);
        break;
      }
      case LogFormat::kGeneric: {
        if (raw.size() < 2 || (raw[0] != '0' && raw[0] != '1') || raw[1] != ' ')
          throw FormatError("line " + std::to_string(source_line + 1) + ": generic format expects a '0 ' or '1 ' prefix");
        out.anomalous = raw[0] == '1';
        out.text = raw.substr(2);
        break;
      }
    }
    if (out.text.empty()) {
      ++stats_.skipped_empty;
      return std::nullopt;
    }
    out.index = stats_.lines++;
    stats_.anomalous += out.anomalous;
    return out;
  }

  const ParseStats& stats() const noexcept { return stats_; }

 private:
  LogFormat format_;
  const BlockLabels* blocks_;
  ParseStats stats_;
};

// Sequential single-reader stream over a log file, yielding chunks.
class ChunkReader {
 public:
  ChunkReader(const std::filesystem::path& path, LogFormat format, std::size_t chunk_size,
              const BlockLabels* blocks = nullptr)
      : in_(path, std::ios::binary), labeler_(format, blocks), chunk_size_(chunk_size) {
    if (!in_) throw IoError("cannot open dataset " + path.string());
    if (chunk_size_ < 1) throw InvalidInput("chunk_size must be >= 1");
  }

  // False once the stream is exhausted.
  bool next(Chunk& chunk) {
    chunk.chunk_id = next_id_;
    chunk.lines.clear();
    std::string raw;
    while (chunk.lines.size() < chunk_size_ && std::getline(in_, raw)) {
      if (auto l = labeler_.label(std::move(raw), source_line_++)) chunk.lines.push_back(std::move(*l));
    }
    if (chunk.lines.empty()) return false;
    ++next_id_;
    return true;
  }

  const ParseStats& stats() const noexcept { return labeler_.stats(); }

 private:
  std::ifstream in_;
  LineLabeler labeler_;
  std::size_t chunk_size_;
  std::size_t next_id_ = 0;
  std::size_t source_line_ = 0;
};

inline std::vector<LabeledLine> parse_dataset(const std::filesystem::path& path, LogFormat format,
                                              const BlockLabels* blocks = nullptr, ParseStats* stats = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open dataset " + path.string());
  LineLabeler labeler(format, blocks);
  std::vector<LabeledLine> lines;
  std::string raw;
  std::size_t n = 0;
  while (std::getline(in, raw))
    if (auto l = labeler.label(std::move(raw), n++)) lines.push_back(std::move(*l));
  if (stats) *stats = labeler.stats();
  return lines;
}

// Consecutive disjoint chunks; the trailing partial chunk is kept.
inline std::vector<Chunk> chunk_stream(std::vector<LabeledLine> lines, std::size_t chunk_size = 1'000'000) {
  if (chunk_size < 1) throw InvalidInput("chunk_size must be >= 1");
  std::vector<Chunk> chunks;
  for (std::size_t begin = 0; begin < lines.size(); begin += chunk_size) {
    Chunk c;
    c.chunk_id = chunks.size();
    const std::size_t end = std::min(lines.size(), begin + chunk_size);
    c.lines.assign(std::make_move_iterator(lines.begin() + static_cast<std::ptrdiff_t>(begin)),
                   std::make_move_iterator(lines.begin() + static_cast<std::ptrdiff_t>(end)));
    chunks.push_back(std::move(c));
  }
  return chunks;
}

struct LabeledWindow {
  std::size_t chunk_id = 0;
  std::size_t start = 0;
  std::size_t length = 0;
  std::size_t anomaly_count = 0;
  bool anomalous = false;

  friend bool operator==(const LabeledWindow&, const LabeledWindow&) = default;
};

// Stable identifier of a window within a dataset: chunk id in the high 32
// bits, start offset within the chunk in the low 32 bits.
inline std::uint64_t window_id(std::size_t chunk_id, std::size_t start) {
  return (static_cast<std::uint64_t>(chunk_id) << 32) | static_cast<std::uint32_t>(start);
}
inline std::uint64_t window_id(const LabeledWindow& w) { return window_id(w.chunk_id, w.start); }

// floor((L - W) / S) + 1 for L >= W, else 0.
inline std::size_t window_count(std::size_t length, std::size_t w, std::size_t s) {
  return length < w ? 0 : (length - w) / s + 1;
}

inline std::vector<LabeledWindow> make_windows(const Chunk& chunk, std::size_t w, std::size_t s) {
  if (w < 1 || s < 1) throw InvalidInput("window size and stride must be >= 1");
  const std::size_t n = chunk.lines.size();
  if (n >= (std::size_t{1} << 32)) throw InvalidInput("chunk too large for 32-bit window offsets");
  std::vector<std::size_t> prefix(n + 1, 0);
  for (std::size_t i = 0; i < n; ++i) prefix[i + 1] = prefix[i] + chunk.lines[i].anomalous;
  std::vector<LabeledWindow> out;
  out.reserve(window_count(n, w, s));
  for (std::size_t start = 0; start + w <= n; start += s) {
    const std::size_t count = prefix[start + w] - prefix[start];
    out.push_back({chunk.chunk_id, start, w, count, count >= 1});
  }
  return out;
}

inline std::string window_text(const Chunk& chunk, const LabeledWindow& w) {
  std::string s;
  for (std::size_t i = w.start; i < w.start + w.length; ++i) {
    if (i > w.start) s += '\n';
    s += chunk.lines[i].text;
  }
  return s;
}

inline const std::vector<std::string>& default_keywords() {
  static const std::vector<std::string> k{"error", "fatal", "warning"};
  return k;
}

// Indices of windows with no keyword-bearing line within `radius` lines.
inline std::vector<std::size_t> keyword_filter(const Chunk& chunk, const std::vector<LabeledWindow>& windows,
                                               const std::vector<std::string>& keywords = default_keywords(),
                                               std::size_t radius = 0) {
  const std::size_t n = chunk.lines.size();
  std::vector<std::string> lowered;
  for (const auto& k : keywords) {
    std::string s = k;
    for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (!s.empty()) lowered.push_back(std::move(s));
  }
  // tainted[i] = number of keyword lines within radius of line i, via a difference array.
  std::vector<std::ptrdiff_t> diff(n + 1, 0);
  if (!lowered.empty()) {
    std::string low;
    for (std::size_t i = 0; i < n; ++i) {
      low = chunk.lines[i].text;
      for (auto& c : low) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
      const bool hit = std::any_of(lowered.begin(), lowered.end(),
                                   [&](const std::string& k) { return low.find(k) != std::string::npos; });
      if (!hit) continue;
      const std::size_t lo = i >= radius ? i - radius : 0;
      const std::size_t hi = std::min(n, i + radius + 1);
      ++diff[lo];
      --diff[hi];
    }
  }
  std::vector<std::size_t> tainted_prefix(n + 1, 0);
  std::ptrdiff_t run = 0;
  for (std::size_t i = 0; i < n; ++i) {
    run += diff[i];
    tainted_prefix[i + 1] = tainted_prefix[i] + (run > 0);
  }
  std::vector<std::size_t> eligible;
  for (std::size_t w = 0; w < windows.size(); ++w) {
    const auto& win = windows[w];
    if (win.chunk_id != chunk.chunk_id || win.start + win.length > n)
      throw InvalidInput("window does not belong to this chunk");
    if (tainted_prefix[win.start + win.length] == tainted_prefix[win.start]) eligible.push_back(w);
  }
  return eligible;
}

// Indices into the window list. Sets are disjoint and sorted ascending.
struct SplitSpec {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test_normal;
  std::vector<std::size_t> test_anomalous;
  std::uint64_t seed = 0;
  std::size_t shortfall_train = 0;
  std::size_t shortfall_test_normal = 0;
  std::size_t shortfall_test_anomalous = 0;
  bool usable = true;
  std::string unusable_reason;
};

struct SampleRequest {
  std::size_t n_train = 0;
  std::size_t n_test_normal = 0;
  std::size_t n_test_anomalous = 0;
  std::uint64_t seed = 0;
};

// Uniform sampling without replacement. Training draws from `train_eligible`
// (keyword-curated indices) intersected with label-normal windows when given,
// else from all label-normal windows; normal test windows come from the
// remaining normal windows.
inline SplitSpec sample_sets(const std::vector<LabeledWindow>& windows, const SampleRequest& req,
                             const std::vector<std::size_t>* train_eligible = nullptr) {
  if (req.n_train < 1 || req.n_test_normal < 1 || req.n_test_anomalous < 1)
    throw InvalidInput("requested sample counts must be >= 1");
  SplitSpec spec;
  spec.seed = req.seed;
  std::vector<std::size_t> normal, anomalous;
  for (std::size_t i = 0; i < windows.size(); ++i) (windows[i].anomaly_count == 0 ? normal : anomalous).push_back(i);
  if (normal.empty() || anomalous.empty()) {
    spec.usable = false;
    spec.unusable_reason = normal.empty() ? "no normal windows" : "no anomalous windows";
    return spec;
  }

  std::vector<std::size_t> train_pool;
  if (train_eligible) {
    for (auto i : *train_eligible) {
      if (i >= windows.size()) throw InvalidInput("eligible window index out of range");
      if (windows[i].anomaly_count == 0) train_pool.push_back(i);
    }
    std::sort(train_pool.begin(), train_pool.end());
  } else {
    train_pool = normal;
  }

  Rng rng = Rng::derive(req.seed, 0x73706c6974);
  auto draw = [&](std::vector<std::size_t> pool, std::size_t want, std::size_t& shortfall) {
    rng.shuffle(pool);
    const std::size_t take = std::min(want, pool.size());
    shortfall = want - take;
    pool.resize(take);
    std::sort(pool.begin(), pool.end());
    return pool;
  };

  spec.train = draw(train_pool, req.n_train, spec.shortfall_train);
  std::vector<std::size_t> rest;
  std::set_difference(normal.begin(), normal.end(), spec.train.begin(), spec.train.end(), std::back_inserter(rest));
  spec.test_normal = draw(std::move(rest), req.n_test_normal, spec.shortfall_test_normal);
  spec.test_anomalous = draw(anomalous, req.n_test_anomalous, spec.shortfall_test_anomalous);
  return spec;
}

// chunk_id,start,length,anomaly_count,label
inline std::string manifest_csv(const std::vector<LabeledWindow>& windows, bool header = true) {
  std::ostringstream os;
  if (header) os << "chunk_id,start,length,anomaly_count,label\n";
  for (const auto& w : windows)
    os << w.chunk_id << ',' << w.start << ',' << w.length << ',' << w.anomaly_count << ',' << (w.anomalous ? 1 : 0)
       << '\n';
  return os.str();
}

inline std::vector<LabeledWindow> parse_manifest_csv(std::string_view text, const std::string& context = "manifest") {
  std::vector<LabeledWindow> out;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (lineno == 1 && line.rfind("chunk_id", 0) == 0) continue;
    LabeledWindow w;
    int label = -1;
    char c1, c2, c3, c4;
    std::istringstream ls(line);
    if (!(ls >> w.chunk_id >> c1 >> w.start >> c2 >> w.length >> c3 >> w.anomaly_count >> c4 >> label) || c1 != ',' ||
        c2 != ',' || c3 != ',' || c4 != ',' || (label != 0 && label != 1))
      throw FormatError(context + ":" + std::to_string(lineno) + ": malformed manifest row");
    w.anomalous = label == 1;
    if (w.anomalous != (w.anomaly_count >= 1))
      throw FormatError(context + ":" + std::to_string(lineno) + ": label disagrees with anomaly_count");
    out.push_back(w);
  }
  return out;
}

}  // namespace k4
