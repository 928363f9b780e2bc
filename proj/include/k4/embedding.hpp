#pragma once

// Window embeddings: a native TF-IDF vectorizer and the K4EM container for
// embeddings produced by external models.
//
// K4EM layout (little-endian):
//   "K4EM" | u32 version | u64 rows | u64 dims | rows*dims f64 (row-major) | rows u64 window ids

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "k4/binary_io.hpp"
#include "k4/core.hpp"
#include "k4/ingest.hpp"
#include "k4/parallel.hpp"

namespace k4 {

// Splits on every non-alphanumeric byte; drops empty and all-digit tokens.
template <typename Sink>
void for_each_token(std::string_view text, bool lowercase, Sink&& sink) {
  std::string tok;
  bool all_digits = true;
  auto flush = [&] {
    if (!tok.empty() && !all_digits) sink(std::string_view(tok));
    tok.clear();
    all_digits = true;
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (c < 0x80 && std::isalnum(c)) {
      all_digits = all_digits && std::isdigit(c);
      tok.push_back(lowercase ? static_cast<char>(std::tolower(c)) : ch);
    } else {
      flush();
    }
  }
  flush();
}

inline std::vector<std::string> tokenize(std::string_view text, bool lowercase = true) {
  std::vector<std::string> out;
  for_each_token(text, lowercase, [&](std::string_view t) { out.emplace_back(t); });
  return out;
}

struct TfidfConfig {
  std::size_t max_features = 5000;
  bool lowercase = true;
};

class TfidfVocab {
 public:
  TfidfVocab() = default;

  // terms must be unique; column i is terms[i].
  TfidfVocab(std::vector<std::string> terms, std::vector<double> idf, std::vector<std::size_t> df,
             std::size_t fitted_on, bool lowercase)
      : terms_(std::move(terms)), idf_(std::move(idf)), df_(std::move(df)), fitted_on_(fitted_on), lowercase_(lowercase) {
    if (idf_.size() != terms_.size() || df_.size() != terms_.size()) throw InvalidInput("vocabulary arrays disagree");
    for (std::size_t i = 0; i < terms_.size(); ++i) {
      if (!(idf_[i] > 0.0)) throw InvalidInput("idf must be positive");
      if (!index_.emplace(terms_[i], i).second) throw InvalidInput("duplicate vocabulary term '" + terms_[i] + "'");
    }
  }

  std::size_t size() const noexcept { return terms_.size(); }
  const std::vector<std::string>& terms() const noexcept { return terms_; }
  const std::vector<double>& idf() const noexcept { return idf_; }
  const std::vector<std::size_t>& df() const noexcept { return df_; }
  std::size_t fitted_on() const noexcept { return fitted_on_; }
  bool lowercase() const noexcept { return lowercase_; }

  std::optional<std::size_t> column(std::string_view term) const {
    auto it = index_.find(std::string(term));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  // Raw counts -> tf*idf, L2-normalised in place. All-zero rows stay zero.
  void finalize(std::span<double> row) const {
    double sq = 0.0;
    for (std::size_t c = 0; c < row.size(); ++c) {
      row[c] *= idf_[c];
      sq += row[c] * row[c];
    }
    if (sq > 0.0) {
      const double norm = std::sqrt(sq);
      for (auto& v : row) v /= norm;
    }
  }

  std::vector<double> embed(std::string_view doc) const {
    std::vector<double> row(size(), 0.0);
    for_each_token(doc, lowercase_, [&](std::string_view t) {
      if (auto c = column(t)) row[*c] += 1.0;
    });
    finalize(row);
    return row;
  }

  // term,index,idf,df
  std::string to_csv() const {
    std::string s = "term,index,idf,df\n";
    char buf[64];
    for (std::size_t i = 0; i < size(); ++i) {
      auto r = std::to_chars(buf, buf + sizeof buf, idf_[i]);
      s += terms_[i] + ',' + std::to_string(i) + ',' + std::string(buf, r.ptr) + ',' + std::to_string(df_[i]) + '\n';
    }
    return s;
  }

  static TfidfVocab from_csv(std::string_view text, std::size_t fitted_on, bool lowercase,
                             const std::string& context = "vocab") {
    std::istringstream in{std::string(text)};
    std::string line;
    std::vector<std::string> terms;
    std::vector<double> idf;
    std::vector<std::size_t> df;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (lineno == 1) {
        if (line != "term,index,idf,df") throw FormatError(context + ": missing header");
        continue;
      }
      if (line.empty()) continue;
      std::vector<std::string_view> f;
      std::string_view rest = line;
      for (std::size_t pos; (pos = rest.find(',')) != std::string_view::npos; rest.remove_prefix(pos + 1))
        f.push_back(rest.substr(0, pos));
      f.push_back(rest);
      std::size_t index = 0, d = 0;
      double v = 0.0;
      if (f.size() != 4 || std::from_chars(f[1].data(), f[1].data() + f[1].size(), index).ec != std::errc{} ||
          std::from_chars(f[2].data(), f[2].data() + f[2].size(), v).ec != std::errc{} ||
          std::from_chars(f[3].data(), f[3].data() + f[3].size(), d).ec != std::errc{} || index != terms.size())
        throw FormatError(context + ":" + std::to_string(lineno) + ": malformed vocabulary row");
      terms.emplace_back(f[0]);
      idf.push_back(v);
      df.push_back(d);
    }
    return TfidfVocab(std::move(terms), std::move(idf), std::move(df), fitted_on, lowercase);
  }

  friend bool operator==(const TfidfVocab& a, const TfidfVocab& b) {
    return a.terms_ == b.terms_ && a.idf_ == b.idf_ && a.df_ == b.df_ && a.fitted_on_ == b.fitted_on_ &&
           a.lowercase_ == b.lowercase_;
  }

 private:
  std::vector<std::string> terms_;
  std::vector<double> idf_;
  std::vector<std::size_t> df_;
  std::size_t fitted_on_ = 0;
  bool lowercase_ = true;
  std::unordered_map<std::string, std::size_t> index_;
};

namespace detail {

// df counts -> vocabulary: top max_features by df (ties lexicographic), columns in lexicographic order.
inline TfidfVocab build_vocab(const std::map<std::string, std::size_t>& df_counts, std::size_t n_docs,
                              const TfidfConfig& cfg) {
  std::vector<std::pair<std::string, std::size_t>> ranked(df_counts.begin(), df_counts.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  if (ranked.size() > cfg.max_features) ranked.resize(cfg.max_features);
  std::sort(ranked.begin(), ranked.end());
  std::vector<std::string> terms;
  std::vector<double> idf;
  std::vector<std::size_t> df;
  const double n = static_cast<double>(n_docs);
  for (auto& [t, d] : ranked) {
    terms.push_back(t);
    df.push_back(d);
    idf.push_back(std::log((1.0 + n) / (1.0 + static_cast<double>(d))) + 1.0);
  }
  return TfidfVocab(std::move(terms), std::move(idf), std::move(df), n_docs, cfg.lowercase);
}

}  // namespace detail

inline TfidfVocab fit_tfidf(const std::vector<std::string>& docs, const TfidfConfig& cfg = {}) {
  if (docs.empty()) throw InvalidInput("TF-IDF needs at least one training document");
  if (cfg.max_features < 1) throw InvalidInput("max_features must be >= 1");
  std::map<std::string, std::size_t> df;
  for (const auto& d : docs) {
    std::unordered_set<std::string> seen;
    for_each_token(d, cfg.lowercase, [&](std::string_view t) { seen.emplace(t); });
    for (const auto& t : seen) ++df[t];
  }
  return detail::build_vocab(df, docs.size(), cfg);
}

// Per-line token ids for one chunk, interned chunk-locally, so each line is
// tokenized once no matter how many windows cover it.
class ChunkTokens {
 public:
  ChunkTokens(const Chunk& chunk, bool lowercase) : lowercase_(lowercase) {
    std::unordered_map<std::string, std::uint32_t> intern;
    line_offsets_.reserve(chunk.lines.size() + 1);
    line_offsets_.push_back(0);
    for (const auto& line : chunk.lines) {
      for_each_token(line.text, lowercase, [&](std::string_view t) {
        auto [it, inserted] = intern.try_emplace(std::string(t), static_cast<std::uint32_t>(strings_.size()));
        if (inserted) strings_.emplace_back(t);
        ids_.push_back(it->second);
      });
      line_offsets_.push_back(ids_.size());
    }
  }

  bool lowercase() const noexcept { return lowercase_; }
  const std::vector<std::string>& strings() const noexcept { return strings_; }

  std::span<const std::uint32_t> window_tokens(const LabeledWindow& w) const {
    const auto b = line_offsets_.at(w.start), e = line_offsets_.at(w.start + w.length);
    return {ids_.data() + b, e - b};
  }

 private:
  bool lowercase_;
  std::vector<std::string> strings_;
  std::vector<std::uint32_t> ids_;
  std::vector<std::size_t> line_offsets_;
};

// Same result as fit_tfidf over the joined window texts.
inline TfidfVocab fit_tfidf(const ChunkTokens& tokens, const std::vector<LabeledWindow>& windows,
                            std::span<const std::size_t> train, const TfidfConfig& cfg = {}) {
  if (train.empty()) throw InvalidInput("TF-IDF needs at least one training document");
  if (cfg.max_features < 1) throw InvalidInput("max_features must be >= 1");
  if (cfg.lowercase != tokens.lowercase()) throw InvalidInput("token cache built with a different case setting");
  std::vector<std::size_t> df_by_id(tokens.strings().size(), 0);
  std::vector<std::size_t> last_seen(tokens.strings().size(), SIZE_MAX);
  for (std::size_t d = 0; d < train.size(); ++d)
    for (auto id : tokens.window_tokens(windows.at(train[d])))
      if (last_seen[id] != d) {
        last_seen[id] = d;
        ++df_by_id[id];
      }
  std::map<std::string, std::size_t> df;
  for (std::size_t id = 0; id < df_by_id.size(); ++id)
    if (df_by_id[id] > 0) df.emplace(tokens.strings()[id], df_by_id[id]);
  return detail::build_vocab(df, train.size(), cfg);
}

// Rows of tf-idf embeddings for windows[rows[i]].
inline Matrix embed_windows(const TfidfVocab& vocab, const ChunkTokens& tokens,
                            const std::vector<LabeledWindow>& windows, std::span<const std::size_t> rows) {
  if (vocab.lowercase() != tokens.lowercase()) throw InvalidInput("token cache built with a different case setting");
  std::vector<std::ptrdiff_t> column(tokens.strings().size(), -1);
  for (std::size_t id = 0; id < column.size(); ++id)
    if (auto c = vocab.column(tokens.strings()[id])) column[id] = static_cast<std::ptrdiff_t>(*c);
  // An empty vocabulary still yields one (all-zero) column.
  Matrix out(rows.size(), std::max<std::size_t>(vocab.size(), 1));
  parallel_for(rows.size(), [&](std::size_t r) {
    auto row = out.row(r);
    for (auto id : tokens.window_tokens(windows.at(rows[r])))
      if (column[id] >= 0) row[static_cast<std::size_t>(column[id])] += 1.0;
    if (vocab.size() > 0) vocab.finalize(row);
  }, 256);
  return out;
}

struct EmbeddingFile {
  Matrix matrix;
  std::vector<std::uint64_t> ids;

  friend bool operator==(const EmbeddingFile&, const EmbeddingFile&) = default;
};

inline constexpr std::string_view kEmbeddingMagic = "K4EM";
inline constexpr std::uint32_t kEmbeddingVersion = 1;

inline std::string encode_embeddings(const EmbeddingFile& f) {
  if (f.ids.size() != f.matrix.rows()) throw InvalidInput("one window id per embedding row required");
  ByteWriter w;
  w.bytes(kEmbeddingMagic);
  w.u32(kEmbeddingVersion);
  w.u64(f.matrix.rows());
  w.u64(f.matrix.cols());
  w.f64s(f.matrix.data());
  for (auto id : f.ids) w.u64(id);
  return w.take();
}

inline EmbeddingFile decode_embeddings(std::string_view bytes, const std::string& context = "K4EM") {
  ByteReader r(bytes, context);
  if (r.bytes(4) != kEmbeddingMagic) r.fail("bad magic (expected K4EM)");
  if (auto v = r.u32(); v != kEmbeddingVersion) r.fail("unsupported format version " + std::to_string(v));
  const auto rows = r.u64(), dims = r.u64();
  if (rows == 0 || dims == 0) r.fail("empty embedding matrix");
  const std::uint64_t cells = rows * dims;
  if (cells / dims != rows || cells > (UINT64_MAX / 8) - rows)
    r.fail("declared shape overflows");
  if (r.remaining() != cells * 8 + rows * 8)
    r.fail("payload length " + std::to_string(r.remaining()) + " does not match " + std::to_string(rows) + "x" +
           std::to_string(dims) + " floats plus ids");
  EmbeddingFile f{Matrix(rows, dims, r.f64s(cells)), {}};
  f.ids.resize(rows);
  for (auto& id : f.ids) id = r.u64();
  for (double v : f.matrix.data())
    if (!std::isfinite(v)) r.fail("non-finite value in payload");
  return f;
}

inline void save_embeddings(const std::filesystem::path& path, const EmbeddingFile& f) {
  write_file(path, encode_embeddings(f));
}

inline EmbeddingFile load_external(const std::filesystem::path& path) {
  return decode_embeddings(read_file(path), path.string());
}

// Throws if any id is not a window of the manifest.
inline void check_alignment(const EmbeddingFile& f, const std::vector<LabeledWindow>& manifest) {
  std::unordered_set<std::uint64_t> known;
  known.reserve(manifest.size());
  for (const auto& w : manifest) known.insert(window_id(w));
  for (auto id : f.ids)
    if (!known.count(id))
      throw InvalidInput("window id " + std::to_string(id) + " (chunk " + std::to_string(id >> 32) + ", start " +
                         std::to_string(id & 0xffffffffu) + ") is not in the window manifest");
}

inline EmbeddingFile load_external(const std::filesystem::path& path, const std::vector<LabeledWindow>& manifest) {
  auto f = load_external(path);
  check_alignment(f, manifest);
  return f;
}

}  // namespace k4
