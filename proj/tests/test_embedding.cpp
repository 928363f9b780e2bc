#include <gtest/gtest.h>

#include "k4/embedding.hpp"
#include "oracles.hpp"

namespace k4 {
namespace {

TEST(Tokenizer, SplitsLowercasesDropsDigits) {
  EXPECT_EQ(tokenize("blk_-123"), (std::vector<std::string>{"blk"}));
  EXPECT_EQ(tokenize("Node7 FAILED: 42 times"), (std::vector<std::string>{"node7", "failed", "times"}));
  EXPECT_EQ(tokenize("A b", false), (std::vector<std::string>{"A", "b"}));
  EXPECT_TRUE(tokenize("  123 -- 4 ").empty());
}

TEST(Tfidf, SmoothIdf) {
  const auto v = fit_tfidf({"error disk fail", "disk ok"});
  EXPECT_EQ(v.terms(), (std::vector<std::string>{"disk", "error", "fail", "ok"}));
  EXPECT_DOUBLE_EQ(v.idf()[0], 1.0);
  for (std::size_t i = 1; i < 4; ++i) EXPECT_NEAR(v.idf()[i], std::log(1.5) + 1.0, 1e-15);
  EXPECT_NEAR(v.idf()[1], 1.4055, 1e-4);
  EXPECT_EQ(v.fitted_on(), 2u);
  EXPECT_THROW(fit_tfidf({}), InvalidInput);
}

TEST(Tfidf, TruncationTiesLexicographic) {
  const auto v = fit_tfidf({"error disk fail", "disk ok"}, TfidfConfig{2, true});
  EXPECT_EQ(v.terms(), (std::vector<std::string>{"disk", "error"}));
}

TEST(Tfidf, EmbedWorkedExample) {
  const auto v = fit_tfidf({"error disk fail", "disk ok"});
  const auto e = v.embed("error disk fail");
  EXPECT_NEAR(e[0], 0.4494, 1e-4);
  EXPECT_NEAR(e[1], 0.6317, 1e-4);
  EXPECT_NEAR(e[2], 0.6317, 1e-4);
  EXPECT_EQ(e[3], 0.0);
  const double norm = std::sqrt(1.0 + 2.0 * std::pow(std::log(1.5) + 1.0, 2));
  EXPECT_NEAR(e[0], 1.0 / norm, 1e-12);
  EXPECT_NEAR(norm, 2.2251, 1e-4);

  for (double x : v.embed("zzz qqq 17")) EXPECT_EQ(x, 0.0);
  const auto twice = v.embed("error disk fail error disk fail");
  for (std::size_t i = 0; i < e.size(); ++i) EXPECT_NEAR(twice[i], e[i], 1e-15);
}

TEST(Tfidf, OrderIndependentAndUnitNorm) {
  Rng rng(3);
  const std::vector<std::string> words{"alpha", "beta", "gamma", "delta", "eps", "zeta", "eta"};
  std::vector<std::string> docs;
  for (int d = 0; d < 40; ++d) {
    std::string s;
    for (int t = 0; t < 6; ++t) s += words[rng.below(words.size())] + " ";
    docs.push_back(s);
  }
  const auto a = fit_tfidf(docs);
  auto shuffled = docs;
  rng.shuffle(shuffled);
  EXPECT_EQ(fit_tfidf(shuffled), a);
  for (const auto& d : docs) {
    double sq = 0.0;
    for (double x : a.embed(d)) sq += x * x;
    EXPECT_NEAR(sq, 1.0, 1e-9);
  }
}

Chunk text_chunk(const std::vector<std::string>& lines) {
  Chunk c;
  for (std::size_t i = 0; i < lines.size(); ++i) c.lines.push_back({i, lines[i], false});
  return c;
}

TEST(Tfidf, ChunkTokenPathMatchesDocumentPath) {
  Rng rng(5);
  const std::vector<std::string> words{"Conn", "open", "closed", "blk_-12", "read", "WRITE", "id42", "7"};
  std::vector<std::string> lines;
  for (int i = 0; i < 80; ++i) {
    std::string s;
    for (int t = 0; t < 4; ++t) s += words[rng.below(words.size())] + (t % 2 ? ":" : " ");
    lines.push_back(s);
  }
  const auto chunk = text_chunk(lines);
  const auto ws = make_windows(chunk, 6, 3);
  const std::vector<std::size_t> train{0, 2, 4, 6, 8, 10};
  std::vector<std::string> docs;
  for (auto i : train) docs.push_back(window_text(chunk, ws[i]));
  const ChunkTokens tokens(chunk, true);
  const auto vocab = fit_tfidf(tokens, ws, train, {});
  EXPECT_EQ(vocab, fit_tfidf(docs));

  std::vector<std::size_t> all(ws.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const auto m = embed_windows(vocab, tokens, ws, all);
  for (std::size_t i = 0; i < ws.size(); ++i) {
    const auto direct = vocab.embed(window_text(chunk, ws[i]));
    for (std::size_t c = 0; c < direct.size(); ++c) EXPECT_EQ(m(i, c), direct[c]);
  }
}

TEST(Tfidf, VocabCsvRoundTrip) {
  const auto v = fit_tfidf({"error disk fail", "disk ok", "ok ok fine"});
  const auto csv = v.to_csv();
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "term,index,idf,df");
  EXPECT_EQ(TfidfVocab::from_csv(csv, v.fitted_on(), true), v);
  EXPECT_THROW(TfidfVocab::from_csv("bad\n", 1, true), FormatError);
}

TEST(External, ShapeArithmeticAndErrors) {
  EmbeddingFile f{Matrix::from_rows({{1, 2, 3}, {4, 5, 6}}), {window_id(0, 0), window_id(0, 5)}};
  const auto bytes = encode_embeddings(f);
  EXPECT_EQ(bytes.size(), 4u + 4 + 8 + 8 + 48 + 16);
  const auto back = decode_embeddings(bytes);
  EXPECT_EQ(back, f);
  EXPECT_EQ(back.matrix.rows(), 2u);
  EXPECT_EQ(back.matrix.cols(), 3u);
  EXPECT_EQ(encode_embeddings(back), bytes);

  // 47-byte float payload.
  std::string short_payload = bytes.substr(0, 24 + 47) + bytes.substr(24 + 48);
  EXPECT_THROW(decode_embeddings(short_payload), FormatError);
  auto bad_magic = bytes;
  bad_magic[1] = 'X';
  EXPECT_THROW(decode_embeddings(bad_magic), FormatError);
  auto bad_version = bytes;
  bad_version[4] = 9;
  EXPECT_THROW(decode_embeddings(bad_version), FormatError);
  EmbeddingFile nan_file = f;
  nan_file.matrix(1, 1) = std::nan("");
  EXPECT_THROW(decode_embeddings(encode_embeddings(nan_file)), FormatError);
}

TEST(External, AlignmentNamesMissingId) {
  std::vector<LabeledWindow> manifest{{0, 0, 5, 0, false}, {0, 5, 5, 1, true}};
  EmbeddingFile ok{Matrix(2, 2), {window_id(0, 0), window_id(0, 5)}};
  EXPECT_NO_THROW(check_alignment(ok, manifest));
  EmbeddingFile bad{Matrix(1, 2), {window_id(2, 9)}};
  try {
    check_alignment(bad, manifest);
    FAIL();
  } catch (const InvalidInput& e) {
    EXPECT_NE(std::string(e.what()).find(std::to_string(window_id(2, 9))), std::string::npos);
  }
}

}  // namespace
}  // namespace k4
