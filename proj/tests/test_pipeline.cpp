#include <gtest/gtest.h>

#include <filesystem>
#include <numeric>

#include "k4/pipeline.hpp"
#include "oracles.hpp"

namespace k4 {
namespace {

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

PipelineConfig config(DetectorKind kind, std::size_t k = 5, std::uint64_t seed = 3) {
  PipelineConfig c;
  c.k = k;
  c.seed = seed;
  c.detector.kind = kind;
  c.detector.deepsvdd.epochs = 30;
  return c;
}

TEST(Split, OddCountGivesLargerReference) {
  const auto s = split_reference_query(11, 1);
  EXPECT_EQ(s.reference.size(), 6u);
  EXPECT_EQ(s.query.size(), 5u);
  std::vector<std::size_t> all = s.reference;
  all.insert(all.end(), s.query.begin(), s.query.end());
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < 11; ++i) EXPECT_EQ(all[i], i);
}

TEST(Train, RejectsTooFewRows) {
  Rng rng(1);
  EXPECT_THROW(train_pipeline(oracle::random_matrix(rng, 11, 3), config(DetectorKind::kKde)), InvalidInput);
  EXPECT_NO_THROW(train_pipeline(oracle::random_matrix(rng, 12, 3), config(DetectorKind::kKde)));
}

TEST(Train, DeterministicUnderSeed) {
  Rng rng(2);
  const auto x = oracle::random_matrix(rng, 200, 6);
  const auto a = train_pipeline(x, config(DetectorKind::kOcsvm));
  const auto b = train_pipeline(x, config(DetectorKind::kOcsvm));
  EXPECT_EQ(a.reference().embeddings(), b.reference().embeddings());
  EXPECT_EQ(a.train_scores(), b.train_scores());
  EXPECT_EQ(a.provenance(), b.provenance());
  const auto c = train_pipeline(x, config(DetectorKind::kOcsvm, 5, 4));
  EXPECT_NE(a.reference().embeddings(), c.reference().embeddings());
}

TEST(Train, ScoringQueryHalfReproducesTrainingPath) {
  Rng rng(3);
  const auto x = oracle::random_matrix(rng, 101, 5);
  for (auto kind : {DetectorKind::kGmm, DetectorKind::kKde, DetectorKind::kOcsvm, DetectorKind::kDeepSvdd}) {
    const auto p = train_pipeline(x, config(kind));
    const auto split = split_reference_query(x.rows(), 3);
    EXPECT_EQ(p.score(x.select_rows(split.query)), p.train_scores()) << to_string(kind);
  }
}

// Held-out inliers come in a batch the size of the query half so query-side
// radii are on the training scale; outliers sit 10 sigma out in random directions.
TEST(Train, BlobOutliersOutscoreHeldOutInliers) {
  Rng rng(4);
  const std::size_t d = 8, n_in = 500, n_out = 50;
  const auto train = oracle::random_matrix(rng, 1000, d);
  auto test = oracle::random_matrix(rng, n_in + n_out, d);
  for (std::size_t i = n_in; i < n_in + n_out; ++i) {
    double norm = 0.0;
    for (std::size_t j = 0; j < d; ++j) norm += test(i, j) * test(i, j);
    for (std::size_t j = 0; j < d; ++j) test(i, j) *= 10.0 / std::sqrt(norm);
  }
  for (auto kind : {DetectorKind::kGmm, DetectorKind::kKde, DetectorKind::kOcsvm, DetectorKind::kDeepSvdd}) {
    const auto p = train_pipeline(train, config(kind));
    const auto s = p.score(test);
    const std::vector<double> in(s.begin(), s.begin() + n_in), out(s.begin() + n_in, s.end());
    EXPECT_LT(mean(in), mean(out)) << to_string(kind);
    for (double v : s) EXPECT_TRUE(std::isfinite(v));
  }
}

TEST(Score, PermutationEquivariantAndDuplicateSafe) {
  Rng rng(5);
  const auto p = train_pipeline(oracle::random_matrix(rng, 120, 4), config(DetectorKind::kKde));
  auto test = oracle::random_matrix(rng, 30, 4);
  const auto s = p.score(test);
  std::vector<std::size_t> perm(30);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(std::span<std::size_t>(perm));
  const auto sp = p.score(test.select_rows(perm));
  for (std::size_t i = 0; i < 30; ++i) EXPECT_EQ(sp[i], s[perm[i]]);

  std::vector<std::size_t> dup(30);
  std::iota(dup.begin(), dup.end(), 0);
  dup.push_back(7);
  for (double v : p.score(test.select_rows(dup))) EXPECT_TRUE(std::isfinite(v));
}

TEST(Score, RejectsSmallBatchesAndWrongDims) {
  Rng rng(6);
  const auto p = train_pipeline(oracle::random_matrix(rng, 40, 4), config(DetectorKind::kGmm));
  EXPECT_THROW(p.score(oracle::random_matrix(rng, 5, 4)), InvalidInput);
  EXPECT_THROW(p.score(oracle::random_matrix(rng, 10, 3)), InvalidInput);
}

TEST(Streaming, BuffersUntilKPlusOneRows) {
  Rng rng(7);
  const auto p = train_pipeline(oracle::random_matrix(rng, 40, 4), config(DetectorKind::kKde));
  const auto batch = oracle::random_matrix(rng, 6, 4);
  StreamingScorer s(p);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_TRUE(s.push(batch.row(i), 100 + i).empty());
    EXPECT_EQ(s.pending(), i + 1);
  }
  const auto out = s.push(batch.row(5), 105);
  ASSERT_EQ(out.size(), 6u);
  const auto direct = p.score(batch);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(out[i].first, 100 + i);
    EXPECT_EQ(out[i].second, direct[i]);
  }
  EXPECT_EQ(s.pending(), 0u);
}

TEST(Threshold, NearestRankExamples) {
  std::vector<double> s(100);
  std::iota(s.begin(), s.end(), 1.0);
  EXPECT_EQ(select_threshold(s, 95), 95.0);
  EXPECT_EQ(select_threshold({7.0}, 3), 7.0);
  EXPECT_EQ(select_threshold({7.0}, 99.9), 7.0);
  EXPECT_EQ(select_threshold({4, 2, 3, 1}, 50), 2.0);
  EXPECT_THROW(select_threshold({}, 95), InvalidInput);
  EXPECT_THROW(select_threshold({1.0}, 100), InvalidInput);
}

TEST(Classify, StrictExceedance) {
  EXPECT_EQ(classify(std::vector<double>{0.5}, 0.5), std::vector<int>{0});
  EXPECT_EQ(classify(std::vector<double>{0.1, 0.9}, 0.5), (std::vector<int>{0, 1}));
  std::vector<double> s{3, -2, 8};
  EXPECT_EQ(classify(s, -3.0), (std::vector<int>{1, 1, 1}));
}

TEST(Bundle, RoundTripsAndDetectsTampering) {
  Rng rng(8);
  const auto x = oracle::random_matrix(rng, 80, 4);
  auto p = train_pipeline(x, config(DetectorKind::kOcsvm));
  p.set_threshold(select_threshold(p.train_scores(), 95));
  const auto dir = std::filesystem::temp_directory_path() / "k4_bundle_test";
  std::filesystem::remove_all(dir);
  save_bundle(dir, p, Json{{"note", "unit"}});
  const auto q = load_bundle(dir);
  EXPECT_TRUE(q.verify_reference());
  EXPECT_EQ(q.provenance(), p.provenance());
  EXPECT_EQ(q.threshold(), p.threshold());
  const auto test = oracle::random_matrix(rng, 20, 4);
  EXPECT_EQ(q.score(test), p.score(test));

  auto ref = load_external(dir / "reference.k4em");
  ref.matrix(0, 0) += 1e-9;
  save_embeddings(dir / "reference.k4em", ref);
  EXPECT_THROW(load_bundle(dir), FormatError);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace k4
