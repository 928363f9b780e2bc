#include <gtest/gtest.h>

#include "k4/prdc.hpp"
#include "oracles.hpp"

namespace k4 {
namespace {

TEST(PairwiseDistances, HandExamples) {
  auto d = pairwise_distances(Matrix::from_rows({{0, 0}}), Matrix::from_rows({{3, 4}}));
  EXPECT_EQ(d(0, 0), 5.0);
  d = pairwise_distances(Matrix::from_rows({{1, 1}}), Matrix::from_rows({{1, 1}}));
  EXPECT_EQ(d(0, 0), 0.0);
  d = pairwise_distances(Matrix::from_rows({{0, 0}, {2, 0}}), Matrix::from_rows({{0, 2}}));
  EXPECT_EQ(d.rows(), 2u);
  EXPECT_EQ(d.cols(), 1u);
  EXPECT_DOUBLE_EQ(d(0, 0), 2.0);
  EXPECT_NEAR(d(1, 0), 2.8284271, 1e-7);
}

TEST(PairwiseDistances, DimensionMismatch) {
  EXPECT_THROW(pairwise_distances(Matrix(1, 2), Matrix(1, 3)), InvalidInput);
}

TEST(KnnRadii, HandExamples) {
  EXPECT_EQ(knn_radii(Matrix::from_rows({{0, 0}, {2, 0}, {0, 2}}), 1).radii, (std::vector<double>{2, 2, 2}));
  auto r = knn_radii(Matrix::from_rows({{0, 0}, {0, 0}, {5, 5}}), 1).radii;
  EXPECT_EQ(r[0], 0.0);
  EXPECT_EQ(r[1], 0.0);
  EXPECT_NEAR(r[2], 7.0710678, 1e-7);
  EXPECT_EQ(knn_radii(Matrix::from_rows({{0, 0}, {1, 0}, {3, 0}}), 2).radii, (std::vector<double>{3, 2, 3}));
}

TEST(KnnRadii, RejectsOutOfRangeK) {
  const auto m = Matrix::from_rows({{0, 0}, {1, 0}, {3, 0}});
  EXPECT_THROW(knn_radii(m, 0), InvalidInput);
  EXPECT_THROW(knn_radii(m, 3), InvalidInput);
}

TEST(ComputePrdc, HandWorkedCase) {
  const auto ref = Matrix::from_rows({{0, 0}, {2, 0}, {0, 2}});
  const auto query = Matrix::from_rows({{1, 0}, {10, 10}});
  const auto v = compute_prdc(ref, query, 1).values;
  const double expected[2][4] = {{1, 1, 2.0 / 3.0, 1}, {0, 2.0 / 3.0, 0, 1}};
  for (int j = 0; j < 2; ++j)
    for (int c = 0; c < 4; ++c) EXPECT_NEAR(v(j, c), expected[j][c], 1e-12) << j << "," << c;
}

TEST(ComputePrdc, QueryDuplicatesReference) {
  const auto pts = Matrix::from_rows({{0, 0}, {4, 0}});
  const auto v = compute_prdc(pts, pts, 1).values;
  for (int j = 0; j < 2; ++j) {
    EXPECT_EQ(v(j, 0), 1.0);
    EXPECT_EQ(v(j, 1), 0.5);
    EXPECT_EQ(v(j, 2), 0.5);
    EXPECT_EQ(v(j, 3), 1.0);
  }
}

TEST(ComputePrdc, Errors) {
  const auto a = Matrix::from_rows({{0, 0}, {1, 1}, {2, 2}});
  EXPECT_THROW(compute_prdc(a, Matrix(3, 3), 1), InvalidInput);
  EXPECT_THROW(compute_prdc(a, Matrix::from_rows({{0, 0}, {1, 0}}), 2), InvalidInput);
  EXPECT_THROW(compute_prdc(a, a, 3), InvalidInput);
  auto bad = a;
  bad(1, 1) = std::nan("");
  EXPECT_THROW(compute_prdc(bad, a, 1), InvalidInput);
}

TEST(ComputePrdc, MatchesOracleBitExactly) {
  Rng rng(7);
  const auto ref = oracle::random_matrix(rng, 200, 8);
  const auto query = oracle::random_matrix(rng, 200, 8);
  EXPECT_EQ(compute_prdc(ref, query, 5).values, oracle::prdc(ref, query, 5));
}

TEST(ComputePrdc, SparseRowsMatchDenseOracle) {
  Rng rng(11);
  auto ref = oracle::random_matrix(rng, 120, 64);
  auto query = oracle::random_matrix(rng, 90, 64);
  for (auto* m : {&ref, &query})
    for (auto& v : m->data())
      if (rng.uniform() < 0.9) v = 0.0;
  EXPECT_EQ(compute_prdc(ref, query, 3).values, oracle::prdc(ref, query, 3));
}

TEST(ComputePrdc, SmallBlocksAndThreadsDoNotChangeResult) {
  Rng rng(3);
  const auto ref = oracle::random_matrix(rng, 150, 6);
  const auto query = oracle::random_matrix(rng, 170, 6);
  const auto base = compute_prdc(ref, query, 4).values;
  set_num_threads(4);
  const auto threaded = compute_prdc(ref, query, 4, PrdcOptions{7}).values;
  set_num_threads(0);
  EXPECT_EQ(base, threaded);
}

class PrdcProperties : public ::testing::TestWithParam<int> {};

TEST_P(PrdcProperties, RangesImplicationAndInvariances) {
  Rng rng(static_cast<std::uint64_t>(GetParam()));
  const std::size_t n = 20 + rng.below(80), m = 20 + rng.below(80), d = 1 + rng.below(10);
  const std::size_t k = 1 + rng.below(5);
  auto ref = oracle::random_matrix(rng, n, d);
  const auto query = oracle::random_matrix(rng, m, d);
  const auto v = compute_prdc(ref, query, k).values;
  for (std::size_t j = 0; j < m; ++j) {
    EXPECT_TRUE(v(j, 0) == 0.0 || v(j, 0) == 1.0);
    EXPECT_TRUE(v(j, 3) == 0.0 || v(j, 3) == 1.0);
    EXPECT_GE(v(j, 1), 0.0);
    EXPECT_LE(v(j, 1), 1.0);
    EXPECT_GE(v(j, 2), 0.0);
    EXPECT_LE(v(j, 2), 1.0 / static_cast<double>(k));
    EXPECT_EQ(v(j, 2) > 0.0, v(j, 0) == 1.0);
  }

  for (double c : {1e-3, 7.0, 1e3}) {
    Matrix rs = ref, qs = query;
    for (auto& x : rs.data()) x *= c;
    for (auto& x : qs.data()) x *= c;
    EXPECT_EQ(compute_prdc(rs, qs, k).values, v) << "scale " << c;
  }

  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  rng.shuffle(perm);
  EXPECT_EQ(compute_prdc(ref.select_rows(perm), query, k).values, v);
}

INSTANTIATE_TEST_SUITE_P(Seeds, PrdcProperties, ::testing::Range(1, 11));

TEST(ComputePrdc, ZeroRadiusReferenceAdmitsNothing) {
  // Two coincident reference points have 1-NN radius 0; a query on top of
  // them is not strictly inside either ball.
  const auto ref = Matrix::from_rows({{0, 0}, {0, 0}, {10, 0}, {11, 0}});
  const auto query = Matrix::from_rows({{0, 0}, {3, 3}});
  const auto v = compute_prdc(ref, query, 1).values;
  EXPECT_EQ(v(0, 0), 0.0);
  EXPECT_EQ(v(0, 2), 0.0);
}

TEST(PrdcReference, ReusesRadiiAcrossBatches) {
  Rng rng(5);
  const auto ref = oracle::random_matrix(rng, 60, 3);
  const auto q = oracle::random_matrix(rng, 40, 3);
  PrdcReference pr(ref, 3);
  EXPECT_EQ(pr.featurize(q).values, compute_prdc(ref, q, 3).values);
  EXPECT_EQ(std::vector<double>(pr.radii().begin(), pr.radii().end()), knn_radii(ref, 3).radii);
}

}  // namespace
}  // namespace k4
