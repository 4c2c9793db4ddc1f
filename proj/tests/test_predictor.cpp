#include <gtest/gtest.h>

#include <set>

#include "kvo/error.hpp"
#include "kvo/kcompress.hpp"
#include "kvo/predictor.hpp"
#include "kvo/random.hpp"
#include "oracles.hpp"

using kvo::numerics::Matrix;
using kvo::kcompress::ProjectionMatrix;
using namespace kvo::predictor;
namespace num = kvo::numerics;

namespace {

Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
    kvo::Rng rng(seed);
    Matrix m(rows, cols);
    for (double& x : m.data()) x = rng.normal();
    return m;
}

oracle::Dense to_dense(const Matrix& m) {
    oracle::Dense d(m.rows(), std::vector<double>(m.cols()));
    for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t c = 0; c < m.cols(); ++c) d[r][c] = m(r, c);
    return d;
}

}  // namespace

TEST(HeadMap, GqaBlocks) {
    const HeadMap m = HeadMap::gqa(8, 2);
    EXPECT_EQ(m.g, (std::vector<std::size_t>{0, 0, 0, 0, 1, 1, 1, 1}));
    EXPECT_THROW(HeadMap::gqa(6, 4), kvo::ParameterError);
    HeadMap bad{{0, 1, 0, 1}, 2};
    EXPECT_THROW(bad.validate(), kvo::ParameterError);
}

TEST(LowRankQueries, IdentityProjectionGivesRawQuery) {
    const Matrix w = random_matrix(5, 4, 1);
    const std::vector<double> x{0.5, -1, 2, 0, 1};
    const Matrix q = low_rank_queries(x, w, ProjectionMatrix{Matrix::identity(4), 1.0}, HeadMap::gqa(1, 1));
    const auto raw = num::vecmat(x, w);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(q(0, i), raw[i]);
}

TEST(LowRankQueries, ZeroInputGivesZeros) {
    const Matrix w = random_matrix(6, 8, 1);
    const ProjectionMatrix p{num::svd_top_r(random_matrix(10, 4, 2), 2), 2.0};
    const Matrix q = low_rank_queries(std::vector<double>(6, 0.0), w, p, HeadMap::gqa(2, 1));
    for (double v : q.data()) EXPECT_EQ(v, 0.0);
}

TEST(LowRankQueries, SharedKvHeadMatchesStraightLineReference) {
    // D = 5, d = 3, 4 query heads on 2 KV heads, A is 6 × 2.
    const std::size_t dm = 5, d = 3, hq = 4;
    const Matrix w = random_matrix(dm, hq * d, 31);
    const ProjectionMatrix p{num::svd_top_r(random_matrix(12, 6, 32), 2), 3.0};
    std::vector<double> x{0.3, -1.2, 0.8, 2.0, -0.5};
    const Matrix got = low_rank_queries(x, w, p, HeadMap::gqa(hq, 2));
    for (std::size_t h = 0; h < hq; ++h) {
        const std::size_t kv = h / 2;
        for (std::size_t j = 0; j < 2; ++j) {
            double ref = 0.0;
            for (std::size_t i = 0; i < d; ++i) {
                double qi = 0.0;
                for (std::size_t e = 0; e < dm; ++e) qi += x[e] * w(e, h * d + i);
                ref += qi * p.a(kv * d + i, j);
            }
            EXPECT_NEAR(got(h, j), ref, 1e-12);
        }
    }
    EXPECT_THROW(low_rank_queries(std::vector<double>(4), w, p, HeadMap::gqa(hq, 2)), kvo::ParameterError);
}

TEST(ApproxScores, OneHotKeysSelectComponents) {
    const Matrix q(2, 3, {1, 2, 3, -4, 5, -6});
    const Matrix k(3, 3, {0, 0, 1, 1, 0, 0, 0, 1, 0});
    const Matrix s = approx_scores(q, k);
    EXPECT_EQ(s, Matrix(2, 3, {3, 1, 2, -6, -4, 5}));
    EXPECT_EQ(approx_scores(Matrix(2, 3), k), Matrix(2, 3));
}

TEST(ApproxScores, FullRankMatchesExactScores) {
    // h_kv = 2, d = 8, 4 query heads. Exact score: q_h · K_{g(h)}ᵀ.
    const std::size_t d = 8, hkv = 2, hq = 4, n = 50;
    const Matrix k = random_matrix(n, hkv * d, 5);
    const Matrix queries = random_matrix(hq, d, 6);
    const HeadMap map = HeadMap::gqa(hq, hkv);
    const ProjectionMatrix p = kvo::kcompress::fit_projection(k, 1.0);
    const Matrix approx = approx_scores(low_rank_queries_from(queries, p, map), num::matmul(k, p.a));
    Matrix exact(hq, n);
    for (std::size_t h = 0; h < hq; ++h)
        for (std::size_t t = 0; t < n; ++t)
            for (std::size_t i = 0; i < d; ++i) exact(h, t) += queries(h, i) * k(t, map.g[h] * d + i);
    EXPECT_LE(num::frobenius_distance(approx, exact) / num::frobenius_norm(exact), 1e-5);
}

TEST(SelectGroups, ThreeStagesByHand) {
    const Matrix s(2, 4, {1, 0, 2, 5, 0, 1, 1, 1});
    const auto r = select_groups(s, 2, 1);
    EXPECT_EQ(r.token_scores, (std::vector<double>{1, 1, 3, 6}));
    EXPECT_EQ(r.group_scores, (std::vector<double>{1, 6}));
    EXPECT_EQ(r.selected, (std::vector<std::size_t>{1}));
}

TEST(SelectGroups, ExhaustiveSelection) {
    const Matrix s = random_matrix(3, 9, 4);
    const auto r = select_groups(s, 1, 9);
    EXPECT_EQ(r.selected, (std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7, 8}));
    EXPECT_THROW(select_groups(s, 1, 10), kvo::ParameterError);
    EXPECT_THROW(select_groups(s, 4, 4), kvo::ParameterError);  // 3 groups
}

TEST(SelectGroups, MatchesBruteForceOracle) {
    const Matrix s = random_matrix(4, 64, 2024);
    const auto r = select_groups(s, 4, 3);
    EXPECT_EQ(r.selected, oracle::top_groups(to_dense(s), 4, 3));
    EXPECT_EQ(r.selected, (std::vector<std::size_t>{4, 7, 9}));
}

TEST(SelectGroups, TiesGoToLowerIndex) {
    const Matrix s(1, 6, {2, 2, 1, 2, 0, 2});
    EXPECT_EQ(select_groups(s, 1, 2).selected, (std::vector<std::size_t>{0, 1}));
    EXPECT_EQ(select_groups(s, 2, 2).selected, (std::vector<std::size_t>{0, 1}));
}

TEST(SelectGroups, PartialTrailingGroup) {
    const Matrix s(1, 5, {0, 0, 0, 0, 9});
    const auto r = select_groups(s, 2, 1);
    EXPECT_EQ(r.group_scores.size(), 3u);
    EXPECT_EQ(r.selected, (std::vector<std::size_t>{2}));
}

TEST(SelectGroupsProperty, OracleAgreementSizeAndScaleInvariance) {
    kvo::Rng rng(55);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t heads = 1 + rng.below(6);
        const std::size_t n = 1 + rng.below(120);
        const std::size_t g = 1 + rng.below(8);
        const std::size_t groups = (n + g - 1) / g;
        const std::size_t m = 1 + rng.below(groups);
        const Matrix s = random_matrix(heads, n, 1000 + trial);
        const auto r = select_groups(s, g, m);
        ASSERT_EQ(r.selected.size(), m);
        for (std::size_t i = 1; i < m; ++i) EXPECT_LT(r.selected[i - 1], r.selected[i]);
        EXPECT_EQ(r.selected, oracle::top_groups(to_dense(s), g, m));

        Matrix scaled = s;
        const double c = std::exp(rng.uniform(-3, 3));
        for (double& v : scaled.data()) v *= c;
        EXPECT_EQ(select_groups(scaled, g, m).selected, r.selected);
        EXPECT_EQ(select_groups(approx_scores(s, Matrix::identity(n), ScoreScaling::inv_sqrt_head_dim, 64), g, m)
                      .selected,
                  r.selected);
    }
}

TEST(SelectGroups, RejectsNonFinite) {
    Matrix s(1, 4, {1, 2, 3, 4});
    s(0, 2) = std::nan("");
    EXPECT_THROW(select_groups(s, 1, 1), kvo::NumericError);
}
