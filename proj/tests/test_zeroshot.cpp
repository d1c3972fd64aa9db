#include <algorithm>
#include <numeric>

#include "doctest.h"
#include "oracles.hpp"
#include "peva/error.hpp"
#include "peva/zeroshot.hpp"

using namespace peva;

TEST_SUITE("zeroshot") {

TEST_CASE("similarity against an orthonormal basis") {
  const Tensor prompts = Tensor::matrix({{1, 0}, {0, 1}});
  const Tensor s = similarity_matrix(prompts, Tensor::matrix({{1, 0}}));
  REQUIRE(s.shape() == Shape{2, 1});
  CHECK(s[0] == 1.0);
  CHECK(s[1] == 0.0);
}

TEST_CASE("a view equal to a prompt peaks at that prompt") {
  Rng rng(1);
  const Tensor prompts = testutil::random_unit_rows(rng, 4, 6);
  Tensor views = testutil::random_unit_rows(rng, 3, 6);
  std::copy(prompts.row(2).begin(), prompts.row(2).end(), views.row(1).begin());
  const Tensor s = similarity_matrix(prompts, views);
  CHECK(s(2, 1) == doctest::Approx(1.0).epsilon(1e-15));
  for (std::size_t i = 0; i < 4; ++i) CHECK(s(i, 1) <= s(2, 1));
}

TEST_CASE("similarity matches a double loop") {
  Rng rng(2);
  const Tensor p = testutil::random_unit_rows(rng, 3, 4), v = testutil::random_unit_rows(rng, 2, 4);
  const auto expected = oracle::zero_shot(oracle::to_mat(p), oracle::to_mat(v), 1.0).similarity;
  const Tensor s = similarity_matrix(p, v);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j) CHECK(std::abs(s(i, j) - expected[i][j]) <= 1e-12);
}

TEST_CASE("discriminative scores") {
  CHECK(discriminative_scores(Tensor::matrix({{0.3}, {0.3}, {0.3}}))[0] == 0.0);

  const auto alpha = discriminative_scores(Tensor::matrix({{0.9, 0.4}, {0.1, 0.3}, {0.2, 0.5}}));
  CHECK(alpha[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(alpha[1] == doctest::Approx(0.1).epsilon(1e-12));

  const auto shifted = discriminative_scores(Tensor::matrix({{1.9, 0.4}, {1.1, 0.3}, {1.2, 0.5}}));
  CHECK(std::abs(shifted[0] - alpha[0]) <= 1e-12);
}

TEST_CASE("aggregation weights") {
  const std::vector<double> alpha = {0.5, 0.1};
  const auto w = aggregation_weights(alpha);
  CHECK(w[0] == doctest::Approx(0.598687660112452).epsilon(1e-12));
  CHECK(w[1] == doctest::Approx(0.401312339887548).epsilon(1e-12));

  const std::vector<double> equal(5, 0.3);
  for (double x : aggregation_weights(equal)) CHECK(x == doctest::Approx(0.2).epsilon(1e-15));
  const std::vector<double> single = {0.7};
  CHECK(aggregation_weights(single)[0] == 1.0);
}

TEST_CASE("two-view aggregation") {
  // S columns [0.9,0.1,0.2] and [0.4,0.3,0.5] against e1 and e2 in D=3 need prompts with those inner products.
  const Tensor prompts = Tensor::matrix({{0.9, 0.4, 0}, {0.1, 0.3, 0}, {0.2, 0.5, 0}});
  const Tensor views = Tensor::matrix({{1, 0, 0}, {0, 1, 0}});
  const auto r = aggregate_peva(prompts, views);
  CHECK(r.descriptor[0] == doctest::Approx(0.598687660112452).epsilon(1e-12));
  CHECK(r.descriptor[1] == doctest::Approx(0.401312339887548).epsilon(1e-12));
  CHECK(r.descriptor[2] == 0.0);
}

TEST_CASE("single view and equal-score reductions") {
  Rng rng(3);
  const Tensor prompts = testutil::random_unit_rows(rng, 4, 5);
  const Tensor one = testutil::random_unit_rows(rng, 1, 5);
  const auto r = aggregate_peva(prompts, one);
  CHECK(r.weights == std::vector<double>{1.0});
  CHECK(testutil::max_abs_diff(r.descriptor, one.data()) == 0.0);

  // Identical views have identical scores, so PEVA is plain averaging.
  Tensor same({3, 5});
  for (std::size_t i = 0; i < 3; ++i) std::copy(one.row(0).begin(), one.row(0).end(), same.row(i).begin());
  CHECK(testutil::max_abs_diff(aggregate_peva(prompts, same).descriptor, aggregate_average(same)) <= 1e-12);
}

TEST_CASE("average pooling") {
  CHECK(aggregate_average(Tensor::matrix({{1, 0, 0}, {0, 1, 0}})) == std::vector<double>{0.5, 0.5, 0.0});
  const Tensor same = Tensor::matrix({{0.25, -1, 2}, {0.25, -1, 2}});
  CHECK(aggregate_average(same) == std::vector<double>{0.25, -1, 2});

  Rng rng(4);
  const Tensor v = testutil::random_matrix(rng, 6, 5);
  const auto avg = aggregate_average(v);
  for (std::size_t k = 0; k < 5; ++k) {
    double acc = 0.0;
    for (std::size_t j = 0; j < 6; ++j) acc += v(j, k);
    CHECK(std::abs(avg[k] - acc / 6.0) <= 1e-12);
  }
}

TEST_CASE("logits and prediction") {
  const Tensor basis = Tensor::identity(4);
  const std::vector<double> f = {0, 1, 0, 0};
  const auto logits = zero_shot_logits(basis, f, 1.0);
  CHECK(logits == std::vector<double>{0, 1, 0, 0});
  CHECK(predict(logits) == 1);
  CHECK(predict(std::vector<double>{2.0, 5.0, 5.0}) == 1);

  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor p = testutil::random_unit_rows(rng, 7, 6), v = testutil::random_unit_rows(rng, 4, 6);
    const auto o = oracle::zero_shot(oracle::to_mat(p), oracle::to_mat(v), 1.0);
    const auto desc = aggregate_peva(p, v).descriptor;
    const auto unit = zero_shot_logits(p, desc, 1.0);
    CHECK(testutil::max_abs_diff(unit, o.logits) <= 1e-12);
    for (double k : {1e-3, 0.5, 100.0, 1e6}) CHECK(predict(zero_shot_logits(p, desc, k)) == predict(unit));
  }
}

TEST_CASE("dimension errors") {
  CHECK_THROWS_AS(similarity_matrix(Tensor({2, 3}), Tensor({2, 4})), DimensionError);
  CHECK_THROWS_AS(zero_shot_logits(Tensor({2, 3}), std::vector<double>(4)), DimensionError);
}

TEST_CASE("pipeline properties on random instances") {
  Rng rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng.below(9), m = 1 + rng.below(8), d = 2 + rng.below(15);
    const Tensor p = testutil::random_unit_rows(rng, n, d), v = testutil::random_unit_rows(rng, m, d);
    const auto r = aggregate_peva(p, v);
    double total = 0.0;
    for (double w : r.weights) {
      CHECK(w > 0.0);
      total += w;
    }
    CHECK(std::abs(total - 1.0) <= 1e-9);

    // Shifting a whole column of S moves its max and mean together.
    Tensor s = r.similarity;
    for (std::size_t j = 0; j < m; ++j) {
      const double c = rng.normal();
      for (std::size_t i = 0; i < n; ++i) s(i, j) += c;
    }
    CHECK(testutil::max_abs_diff(discriminative_scores(s), r.scores) <= 1e-12);

    // Permuting views permutes scores and weights, and keeps the descriptor.
    std::vector<std::size_t> perm(m);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    for (std::size_t i = m; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    Tensor pv({m, d});
    for (std::size_t j = 0; j < m; ++j) std::copy(v.row(perm[j]).begin(), v.row(perm[j]).end(), pv.row(j).begin());
    const auto rp = aggregate_peva(p, pv);
    for (std::size_t j = 0; j < m; ++j) {
      CHECK(std::abs(rp.scores[j] - r.scores[perm[j]]) <= 1e-12);
      CHECK(std::abs(rp.weights[j] - r.weights[perm[j]]) <= 1e-12);
    }
    CHECK(testutil::max_abs_diff(rp.descriptor, r.descriptor) <= 1e-9);
  }
}

}  // TEST_SUITE
