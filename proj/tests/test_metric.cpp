#include <cmath>
#include <vector>

#include "causalfs/metric.hpp"
#include "causalfs/rng.hpp"
#include "doctest.h"
#include "grad_check.hpp"
#include "test_support.hpp"

using namespace causalfs;

TEST_CASE("frobenius distance covers the 3-4-5 example and a high-precision oracle") {
  MatrixX<double> a(1, 2), b(1, 2);
  a << 3.0, 4.0;
  b.setZero();
  CHECK(frobenius_distance(a, b) == 5.0);
  CHECK(frobenius_distance(a, a) == 0.0);

  Rng rng(31, stream::kInit);
  MatrixX<double> x(7, 5), y(7, 5);
  testsupport::fill_normal(x, rng);
  testsupport::fill_normal(y, rng);
  long double acc = 0.0L;
  for (Eigen::Index j = 0; j < x.cols(); ++j)
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      long double d = (long double)x(i, j) - (long double)y(i, j);
      acc += d * d;
    }
  CHECK(std::abs(frobenius_distance(x, y) - double(std::sqrt(acc))) < 1e-10);

  MatrixX<double> wrong(2, 2);
  CHECK_THROWS_AS(frobenius_distance(a, wrong), std::invalid_argument);
}

TEST_CASE("distance probabilities are stable softmax over negated distances") {
  RowVectorX<double> uniform = RowVectorX<double>::Constant(5, 3.7);
  RowVectorX<double> p = distance_probabilities_row(uniform);
  for (int j = 0; j < 5; ++j) CHECK(std::abs(p(j) - 0.2) < 1e-15);

  RowVectorX<double> dominant(5);
  dominant << 0.0, 1000.0, 1000.0, 1000.0, 1000.0;
  p = distance_probabilities_row(dominant);
  CHECK(p(0) == 1.0);  // tail exponents underflow to exactly zero
  CHECK(std::abs(p.sum() - 1.0) < 1e-12);

  RowVectorX<double> two(2);
  two << 1.0, 2.0;
  p = distance_probabilities_row(two);
  const long double e1 = std::exp(-1.0L), e2 = std::exp(-2.0L);
  CHECK(std::abs(p(0) - double(e1 / (e1 + e2))) < 1e-15);
  CHECK(std::abs(p(1) - double(e2 / (e1 + e2))) < 1e-15);
  CHECK(p(0) == doctest::Approx(0.7311).epsilon(1e-3));
  CHECK(p(1) == doctest::Approx(0.2689).epsilon(1e-3));

  // Row-wise matrix form: each row is a distribution with argmax at argmin d.
  Rng rng(32, stream::kInit);
  MatrixX<double> d(6, 4);
  testsupport::fill_normal(d, rng);
  d = d.cwiseAbs();
  MatrixX<double> pm = distance_probabilities(d);
  for (Eigen::Index i = 0; i < d.rows(); ++i) {
    CHECK(std::abs(pm.row(i).sum() - 1.0) < 1e-12);
    Eigen::Index amin, amax;
    d.row(i).minCoeff(&amin);
    pm.row(i).maxCoeff(&amax);
    CHECK(amin == amax);
  }
}

TEST_CASE("episode loss matches naive accumulation and pins the uniform value") {
  MatrixX<double> perfect = MatrixX<double>::Zero(3, 4);
  std::vector<int> labels{2, 0, 3};
  for (int i = 0; i < 3; ++i) perfect(i, labels[std::size_t(i)]) = 1.0;
  CHECK(episode_loss(perfect, labels) == 0.0);

  MatrixX<double> uniform = MatrixX<double>::Constant(6, 5, 0.2);
  std::vector<int> five{0, 1, 2, 3, 4, 0};
  CHECK(std::abs(episode_loss(uniform, five) - std::log(5.0)) < 1e-12);

  Rng rng(33, stream::kInit);
  MatrixX<double> d(9, 5);
  testsupport::fill_normal(d, rng);
  d = d.cwiseAbs();
  MatrixX<double> p = distance_probabilities(d);
  std::vector<int> rand_labels;
  for (int i = 0; i < 9; ++i) rand_labels.push_back(int(rng.next_below(5)));
  long double acc = 0.0L;
  for (int i = 0; i < 9; ++i) acc -= std::log((long double)p(i, rand_labels[std::size_t(i)]));
  CHECK(std::abs(episode_loss(p, rand_labels) - double(acc / 9.0L)) < 1e-12);

  std::vector<int> bad{0, 1, 2, 3, 5, 0};
  CHECK_THROWS_AS(episode_loss(uniform, bad), std::invalid_argument);
  std::vector<int> neg{0, 1, 2, 3, -1, 0};
  CHECK_THROWS_AS(episode_loss(uniform, neg), std::invalid_argument);
  std::vector<int> short_labels{0, 1};
  CHECK_THROWS_AS(episode_loss(uniform, short_labels), std::invalid_argument);

  // The clamp keeps a hard zero finite.
  MatrixX<double> zerop = MatrixX<double>::Zero(1, 2);
  zerop(0, 1) = 1.0;
  std::vector<int> l0{0};
  CHECK(std::isfinite(episode_loss(zerop, l0)));
  CHECK(std::abs(episode_loss(zerop, l0) + std::log(1e-12)) < 1e-9);
}

TEST_CASE("episode accuracy counts nearest prototypes with slot tie-break") {
  MatrixX<double> d(3, 3);
  d << 0.1, 0.5, 0.5,   // correct, label 0
       0.7, 0.7, 0.9,   // tie between 0 and 1: slot 0 wins, label 1 misses
       0.4, 0.2, 0.3;   // label 1 hits
  std::vector<int> labels{0, 1, 1};
  CHECK(episode_accuracy(d, labels) == doctest::Approx(2.0 / 3.0));
  std::vector<int> tie_label{0, 0, 1};
  CHECK(episode_accuracy(d, tie_label) == doctest::Approx(1.0));
}

TEST_CASE("loss gradient through probabilities agrees with finite differences") {
  Rng rng(34, stream::kInit);
  MatrixX<double> d(8, 5);
  testsupport::fill_normal(d, rng);
  d = d.cwiseAbs();
  std::vector<int> labels;
  for (int i = 0; i < 8; ++i) labels.push_back(int(rng.next_below(5)));

  auto loss = [&]() { return episode_loss(distance_probabilities(d), labels); };
  MatrixX<double> p = distance_probabilities(d);
  MatrixX<double> dd_an = loss_backward_distances(p, labels);
  std::vector<gradcheck::Block> blocks{gradcheck::block("d", d, dd_an)};
  auto results = gradcheck::check_all(loss, blocks, 1e-6);
  CHECK(gradcheck::max_rel_err(results) < 1e-9);
}
