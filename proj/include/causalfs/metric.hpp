#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "causalfs/tensor.hpp"

// Distance head: Frobenius distances, softmax-over-negative-distance class
// probabilities, mean negative log likelihood, and episode accuracy.

namespace causalfs {

template <typename Scalar>
Scalar frobenius_distance(const MatrixX<Scalar>& a, const MatrixX<Scalar>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument("frobenius_distance: shape mismatch " + std::to_string(a.rows()) +
                                "x" + std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) +
                                "x" + std::to_string(b.cols()));
  return (a - b).norm();
}

// p_j = exp(-d_j) / sum_n exp(-d_n), shifted by the row minimum so the largest
// exponent is exactly 0.
template <typename Scalar>
RowVectorX<Scalar> distance_probabilities_row(const RowVectorX<Scalar>& d) {
  const Scalar shift = d.minCoeff();
  RowVectorX<Scalar> e = (-(d.array() - shift)).exp().matrix();
  return e / e.sum();
}

template <typename Scalar>
MatrixX<Scalar> distance_probabilities(const MatrixX<Scalar>& d) {
  MatrixX<Scalar> p(d.rows(), d.cols());
  for (Eigen::Index i = 0; i < d.rows(); ++i)
    p.row(i) = distance_probabilities_row<Scalar>(d.row(i));
  return p;
}

inline void check_labels(Eigen::Index rows, Eigen::Index cols, const std::vector<int>& labels) {
  if (Eigen::Index(labels.size()) != rows)
    throw std::invalid_argument("episode labels: expected " + std::to_string(rows) +
                                " entries, got " + std::to_string(labels.size()));
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] < 0 || Eigen::Index(labels[i]) >= cols)
      throw std::invalid_argument("episode labels: label " + std::to_string(labels[i]) +
                                  " at query " + std::to_string(i) + " outside [0, " +
                                  std::to_string(cols) + ")");
}

constexpr double kLossProbFloor = 1e-12;

// Mean over queries of -log p[i, label_i], log argument floored at 1e-12.
template <typename Scalar>
Scalar episode_loss(const MatrixX<Scalar>& p, const std::vector<int>& labels) {
  check_labels(p.rows(), p.cols(), labels);
  Scalar total = 0;
  for (Eigen::Index i = 0; i < p.rows(); ++i)
    total -= std::log(std::max(p(i, labels[std::size_t(i)]), Scalar(kLossProbFloor)));
  return total / Scalar(p.rows());
}

// dLoss/dd for the composition p = softmax(-d) row-wise, loss = mean NLL.
// Rows whose true-class probability hit the clamp floor contribute zero.
template <typename Scalar>
MatrixX<Scalar> loss_backward_distances(const MatrixX<Scalar>& p, const std::vector<int>& labels) {
  check_labels(p.rows(), p.cols(), labels);
  MatrixX<Scalar> dd = MatrixX<Scalar>::Zero(p.rows(), p.cols());
  const Scalar inv_n = Scalar(1) / Scalar(p.rows());
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const int lbl = labels[std::size_t(i)];
    if (p(i, lbl) <= Scalar(kLossProbFloor)) continue;
    for (Eigen::Index j = 0; j < p.cols(); ++j) {
      const Scalar y = (Eigen::Index(lbl) == j) ? Scalar(1) : Scalar(0);
      dd(i, j) = (y - p(i, j)) * inv_n;
    }
  }
  return dd;
}

// Fraction of queries whose nearest prototype is the labeled class; equal
// distances resolve toward the smaller class slot.
template <typename Scalar>
double episode_accuracy(const MatrixX<Scalar>& d, const std::vector<int>& labels) {
  check_labels(d.rows(), d.cols(), labels);
  Eigen::Index correct = 0;
  for (Eigen::Index i = 0; i < d.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index j = 1; j < d.cols(); ++j)
      if (d(i, j) < d(i, best)) best = j;
    if (best == Eigen::Index(labels[std::size_t(i)])) ++correct;
  }
  return double(correct) / double(d.rows());
}

}  // namespace causalfs
