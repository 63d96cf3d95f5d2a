#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>

namespace causalfs {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowVectorX = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

// Dense spatial feature map. Channels are rows, spatial positions are columns,
// column index j = y * width + x (row-major spatial flattening).
template <typename Scalar>
struct FeatureMap {
  MatrixX<Scalar> data;
  int h = 0;
  int w = 0;

  FeatureMap() = default;
  FeatureMap(MatrixX<Scalar> d, int height, int width)
      : data(std::move(d)), h(height), w(width) {
    if (data.cols() != Eigen::Index(h) * w)
      throw std::invalid_argument("FeatureMap: data has " + std::to_string(data.cols()) +
                                  " columns, expected " + std::to_string(h * w));
  }

  static FeatureMap zeros(int channels, int height, int width) {
    return FeatureMap(MatrixX<Scalar>::Zero(channels, Eigen::Index(height) * width), height, width);
  }

  int channels() const { return static_cast<int>(data.rows()); }
  int positions() const { return h * w; }

  Scalar& at(int c, int y, int x) { return data(c, y * w + x); }
  Scalar at(int c, int y, int x) const { return data(c, y * w + x); }

  template <typename T>
  FeatureMap<T> cast() const {
    FeatureMap<T> out;
    out.data = data.template cast<T>();
    out.h = h;
    out.w = w;
    return out;
  }
};

}  // namespace causalfs
