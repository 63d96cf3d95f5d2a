#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "causalfs/tensor.hpp"

namespace causalfs {

template <typename Scalar>
FeatureMap<Scalar> crop(const FeatureMap<Scalar>& img, int y0, int x0, int h, int w) {
  if (h < 1 || w < 1 || y0 < 0 || x0 < 0 || y0 + h > img.h || x0 + w > img.w)
    throw std::invalid_argument("crop: window [" + std::to_string(y0) + "," + std::to_string(x0) +
                                " " + std::to_string(h) + "x" + std::to_string(w) +
                                "] outside image " + std::to_string(img.h) + "x" +
                                std::to_string(img.w));
  FeatureMap<Scalar> out = FeatureMap<Scalar>::zeros(img.channels(), h, w);
  for (int y = 0; y < h; ++y)
    out.data.middleCols(Eigen::Index(y) * w, w) =
        img.data.middleCols(Eigen::Index(y0 + y) * img.w + x0, w);
  return out;
}

template <typename Scalar>
FeatureMap<Scalar> hflip(const FeatureMap<Scalar>& img) {
  FeatureMap<Scalar> out = FeatureMap<Scalar>::zeros(img.channels(), img.h, img.w);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      out.data.col(Eigen::Index(y) * img.w + x) =
          img.data.col(Eigen::Index(y) * img.w + (img.w - 1 - x));
  return out;
}

// Bilinear resize with half-pixel centers. Same-size calls return the input
// unchanged (bitwise), which augmentation relies on when cropping is disabled.
template <typename Scalar>
FeatureMap<Scalar> resize_bilinear(const FeatureMap<Scalar>& img, int oh, int ow) {
  if (oh < 1 || ow < 1) throw std::invalid_argument("resize_bilinear: target size must be positive");
  if (oh == img.h && ow == img.w) return img;
  FeatureMap<Scalar> out = FeatureMap<Scalar>::zeros(img.channels(), oh, ow);
  const double sy = double(img.h) / oh;
  const double sx = double(img.w) / ow;
  for (int oy = 0; oy < oh; ++oy) {
    double fy = (oy + 0.5) * sy - 0.5;
    fy = std::min(std::max(fy, 0.0), double(img.h - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, img.h - 1);
    const Scalar wy = Scalar(fy - y0);
    for (int ox = 0; ox < ow; ++ox) {
      double fx = (ox + 0.5) * sx - 0.5;
      fx = std::min(std::max(fx, 0.0), double(img.w - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, img.w - 1);
      const Scalar wx = Scalar(fx - x0);
      out.data.col(Eigen::Index(oy) * ow + ox) =
          (Scalar(1) - wy) * ((Scalar(1) - wx) * img.data.col(Eigen::Index(y0) * img.w + x0) +
                              wx * img.data.col(Eigen::Index(y0) * img.w + x1)) +
          wy * ((Scalar(1) - wx) * img.data.col(Eigen::Index(y1) * img.w + x0) +
                wx * img.data.col(Eigen::Index(y1) * img.w + x1));
    }
  }
  return out;
}

// Nearest-neighbor upsample; used to blow small attention maps up to image size.
template <typename Scalar>
FeatureMap<Scalar> upsample_nearest(const FeatureMap<Scalar>& img, int oh, int ow) {
  if (oh < img.h || ow < img.w)
    throw std::invalid_argument("upsample_nearest: target smaller than source");
  FeatureMap<Scalar> out = FeatureMap<Scalar>::zeros(img.channels(), oh, ow);
  for (int oy = 0; oy < oh; ++oy) {
    const int sy = std::min(oy * img.h / oh, img.h - 1);
    for (int ox = 0; ox < ow; ++ox) {
      const int sx = std::min(ox * img.w / ow, img.w - 1);
      out.data.col(Eigen::Index(oy) * ow + ox) = img.data.col(Eigen::Index(sy) * img.w + sx);
    }
  }
  return out;
}

template <typename Scalar>
void clamp01(FeatureMap<Scalar>& img) {
  img.data = img.data.cwiseMax(Scalar(0)).cwiseMin(Scalar(1));
}

// Channel-wise photometric jitter. Contrast blends toward the mean luminance,
// saturation toward the per-pixel gray value; factors of 1 are identities.
template <typename Scalar>
FeatureMap<Scalar> color_jitter(const FeatureMap<Scalar>& img, Scalar brightness, Scalar contrast,
                                Scalar saturation) {
  if (img.channels() != 3) throw std::invalid_argument("color_jitter: need 3 channels");
  FeatureMap<Scalar> out = img;
  out.data *= brightness;
  RowVectorX<Scalar> gray = Scalar(0.299) * out.data.row(0) + Scalar(0.587) * out.data.row(1) +
                            Scalar(0.114) * out.data.row(2);
  const Scalar mean_gray = gray.mean();
  out.data = contrast * out.data.array() + (Scalar(1) - contrast) * mean_gray;
  gray = contrast * gray.array() + (Scalar(1) - contrast) * mean_gray;
  for (int c = 0; c < 3; ++c)
    out.data.row(c) = saturation * out.data.row(c).array() + (Scalar(1) - saturation) * gray.array();
  clamp01(out);
  return out;
}

}  // namespace causalfs
