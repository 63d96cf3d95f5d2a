#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "causalfs/tensor.hpp"

namespace causalfs {

inline constexpr double kNormEps = 1e-5;

// ---------------------------------------------------------------- conv2d ---
// Stride-1 zero-padded convolution via im2col; weight row r is an output
// channel, column index (c_in * k + ky) * k + kx.

template <typename Scalar>
struct ConvParams {
  MatrixX<Scalar> weight;  // out_ch x (in_ch * k * k)
  VectorX<Scalar> bias;    // out_ch
  int ksize = 3;
  int pad = 1;

  int out_channels() const { return static_cast<int>(weight.rows()); }
  int in_channels() const { return static_cast<int>(weight.cols()) / (ksize * ksize); }
};

template <typename Scalar>
MatrixX<Scalar> im2col(const FeatureMap<Scalar>& in, int ksize, int pad) {
  const int C = in.channels(), H = in.h, W = in.w;
  const int oh = H + 2 * pad - ksize + 1;
  const int ow = W + 2 * pad - ksize + 1;
  if (oh < 1 || ow < 1)
    throw std::invalid_argument("im2col: kernel " + std::to_string(ksize) + " exceeds padded input " +
                                std::to_string(H) + "x" + std::to_string(W));
  MatrixX<Scalar> cols = MatrixX<Scalar>::Zero(Eigen::Index(C) * ksize * ksize, Eigen::Index(oh) * ow);
  for (int c = 0; c < C; ++c)
    for (int ky = 0; ky < ksize; ++ky)
      for (int kx = 0; kx < ksize; ++kx) {
        const int r = (c * ksize + ky) * ksize + kx;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy + ky - pad;
          if (iy < 0 || iy >= H) continue;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox + kx - pad;
            if (ix < 0 || ix >= W) continue;
            cols(r, oy * ow + ox) = in.data(c, iy * W + ix);
          }
        }
      }
  return cols;
}

template <typename Scalar>
FeatureMap<Scalar> col2im(const MatrixX<Scalar>& dcols, int C, int H, int W, int ksize, int pad) {
  const int oh = H + 2 * pad - ksize + 1;
  const int ow = W + 2 * pad - ksize + 1;
  FeatureMap<Scalar> din = FeatureMap<Scalar>::zeros(C, H, W);
  for (int c = 0; c < C; ++c)
    for (int ky = 0; ky < ksize; ++ky)
      for (int kx = 0; kx < ksize; ++kx) {
        const int r = (c * ksize + ky) * ksize + kx;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy + ky - pad;
          if (iy < 0 || iy >= H) continue;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox + kx - pad;
            if (ix < 0 || ix >= W) continue;
            din.data(c, iy * W + ix) += dcols(r, oy * ow + ox);
          }
        }
      }
  return din;
}

template <typename Scalar>
struct ConvCache {
  MatrixX<Scalar> cols;
  int in_c = 0, in_h = 0, in_w = 0;
};

template <typename Scalar>
FeatureMap<Scalar> conv2d(const FeatureMap<Scalar>& in, const ConvParams<Scalar>& p,
                          ConvCache<Scalar>* cache = nullptr) {
  if (in.channels() != p.in_channels())
    throw std::invalid_argument("conv2d: input has " + std::to_string(in.channels()) +
                                " channels, weight expects " + std::to_string(p.in_channels()));
  MatrixX<Scalar> cols = im2col(in, p.ksize, p.pad);
  const int oh = in.h + 2 * p.pad - p.ksize + 1;
  const int ow = in.w + 2 * p.pad - p.ksize + 1;
  FeatureMap<Scalar> out(p.weight * cols, oh, ow);
  out.data.colwise() += p.bias;
  if (cache) {
    cache->cols = std::move(cols);
    cache->in_c = in.channels();
    cache->in_h = in.h;
    cache->in_w = in.w;
  }
  return out;
}

// Accumulates parameter gradients into `grad`; returns gradient w.r.t. the input.
template <typename Scalar>
FeatureMap<Scalar> conv2d_backward(const FeatureMap<Scalar>& dout, const ConvParams<Scalar>& p,
                                   const ConvCache<Scalar>& cache, ConvParams<Scalar>& grad) {
  grad.weight.noalias() += dout.data * cache.cols.transpose();
  grad.bias.noalias() += dout.data.rowwise().sum();
  MatrixX<Scalar> dcols = p.weight.transpose() * dout.data;
  return col2im(dcols, cache.in_c, cache.in_h, cache.in_w, p.ksize, p.pad);
}

// --------------------------------------------------------------- maxpool ---
// 2x2 window, stride 2, floor semantics: trailing odd row/column is dropped.
// Ties resolve to the first element in row-major scan order.

struct PoolCache {
  std::vector<int> argmax;  // per (channel, out position): input position index
  int in_h = 0, in_w = 0, channels = 0;
};

template <typename Scalar>
FeatureMap<Scalar> maxpool2(const FeatureMap<Scalar>& in, PoolCache* cache = nullptr) {
  const int C = in.channels(), H = in.h, W = in.w;
  const int oh = H / 2, ow = W / 2;
  if (oh < 1 || ow < 1)
    throw std::invalid_argument("maxpool2: input " + std::to_string(H) + "x" + std::to_string(W) +
                                " too small to pool");
  FeatureMap<Scalar> out = FeatureMap<Scalar>::zeros(C, oh, ow);
  if (cache) {
    cache->argmax.assign(std::size_t(C) * oh * ow, 0);
    cache->in_h = H;
    cache->in_w = W;
    cache->channels = C;
  }
  for (int c = 0; c < C; ++c)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        int best_pos = (2 * oy) * W + 2 * ox;
        Scalar best = in.data(c, best_pos);
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const int pos = (2 * oy + dy) * W + (2 * ox + dx);
            if (in.data(c, pos) > best) {
              best = in.data(c, pos);
              best_pos = pos;
            }
          }
        out.data(c, oy * ow + ox) = best;
        if (cache) cache->argmax[std::size_t(c) * oh * ow + oy * ow + ox] = best_pos;
      }
  return out;
}

template <typename Scalar>
FeatureMap<Scalar> maxpool2_backward(const FeatureMap<Scalar>& dout, const PoolCache& cache) {
  FeatureMap<Scalar> din = FeatureMap<Scalar>::zeros(cache.channels, cache.in_h, cache.in_w);
  const int opos = dout.positions();
  for (int c = 0; c < cache.channels; ++c)
    for (int j = 0; j < opos; ++j)
      din.data(c, cache.argmax[std::size_t(c) * opos + j]) += dout.data(c, j);
  return din;
}

// ------------------------------------------------------------------ relu ---

template <typename Scalar>
FeatureMap<Scalar> relu(const FeatureMap<Scalar>& in) {
  FeatureMap<Scalar> out = in;
  out.data = out.data.cwiseMax(Scalar(0));
  return out;
}

// Uses the forward output for the mask; relu(x) > 0 iff x > 0.
template <typename Scalar>
FeatureMap<Scalar> relu_backward(const FeatureMap<Scalar>& dout, const FeatureMap<Scalar>& out) {
  FeatureMap<Scalar> din = dout;
  din.data = (out.data.array() > Scalar(0)).template cast<Scalar>() * dout.data.array();
  return din;
}

// ------------------------------------------------------------- groupnorm ---
// Per-image normalization over channel groups; per-channel affine.

template <typename Scalar>
struct GroupNormParams {
  VectorX<Scalar> gamma, beta;
  int groups = 4;
};

template <typename Scalar>
struct GroupNormCache {
  MatrixX<Scalar> xhat;      // C x HW
  VectorX<Scalar> inv_std;   // per group
};

template <typename Scalar>
FeatureMap<Scalar> group_norm(const FeatureMap<Scalar>& in, const GroupNormParams<Scalar>& p,
                              GroupNormCache<Scalar>* cache = nullptr) {
  const int C = in.channels();
  if (p.groups < 1 || C % p.groups != 0)
    throw std::invalid_argument("group_norm: " + std::to_string(C) + " channels not divisible into " +
                                std::to_string(p.groups) + " groups");
  if (p.gamma.size() != C || p.beta.size() != C)
    throw std::invalid_argument("group_norm: affine parameter size mismatch");
  const int cg = C / p.groups;
  const Eigen::Index hw = in.data.cols();
  FeatureMap<Scalar> out = FeatureMap<Scalar>::zeros(C, in.h, in.w);
  MatrixX<Scalar> xhat(C, hw);
  VectorX<Scalar> inv_std(p.groups);
  for (int g = 0; g < p.groups; ++g) {
    auto block = in.data.middleRows(g * cg, cg);
    const Scalar mean = block.mean();
    const Scalar var = (block.array() - mean).square().mean();
    const Scalar istd = Scalar(1) / std::sqrt(var + Scalar(kNormEps));
    inv_std(g) = istd;
    xhat.middleRows(g * cg, cg) = (block.array() - mean) * istd;
  }
  for (int c = 0; c < C; ++c)
    out.data.row(c) = p.gamma(c) * xhat.row(c).array() + p.beta(c);
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return out;
}

template <typename Scalar>
FeatureMap<Scalar> group_norm_backward(const FeatureMap<Scalar>& dout, const GroupNormParams<Scalar>& p,
                                       const GroupNormCache<Scalar>& cache,
                                       GroupNormParams<Scalar>& grad) {
  const int C = static_cast<int>(dout.data.rows());
  const int cg = C / p.groups;
  const Eigen::Index hw = dout.data.cols();
  FeatureMap<Scalar> din = FeatureMap<Scalar>::zeros(C, dout.h, dout.w);
  for (int c = 0; c < C; ++c) {
    grad.gamma(c) += (dout.data.row(c).array() * cache.xhat.row(c).array()).sum();
    grad.beta(c) += dout.data.row(c).sum();
  }
  for (int g = 0; g < p.groups; ++g) {
    MatrixX<Scalar> dxhat(cg, hw);
    for (int i = 0; i < cg; ++i) dxhat.row(i) = dout.data.row(g * cg + i) * p.gamma(g * cg + i);
    auto xh = cache.xhat.middleRows(g * cg, cg);
    const Scalar n = Scalar(cg) * Scalar(hw);
    const Scalar sum_d = dxhat.sum();
    const Scalar sum_dx = (dxhat.array() * xh.array()).sum();
    din.data.middleRows(g * cg, cg) =
        (cache.inv_std(g) / n) * (n * dxhat.array() - sum_d - xh.array() * sum_dx);
  }
  return din;
}

// ------------------------------------------------------------- layernorm ---
// Normalizes each column (token) of a d x T matrix; per-row affine.

template <typename Scalar>
struct LayerNormParams {
  VectorX<Scalar> gamma, beta;
};

template <typename Scalar>
struct LayerNormCache {
  MatrixX<Scalar> xhat;
  VectorX<Scalar> inv_std;  // per column
};

template <typename Scalar>
MatrixX<Scalar> layer_norm(const MatrixX<Scalar>& x, const LayerNormParams<Scalar>& p,
                           LayerNormCache<Scalar>* cache = nullptr) {
  const Eigen::Index d = x.rows(), T = x.cols();
  if (p.gamma.size() != d || p.beta.size() != d)
    throw std::invalid_argument("layer_norm: affine parameter size mismatch");
  MatrixX<Scalar> xhat(d, T);
  VectorX<Scalar> inv_std(T);
  for (Eigen::Index t = 0; t < T; ++t) {
    const Scalar mean = x.col(t).mean();
    const Scalar var = (x.col(t).array() - mean).square().mean();
    const Scalar istd = Scalar(1) / std::sqrt(var + Scalar(kNormEps));
    inv_std(t) = istd;
    xhat.col(t) = (x.col(t).array() - mean) * istd;
  }
  MatrixX<Scalar> out = (xhat.array().colwise() * p.gamma.array()).colwise() + p.beta.array();
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return out;
}

template <typename Scalar>
MatrixX<Scalar> layer_norm_backward(const MatrixX<Scalar>& dout, const LayerNormParams<Scalar>& p,
                                    const LayerNormCache<Scalar>& cache, LayerNormParams<Scalar>& grad) {
  const Eigen::Index d = dout.rows(), T = dout.cols();
  grad.gamma.noalias() += (dout.array() * cache.xhat.array()).rowwise().sum().matrix();
  grad.beta.noalias() += dout.rowwise().sum();
  MatrixX<Scalar> din(d, T);
  const Scalar n = Scalar(d);
  for (Eigen::Index t = 0; t < T; ++t) {
    VectorX<Scalar> dxhat = dout.col(t).array() * p.gamma.array();
    const Scalar sum_d = dxhat.sum();
    const Scalar sum_dx = (dxhat.array() * cache.xhat.col(t).array()).sum();
    din.col(t) =
        (cache.inv_std(t) / n) * (n * dxhat.array() - sum_d - cache.xhat.col(t).array() * sum_dx);
  }
  return din;
}

// --------------------------------------------------------------- softmax ---

template <typename Scalar>
VectorX<Scalar> softmax(const VectorX<Scalar>& v) {
  VectorX<Scalar> e = (v.array() - v.maxCoeff()).exp();
  return e / e.sum();
}

// dL/dv given p = softmax(v) and dL/dp.
template <typename Scalar>
VectorX<Scalar> softmax_backward(const VectorX<Scalar>& p, const VectorX<Scalar>& dp) {
  const Scalar dot = p.dot(dp);
  return p.array() * (dp.array() - dot);
}

// Row-wise stable softmax; each row of the result sums to 1.
template <typename Scalar>
MatrixX<Scalar> softmax_rows(const MatrixX<Scalar>& m) {
  MatrixX<Scalar> out(m.rows(), m.cols());
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    Eigen::Array<Scalar, 1, Eigen::Dynamic> e = (m.row(i).array() - m.row(i).maxCoeff()).exp();
    out.row(i) = e / e.sum();
  }
  return out;
}

template <typename Scalar>
MatrixX<Scalar> softmax_rows_backward(const MatrixX<Scalar>& p, const MatrixX<Scalar>& dp) {
  MatrixX<Scalar> ds(p.rows(), p.cols());
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const Scalar dot = p.row(i).dot(dp.row(i));
    ds.row(i) = p.row(i).array() * (dp.row(i).array() - dot);
  }
  return ds;
}

}  // namespace causalfs
