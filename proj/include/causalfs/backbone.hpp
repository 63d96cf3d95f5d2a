#pragma once

#include <array>
#include <stdexcept>
#include <string>

#include "causalfs/layers.hpp"
#include "causalfs/rng.hpp"
#include "causalfs/tensor.hpp"

namespace causalfs {

// Four conv blocks (conv -> group norm -> relu -> 2x2 maxpool). The output of
// every block is a tap: downstream consumers see all four scales.

struct BackboneConfig {
  int in_channels = 3;
  std::array<int, 4> channels = {64, 64, 64, 64};
  int ksize = 3;  // odd; 'same' padding
  int norm_groups = 4;

  void validate() const {
    if (in_channels < 1) throw std::invalid_argument("BackboneConfig: in_channels must be >= 1");
    if (ksize < 1 || ksize % 2 == 0)
      throw std::invalid_argument("BackboneConfig: ksize must be odd and positive");
    for (int c : channels) {
      if (c < 1) throw std::invalid_argument("BackboneConfig: channel counts must be >= 1");
      if (norm_groups < 1 || c % norm_groups != 0)
        throw std::invalid_argument("BackboneConfig: channels " + std::to_string(c) +
                                    " not divisible by norm_groups " + std::to_string(norm_groups));
    }
  }
};

template <typename Scalar>
struct ConvBlockParams {
  ConvParams<Scalar> conv;
  GroupNormParams<Scalar> norm;
};

template <typename Scalar>
struct BackboneParams {
  std::array<ConvBlockParams<Scalar>, 4> blocks;
};

template <typename Scalar>
using MultiScale = std::array<FeatureMap<Scalar>, 4>;

template <typename Scalar>
BackboneParams<Scalar> init_backbone(const BackboneConfig& cfg, Rng& rng) {
  cfg.validate();
  BackboneParams<Scalar> p;
  int in_c = cfg.in_channels;
  for (int b = 0; b < 4; ++b) {
    const int out_c = cfg.channels[std::size_t(b)];
    ConvBlockParams<Scalar>& blk = p.blocks[std::size_t(b)];
    blk.conv.ksize = cfg.ksize;
    blk.conv.pad = cfg.ksize / 2;
    blk.conv.weight.resize(out_c, Eigen::Index(in_c) * cfg.ksize * cfg.ksize);
    const double bound = std::sqrt(6.0 / (double(in_c) * cfg.ksize * cfg.ksize));
    for (Eigen::Index j = 0; j < blk.conv.weight.cols(); ++j)
      for (Eigen::Index i = 0; i < blk.conv.weight.rows(); ++i)
        blk.conv.weight(i, j) = Scalar(rng.real(-bound, bound));
    blk.conv.bias = VectorX<Scalar>::Zero(out_c);
    blk.norm.groups = cfg.norm_groups;
    blk.norm.gamma = VectorX<Scalar>::Ones(out_c);
    blk.norm.beta = VectorX<Scalar>::Zero(out_c);
    in_c = out_c;
  }
  return p;
}

template <typename Scalar>
struct BlockCache {
  ConvCache<Scalar> conv;
  GroupNormCache<Scalar> norm;
  FeatureMap<Scalar> relu_out;
  PoolCache pool;
};

template <typename Scalar>
using BackboneCache = std::array<BlockCache<Scalar>, 4>;

template <typename Scalar>
MultiScale<Scalar> backbone_forward(const FeatureMap<Scalar>& image, const BackboneParams<Scalar>& p,
                                    BackboneCache<Scalar>* cache = nullptr) {
  if (image.h < 16 || image.w < 16)
    throw std::invalid_argument("backbone_forward: input " + std::to_string(image.h) + "x" +
                                std::to_string(image.w) + " below the 16x16 minimum");
  MultiScale<Scalar> taps;
  FeatureMap<Scalar> x = image;
  for (int b = 0; b < 4; ++b) {
    BlockCache<Scalar>* bc = cache ? &(*cache)[std::size_t(b)] : nullptr;
    FeatureMap<Scalar> y = conv2d(x, p.blocks[std::size_t(b)].conv, bc ? &bc->conv : nullptr);
    y = group_norm(y, p.blocks[std::size_t(b)].norm, bc ? &bc->norm : nullptr);
    y = relu(y);
    if (bc) bc->relu_out = y;
    x = maxpool2(y, bc ? &bc->pool : nullptr);
    taps[std::size_t(b)] = x;
  }
  return taps;
}

// dtaps[i] is the loss gradient flowing into tap i (zero-sized maps mean zero).
// Parameter gradients accumulate into `grad`; returns the image gradient.
template <typename Scalar>
FeatureMap<Scalar> backbone_backward(const MultiScale<Scalar>& dtaps, const BackboneParams<Scalar>& p,
                                     const BackboneCache<Scalar>& cache, BackboneParams<Scalar>& grad) {
  FeatureMap<Scalar> dx;  // gradient at the output of the current block
  for (int b = 3; b >= 0; --b) {
    const BlockCache<Scalar>& bc = cache[std::size_t(b)];
    FeatureMap<Scalar> dtap = dtaps[std::size_t(b)];
    if (dtap.data.size() == 0) {
      dtap = FeatureMap<Scalar>::zeros(bc.relu_out.channels(), bc.relu_out.h / 2,
                                       bc.relu_out.w / 2);
    }
    if (dx.data.size() != 0) dtap.data += dx.data;
    FeatureMap<Scalar> dpool = maxpool2_backward(dtap, bc.pool);
    FeatureMap<Scalar> drelu = relu_backward(dpool, bc.relu_out);
    FeatureMap<Scalar> dnorm =
        group_norm_backward(drelu, p.blocks[std::size_t(b)].norm, bc.norm,
                            grad.blocks[std::size_t(b)].norm);
    dx = conv2d_backward(dnorm, p.blocks[std::size_t(b)].conv, bc.conv,
                         grad.blocks[std::size_t(b)].conv);
  }
  return dx;
}

}  // namespace causalfs
