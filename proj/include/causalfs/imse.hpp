#pragma once

#include <array>
#include <stdexcept>
#include <string>

#include "causalfs/attention.hpp"
#include "causalfs/backbone.hpp"
#include "causalfs/layers.hpp"
#include "causalfs/tensor.hpp"

namespace causalfs {

// Multi-scale encoder with an interventional weighting path. Each backbone tap
// is linearly aligned to gamma+1 channels; the first gamma rows are content,
// the extra row carries the intervention signal. A per-scale transformer layer
// mixes tokens, the intervention row is summarized into one scalar per scale,
// a softmax over the four scalars weights the content maps, and a top-down
// pooling chain fuses them at the coarsest resolution.

enum class TokenMode { channel, cls };

struct ImseConfig {
  int gamma = 128;
  int ffn_mult = 2;
  TokenMode token_mode = TokenMode::channel;

  void validate() const {
    if (gamma < 1) throw std::invalid_argument("ImseConfig: gamma must be >= 1");
    if (ffn_mult < 1) throw std::invalid_argument("ImseConfig: ffn_mult must be >= 1");
  }
};

template <typename Scalar>
struct ImseScaleParams {
  MatrixX<Scalar> align_w;  // (gamma+1) x C_i
  VectorX<Scalar> align_b;  // gamma+1
  TransformerParams<Scalar> tf;
};

template <typename Scalar>
struct ImseParams {
  std::array<ImseScaleParams<Scalar>, 4> scales;
};

template <typename Scalar>
ImseParams<Scalar> init_imse(const ImseConfig& cfg, const std::array<int, 4>& tap_channels,
                             Rng& rng) {
  cfg.validate();
  ImseParams<Scalar> p;
  const int d = cfg.gamma + 1;
  for (int i = 0; i < 4; ++i) {
    ImseScaleParams<Scalar>& sp = p.scales[std::size_t(i)];
    const int c_in = tap_channels[std::size_t(i)];
    sp.align_w.resize(d, c_in);
    const double bound = std::sqrt(3.0 / c_in);
    for (Eigen::Index j = 0; j < sp.align_w.cols(); ++j)
      for (Eigen::Index r = 0; r < sp.align_w.rows(); ++r)
        sp.align_w(r, j) = Scalar(rng.real(-bound, bound));
    sp.align_b = VectorX<Scalar>::Zero(d);
    // feed-forward width scales with the content channels, not the token dim
    sp.tf = init_transformer<Scalar>(d, cfg.gamma * cfg.ffn_mult, rng);
  }
  return p;
}

template <typename Scalar>
struct ImseScaleCache {
  MatrixX<Scalar> tap;  // input M_i data (for align backward)
  int h = 0, w = 0;
  TransformerCache<Scalar> tf;
  MatrixX<Scalar> content;  // gamma x T slice of the transformer output
};

template <typename Scalar>
struct ImseCache {
  std::array<ImseScaleCache<Scalar>, 4> scales;
  VectorX<Scalar> tokens;   // 4
  VectorX<Scalar> weights;  // softmax(tokens)
  std::array<PoolCache, 3> fpn_pools;
};

template <typename Scalar>
struct ImseOutput {
  FeatureMap<Scalar> fused;             // at the coarsest tap's resolution
  Eigen::Matrix<Scalar, 4, 1> weights;  // per-scale softmax weights
};

template <typename Scalar>
ImseOutput<Scalar> imse_forward(const MultiScale<Scalar>& taps, const ImseParams<Scalar>& p,
                                const ImseConfig& cfg, ImseCache<Scalar>* cache = nullptr) {
  const int gamma = cfg.gamma;
  VectorX<Scalar> tokens(4);
  std::array<FeatureMap<Scalar>, 4> content;
  ImseCache<Scalar> local;
  ImseCache<Scalar>& c = cache ? *cache : local;

  for (int i = 0; i < 4; ++i) {
    const FeatureMap<Scalar>& m = taps[std::size_t(i)];
    if (m.data.rows() != p.scales[std::size_t(i)].align_w.cols())
      throw std::invalid_argument("imse_forward: tap " + std::to_string(i) + " has " +
                                  std::to_string(m.data.rows()) + " channels, align expects " +
                                  std::to_string(p.scales[std::size_t(i)].align_w.cols()));
    const Eigen::Index T = m.data.cols();
    MatrixX<Scalar> x =
        (p.scales[std::size_t(i)].align_w * m.data).colwise() + p.scales[std::size_t(i)].align_b;
    if (cfg.token_mode == TokenMode::cls) {
      x.conservativeResize(Eigen::NoChange, T + 1);
      x.col(T) = x.leftCols(T).rowwise().mean();
    }
    ImseScaleCache<Scalar>* sc = cache ? &c.scales[std::size_t(i)] : nullptr;
    if (sc) {
      sc->tap = m.data;
      sc->h = m.h;
      sc->w = m.w;
    }
    MatrixX<Scalar> out =
        transformer_forward(x, p.scales[std::size_t(i)].tf, gamma, sc ? &sc->tf : nullptr);
    content[std::size_t(i)] = FeatureMap<Scalar>(out.topLeftCorner(gamma, T), m.h, m.w);
    if (sc) sc->content = content[std::size_t(i)].data;
    tokens(i) = cfg.token_mode == TokenMode::cls ? out(gamma, T) : out.row(gamma).mean();
  }

  VectorX<Scalar> w = softmax(tokens);
  if (cache) {
    c.tokens = tokens;
    c.weights = w;
  }

  // top-down fusion: repeatedly pool the running sum down one scale and add
  FeatureMap<Scalar> run = content[0];
  run.data *= w(0);
  for (int i = 1; i < 4; ++i) {
    run = maxpool2(run, cache ? &c.fpn_pools[std::size_t(i - 1)] : nullptr);
    FeatureMap<Scalar> scaled = content[std::size_t(i)];
    scaled.data *= w(i);
    if (run.h != scaled.h || run.w != scaled.w)
      throw std::invalid_argument("imse_forward: pooled scale " + std::to_string(i - 1) + " is " +
                                  std::to_string(run.h) + "x" + std::to_string(run.w) +
                                  ", tap " + std::to_string(i) + " is " + std::to_string(scaled.h) +
                                  "x" + std::to_string(scaled.w));
    run.data += scaled.data;
  }

  ImseOutput<Scalar> out;
  out.fused = std::move(run);
  out.weights = Eigen::Matrix<Scalar, 4, 1>(w(0), w(1), w(2), w(3));
  return out;
}

// Gradients flow back to every tap; parameter gradients accumulate into `grad`.
template <typename Scalar>
MultiScale<Scalar> imse_backward(const FeatureMap<Scalar>& dfused, const ImseParams<Scalar>& p,
                                 const ImseConfig& cfg, const ImseCache<Scalar>& c,
                                 ImseParams<Scalar>& grad) {
  const int gamma = cfg.gamma;
  // walk the fusion chain backwards, collecting gradients at each weighted map
  std::array<MatrixX<Scalar>, 4> dscaled;
  MatrixX<Scalar> drun = dfused.data;
  for (int i = 3; i >= 1; --i) {
    dscaled[std::size_t(i)] = drun;
    FeatureMap<Scalar> drun_map(drun, c.scales[std::size_t(i)].h, c.scales[std::size_t(i)].w);
    drun = maxpool2_backward(drun_map, c.fpn_pools[std::size_t(i - 1)]).data;
  }
  dscaled[0] = drun;

  VectorX<Scalar> dw(4);
  MultiScale<Scalar> dtaps;
  for (int i = 0; i < 4; ++i)
    dw(i) = (c.scales[std::size_t(i)].content.array() * dscaled[std::size_t(i)].array()).sum();
  VectorX<Scalar> dtokens = softmax_backward(c.weights, dw);

  for (int i = 0; i < 4; ++i) {
    const ImseScaleCache<Scalar>& sc = c.scales[std::size_t(i)];
    const Eigen::Index T = Eigen::Index(sc.h) * sc.w;
    const Eigen::Index cols = cfg.token_mode == TokenMode::cls ? T + 1 : T;
    MatrixX<Scalar> dout = MatrixX<Scalar>::Zero(gamma + 1, cols);
    dout.topLeftCorner(gamma, T) = c.weights(i) * dscaled[std::size_t(i)];
    if (cfg.token_mode == TokenMode::cls)
      dout(gamma, T) = dtokens(i);
    else
      dout.row(gamma).setConstant(dtokens(i) / Scalar(T));
    MatrixX<Scalar> dx = transformer_backward(dout, p.scales[std::size_t(i)].tf, sc.tf, gamma,
                                              grad.scales[std::size_t(i)].tf);
    MatrixX<Scalar> da;
    if (cfg.token_mode == TokenMode::cls) {
      da = dx.leftCols(T);
      da.colwise() += VectorX<Scalar>(dx.col(T) / Scalar(T));
    } else {
      da = std::move(dx);
    }
    grad.scales[std::size_t(i)].align_w.noalias() += da * sc.tap.transpose();
    grad.scales[std::size_t(i)].align_b.noalias() += da.rowwise().sum();
    dtaps[std::size_t(i)] =
        FeatureMap<Scalar>(p.scales[std::size_t(i)].align_w.transpose() * da, sc.h, sc.w);
  }
  return dtaps;
}

}  // namespace causalfs
