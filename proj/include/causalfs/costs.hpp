#pragma once

#include <cstdint>
#include <sstream>
#include <string>

#include "causalfs/model.hpp"

// Closed-form parameter and multiply-accumulate accounting for one forward
// pass at configured shapes, plus an analytic peak working-set estimate.
//
// Conventions, stated once here and in every report header:
//   - 1 multiply-accumulate (MAC) = 2 FLOPs.
//   - Only convolution and matrix-product MACs are counted (the squared terms
//     of reconstruction distances included); normalization, pooling, softmax,
//     and elementwise work are excluded.
//   - Convolution bias adds are not MACs.
//   - The memory figure is an analytic estimate of the training working set
//     (inputs, episode features, and the largest single-image backward cache),
//     not a measurement.

namespace causalfs {

inline std::int64_t conv2d_macs(int out_c, int h, int w, int in_c, int ksize) {
  return std::int64_t(out_c) * h * w * in_c * ksize * ksize;
}

inline std::int64_t conv2d_params(int in_c, int out_c, int ksize) {
  return std::int64_t(out_c) * in_c * ksize * ksize + out_c;
}

inline std::int64_t matmul_macs(std::int64_t rows, std::int64_t cols, std::int64_t inner) {
  return rows * cols * inner;
}

struct CostReport {
  std::int64_t param_count = 0;
  std::int64_t image_macs = 0;    // one image through backbone + encoder
  std::int64_t episode_macs = 0;  // full episode forward, head included
  std::int64_t peak_bytes = 0;    // analytic training working-set estimate
  double params_k() const { return double(param_count) / 1e3; }
  double episode_gflops() const { return 2.0 * double(episode_macs) / 1e9; }
};

namespace detail {

struct ModelShapes {
  std::array<int, 4> conv_side{};  // spatial side each conv runs at
  std::array<int, 4> tap_side{};   // spatial side of each post-pool tap
  int head_side = 0;
  int head_channels = 0;
};

inline ModelShapes model_shapes(const ModelConfig& cfg) {
  ModelShapes s;
  int side = cfg.image_size;
  for (int i = 0; i < 4; ++i) {
    s.conv_side[std::size_t(i)] = side;
    side /= 2;
    s.tap_side[std::size_t(i)] = side;
  }
  s.head_side = side;
  s.head_channels = cfg.head_channels();
  return s;
}

}  // namespace detail

// Exact closed-form parameter count; always equals the registry sum.
inline std::int64_t closed_form_params(const ModelConfig& cfg) {
  std::int64_t n = 0;
  int in_c = cfg.backbone.in_channels;
  for (int i = 0; i < 4; ++i) {
    const int out_c = cfg.backbone.channels[std::size_t(i)];
    n += conv2d_params(in_c, out_c, cfg.backbone.ksize);
    n += 2 * out_c;  // norm scale and shift
    in_c = out_c;
  }
  if (cfg.use_imse) {
    const std::int64_t d = cfg.gamma + 1;
    const std::int64_t hidden = std::int64_t(cfg.gamma) * cfg.ffn_mult;
    for (int i = 0; i < 4; ++i) {
      n += d * cfg.backbone.channels[std::size_t(i)] + d;  // align
      n += 4 * d;                                          // two norms
      n += 3 * d * d;                                      // q, k, v
      n += hidden * d + hidden + d * hidden + d;           // feed-forward
    }
  }
  if (cfg.use_imfr) {
    const std::int64_t g = cfg.head_channels();
    n += 2 * std::int64_t(cfg.gate_ksize) * cfg.gate_ksize + 1;  // gate conv
    n += 3 * g * g;
  }
  return n;
}

// One image through the backbone and, when enabled, the encoder.
inline std::int64_t image_forward_macs(const ModelConfig& cfg) {
  const detail::ModelShapes s = detail::model_shapes(cfg);
  std::int64_t macs = 0;
  int in_c = cfg.backbone.in_channels;
  for (int i = 0; i < 4; ++i) {
    const int out_c = cfg.backbone.channels[std::size_t(i)];
    const int side = s.conv_side[std::size_t(i)];
    macs += conv2d_macs(out_c, side, side, in_c, cfg.backbone.ksize);
    in_c = out_c;
  }
  if (cfg.use_imse) {
    const std::int64_t d = cfg.gamma + 1;
    const std::int64_t hidden = std::int64_t(cfg.gamma) * cfg.ffn_mult;
    for (int i = 0; i < 4; ++i) {
      const std::int64_t t0 = std::int64_t(s.tap_side[std::size_t(i)]) * s.tap_side[std::size_t(i)];
      const std::int64_t t = cfg.token_mode == TokenMode::cls ? t0 + 1 : t0;
      macs += matmul_macs(d, t0, cfg.backbone.channels[std::size_t(i)]);  // align
      macs += 3 * matmul_macs(d, t, d);                                   // q, k, v
      macs += 2 * matmul_macs(t, t, d);                                   // scores, attn*V
      macs += 2 * matmul_macs(hidden, t, d);                              // feed-forward
    }
  }
  return macs;
}

// Reconstruction head for one episode at the given shapes.
inline std::int64_t head_forward_macs(const ModelConfig& cfg, int n_way, int k_shot, int n_query) {
  if (!cfg.use_imfr) {
    const detail::ModelShapes s = detail::model_shapes(cfg);
    const std::int64_t hw = std::int64_t(s.head_side) * s.head_side;
    // squared-difference terms of the plain prototype distances
    return std::int64_t(n_way) * n_way * n_query * s.head_channels * hw;
  }
  const detail::ModelShapes s = detail::model_shapes(cfg);
  const std::int64_t hw = std::int64_t(s.head_side) * s.head_side;
  const std::int64_t g = s.head_channels;
  const std::int64_t queries = std::int64_t(n_way) * n_query;
  const std::int64_t pairs = queries * n_way;
  std::int64_t macs = 0;
  macs += queries * conv2d_macs(1, s.head_side, s.head_side, 2, cfg.gate_ksize);  // gates
  macs += queries * matmul_macs(hw, g, g);                                        // Q
  macs += std::int64_t(n_way) * 2 * matmul_macs(hw, g, g);                        // K, V
  macs += pairs * 2 * matmul_macs(hw, hw, g);  // scores, attn*V
  macs += pairs * hw * g;                      // squared-difference distance terms
  (void)k_shot;                                // prototype means are adds only
  return macs;
}

inline std::int64_t episode_forward_macs(const ModelConfig& cfg, int n_way, int k_shot,
                                         int n_query) {
  const std::int64_t images = std::int64_t(n_way) * (k_shot + n_query);
  return images * image_forward_macs(cfg) + head_forward_macs(cfg, n_way, k_shot, n_query);
}

// Training working set: all episode inputs and head features, the per-pair
// head state, and the largest single-image backward cache (column buffers
// plus attention maps dominate).
inline std::int64_t peak_bytes_estimate(const ModelConfig& cfg, int n_way, int k_shot, int n_query,
                                        int scalar_bytes) {
  const detail::ModelShapes s = detail::model_shapes(cfg);
  const std::int64_t images = std::int64_t(n_way) * (k_shot + n_query);
  const std::int64_t hw = std::int64_t(s.head_side) * s.head_side;
  std::int64_t elems = 0;
  elems += images * 2 *
           (std::int64_t(cfg.backbone.in_channels) * cfg.image_size * cfg.image_size);  // raw+aug
  elems += 2 * images * s.head_channels * hw;  // head features and their gradients
  std::int64_t cache = 0;
  int in_c = cfg.backbone.in_channels;
  for (int i = 0; i < 4; ++i) {
    const std::int64_t side = s.conv_side[std::size_t(i)];
    const int out_c = cfg.backbone.channels[std::size_t(i)];
    cache += std::int64_t(in_c) * cfg.backbone.ksize * cfg.backbone.ksize * side * side;  // columns
    cache += 3 * std::int64_t(out_c) * side * side;  // pre-norm, normalized, pooled
    in_c = out_c;
  }
  if (cfg.use_imse) {
    const std::int64_t d = cfg.gamma + 1;
    for (int i = 0; i < 4; ++i) {
      const std::int64_t t0 = std::int64_t(s.tap_side[std::size_t(i)]) * s.tap_side[std::size_t(i)];
      const std::int64_t t = cfg.token_mode == TokenMode::cls ? t0 + 1 : t0;
      cache += t * t;       // attention rows
      cache += 8 * d * t;   // token-stage activations
    }
  }
  elems += cache;
  if (cfg.use_imfr) {
    const std::int64_t g = s.head_channels;
    elems += std::int64_t(n_way) * n_query * (2 * hw + 2 * hw * g);  // gates, masks, enhanced, Q
    elems += std::int64_t(n_way) * 2 * hw * g;                       // K, V
  }
  elems += 3 * closed_form_params(cfg);  // parameters, gradients, velocity
  return elems * scalar_bytes;
}

inline CostReport cost_report(const ModelConfig& cfg, int n_way, int k_shot, int n_query,
                              int scalar_bytes = 4) {
  CostReport r;
  r.param_count = closed_form_params(cfg);
  r.image_macs = image_forward_macs(cfg);
  r.episode_macs = episode_forward_macs(cfg, n_way, k_shot, n_query);
  r.peak_bytes = peak_bytes_estimate(cfg, n_way, k_shot, n_query, scalar_bytes);
  return r;
}

inline std::string format_cost_report(const CostReport& r, const ModelConfig& cfg, int n_way,
                                      int k_shot, int n_query) {
  std::ostringstream os;
  os << "# cost report (1 MAC = 2 FLOPs; conv/matmul MACs only; memory is an analytic estimate)\n";
  os << "fingerprint " << cfg.fingerprint() << '\n';
  os << "episode_shape " << n_way << "-way " << k_shot << "-shot " << n_query << "-query\n";
  os << "params " << r.param_count << '\n';
  os << "params_k " << r.params_k() << '\n';
  os << "image_forward_macs " << r.image_macs << '\n';
  os << "episode_forward_macs " << r.episode_macs << '\n';
  os << "episode_forward_gflops " << r.episode_gflops() << '\n';
  os << "peak_bytes_estimate " << r.peak_bytes << '\n';
  return os.str();
}

}  // namespace causalfs
