#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "causalfs/layers.hpp"
#include "causalfs/rng.hpp"
#include "causalfs/tensor.hpp"

// Masked feature reconstruction head. Each query grows a gate map from pooled
// channel statistics, keeps its top-k positions as a binary mask, and enhances
// itself residually at the kept positions. Class prototypes are the plain mean
// of the raw support features; every (query, prototype) pair is then compared
// through single-head cross attention in token-row form, and the distance is
// taken between the reconstruction and the value-projected prototype.
//
// The binary mask is a constant during backpropagation by default; an optional
// straight-through mode passes the enhancement gradient to the gate as if the
// binarization were the identity.

namespace causalfs {

struct ImfrConfig {
  int gamma = 128;      // channels of the incoming feature maps
  int topk = 5;         // positions kept by the binary mask
  int gate_ksize = 7;   // gate convolution kernel (padding keeps size)
  bool straight_through = false;

  void validate() const {
    if (gamma < 1) throw std::invalid_argument("ImfrConfig: gamma must be >= 1");
    if (topk < 1) throw std::invalid_argument("ImfrConfig: topk must be >= 1");
    if (gate_ksize < 1 || gate_ksize % 2 == 0)
      throw std::invalid_argument("ImfrConfig: gate_ksize must be odd and >= 1");
  }
};

template <typename Scalar>
struct ImfrParams {
  ConvParams<Scalar> gate_conv;  // 2 -> 1 channels, shared across all queries
  // Token-row convention: projected = tokens * W, tokens are (HW) x gamma.
  MatrixX<Scalar> wq, wk, wv;
};

template <typename Scalar>
ImfrParams<Scalar> init_imfr(const ImfrConfig& cfg, Rng& rng) {
  cfg.validate();
  ImfrParams<Scalar> p;
  p.gate_conv.ksize = cfg.gate_ksize;
  p.gate_conv.pad = cfg.gate_ksize / 2;
  const Eigen::Index cols = Eigen::Index(2) * cfg.gate_ksize * cfg.gate_ksize;
  p.gate_conv.weight.resize(1, cols);
  const double conv_bound = std::sqrt(6.0 / double(cols));
  for (Eigen::Index j = 0; j < cols; ++j)
    p.gate_conv.weight(0, j) = Scalar(rng.real(-conv_bound, conv_bound));
  p.gate_conv.bias = VectorX<Scalar>::Zero(1);
  const double proj_bound = std::sqrt(3.0 / double(cfg.gamma));
  auto fill = [&](MatrixX<Scalar>& m) {
    m.resize(cfg.gamma, cfg.gamma);
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = Scalar(rng.real(-proj_bound, proj_bound));
  };
  fill(p.wq);
  fill(p.wk);
  fill(p.wv);
  return p;
}

// --- gate --------------------------------------------------------------------

template <typename Scalar>
struct GateCache {
  std::vector<int> argmax_channel;  // winner per position for max-pool routing
  Eigen::Index channels = 0;
  ConvCache<Scalar> conv;
  RowVectorX<Scalar> gate;  // sigmoid output, kept for the logistic derivative
};

// Channel max-pool and mean-pool stacked to 2 x H x W, shared convolution,
// sigmoid. Output is 1 x HW in (0,1).
template <typename Scalar>
RowVectorX<Scalar> global_mask(const FeatureMap<Scalar>& q, const ConvParams<Scalar>& gate_conv,
                               GateCache<Scalar>* cache = nullptr) {
  const Eigen::Index hw = q.data.cols();
  FeatureMap<Scalar> pooled = FeatureMap<Scalar>::zeros(2, q.h, q.w);
  std::vector<int> amax(static_cast<std::size_t>(hw));
  for (Eigen::Index p = 0; p < hw; ++p) {
    Eigen::Index r = 0;
    pooled.data(0, p) = q.data.col(p).maxCoeff(&r);
    amax[std::size_t(p)] = int(r);
    pooled.data(1, p) = q.data.col(p).mean();
  }
  FeatureMap<Scalar> logits = conv2d(pooled, gate_conv, cache ? &cache->conv : nullptr);
  RowVectorX<Scalar> g =
      (Scalar(1) / (Scalar(1) + (-logits.data.row(0).array()).exp())).matrix();
  if (cache) {
    cache->argmax_channel = std::move(amax);
    cache->channels = q.data.rows();
    cache->gate = g;
  }
  return g;
}

// Straight-through only: routes a gate gradient back through sigmoid, the
// shared convolution, and the two pooling branches into the query feature.
template <typename Scalar>
void global_mask_backward(const RowVectorX<Scalar>& dgate, const GateCache<Scalar>& cache,
                          const ConvParams<Scalar>& gate_conv, ConvParams<Scalar>& gate_grad,
                          MatrixX<Scalar>& dq_data) {
  const Eigen::Index hw = dgate.size();
  FeatureMap<Scalar> dlogits = FeatureMap<Scalar>::zeros(1, cache.conv.in_h, cache.conv.in_w);
  dlogits.data.row(0) =
      (dgate.array() * cache.gate.array() * (Scalar(1) - cache.gate.array())).matrix();
  FeatureMap<Scalar> dpooled = conv2d_backward(dlogits, gate_conv, cache.conv, gate_grad);
  const Scalar inv_c = Scalar(1) / Scalar(cache.channels);
  for (Eigen::Index p = 0; p < hw; ++p) {
    dq_data(cache.argmax_channel[std::size_t(p)], p) += dpooled.data(0, p);
    dq_data.col(p).array() += dpooled.data(1, p) * inv_c;
  }
}

// --- top-k binarization --------------------------------------------------------

// Exactly k ones at the k largest gate entries; equal values resolve toward the
// smaller row-major flat index. Constant in the backward pass.
template <typename Scalar>
RowVectorX<Scalar> binarize_topk(const RowVectorX<Scalar>& gate, int k) {
  const Eigen::Index hw = gate.size();
  if (k < 1 || Eigen::Index(k) > hw)
    throw std::invalid_argument("binarize_topk: k must be in [1, " + std::to_string(hw) +
                                "], got " + std::to_string(k));
  std::vector<Eigen::Index> order(static_cast<std::size_t>(hw));
  std::iota(order.begin(), order.end(), Eigen::Index(0));
  std::sort(order.begin(), order.end(), [&gate](Eigen::Index a, Eigen::Index b) {
    if (gate(a) != gate(b)) return gate(a) > gate(b);
    return a < b;
  });
  RowVectorX<Scalar> bin = RowVectorX<Scalar>::Zero(hw);
  for (int i = 0; i < k; ++i) bin(order[std::size_t(i)]) = Scalar(1);
  return bin;
}

// --- residual enhancement -------------------------------------------------------

// q_hat = q + q o mask, mask broadcast over channels.
template <typename Scalar>
FeatureMap<Scalar> enhance_query(const FeatureMap<Scalar>& q, const RowVectorX<Scalar>& mask) {
  if (mask.size() != q.data.cols())
    throw std::invalid_argument("enhance_query: mask has " + std::to_string(mask.size()) +
                                " positions, feature has " + std::to_string(q.data.cols()));
  return FeatureMap<Scalar>(q.data + (q.data.array().rowwise() * mask.array()).matrix(), q.h,
                            q.w);
}

// dq accumulates dq_hat o (1 + mask); dmask (when wanted) accumulates the
// channel-summed product with the raw feature.
template <typename Scalar>
void enhance_query_backward(const MatrixX<Scalar>& dq_hat, const FeatureMap<Scalar>& q,
                            const RowVectorX<Scalar>& mask, MatrixX<Scalar>& dq_data,
                            RowVectorX<Scalar>* dmask = nullptr) {
  dq_data += (dq_hat.array().rowwise() * (mask.array() + Scalar(1))).matrix();
  if (dmask) *dmask += (dq_hat.array() * q.data.array()).colwise().sum().matrix();
}

// --- prototypes ------------------------------------------------------------------

// Mean of each class's support features, slot-major input of size n_way * k_shot.
template <typename Scalar>
std::vector<FeatureMap<Scalar>> class_prototypes(const std::vector<FeatureMap<Scalar>>& support,
                                                 int n_way, int k_shot) {
  if (n_way < 1 || k_shot < 1)
    throw std::invalid_argument("class_prototypes: n_way and k_shot must be >= 1");
  if (support.size() != std::size_t(n_way) * std::size_t(k_shot))
    throw std::invalid_argument("class_prototypes: expected " +
                                std::to_string(std::size_t(n_way) * std::size_t(k_shot)) +
                                " support features, got " + std::to_string(support.size()));
  std::vector<FeatureMap<Scalar>> protos;
  protos.reserve(std::size_t(n_way));
  for (int n = 0; n < n_way; ++n) {
    const FeatureMap<Scalar>& first = support[std::size_t(n) * std::size_t(k_shot)];
    FeatureMap<Scalar> s = FeatureMap<Scalar>::zeros(int(first.data.rows()), first.h, first.w);
    for (int k = 0; k < k_shot; ++k)
      s.data += support[std::size_t(n) * std::size_t(k_shot) + std::size_t(k)].data;
    s.data /= Scalar(k_shot);
    protos.push_back(std::move(s));
  }
  return protos;
}

// --- cross-attention reconstruction ----------------------------------------------

// Rows are spatial tokens: (HW) x gamma.
template <typename Scalar>
MatrixX<Scalar> project_tokens(const FeatureMap<Scalar>& f, const MatrixX<Scalar>& w) {
  if (f.data.rows() != w.rows())
    throw std::invalid_argument("project_tokens: feature has " + std::to_string(f.data.rows()) +
                                " channels, projection expects " + std::to_string(w.rows()));
  return f.data.transpose() * w;
}

// dproj is (HW) x gamma; accumulates into the projection gradient and the
// channel-major feature gradient.
template <typename Scalar>
void project_tokens_backward(const FeatureMap<Scalar>& f, const MatrixX<Scalar>& w,
                             const MatrixX<Scalar>& dproj, MatrixX<Scalar>& dw,
                             MatrixX<Scalar>& df_data) {
  dw.noalias() += f.data * dproj;
  df_data.noalias() += w * dproj.transpose();
}

template <typename Scalar>
struct Reconstruction {
  MatrixX<Scalar> attn;   // (HW_q) x (HW_s), rows sum to 1
  MatrixX<Scalar> q_rec;  // (HW_q) x gamma
};

// q_rec = softmax(Q K^T / sqrt(gamma)) V with gamma = projection width.
template <typename Scalar>
Reconstruction<Scalar> reconstruct_tokens(const MatrixX<Scalar>& q_proj, const MatrixX<Scalar>& k_proj,
                                          const MatrixX<Scalar>& v_proj) {
  const Scalar scale = Scalar(1) / std::sqrt(Scalar(q_proj.cols()));
  Reconstruction<Scalar> r;
  r.attn = softmax_rows<Scalar>((q_proj * k_proj.transpose() * scale));
  r.q_rec = r.attn * v_proj;
  return r;
}

template <typename Scalar>
struct ReconstructedQuery {
  MatrixX<Scalar> q_rec;  // (HW) x gamma
  MatrixX<Scalar> v;      // (HW) x gamma, value-projected prototype
};

// Self-contained per-pair form: projects both operands and reconstructs.
template <typename Scalar>
ReconstructedQuery<Scalar> reconstruct(const FeatureMap<Scalar>& q_hat, const FeatureMap<Scalar>& proto,
                                       const ImfrParams<Scalar>& p) {
  ReconstructedQuery<Scalar> out;
  MatrixX<Scalar> q_proj = project_tokens(q_hat, p.wq);
  MatrixX<Scalar> k_proj = project_tokens(proto, p.wk);
  out.v = project_tokens(proto, p.wv);
  out.q_rec = reconstruct_tokens(q_proj, k_proj, out.v).q_rec;
  return out;
}

template <typename Scalar>
struct ImfrForwardResult {
  std::vector<RowVectorX<Scalar>> gates;      // per query, continuous, 1 x HW
  std::vector<RowVectorX<Scalar>> masks;      // per query, binary
  std::vector<FeatureMap<Scalar>> enhanced;   // per query, residual-enhanced
  std::vector<FeatureMap<Scalar>> prototypes; // per class slot
  std::vector<std::vector<ReconstructedQuery<Scalar>>> pairs;  // [query][class]
};

// Full head composition: gate, binarize, enhance each query; average support
// into prototypes; reconstruct every (query, prototype) pair.
template <typename Scalar>
ImfrForwardResult<Scalar> imfr_forward(const std::vector<FeatureMap<Scalar>>& support,
                                       const std::vector<FeatureMap<Scalar>>& query, int n_way,
                                       int k_shot, const ImfrParams<Scalar>& params, int topk) {
  ImfrForwardResult<Scalar> out;
  out.prototypes = class_prototypes(support, n_way, k_shot);
  out.gates.reserve(query.size());
  out.masks.reserve(query.size());
  out.enhanced.reserve(query.size());
  out.pairs.reserve(query.size());
  for (const FeatureMap<Scalar>& q : query) {
    RowVectorX<Scalar> g = global_mask<Scalar>(q, params.gate_conv);
    RowVectorX<Scalar> bin = binarize_topk(g, topk);
    FeatureMap<Scalar> q_hat = enhance_query(q, bin);
    std::vector<ReconstructedQuery<Scalar>> row;
    row.reserve(out.prototypes.size());
    for (const FeatureMap<Scalar>& proto : out.prototypes)
      row.push_back(reconstruct(q_hat, proto, params));
    out.gates.push_back(std::move(g));
    out.masks.push_back(std::move(bin));
    out.enhanced.push_back(std::move(q_hat));
    out.pairs.push_back(std::move(row));
  }
  return out;
}

// Backward through d = ||A V - V||_F for one (query, prototype) pair, attention
// recomputed from the cached projections so no per-pair state is stored.
// dd is dLoss/dd; dist the forward distance. Accumulates into dQ, dK, dV.
template <typename Scalar>
void pair_distance_backward(const MatrixX<Scalar>& q_proj, const MatrixX<Scalar>& k_proj,
                            const MatrixX<Scalar>& v_proj, Scalar dist, Scalar dd,
                            MatrixX<Scalar>& dq_proj, MatrixX<Scalar>& dk_proj,
                            MatrixX<Scalar>& dv_proj) {
  const Scalar scale = Scalar(1) / std::sqrt(Scalar(q_proj.cols()));
  MatrixX<Scalar> attn = softmax_rows<Scalar>((q_proj * k_proj.transpose() * scale));
  MatrixX<Scalar> diff = attn * v_proj - v_proj;
  const Scalar denom = std::max(dist, Scalar(1e-30));
  MatrixX<Scalar> dr = (dd / denom) * diff;
  dv_proj.noalias() += attn.transpose() * dr;
  dv_proj -= dr;
  MatrixX<Scalar> dattn = dr * v_proj.transpose();
  MatrixX<Scalar> dscores = softmax_rows_backward(attn, dattn) * scale;
  dq_proj.noalias() += dscores * k_proj;
  dk_proj.noalias() += dscores.transpose() * q_proj;
}

}  // namespace causalfs
