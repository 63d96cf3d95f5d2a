#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "causalfs/backbone.hpp"
#include "causalfs/imfr.hpp"
#include "causalfs/imse.hpp"
#include "causalfs/io.hpp"
#include "causalfs/metric.hpp"
#include "causalfs/rng.hpp"
#include "causalfs/tensor.hpp"

// Full classifier: four-block convolutional backbone with per-block taps, an
// optional multi-scale attention encoder fusing the taps, an optional masked
// reconstruction head comparing queries to class prototypes, and a softmax
// metric over negated distances. With both heads disabled the model reduces to
// plain prototype matching on the final backbone features.

namespace causalfs {

struct ModelConfig {
  BackboneConfig backbone;
  int gamma = 128;      // fused channel width when the encoder is enabled
  int ffn_mult = 2;
  TokenMode token_mode = TokenMode::channel;
  int topk = 5;         // requested mask cardinality; clamped to the map area
  int gate_ksize = 7;
  bool use_imse = true;
  bool use_imfr = true;
  bool straight_through = false;
  int image_size = 84;
  std::uint64_t init_seed = 1;

  int head_channels() const { return use_imse ? gamma : backbone.channels[3]; }

  // Spatial side of the final tap: four halvings with floor semantics.
  int head_side() const {
    int s = image_size;
    for (int i = 0; i < 4; ++i) s /= 2;
    return s;
  }

  void validate() const {
    backbone.validate();
    if (gamma < 1) throw std::invalid_argument("ModelConfig: gamma must be >= 1");
    if (ffn_mult < 1) throw std::invalid_argument("ModelConfig: ffn_mult must be >= 1");
    if (topk < 1) throw std::invalid_argument("ModelConfig: topk must be >= 1");
    if (gate_ksize < 1 || gate_ksize % 2 == 0)
      throw std::invalid_argument("ModelConfig: gate_ksize must be odd and >= 1");
    if (image_size < 16)
      throw std::invalid_argument("ModelConfig: image_size must be >= 16, got " +
                                  std::to_string(image_size));
  }

  ImseConfig imse_config() const { return ImseConfig{gamma, ffn_mult, token_mode}; }

  ImfrConfig imfr_config() const {
    ImfrConfig c;
    c.gamma = head_channels();
    c.topk = topk;
    c.gate_ksize = gate_ksize;
    c.straight_through = straight_through;
    return c;
  }

  // Canonical single-line description; doubles as the compatibility key for
  // checkpoints.
  std::string describe() const {
    std::ostringstream os;
    os << "backbone.in_channels=" << backbone.in_channels;
    os << " backbone.channels=" << backbone.channels[0] << ',' << backbone.channels[1] << ','
       << backbone.channels[2] << ',' << backbone.channels[3];
    os << " backbone.ksize=" << backbone.ksize;
    os << " backbone.norm_groups=" << backbone.norm_groups;
    os << " gamma=" << gamma;
    os << " ffn_mult=" << ffn_mult;
    os << " token_mode=" << (token_mode == TokenMode::channel ? "channel" : "cls");
    os << " topk=" << topk;
    os << " gate_ksize=" << gate_ksize;
    os << " use_imse=" << (use_imse ? 1 : 0);
    os << " use_imfr=" << (use_imfr ? 1 : 0);
    os << " straight_through=" << (straight_through ? 1 : 0);
    os << " image_size=" << image_size;
    return os.str();
  }

  std::string fingerprint() const {
    const std::string desc = describe();
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << fnv1a(desc.data(), desc.size());
    return os.str();
  }
};

template <typename Scalar>
struct ModelParams {
  BackboneParams<Scalar> backbone;
  ImseParams<Scalar> imse;  // untouched when the encoder is disabled
  ImfrParams<Scalar> imfr;  // untouched when the head is disabled
};

// Visits every live parameter tensor of one or more parameter sets in a fixed
// order, pairing them positionally. The callback receives (name, tensor&...)
// and must accept both matrix and vector tensors.
template <typename F, typename... Ps>
void visit_params(const ModelConfig& cfg, F&& f, Ps&... ps) {
  for (int b = 0; b < 4; ++b) {
    const std::string pre = "backbone.block" + std::to_string(b) + ".";
    f(pre + "conv.weight", ps.backbone.blocks[std::size_t(b)].conv.weight...);
    f(pre + "conv.bias", ps.backbone.blocks[std::size_t(b)].conv.bias...);
    f(pre + "norm.gamma", ps.backbone.blocks[std::size_t(b)].norm.gamma...);
    f(pre + "norm.beta", ps.backbone.blocks[std::size_t(b)].norm.beta...);
  }
  if (cfg.use_imse) {
    for (int s = 0; s < 4; ++s) {
      const std::string pre = "imse.scale" + std::to_string(s) + ".";
      f(pre + "align.weight", ps.imse.scales[std::size_t(s)].align_w...);
      f(pre + "align.bias", ps.imse.scales[std::size_t(s)].align_b...);
      f(pre + "ln1.gamma", ps.imse.scales[std::size_t(s)].tf.ln1.gamma...);
      f(pre + "ln1.beta", ps.imse.scales[std::size_t(s)].tf.ln1.beta...);
      f(pre + "attn.wq", ps.imse.scales[std::size_t(s)].tf.wq...);
      f(pre + "attn.wk", ps.imse.scales[std::size_t(s)].tf.wk...);
      f(pre + "attn.wv", ps.imse.scales[std::size_t(s)].tf.wv...);
      f(pre + "ln2.gamma", ps.imse.scales[std::size_t(s)].tf.ln2.gamma...);
      f(pre + "ln2.beta", ps.imse.scales[std::size_t(s)].tf.ln2.beta...);
      f(pre + "ffn.w1", ps.imse.scales[std::size_t(s)].tf.w1...);
      f(pre + "ffn.b1", ps.imse.scales[std::size_t(s)].tf.b1...);
      f(pre + "ffn.w2", ps.imse.scales[std::size_t(s)].tf.w2...);
      f(pre + "ffn.b2", ps.imse.scales[std::size_t(s)].tf.b2...);
    }
  }
  if (cfg.use_imfr) {
    f("imfr.gate.weight", ps.imfr.gate_conv.weight...);
    f("imfr.gate.bias", ps.imfr.gate_conv.bias...);
    f("imfr.wq", ps.imfr.wq...);
    f("imfr.wk", ps.imfr.wk...);
    f("imfr.wv", ps.imfr.wv...);
  }
}

template <typename Scalar>
struct Model {
  ModelConfig config;
  ModelParams<Scalar> params;
};

template <typename Scalar>
Model<Scalar> init_model(const ModelConfig& cfg) {
  cfg.validate();
  Model<Scalar> m;
  m.config = cfg;
  Rng rng(cfg.init_seed, stream::kInit);
  m.params.backbone = init_backbone<Scalar>(cfg.backbone, rng);
  if (cfg.use_imse) m.params.imse = init_imse<Scalar>(cfg.imse_config(), cfg.backbone.channels, rng);
  if (cfg.use_imfr) m.params.imfr = init_imfr<Scalar>(cfg.imfr_config(), rng);
  return m;
}

template <typename Scalar>
ModelParams<Scalar> make_zero_grads(const ModelConfig& cfg, const ModelParams<Scalar>& params) {
  ModelParams<Scalar> g = params;
  visit_params(cfg, [](const std::string&, auto& t) { t.setZero(); }, g);
  return g;
}

template <typename Scalar>
std::int64_t count_params(const ModelConfig& cfg, const ModelParams<Scalar>& params) {
  std::int64_t n = 0;
  auto& mut = const_cast<ModelParams<Scalar>&>(params);
  visit_params(cfg, [&n](const std::string&, auto& t) { n += t.size(); }, mut);
  return n;
}

// --- per-image feature path -------------------------------------------------

template <typename Scalar>
struct ImageCache {
  BackboneCache<Scalar> backbone;
  ImseCache<Scalar> imse;
};

template <typename Scalar>
struct ImageFeatures {
  FeatureMap<Scalar> head;              // head_channels x head_side^2
  MultiScale<Scalar> taps;              // per-block maps (copies)
  Eigen::Matrix<Scalar, 4, 1> weights;  // scale weights; zero when encoder off
};

// Head features for one image. With `cache` set, enough state is kept to run
// feature_backward; without it the pass stores nothing. `full` also copies the
// taps for inspection and visualization.
template <typename Scalar>
ImageFeatures<Scalar> feature_forward(const ModelConfig& cfg, const ModelParams<Scalar>& params,
                                      const FeatureMap<Scalar>& image,
                                      ImageCache<Scalar>* cache = nullptr, bool full = false) {
  ImageFeatures<Scalar> out;
  out.weights.setZero();
  MultiScale<Scalar> taps = backbone_forward(image, params.backbone, cache ? &cache->backbone : nullptr);
  if (cfg.use_imse) {
    ImseOutput<Scalar> enc =
        imse_forward(taps, params.imse, cfg.imse_config(), cache ? &cache->imse : nullptr);
    out.head = std::move(enc.fused);
    out.weights = enc.weights;
  } else {
    out.head = taps[3];
  }
  if (full) out.taps = std::move(taps);
  return out;
}

// Backpropagates a head-feature gradient through the encoder and backbone,
// accumulating parameter gradients. Returns the image gradient.
template <typename Scalar>
FeatureMap<Scalar> feature_backward(const ModelConfig& cfg, const ModelParams<Scalar>& params,
                                    const ImageCache<Scalar>& cache, const FeatureMap<Scalar>& dhead,
                                    ModelParams<Scalar>& grads) {
  MultiScale<Scalar> dtaps;
  if (cfg.use_imse) {
    dtaps = imse_backward(dhead, params.imse, cfg.imse_config(), cache.imse, grads.imse);
  } else {
    dtaps[3] = dhead;
  }
  return backbone_backward(dtaps, params.backbone, cache.backbone, grads.backbone);
}

// --- episode path -------------------------------------------------------------

template <typename Scalar>
struct EpisodeBatch {
  int n_way = 0, k_shot = 0, n_query = 0;     // n_query is per class
  std::vector<FeatureMap<Scalar>> support;    // slot-major, n_way * k_shot
  std::vector<FeatureMap<Scalar>> query;      // slot-major, n_way * n_query

  std::vector<int> labels() const {
    std::vector<int> l(query.size());
    for (std::size_t i = 0; i < query.size(); ++i) l[i] = int(i) / n_query;
    return l;
  }

  void validate() const {
    if (n_way < 1 || k_shot < 1 || n_query < 1)
      throw std::invalid_argument("EpisodeBatch: n_way, k_shot, n_query must be >= 1");
    if (support.size() != std::size_t(n_way) * std::size_t(k_shot))
      throw std::invalid_argument("EpisodeBatch: support size mismatch");
    if (query.size() != std::size_t(n_way) * std::size_t(n_query))
      throw std::invalid_argument("EpisodeBatch: query size mismatch");
  }
};

template <typename Scalar>
struct EpisodeResult {
  Scalar loss = 0;
  double accuracy = 0.0;
  MatrixX<Scalar> d, p;                          // |Q| x N
  Eigen::Matrix<Scalar, 4, 1> mean_scale_weights;  // averaged over all images
};

namespace detail {

// Distance head state kept between the head forward and backward passes.
template <typename Scalar>
struct HeadCache {
  int k_eff = 0;
  std::vector<GateCache<Scalar>> gates;     // per query
  std::vector<RowVectorX<Scalar>> masks;    // per query, binary
  std::vector<FeatureMap<Scalar>> q_hat;    // per query, enhanced
  std::vector<MatrixX<Scalar>> q_proj;      // per query, HW x gamma
  std::vector<FeatureMap<Scalar>> protos;   // per class
  std::vector<MatrixX<Scalar>> k_proj, v_proj;  // per class, HW x gamma
};

// Distances for all (query, class) pairs from precomputed head features.
template <typename Scalar>
MatrixX<Scalar> head_forward(const ModelConfig& cfg, const ModelParams<Scalar>& params,
                             const std::vector<FeatureMap<Scalar>>& fs,
                             const std::vector<FeatureMap<Scalar>>& fq, int n_way, int k_shot,
                             HeadCache<Scalar>* cache) {
  const Eigen::Index nq = Eigen::Index(fq.size());
  MatrixX<Scalar> d(nq, n_way);
  std::vector<FeatureMap<Scalar>> protos = class_prototypes(fs, n_way, k_shot);
  if (!cfg.use_imfr) {
    for (Eigen::Index i = 0; i < nq; ++i)
      for (int j = 0; j < n_way; ++j)
        d(i, j) = frobenius_distance(fq[std::size_t(i)].data, protos[std::size_t(j)].data);
    if (cache) cache->protos = std::move(protos);
    return d;
  }

  const int hw = int(fq[0].data.cols());
  const int k_eff = std::min(cfg.topk, hw);
  std::vector<MatrixX<Scalar>> k_proj(protos.size()), v_proj(protos.size());
  for (std::size_t j = 0; j < protos.size(); ++j) {
    k_proj[j] = project_tokens(protos[j], params.imfr.wk);
    v_proj[j] = project_tokens(protos[j], params.imfr.wv);
  }
  if (cache) {
    cache->k_eff = k_eff;
    cache->gates.resize(std::size_t(nq));
    cache->masks.resize(std::size_t(nq));
    cache->q_hat.resize(std::size_t(nq));
    cache->q_proj.resize(std::size_t(nq));
  }
  for (Eigen::Index i = 0; i < nq; ++i) {
    RowVectorX<Scalar> gate = global_mask<Scalar>(fq[std::size_t(i)], params.imfr.gate_conv,
                                                  cache ? &cache->gates[std::size_t(i)] : nullptr);
    RowVectorX<Scalar> mask = binarize_topk(gate, k_eff);
    FeatureMap<Scalar> q_hat = enhance_query(fq[std::size_t(i)], mask);
    MatrixX<Scalar> q_proj = project_tokens(q_hat, params.imfr.wq);
    for (int j = 0; j < n_way; ++j) {
      Reconstruction<Scalar> rec =
          reconstruct_tokens(q_proj, k_proj[std::size_t(j)], v_proj[std::size_t(j)]);
      d(i, j) = frobenius_distance(rec.q_rec, v_proj[std::size_t(j)]);
    }
    if (cache) {
      cache->masks[std::size_t(i)] = std::move(mask);
      cache->q_hat[std::size_t(i)] = std::move(q_hat);
      cache->q_proj[std::size_t(i)] = std::move(q_proj);
    }
  }
  if (cache) {
    cache->protos = std::move(protos);
    cache->k_proj = std::move(k_proj);
    cache->v_proj = std::move(v_proj);
  }
  return d;
}

// Backward from per-pair distance gradients to head-feature gradients plus
// head parameter gradients. Attention is recomputed per pair.
template <typename Scalar>
void head_backward(const ModelConfig& cfg, const ModelParams<Scalar>& params,
                   const HeadCache<Scalar>& cache, const std::vector<FeatureMap<Scalar>>& fs,
                   const std::vector<FeatureMap<Scalar>>& fq, const MatrixX<Scalar>& d,
                   const MatrixX<Scalar>& dd, int n_way, int k_shot, ModelParams<Scalar>& grads,
                   std::vector<MatrixX<Scalar>>& dfs, std::vector<MatrixX<Scalar>>& dfq) {
  const Eigen::Index nq = Eigen::Index(fq.size());
  const Scalar inv_k = Scalar(1) / Scalar(k_shot);
  if (!cfg.use_imfr) {
    for (Eigen::Index i = 0; i < nq; ++i)
      for (int j = 0; j < n_way; ++j) {
        if (dd(i, j) == Scalar(0)) continue;
        const Scalar denom = std::max(d(i, j), Scalar(1e-30));
        MatrixX<Scalar> dir = (dd(i, j) / denom) *
                              (fq[std::size_t(i)].data - cache.protos[std::size_t(j)].data);
        dfq[std::size_t(i)] += dir;
        for (int k = 0; k < k_shot; ++k)
          dfs[std::size_t(j * k_shot + k)] -= dir * inv_k;
      }
    return;
  }

  std::vector<MatrixX<Scalar>> dk_proj(static_cast<std::size_t>(n_way));
  std::vector<MatrixX<Scalar>> dv_proj(static_cast<std::size_t>(n_way));
  for (int j = 0; j < n_way; ++j) {
    dk_proj[std::size_t(j)] = MatrixX<Scalar>::Zero(cache.k_proj[std::size_t(j)].rows(),
                                                    cache.k_proj[std::size_t(j)].cols());
    dv_proj[std::size_t(j)] = dk_proj[std::size_t(j)];
  }
  for (Eigen::Index i = 0; i < nq; ++i) {
    MatrixX<Scalar> dq_proj = MatrixX<Scalar>::Zero(cache.q_proj[std::size_t(i)].rows(),
                                                    cache.q_proj[std::size_t(i)].cols());
    for (int j = 0; j < n_way; ++j) {
      if (dd(i, j) == Scalar(0)) continue;
      pair_distance_backward(cache.q_proj[std::size_t(i)], cache.k_proj[std::size_t(j)],
                             cache.v_proj[std::size_t(j)], d(i, j), dd(i, j), dq_proj,
                             dk_proj[std::size_t(j)], dv_proj[std::size_t(j)]);
    }
    MatrixX<Scalar> dq_hat_data =
        MatrixX<Scalar>::Zero(cache.q_hat[std::size_t(i)].data.rows(),
                              cache.q_hat[std::size_t(i)].data.cols());
    project_tokens_backward(cache.q_hat[std::size_t(i)], params.imfr.wq, dq_proj, grads.imfr.wq,
                            dq_hat_data);
    if (cfg.straight_through) {
      RowVectorX<Scalar> dmask = RowVectorX<Scalar>::Zero(cache.masks[std::size_t(i)].size());
      enhance_query_backward(dq_hat_data, fq[std::size_t(i)], cache.masks[std::size_t(i)],
                             dfq[std::size_t(i)], &dmask);
      global_mask_backward(dmask, cache.gates[std::size_t(i)], params.imfr.gate_conv,
                           grads.imfr.gate_conv, dfq[std::size_t(i)]);
    } else {
      enhance_query_backward(dq_hat_data, fq[std::size_t(i)], cache.masks[std::size_t(i)],
                             dfq[std::size_t(i)]);
    }
  }
  for (int j = 0; j < n_way; ++j) {
    MatrixX<Scalar> dproto_data = MatrixX<Scalar>::Zero(cache.protos[std::size_t(j)].data.rows(),
                                                        cache.protos[std::size_t(j)].data.cols());
    project_tokens_backward(cache.protos[std::size_t(j)], params.imfr.wk, dk_proj[std::size_t(j)],
                            grads.imfr.wk, dproto_data);
    project_tokens_backward(cache.protos[std::size_t(j)], params.imfr.wv, dv_proj[std::size_t(j)],
                            grads.imfr.wv, dproto_data);
    for (int k = 0; k < k_shot; ++k) dfs[std::size_t(j * k_shot + k)] += dproto_data * inv_k;
  }
}

}  // namespace detail

// Loss, probabilities, and accuracy for one episode, no gradients.
template <typename Scalar>
EpisodeResult<Scalar> episode_forward(const ModelConfig& cfg, const ModelParams<Scalar>& params,
                                      const EpisodeBatch<Scalar>& batch) {
  batch.validate();
  EpisodeResult<Scalar> out;
  out.mean_scale_weights.setZero();
  std::vector<FeatureMap<Scalar>> fs, fq;
  fs.reserve(batch.support.size());
  fq.reserve(batch.query.size());
  for (const auto& img : batch.support) {
    ImageFeatures<Scalar> f = feature_forward(cfg, params, img);
    out.mean_scale_weights += f.weights;
    fs.push_back(std::move(f.head));
  }
  for (const auto& img : batch.query) {
    ImageFeatures<Scalar> f = feature_forward(cfg, params, img);
    out.mean_scale_weights += f.weights;
    fq.push_back(std::move(f.head));
  }
  out.mean_scale_weights /= Scalar(batch.support.size() + batch.query.size());
  out.d = detail::head_forward(cfg, params, fs, fq, batch.n_way, batch.k_shot,
                               static_cast<detail::HeadCache<Scalar>*>(nullptr));
  out.p = distance_probabilities(out.d);
  const std::vector<int> labels = batch.labels();
  out.loss = episode_loss(out.p, labels);
  out.accuracy = episode_accuracy(out.d, labels);
  return out;
}

// Loss plus parameter gradients. Three phases bound memory: a cache-free
// feature pass, the distance head with its small caches, then one image at a
// time recomputed with caches for the backward walk.
template <typename Scalar>
EpisodeResult<Scalar> episode_forward_backward(const ModelConfig& cfg,
                                               const ModelParams<Scalar>& params,
                                               const EpisodeBatch<Scalar>& batch,
                                               ModelParams<Scalar>& grads) {
  batch.validate();
  EpisodeResult<Scalar> out;
  out.mean_scale_weights.setZero();
  std::vector<FeatureMap<Scalar>> fs, fq;
  fs.reserve(batch.support.size());
  fq.reserve(batch.query.size());
  for (const auto& img : batch.support) {
    ImageFeatures<Scalar> f = feature_forward(cfg, params, img);
    out.mean_scale_weights += f.weights;
    fs.push_back(std::move(f.head));
  }
  for (const auto& img : batch.query) {
    ImageFeatures<Scalar> f = feature_forward(cfg, params, img);
    out.mean_scale_weights += f.weights;
    fq.push_back(std::move(f.head));
  }
  out.mean_scale_weights /= Scalar(batch.support.size() + batch.query.size());

  detail::HeadCache<Scalar> head_cache;
  out.d = detail::head_forward(cfg, params, fs, fq, batch.n_way, batch.k_shot, &head_cache);
  out.p = distance_probabilities(out.d);
  const std::vector<int> labels = batch.labels();
  out.loss = episode_loss(out.p, labels);
  out.accuracy = episode_accuracy(out.d, labels);

  MatrixX<Scalar> dd = loss_backward_distances(out.p, labels);
  std::vector<MatrixX<Scalar>> dfs(fs.size()), dfq(fq.size());
  for (std::size_t i = 0; i < fs.size(); ++i)
    dfs[i] = MatrixX<Scalar>::Zero(fs[i].data.rows(), fs[i].data.cols());
  for (std::size_t i = 0; i < fq.size(); ++i)
    dfq[i] = MatrixX<Scalar>::Zero(fq[i].data.rows(), fq[i].data.cols());
  detail::head_backward(cfg, params, head_cache, fs, fq, out.d, dd, batch.n_way, batch.k_shot,
                        grads, dfs, dfq);

  // One image at a time: recompute the feature pass with caches, then walk back.
  for (std::size_t i = 0; i < batch.support.size(); ++i) {
    ImageCache<Scalar> cache;
    ImageFeatures<Scalar> f = feature_forward(cfg, params, batch.support[i], &cache);
    FeatureMap<Scalar> dhead(std::move(dfs[i]), f.head.h, f.head.w);
    feature_backward(cfg, params, cache, dhead, grads);
  }
  for (std::size_t i = 0; i < batch.query.size(); ++i) {
    ImageCache<Scalar> cache;
    ImageFeatures<Scalar> f = feature_forward(cfg, params, batch.query[i], &cache);
    FeatureMap<Scalar> dhead(std::move(dfq[i]), f.head.h, f.head.w);
    feature_backward(cfg, params, cache, dhead, grads);
  }
  return out;
}

// --- checkpoints ---------------------------------------------------------------
//
//   causalfs checkpoint v1
//   fingerprint <16 hex digits>
//   config <canonical single-line model description>
//   tensors <count>
//   <name> <rows> <cols>
//   <hexfloat values in storage order on one line>
//   ...
//   velocity <0|1>       (same tensor framing when 1)
//
// Hexfloat round-trips float values exactly.

template <typename Scalar>
void write_tensor_section(std::ostream& os, const ModelConfig& cfg, ModelParams<Scalar>& p) {
  std::int64_t count = 0;
  visit_params(cfg, [&count](const std::string&, auto&) { ++count; }, p);
  os << "tensors " << count << '\n';
  os << std::hexfloat;
  visit_params(cfg,
               [&os](const std::string& name, auto& t) {
                 os << name << ' ' << t.rows() << ' ' << t.cols() << '\n';
                 for (Eigen::Index i = 0; i < t.size(); ++i) {
                   if (i) os << ' ';
                   os << double(t.data()[i]);
                 }
                 os << '\n';
               },
               p);
  os << std::defaultfloat;
}

template <typename Scalar>
void read_tensor_section(std::istream& is, const ModelConfig& cfg, ModelParams<Scalar>& p) {
  std::string tag;
  std::int64_t count = 0;
  is >> tag >> count;
  if (tag != "tensors") throw std::runtime_error("checkpoint: expected 'tensors', got '" + tag + "'");
  std::int64_t expected = 0;
  visit_params(cfg, [&expected](const std::string&, auto&) { ++expected; }, p);
  if (count != expected)
    throw std::runtime_error("checkpoint: has " + std::to_string(count) + " tensors, model needs " +
                             std::to_string(expected));
  visit_params(cfg,
               [&is](const std::string& name, auto& t) {
                 std::string got;
                 Eigen::Index rows = 0, cols = 0;
                 is >> got >> rows >> cols;
                 if (got != name)
                   throw std::runtime_error("checkpoint: tensor '" + got + "' where '" + name +
                                            "' was expected");
                 if (rows != t.rows() || cols != t.cols())
                   throw std::runtime_error("checkpoint: tensor '" + name + "' is " +
                                            std::to_string(rows) + "x" + std::to_string(cols) +
                                            ", model expects " + std::to_string(t.rows()) + "x" +
                                            std::to_string(t.cols()));
                 // strtod, not stream extraction: istreams print hexfloat but
                 // cannot read it back.
                 for (Eigen::Index i = 0; i < t.size(); ++i) {
                   std::string tok;
                   if (!(is >> tok))
                     throw std::runtime_error("checkpoint: truncated values in tensor '" + name + "'");
                   char* end = nullptr;
                   const double v = std::strtod(tok.c_str(), &end);
                   if (end == tok.c_str() || *end != '\0')
                     throw std::runtime_error("checkpoint: bad value '" + tok + "' in tensor '" +
                                              name + "'");
                   t.data()[i] = Scalar(v);
                 }
               },
               p);
}

template <typename Scalar>
void save_checkpoint(std::ostream& os, const ModelConfig& cfg, const ModelParams<Scalar>& params,
                     const ModelParams<Scalar>* velocity = nullptr) {
  os << "causalfs checkpoint v1\n";
  os << "fingerprint " << cfg.fingerprint() << '\n';
  os << "config " << cfg.describe() << '\n';
  write_tensor_section(os, cfg, const_cast<ModelParams<Scalar>&>(params));
  os << "velocity " << (velocity ? 1 : 0) << '\n';
  if (velocity) write_tensor_section(os, cfg, const_cast<ModelParams<Scalar>&>(*velocity));
}

template <typename Scalar>
void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                     const ModelParams<Scalar>& params,
                     const ModelParams<Scalar>* velocity = nullptr) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("checkpoint: cannot write '" + path + "'");
  save_checkpoint(os, cfg, params, velocity);
}

// Overwrites `params` (and `velocity` when present in the file and requested).
// The model config must match the stored fingerprint. Returns true when a
// velocity section was loaded.
template <typename Scalar>
bool load_checkpoint(std::istream& is, const ModelConfig& cfg, ModelParams<Scalar>& params,
                     ModelParams<Scalar>* velocity = nullptr) {
  std::string line;
  std::getline(is, line);
  if (line != "causalfs checkpoint v1")
    throw std::runtime_error("checkpoint: unrecognized header '" + line + "'");
  std::string tag, fp;
  is >> tag >> fp;
  if (tag != "fingerprint") throw std::runtime_error("checkpoint: missing fingerprint");
  if (fp != cfg.fingerprint())
    throw std::runtime_error("checkpoint: fingerprint " + fp + " does not match the model config " +
                             cfg.fingerprint() + " (stored config differs)");
  is >> tag;
  if (tag != "config") throw std::runtime_error("checkpoint: missing config line");
  std::getline(is, line);  // descriptive only; the fingerprint is authoritative
  read_tensor_section(is, cfg, params);
  is >> tag;
  int has_vel = 0;
  is >> has_vel;
  if (tag != "velocity") throw std::runtime_error("checkpoint: missing velocity marker");
  if (has_vel && velocity) {
    read_tensor_section(is, cfg, *velocity);
    return true;
  }
  if (has_vel && !velocity) {
    ModelParams<Scalar> discard = params;
    read_tensor_section(is, cfg, discard);
  }
  return false;
}

template <typename Scalar>
bool load_checkpoint(const std::string& path, const ModelConfig& cfg, ModelParams<Scalar>& params,
                     ModelParams<Scalar>* velocity = nullptr) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("checkpoint: cannot read '" + path + "'");
  return load_checkpoint(is, cfg, params, velocity);
}

}  // namespace causalfs
