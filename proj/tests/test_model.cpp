#include <cmath>
#include <set>
#include <sstream>
#include <vector>

#include "causalfs/model.hpp"
#include "causalfs/rng.hpp"
#include "doctest.h"
#include "grad_check.hpp"
#include "test_support.hpp"

using namespace causalfs;

namespace {

ModelConfig tiny_config(bool imse, bool imfr) {
  ModelConfig cfg;
  cfg.backbone.in_channels = 3;
  cfg.backbone.channels = {2, 2, 2, 2};
  cfg.backbone.ksize = 3;
  cfg.backbone.norm_groups = 1;
  cfg.gamma = 3;
  cfg.ffn_mult = 2;
  cfg.topk = 2;
  cfg.use_imse = imse;
  cfg.use_imfr = imfr;
  cfg.image_size = 32;  // head maps are 2x2: binarization and attention are live
  cfg.init_seed = 9;
  return cfg;
}

template <typename Scalar>
EpisodeBatch<Scalar> random_episode(const ModelConfig& cfg, Rng& rng, int n_way, int k_shot,
                                    int n_query) {
  EpisodeBatch<Scalar> b;
  b.n_way = n_way;
  b.k_shot = k_shot;
  b.n_query = n_query;
  auto make = [&]() {
    FeatureMap<Scalar> img =
        FeatureMap<Scalar>::zeros(cfg.backbone.in_channels, cfg.image_size, cfg.image_size);
    for (Eigen::Index j = 0; j < img.data.cols(); ++j)
      for (Eigen::Index i = 0; i < img.data.rows(); ++i) img.data(i, j) = Scalar(rng.real01());
    return img;
  };
  for (int i = 0; i < n_way * k_shot; ++i) b.support.push_back(make());
  for (int i = 0; i < n_way * n_query; ++i) b.query.push_back(make());
  return b;
}

}  // namespace

TEST_CASE("parameter registry has unique names and consistent counts") {
  for (bool imse : {false, true})
    for (bool imfr : {false, true}) {
      ModelConfig cfg = tiny_config(imse, imfr);
      Model<float> m = init_model<float>(cfg);
      std::set<std::string> names;
      std::int64_t total = 0;
      visit_params(cfg,
                   [&](const std::string& name, auto& t) {
                     CHECK(names.insert(name).second);
                     CHECK(t.size() > 0);
                     total += t.size();
                   },
                   m.params);
      CHECK(total == count_params(cfg, m.params));
      // Hand counts. Backbone: 2x27+2+2+2 plus three blocks of 2x18+2+2+2 is
      // 186. Encoder per scale (d=4, hidden=6): 8+4 align, 8+8 norms, 48 qkv,
      // 24+6+24+4 ffn is 134, so 536 over four scales. Mask head: gate
      // 1x(2*49)+1 and three 3x3 (or 2x2 without the encoder) projections.
      const std::int64_t backbone = 186;
      const std::int64_t encoder = imse ? 536 : 0;
      const std::int64_t mask_head = imfr ? (imse ? 99 + 27 : 99 + 12) : 0;
      CHECK(total == backbone + encoder + mask_head);
      ModelParams<float> g = make_zero_grads(cfg, m.params);
      visit_params(cfg, [](const std::string&, auto& t) { CHECK(t.cwiseAbs().maxCoeff() == 0.0f); },
                   g);
      // Enabled heads enlarge the registry.
      if (imse) CHECK(names.count("imse.scale0.attn.wq") == 1);
      if (imfr) CHECK(names.count("imfr.gate.weight") == 1);
      if (!imse) CHECK(names.count("imse.scale0.attn.wq") == 0);
    }
}

TEST_CASE("init is seed-deterministic and seed-sensitive") {
  ModelConfig cfg = tiny_config(true, true);
  Model<float> a = init_model<float>(cfg), b = init_model<float>(cfg);
  bool same = true;
  visit_params(cfg, [&](const std::string&, auto& ta, auto& tb) { same &= (ta == tb); }, a.params,
               b.params);
  CHECK(same);
  cfg.init_seed = 10;
  Model<float> c = init_model<float>(cfg);
  bool differ = false;
  visit_params(tiny_config(true, true),
               [&](const std::string&, auto& ta, auto& tc) { differ |= !(ta == tc); }, a.params,
               c.params);
  CHECK(differ);
}

TEST_CASE("full model gradients agree with finite differences") {
  ModelConfig cfg = tiny_config(true, true);
  Model<double> m = init_model<double>(cfg);
  Rng rng(41, stream::kEpisodes);
  EpisodeBatch<double> batch = random_episode<double>(cfg, rng, 2, 1, 1);

  // Guard against binarization set flips inside the finite-difference step:
  // every query needs clear separation between kept and dropped gate values.
  {
    std::vector<FeatureMap<double>> fq;
    for (const auto& img : batch.query)
      fq.push_back(feature_forward(cfg, m.params, img).head);
    for (const auto& q : fq) {
      RowVectorX<double> g = global_mask<double>(q, m.params.imfr.gate_conv);
      std::vector<double> sorted(g.data(), g.data() + g.size());
      std::sort(sorted.begin(), sorted.end(), std::greater<double>());
      REQUIRE(sorted[1] - sorted[2] > 1e-4);  // k_eff = 2 of 4 positions
    }
  }

  ModelParams<double> grads = make_zero_grads(cfg, m.params);
  EpisodeResult<double> r = episode_forward_backward(cfg, m.params, batch, grads);
  CHECK(std::isfinite(r.loss));
  CHECK(r.d.rows() == 2);
  CHECK(r.d.cols() == 2);

  std::vector<gradcheck::Block> blocks;
  visit_params(cfg,
               [&](const std::string& name, auto& v, auto& g) {
                 blocks.push_back(gradcheck::Block{name, v.data(), g.data(), v.size()});
               },
               m.params, grads);
  auto loss = [&]() { return episode_forward(cfg, m.params, batch).loss; };
  auto results = gradcheck::check_all(loss, blocks, 1e-5);
  for (const auto& res : results) {
    INFO(res.name, " rel ", res.rel_err, " an ", res.analytic_norm, " fd ", res.fd_norm);
    CHECK(res.rel_err < 1e-4);
  }
}

TEST_CASE("cls token variant gradients agree with finite differences") {
  ModelConfig cfg = tiny_config(true, true);
  cfg.token_mode = TokenMode::cls;
  Model<double> m = init_model<double>(cfg);
  Rng rng(42, stream::kEpisodes);
  EpisodeBatch<double> batch = random_episode<double>(cfg, rng, 2, 1, 1);
  ModelParams<double> grads = make_zero_grads(cfg, m.params);
  episode_forward_backward(cfg, m.params, batch, grads);

  std::vector<gradcheck::Block> blocks;
  visit_params(cfg,
               [&](const std::string& name, auto& v, auto& g) {
                 blocks.push_back(gradcheck::Block{name, v.data(), g.data(), v.size()});
               },
               m.params, grads);
  auto loss = [&]() { return episode_forward(cfg, m.params, batch).loss; };
  auto results = gradcheck::check_all(loss, blocks, 1e-5);
  for (const auto& res : results) {
    INFO(res.name, " rel ", res.rel_err);
    CHECK(res.rel_err < 1e-4);
  }
}

TEST_CASE("encoder-only and head-only variants pass finite differences") {
  Rng rng(53, stream::kEpisodes);
  for (auto flags : {std::pair<bool, bool>{true, false}, {false, true}}) {
    ModelConfig cfg = tiny_config(flags.first, flags.second);
    Model<double> m = init_model<double>(cfg);
    EpisodeBatch<double> batch = random_episode<double>(cfg, rng, 2, 2, 1);
    ModelParams<double> grads = make_zero_grads(cfg, m.params);
    episode_forward_backward(cfg, m.params, batch, grads);
    std::vector<gradcheck::Block> blocks;
    visit_params(cfg,
                 [&](const std::string& name, auto& v, auto& g) {
                   blocks.push_back(gradcheck::Block{name, v.data(), g.data(), v.size()});
                 },
                 m.params, grads);
    auto loss = [&]() { return episode_forward(cfg, m.params, batch).loss; };
    // A narrower step keeps pooling argmax selections stable under the probe.
    auto results = gradcheck::check_all(loss, blocks, 1e-6);
    for (const auto& res : results) {
      INFO("imse=", flags.first, " imfr=", flags.second, " ", res.name, " rel ", res.rel_err);
      CHECK(res.rel_err < 1e-4);
    }
  }
}

TEST_CASE("with both heads disabled the model is plain prototype matching") {
  ModelConfig cfg = tiny_config(false, false);
  Model<double> m = init_model<double>(cfg);
  Rng rng(44, stream::kEpisodes);
  EpisodeBatch<double> batch = random_episode<double>(cfg, rng, 3, 2, 2);
  EpisodeResult<double> r = episode_forward(cfg, m.params, batch);

  // Straight-line oracle: final backbone tap, per-class mean, Euclidean
  // distance over flattened features, stable softmax over negated distances.
  std::vector<MatrixX<double>> fs, fq;
  for (const auto& img : batch.support)
    fs.push_back(backbone_forward(img, m.params.backbone)[3].data);
  for (const auto& img : batch.query)
    fq.push_back(backbone_forward(img, m.params.backbone)[3].data);
  for (int i = 0; i < 6; ++i) {
    for (int j = 0; j < 3; ++j) {
      MatrixX<double> proto = (fs[std::size_t(j * 2)] + fs[std::size_t(j * 2 + 1)]) / 2.0;
      long double acc = 0.0L;
      for (Eigen::Index c = 0; c < proto.rows(); ++c)
        for (Eigen::Index p = 0; p < proto.cols(); ++p) {
          long double diff = (long double)fq[std::size_t(i)](c, p) - (long double)proto(c, p);
          acc += diff * diff;
        }
      CHECK(std::abs(r.d(i, j) - double(std::sqrt(acc))) < 1e-10);
    }
    // Probability row from the oracle distances.
    RowVectorX<double> drow = r.d.row(i);
    double shift = drow.minCoeff();
    RowVectorX<double> e = (-(drow.array() - shift)).exp().matrix();
    e /= e.sum();
    CHECK((r.p.row(i) - e).cwiseAbs().maxCoeff() < 1e-12);
  }
  CHECK(r.mean_scale_weights.cwiseAbs().maxCoeff() == 0.0);

  // Gradients of the reduced model also pass finite differences.
  ModelParams<double> grads = make_zero_grads(cfg, m.params);
  episode_forward_backward(cfg, m.params, batch, grads);
  std::vector<gradcheck::Block> blocks;
  visit_params(cfg,
               [&](const std::string& name, auto& v, auto& g) {
                 blocks.push_back(gradcheck::Block{name, v.data(), g.data(), v.size()});
               },
               m.params, grads);
  auto loss = [&]() { return episode_forward(cfg, m.params, batch).loss; };
  auto results = gradcheck::check_all(loss, blocks, 1e-5);
  for (const auto& res : results) CHECK(res.rel_err < 1e-4);
}

TEST_CASE("episode distances match the monolithic head composition") {
  ModelConfig cfg = tiny_config(true, true);
  Model<double> m = init_model<double>(cfg);
  Rng rng(45, stream::kEpisodes);
  EpisodeBatch<double> batch = random_episode<double>(cfg, rng, 3, 2, 2);
  EpisodeResult<double> r = episode_forward(cfg, m.params, batch);

  std::vector<FeatureMap<double>> fs, fq;
  for (const auto& img : batch.support) fs.push_back(feature_forward(cfg, m.params, img).head);
  for (const auto& img : batch.query) fq.push_back(feature_forward(cfg, m.params, img).head);
  const int hw = int(fq[0].data.cols());
  ImfrForwardResult<double> head =
      imfr_forward(fs, fq, batch.n_way, batch.k_shot, m.params.imfr, std::min(cfg.topk, hw));
  for (std::size_t i = 0; i < fq.size(); ++i)
    for (int j = 0; j < batch.n_way; ++j) {
      const auto& pair = head.pairs[i][std::size_t(j)];
      CHECK(std::abs(r.d(Eigen::Index(i), j) - (pair.q_rec - pair.v).norm()) < 1e-10);
    }
}

TEST_CASE("permuting class slots permutes probabilities and keeps accuracy") {
  ModelConfig cfg = tiny_config(true, true);
  Model<double> m = init_model<double>(cfg);
  Rng rng(46, stream::kEpisodes);
  EpisodeBatch<double> batch = random_episode<double>(cfg, rng, 3, 2, 2);
  EpisodeResult<double> r = episode_forward(cfg, m.params, batch);

  // Reverse the class slots: move each class's support and query block.
  const std::vector<int> perm{2, 1, 0};
  EpisodeBatch<double> shuffled = batch;
  for (int dst = 0; dst < 3; ++dst) {
    const int src = perm[std::size_t(dst)];
    for (int k = 0; k < batch.k_shot; ++k)
      shuffled.support[std::size_t(dst * batch.k_shot + k)] =
          batch.support[std::size_t(src * batch.k_shot + k)];
    for (int u = 0; u < batch.n_query; ++u)
      shuffled.query[std::size_t(dst * batch.n_query + u)] =
          batch.query[std::size_t(src * batch.n_query + u)];
  }
  EpisodeResult<double> rs = episode_forward(cfg, m.params, shuffled);
  CHECK(rs.accuracy == doctest::Approx(r.accuracy));
  CHECK(std::abs(rs.loss - r.loss) < 1e-12);
  for (int i = 0; i < 6; ++i) {
    const int src_class = perm[std::size_t(i / 2)];
    const int src_row = src_class * 2 + (i % 2);
    for (int j = 0; j < 3; ++j)
      CHECK(std::abs(rs.p(i, j) - r.p(src_row, perm[std::size_t(j)])) < 1e-12);
  }
}

TEST_CASE("straight-through mode reaches the gate parameters") {
  ModelConfig cfg = tiny_config(true, true);
  Model<double> m = init_model<double>(cfg);
  Rng rng(47, stream::kEpisodes);
  EpisodeBatch<double> batch = random_episode<double>(cfg, rng, 2, 1, 2);

  ModelParams<double> grads = make_zero_grads(cfg, m.params);
  episode_forward_backward(cfg, m.params, batch, grads);
  CHECK(grads.imfr.gate_conv.weight.cwiseAbs().maxCoeff() == 0.0);  // constant mask by default

  cfg.straight_through = true;
  ModelParams<double> grads_st = make_zero_grads(cfg, m.params);
  EpisodeResult<double> r = episode_forward_backward(cfg, m.params, batch, grads_st);
  CHECK(std::isfinite(r.loss));
  CHECK(grads_st.imfr.gate_conv.weight.cwiseAbs().maxCoeff() > 0.0);
  CHECK(grads_st.imfr.gate_conv.weight.allFinite());
}

TEST_CASE("episode backward is bitwise deterministic") {
  ModelConfig cfg = tiny_config(true, true);
  Model<float> m = init_model<float>(cfg);
  Rng rng(48, stream::kEpisodes);
  EpisodeBatch<float> batch = random_episode<float>(cfg, rng, 2, 1, 2);
  ModelParams<float> ga = make_zero_grads(cfg, m.params);
  ModelParams<float> gb = make_zero_grads(cfg, m.params);
  EpisodeResult<float> ra = episode_forward_backward(cfg, m.params, batch, ga);
  EpisodeResult<float> rb = episode_forward_backward(cfg, m.params, batch, gb);
  CHECK(ra.loss == rb.loss);
  bool same = true;
  visit_params(cfg, [&](const std::string&, auto& a, auto& b) { same &= (a == b); }, ga, gb);
  CHECK(same);
}

TEST_CASE("scale weights average to a distribution when the encoder runs") {
  ModelConfig cfg = tiny_config(true, false);
  Model<float> m = init_model<float>(cfg);
  Rng rng(49, stream::kEpisodes);
  EpisodeBatch<float> batch = random_episode<float>(cfg, rng, 2, 1, 1);
  EpisodeResult<float> r = episode_forward(cfg, m.params, batch);
  CHECK(std::abs(r.mean_scale_weights.sum() - 1.0f) < 1e-5f);
  CHECK(r.mean_scale_weights.minCoeff() >= 0.0f);
}

TEST_CASE("checkpoints round-trip bitwise with velocity") {
  ModelConfig cfg = tiny_config(true, true);
  Model<float> m = init_model<float>(cfg);
  ModelParams<float> vel = make_zero_grads(cfg, m.params);
  Rng rng(50, stream::kInit);
  visit_params(cfg, [&](const std::string&, auto& t) {
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = float(rng.normal());
  }, vel);

  std::stringstream ss;
  save_checkpoint(ss, cfg, m.params, &vel);

  ModelConfig cfg2 = cfg;
  cfg2.init_seed = 999;  // seed is not part of the architecture fingerprint
  Model<float> loaded = init_model<float>(cfg2);
  ModelParams<float> vel2 = make_zero_grads(cfg2, loaded.params);
  CHECK(load_checkpoint(ss, cfg2, loaded.params, &vel2));
  bool same = true;
  visit_params(cfg, [&](const std::string&, auto& a, auto& b) { same &= (a == b); }, m.params,
               loaded.params);
  CHECK(same);
  bool same_vel = true;
  visit_params(cfg, [&](const std::string&, auto& a, auto& b) { same_vel &= (a == b); }, vel, vel2);
  CHECK(same_vel);

  // Without a velocity destination the section is skipped cleanly.
  std::stringstream ss2;
  save_checkpoint(ss2, cfg, m.params, &vel);
  Model<float> plain = init_model<float>(cfg);
  CHECK_FALSE(load_checkpoint(ss2, cfg, plain.params));

  // A different architecture refuses the file.
  std::stringstream ss3;
  save_checkpoint(ss3, cfg, m.params);
  ModelConfig other = cfg;
  other.gamma = 4;
  Model<float> wrong = init_model<float>(other);
  CHECK_THROWS_AS(load_checkpoint(ss3, other, wrong.params), std::runtime_error);

  // Truncation is a hard error.
  std::stringstream ss4;
  save_checkpoint(ss4, cfg, m.params);
  std::string text = ss4.str();
  std::stringstream truncated(text.substr(0, text.size() / 2));
  Model<float> t = init_model<float>(cfg);
  CHECK_THROWS_AS(load_checkpoint(truncated, cfg, t.params), std::runtime_error);
}

TEST_CASE("checkpoint seed independence keeps fingerprints equal") {
  ModelConfig a = tiny_config(true, true);
  ModelConfig b = a;
  b.init_seed = 77;
  CHECK(a.fingerprint() == b.fingerprint());
  b.topk = 3;
  CHECK(a.fingerprint() != b.fingerprint());
}

TEST_CASE("requested mask size larger than the map clamps to the full map") {
  ModelConfig cfg = tiny_config(true, true);
  cfg.topk = 50;  // head maps are 2x2
  Model<double> m = init_model<double>(cfg);
  Rng rng(51, stream::kEpisodes);
  EpisodeBatch<double> batch = random_episode<double>(cfg, rng, 2, 1, 1);
  EpisodeResult<double> r = episode_forward(cfg, m.params, batch);  // must not throw
  CHECK(std::isfinite(r.loss));
}
