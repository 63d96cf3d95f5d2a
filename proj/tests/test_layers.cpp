#include "doctest.h"

#include "causalfs/layers.hpp"
#include "causalfs/rng.hpp"

#include "grad_check.hpp"
#include "test_support.hpp"

using namespace causalfs;
using testsupport::fill_normal;

namespace {

// Direct nested-loop convolution, no im2col; the reference the fast path must match.
FeatureMap<double> conv_reference(const FeatureMap<double>& in, const ConvParams<double>& p) {
  const int H = in.h, W = in.w, k = p.ksize, pad = p.pad;
  const int oh = H + 2 * pad - k + 1, ow = W + 2 * pad - k + 1;
  auto out = FeatureMap<double>::zeros(p.out_channels(), oh, ow);
  for (int oc = 0; oc < p.out_channels(); ++oc)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        double acc = p.bias(oc);
        for (int ic = 0; ic < p.in_channels(); ++ic)
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              const int iy = oy + ky - pad, ix = ox + kx - pad;
              if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
              acc += p.weight(oc, (ic * k + ky) * k + kx) * in.data(ic, iy * W + ix);
            }
        out.data(oc, oy * ow + ox) = acc;
      }
  return out;
}

ConvParams<double> random_conv(int in_c, int out_c, int k, int pad, Rng& rng) {
  ConvParams<double> p;
  p.ksize = k;
  p.pad = pad;
  p.weight.resize(out_c, in_c * k * k);
  p.bias.resize(out_c);
  fill_normal(p.weight, rng, 0.3);
  fill_normal(p.bias, rng, 0.1);
  return p;
}

}  // namespace

TEST_CASE("conv2d matches the nested-loop reference") {
  Rng rng(11);
  for (auto [k, pad] : {std::pair{3, 1}, std::pair{7, 3}, std::pair{1, 0}}) {
    FeatureMap<double> in = FeatureMap<double>::zeros(3, 6, 5);
    fill_normal(in.data, rng);
    ConvParams<double> p = random_conv(3, 4, k, pad, rng);
    FeatureMap<double> fast = conv2d(in, p);
    FeatureMap<double> ref = conv_reference(in, p);
    REQUIRE(fast.h == ref.h);
    REQUIRE(fast.w == ref.w);
    CHECK((fast.data - ref.data).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("conv2d with zero weights and bias maps any input to zero") {
  Rng rng(12);
  FeatureMap<double> in = FeatureMap<double>::zeros(2, 4, 4);
  fill_normal(in.data, rng);
  ConvParams<double> p;
  p.ksize = 3;
  p.pad = 1;
  p.weight = MatrixX<double>::Zero(5, 2 * 9);
  p.bias = VectorX<double>::Zero(5);
  CHECK(conv2d(in, p).data.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("conv2d gradients agree with finite differences") {
  Rng rng(13);
  FeatureMap<double> in = FeatureMap<double>::zeros(3, 5, 4);
  fill_normal(in.data, rng);
  ConvParams<double> p = random_conv(3, 4, 3, 1, rng);
  MatrixX<double> proj(4, 20);
  fill_normal(proj, rng);

  auto loss = [&]() {
    FeatureMap<double> out = conv2d(in, p);
    return (out.data.array() * proj.array()).sum();
  };

  ConvCache<double> cache;
  FeatureMap<double> out = conv2d(in, p, &cache);
  ConvParams<double> grad = p;
  grad.weight.setZero();
  grad.bias.setZero();
  FeatureMap<double> dout(proj, out.h, out.w);
  FeatureMap<double> din = conv2d_backward(dout, p, cache, grad);

  auto results = gradcheck::check_all(loss, {
      gradcheck::block("weight", p.weight, grad.weight),
      gradcheck::block("bias", p.bias, grad.bias),
      gradcheck::block("input", in.data, din.data),
  });
  CHECK(gradcheck::max_rel_err(results) < 1e-8);
}

TEST_CASE("maxpool uses floor semantics and first-in-scan-order tie break") {
  FeatureMap<double> in = FeatureMap<double>::zeros(1, 5, 5);
  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 5; ++x) in.at(0, y, x) = y * 5 + x;
  in.at(0, 4, 4) = 1e9;  // trailing row/col must be dropped, not pooled
  PoolCache cache;
  FeatureMap<double> out = maxpool2(in, &cache);
  REQUIRE(out.h == 2);
  REQUIRE(out.w == 2);
  CHECK(out.at(0, 0, 0) == 6.0);
  CHECK(out.at(0, 1, 1) == 18.0);
  CHECK(out.data.maxCoeff() < 1e9);

  FeatureMap<double> flat = FeatureMap<double>::zeros(1, 2, 2);
  flat.data.setConstant(3.5);  // 4-way tie
  PoolCache tie_cache;
  FeatureMap<double> pooled = maxpool2(flat, &tie_cache);
  CHECK(pooled.at(0, 0, 0) == 3.5);
  CHECK(tie_cache.argmax[0] == 0);  // first position in row-major scan wins
  FeatureMap<double> dout = FeatureMap<double>::zeros(1, 1, 1);
  dout.data(0, 0) = 2.0;
  FeatureMap<double> din = maxpool2_backward(dout, tie_cache);
  CHECK(din.data(0, 0) == 2.0);
  CHECK(din.data.sum() == 2.0);
}

TEST_CASE("maxpool backward routes gradient to the argmax only") {
  Rng rng(14);
  FeatureMap<double> in = FeatureMap<double>::zeros(3, 6, 6);
  fill_normal(in.data, rng);
  PoolCache cache;
  FeatureMap<double> out = maxpool2(in, &cache);
  MatrixX<double> proj(3, 9);
  fill_normal(proj, rng);
  auto loss = [&]() { return (maxpool2(in).data.array() * proj.array()).sum(); };
  FeatureMap<double> din = maxpool2_backward(FeatureMap<double>(proj, out.h, out.w), cache);
  auto results = gradcheck::check_all(loss, {gradcheck::block("input", in.data, din.data)}, 1e-6);
  CHECK(gradcheck::max_rel_err(results) < 1e-8);
}

TEST_CASE("group norm normalizes each group and applies affine") {
  Rng rng(15);
  FeatureMap<double> in = FeatureMap<double>::zeros(8, 4, 4);
  fill_normal(in.data, rng, 2.0);
  in.data.array() += 0.7;
  GroupNormParams<double> p;
  p.groups = 4;
  p.gamma = VectorX<double>::Ones(8);
  p.beta = VectorX<double>::Zero(8);
  FeatureMap<double> out = group_norm(in, p);
  for (int g = 0; g < 4; ++g) {
    auto blockv = out.data.middleRows(g * 2, 2);
    CHECK(std::abs(blockv.mean()) < 1e-12);
    const double var = (blockv.array() - blockv.mean()).square().mean();
    CHECK(var == doctest::Approx(1.0).epsilon(1e-3));  // off by var/(var+eps)
  }
  GroupNormParams<double> q = p;
  q.gamma.setConstant(2.0);
  q.beta.setConstant(-1.0);
  FeatureMap<double> out2 = group_norm(in, q);
  CHECK((out2.data - (2.0 * out.data.array() - 1.0).matrix()).cwiseAbs().maxCoeff() < 1e-12);

  GroupNormParams<double> bad = p;
  bad.groups = 3;  // 8 channels don't split into 3 groups
  CHECK_THROWS_AS(group_norm(in, bad), std::invalid_argument);
}

TEST_CASE("group norm gradients agree with finite differences") {
  Rng rng(16);
  FeatureMap<double> in = FeatureMap<double>::zeros(6, 3, 4);
  fill_normal(in.data, rng);
  GroupNormParams<double> p;
  p.groups = 2;
  p.gamma.resize(6);
  p.beta.resize(6);
  fill_normal(p.gamma, rng, 0.5);
  p.gamma.array() += 1.0;
  fill_normal(p.beta, rng, 0.3);
  MatrixX<double> proj(6, 12);
  fill_normal(proj, rng);

  auto loss = [&]() { return (group_norm(in, p).data.array() * proj.array()).sum(); };

  GroupNormCache<double> cache;
  group_norm(in, p, &cache);
  GroupNormParams<double> grad = p;
  grad.gamma.setZero();
  grad.beta.setZero();
  FeatureMap<double> din =
      group_norm_backward(FeatureMap<double>(proj, 3, 4), p, cache, grad);
  auto results = gradcheck::check_all(loss, {
      gradcheck::block("gamma", p.gamma, grad.gamma),
      gradcheck::block("beta", p.beta, grad.beta),
      gradcheck::block("input", in.data, din.data),
  });
  CHECK(gradcheck::max_rel_err(results) < 1e-7);
}

TEST_CASE("layer norm gradients agree with finite differences") {
  Rng rng(17);
  MatrixX<double> x(5, 7);
  fill_normal(x, rng);
  LayerNormParams<double> p;
  p.gamma.resize(5);
  p.beta.resize(5);
  fill_normal(p.gamma, rng, 0.5);
  p.gamma.array() += 1.0;
  fill_normal(p.beta, rng, 0.3);
  MatrixX<double> proj(5, 7);
  fill_normal(proj, rng);

  auto loss = [&]() { return (layer_norm(x, p).array() * proj.array()).sum(); };

  LayerNormCache<double> cache;
  layer_norm(x, p, &cache);
  LayerNormParams<double> grad = p;
  grad.gamma.setZero();
  grad.beta.setZero();
  MatrixX<double> dx = layer_norm_backward(proj, p, cache, grad);
  auto results = gradcheck::check_all(loss, {
      gradcheck::block("gamma", p.gamma, grad.gamma),
      gradcheck::block("beta", p.beta, grad.beta),
      gradcheck::block("input", x, dx),
  });
  CHECK(gradcheck::max_rel_err(results) < 1e-7);
}

TEST_CASE("relu backward masks by sign of the output") {
  Rng rng(18);
  FeatureMap<double> in = FeatureMap<double>::zeros(2, 3, 3);
  fill_normal(in.data, rng);
  FeatureMap<double> out = relu(in);
  CHECK(out.data.minCoeff() >= 0.0);
  MatrixX<double> proj(2, 9);
  fill_normal(proj, rng);
  auto loss = [&]() { return (relu(in).data.array() * proj.array()).sum(); };
  FeatureMap<double> din = relu_backward(FeatureMap<double>(proj, 3, 3), out);
  auto results = gradcheck::check_all(loss, {gradcheck::block("input", in.data, din.data)}, 1e-6);
  CHECK(gradcheck::max_rel_err(results) < 1e-8);
}

TEST_CASE("softmax rows are distributions, shift-invariant, and differentiate correctly") {
  Rng rng(19);
  MatrixX<double> s(4, 6);
  fill_normal(s, rng, 3.0);
  MatrixX<double> p = softmax_rows(s);
  for (int i = 0; i < 4; ++i) {
    CHECK(p.row(i).sum() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(p.row(i).minCoeff() > 0.0);
  }
  MatrixX<double> shifted = s;
  shifted.array() += 123.0;
  CHECK((softmax_rows(shifted) - p).cwiseAbs().maxCoeff() < 1e-12);

  MatrixX<double> proj(4, 6);
  fill_normal(proj, rng);
  auto loss = [&]() { return (softmax_rows(s).array() * proj.array()).sum(); };
  MatrixX<double> ds = softmax_rows_backward(p, proj);
  auto results = gradcheck::check_all(loss, {gradcheck::block("scores", s, ds)}, 1e-6);
  CHECK(gradcheck::max_rel_err(results) < 1e-8);

  VectorX<double> v(5);
  for (int i = 0; i < 5; ++i) v(i) = rng.normal();
  VectorX<double> pv = softmax(v);
  CHECK(pv.sum() == doctest::Approx(1.0).epsilon(1e-12));
  VectorX<double> dpv(5);
  for (int i = 0; i < 5; ++i) dpv(i) = rng.normal();
  auto vloss = [&]() { return softmax(v).dot(dpv); };
  VectorX<double> dv = softmax_backward(pv, dpv);
  auto vres = gradcheck::check_all(vloss, {gradcheck::block("logits", v, dv)}, 1e-6);
  CHECK(gradcheck::max_rel_err(vres) < 1e-8);
}
