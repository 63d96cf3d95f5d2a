#pragma once

#include <cmath>
#include <stdexcept>

#include "causalfs/layers.hpp"
#include "causalfs/rng.hpp"
#include "causalfs/tensor.hpp"

namespace causalfs {

// Single-head pre-norm transformer layer over a d x T token matrix (tokens are
// columns). No projection bias on Q/K/V and no output projection; the
// feed-forward keeps biases. Attention logits divide by sqrt(scale_dim), which
// the caller supplies independently of d.

template <typename Scalar>
struct TransformerParams {
  LayerNormParams<Scalar> ln1, ln2;
  MatrixX<Scalar> wq, wk, wv;  // d x d
  MatrixX<Scalar> w1;          // hidden x d
  VectorX<Scalar> b1;
  MatrixX<Scalar> w2;          // d x hidden
  VectorX<Scalar> b2;
};

template <typename Scalar>
TransformerParams<Scalar> init_transformer(int d, int hidden, Rng& rng) {
  TransformerParams<Scalar> p;
  p.ln1.gamma = VectorX<Scalar>::Ones(d);
  p.ln1.beta = VectorX<Scalar>::Zero(d);
  p.ln2.gamma = VectorX<Scalar>::Ones(d);
  p.ln2.beta = VectorX<Scalar>::Zero(d);
  auto fill = [&rng](MatrixX<Scalar>& m, int rows, int cols, double bound) {
    m.resize(rows, cols);
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = Scalar(rng.real(-bound, bound));
  };
  const double proj_bound = std::sqrt(3.0 / double(d));
  fill(p.wq, d, d, proj_bound);
  fill(p.wk, d, d, proj_bound);
  fill(p.wv, d, d, proj_bound);
  fill(p.w1, hidden, d, std::sqrt(6.0 / d));
  fill(p.w2, d, hidden, std::sqrt(3.0 / double(hidden)));
  p.b1 = VectorX<Scalar>::Zero(hidden);
  p.b2 = VectorX<Scalar>::Zero(d);
  return p;
}

template <typename Scalar>
struct TransformerCache {
  LayerNormCache<Scalar> ln1c, ln2c;
  MatrixX<Scalar> xn1, q, k, v;
  MatrixX<Scalar> attn;  // T x T, row i = attention of query token i over keys
  MatrixX<Scalar> x1, xn2, h;
};

template <typename Scalar>
MatrixX<Scalar> transformer_forward(const MatrixX<Scalar>& x, const TransformerParams<Scalar>& p,
                                    int scale_dim, TransformerCache<Scalar>* cache = nullptr) {
  if (x.rows() != p.wq.rows())
    throw std::invalid_argument("transformer_forward: token dim " + std::to_string(x.rows()) +
                                " does not match parameter dim " + std::to_string(p.wq.rows()));
  if (scale_dim < 1) throw std::invalid_argument("transformer_forward: scale_dim must be positive");
  const Scalar inv_sqrt = Scalar(1) / Scalar(std::sqrt(double(scale_dim)));
  TransformerCache<Scalar> local;
  TransformerCache<Scalar>& c = cache ? *cache : local;

  c.xn1 = layer_norm(x, p.ln1, cache ? &c.ln1c : nullptr);
  c.q.noalias() = p.wq * c.xn1;
  c.k.noalias() = p.wk * c.xn1;
  c.v.noalias() = p.wv * c.xn1;
  MatrixX<Scalar> scores = (c.q.transpose() * c.k) * inv_sqrt;
  c.attn = softmax_rows(scores);
  c.x1 = x + c.v * c.attn.transpose();
  c.xn2 = layer_norm(c.x1, p.ln2, cache ? &c.ln2c : nullptr);
  MatrixX<Scalar> h_pre = (p.w1 * c.xn2).colwise() + p.b1;
  c.h = h_pre.cwiseMax(Scalar(0));
  MatrixX<Scalar> out = c.x1 + ((p.w2 * c.h).colwise() + p.b2);
  return out;
}

template <typename Scalar>
MatrixX<Scalar> transformer_backward(const MatrixX<Scalar>& dout, const TransformerParams<Scalar>& p,
                                     const TransformerCache<Scalar>& c, int scale_dim,
                                     TransformerParams<Scalar>& grad) {
  const Scalar inv_sqrt = Scalar(1) / Scalar(std::sqrt(double(scale_dim)));

  // feed-forward branch
  grad.b2.noalias() += dout.rowwise().sum();
  grad.w2.noalias() += dout * c.h.transpose();
  MatrixX<Scalar> dh = p.w2.transpose() * dout;
  dh = (c.h.array() > Scalar(0)).template cast<Scalar>() * dh.array();
  grad.b1.noalias() += dh.rowwise().sum();
  grad.w1.noalias() += dh * c.xn2.transpose();
  MatrixX<Scalar> dxn2 = p.w1.transpose() * dh;
  MatrixX<Scalar> dx1 = dout + layer_norm_backward(dxn2, p.ln2, c.ln2c, grad.ln2);

  // attention branch
  MatrixX<Scalar> dv = dx1 * c.attn;                     // d x T
  MatrixX<Scalar> dattn = dx1.transpose() * c.v;         // T x T
  MatrixX<Scalar> dscores = softmax_rows_backward(c.attn, dattn) * inv_sqrt;
  MatrixX<Scalar> dq = c.k * dscores.transpose();
  MatrixX<Scalar> dk = c.q * dscores;
  grad.wq.noalias() += dq * c.xn1.transpose();
  grad.wk.noalias() += dk * c.xn1.transpose();
  grad.wv.noalias() += dv * c.xn1.transpose();
  MatrixX<Scalar> dxn1 =
      p.wq.transpose() * dq + p.wk.transpose() * dk + p.wv.transpose() * dv;
  return dx1 + layer_norm_backward(dxn1, p.ln1, c.ln1c, grad.ln1);
}

}  // namespace causalfs
