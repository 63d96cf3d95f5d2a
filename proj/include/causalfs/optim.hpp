#pragma once

#include <stdexcept>
#include <string>

#include "causalfs/model.hpp"

// Nesterov SGD over the model parameter registry plus the stepped learning
// rate schedule. Velocity tensors mirror the parameter shapes; callers own
// them across steps (and through checkpoints).

namespace causalfs {

// lr0 divided by decay_factor once per completed decay interval. Repeated
// division keeps the common grid exact: 0.1 / 20 == 0.005 in binary64.
inline double lr_schedule(int epoch, double lr0, int decay_epoch, double decay_factor = 20.0) {
  if (epoch < 0) throw std::invalid_argument("lr_schedule: epoch must be >= 0");
  if (decay_epoch < 1) throw std::invalid_argument("lr_schedule: decay_epoch must be >= 1");
  if (decay_factor <= 0.0) throw std::invalid_argument("lr_schedule: decay_factor must be > 0");
  double lr = lr0;
  for (int i = 0; i < epoch / decay_epoch; ++i) lr /= decay_factor;
  return lr;
}

// g_eff = grad + wd*param; v = mu*v + g_eff; param -= lr*(g_eff + mu*v).
template <typename Scalar>
void sgd_step(const ModelConfig& cfg, ModelParams<Scalar>& params,
              const ModelParams<Scalar>& grads, ModelParams<Scalar>& velocity, Scalar lr,
              Scalar momentum, Scalar weight_decay) {
  auto& g_mut = const_cast<ModelParams<Scalar>&>(grads);
  visit_params(cfg,
               [&](const std::string& name, auto& p, auto& g, auto& v) {
                 if (p.rows() != g.rows() || p.cols() != g.cols() || p.rows() != v.rows() ||
                     p.cols() != v.cols())
                   throw std::invalid_argument("sgd_step: shape mismatch at '" + name + "'");
                 auto geff = (g + weight_decay * p).eval();
                 v = momentum * v + geff;
                 p -= lr * (geff + momentum * v);
               },
               params, g_mut, velocity);
}

}  // namespace causalfs
