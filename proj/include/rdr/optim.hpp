#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "rdr/errors.hpp"
#include "rdr/tensor.hpp"

namespace rdr::ad {

// One SGD update with classic momentum and decoupled-from-nothing weight
// decay folded into the gradient:
//   v <- momentum * v + grad + weight_decay * param
//   param <- param - lr * v
inline void sgd_step(Tensor& param, const std::vector<double>& grad,
                     std::vector<double>& velocity, double lr, double momentum,
                     double weight_decay) {
  if (!(lr > 0.0)) throw ConfigError("sgd: lr must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) {
    throw ConfigError("sgd: momentum must be in [0, 1)");
  }
  if (!(weight_decay >= 0.0)) throw ConfigError("sgd: weight_decay must be >= 0");
  const std::size_t n = param.numel();
  if (grad.size() != n) {
    throw ShapeError("sgd: gradient length " + std::to_string(grad.size()) +
                     " does not match parameter shape " +
                     shape_str(param.shape()));
  }
  if (velocity.empty()) {
    velocity.assign(n, 0.0);
  } else if (velocity.size() != n) {
    throw ShapeError("sgd: velocity length " + std::to_string(velocity.size()) +
                     " does not match parameter shape " +
                     shape_str(param.shape()));
  }
  auto& v = param.mutable_values();
  for (std::size_t i = 0; i < n; ++i) {
    velocity[i] = momentum * velocity[i] + grad[i] + weight_decay * v[i];
    v[i] -= lr * velocity[i];
  }
}

// Keeps one velocity buffer per parameter tensor. step() refuses to run on
// gradients that were not written by the given backward pass, which guards
// against silently reusing stale gradients.
class Sgd {
 public:
  Sgd(double lr, double momentum, double weight_decay)
      : lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {
    if (!(lr > 0.0)) throw ConfigError("optimizer.lr: must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) {
      throw ConfigError("optimizer.momentum: must be in [0, 1)");
    }
    if (!(weight_decay >= 0.0)) {
      throw ConfigError("optimizer.weight_decay: must be >= 0");
    }
  }

  void step(std::vector<Tensor>& params, std::uint64_t backward_pass) {
    for (auto& p : params) {
      auto* d = p.data().get();
      if (d->grad_pass != backward_pass || d->grad.size() != p.numel()) {
        throw Error("sgd: parameter has no gradient from the given backward pass");
      }
      sgd_step(p, d->grad, velocities_[d], lr_, momentum_, weight_decay_);
    }
  }

 private:
  double lr_;
  double momentum_;
  double weight_decay_;
  std::unordered_map<detail::TensorData*, std::vector<double>> velocities_;
};

}  // namespace rdr::ad
