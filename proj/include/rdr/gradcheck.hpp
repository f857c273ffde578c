#pragma once

// Central-difference gradient verification. The numeric side re-evaluates
// the callable with perturbed inputs and no active tape, so it is an
// independent oracle for the backward closures.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "rdr/tensor.hpp"

namespace rdr::ad {

// |a - b| scaled by max(1, |a|, |b|): plain relative error for O(1)
// gradients, absolute error for tiny ones.
inline double grad_rel_err(double a, double b) {
  const double scale = std::max({1.0, std::abs(a), std::abs(b)});
  return std::abs(a - b) / scale;
}

using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

// Largest discrepancy between tape gradients and central differences over
// every coordinate of every input. `fn` must be pure and return a scalar.
inline double max_grad_discrepancy(const ScalarFn& fn,
                                   std::vector<Tensor> inputs,
                                   double h = 1e-5) {
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    Tape::Scope scope(tape);
    for (auto& t : inputs) t.set_requires_grad(true);
    Tensor y = fn(inputs);
    if (y.numel() != 1) {
      throw ShapeError("gradcheck: callable must return a scalar, got " +
                       shape_str(y.shape()));
    }
    tape.backward(y);
    for (auto& t : inputs) analytic.push_back(t.grad());
  }
  for (auto& t : inputs) t.set_requires_grad(false);

  double worst = 0.0;
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    auto& vals = inputs[ti].mutable_values();
    for (std::size_t ci = 0; ci < vals.size(); ++ci) {
      const double orig = vals[ci];
      vals[ci] = orig + h;
      const double fp = fn(inputs).scalar_value();
      vals[ci] = orig - h;
      const double fm = fn(inputs).scalar_value();
      vals[ci] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      worst = std::max(worst, grad_rel_err(analytic[ti][ci], numeric));
    }
  }
  return worst;
}

struct GradCheckResult {
  std::string name;
  double max_rel_err = 0.0;
  bool pass = false;
};

}  // namespace rdr::ad
