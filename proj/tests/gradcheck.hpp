#pragma once

// Finite-difference gradient oracle, independent of the reverse-mode path
// it checks: perturbs each input element by +-h and compares the central
// difference of the scalar loss against the tape gradient.

#include <cmath>
#include <functional>
#include <vector>

#include "caac/rng.hpp"
#include "caac/tensor.hpp"

namespace testutil {

using LossFn = std::function<caac::Tensor(caac::Tape&,
                                          std::vector<caac::Tensor>&)>;

inline double loss_value(const LossFn& f, std::vector<caac::Tensor>& inputs) {
  caac::Tape tape;
  return f(tape, inputs).item();
}

/// Max elementwise relative error between tape gradients and central
/// finite differences over every requires_grad input.
inline double grad_check(const LossFn& f, std::vector<caac::Tensor> inputs,
                         double h = 1e-5) {
  for (auto& t : inputs) t.zero_grad();
  {
    caac::Tape tape;
    caac::Tensor loss = f(tape, inputs);
    tape.backward(loss);
  }
  double max_rel = 0.0;
  for (auto& t : inputs) {
    if (!t.requires_grad()) continue;
    auto analytic = std::vector<double>(t.grad().begin(), t.grad().end());
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const double orig = t.data()[i];
      t.data()[i] = orig + h;
      const double up = loss_value(f, inputs);
      t.data()[i] = orig - h;
      const double down = loss_value(f, inputs);
      t.data()[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double denom =
          std::max({std::abs(numeric), std::abs(analytic[i]), 1e-8});
      max_rel = std::max(max_rel, std::abs(analytic[i] - numeric) / denom);
    }
  }
  return max_rel;
}

inline caac::Tensor random_tensor(caac::Rng& rng, caac::Shape shape,
                                  double lo = -1.0, double hi = 1.0,
                                  bool requires_grad = true) {
  std::vector<double> d(caac::shape_numel(shape));
  for (double& v : d) v = rng.uniform(lo, hi);
  return caac::Tensor(std::move(shape), std::move(d), requires_grad);
}

}  // namespace testutil
