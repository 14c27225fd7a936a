#pragma once

// Shared helpers for the unit suites: random tensors and a central-difference
// gradient checker that is independent of the backward rules it audits.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "fireedit/rng.hpp"
#include "fireedit/tensor.hpp"

namespace fireedit::testing {

template <typename T = double>
Tensor<T> random_tensor(Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0) {
  std::vector<T> v(shape_numel(shape));
  for (T& x : v) x = static_cast<T>(lo + (hi - lo) * rng.uniform());
  return Tensor<T>(std::move(shape), std::move(v));
}

inline double rel_err(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Max relative error between tape gradients and central differences (step h)
// for every entry of every input. `loss` must rebuild the graph from scratch.
inline double gradcheck(std::vector<Tensor<double>> inputs,
                        const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& loss,
                        double h = 1e-5) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  {
    GradTape<double> tape;
    TapeScope<double> scope(tape);
    tape.backward(loss(inputs));
  }
  double worst = 0;
  for (auto& t : inputs) {
    const std::vector<double> analytic = t.grad();
    auto values = t.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double keep = values[i];
      values[i] = keep + h;
      const double up = loss(inputs).item();
      values[i] = keep - h;
      const double down = loss(inputs).item();
      values[i] = keep;
      worst = std::max(worst, rel_err(analytic[i], (up - down) / (2 * h)));
    }
  }
  return worst;
}

// Reduces any output to a scalar with fixed random weights so every output
// entry contributes a distinct gradient.
inline Tensor<double> weighted_sum(const Tensor<double>& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  return sum(mul(y, random_tensor<double>(y.shape(), rng)));
}

}  // namespace fireedit::testing
