#pragma once

// Shared helpers for the test binaries: random generators and a
// finite-difference harness over tape-recorded functions.

#include <cmath>
#include <functional>
#include <vector>

#include "rallycast/autodiff.hpp"
#include "rallycast/optim.hpp"
#include "rallycast/rng.hpp"

namespace testing {

using rallycast::Rng;
using rallycast::tensor::Shape;
using rallycast::tensor::Tape;
using rallycast::tensor::Tensor;
using rallycast::tensor::Var;

inline Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

inline double rel_err(double a, double n) {
  return std::abs(a - n) / (std::max(std::abs(a), std::abs(n)) + 1e-12);
}

// Builds an output from leaves; the loss is sum(out * weights) with fixed
// random weights so every output entry contributes a generic amount.
using Builder = std::function<Var(Tape&, const std::vector<Var>&)>;

struct FdResult {
  double max_rel = 0.0;
  std::size_t count = 0;
};

inline FdResult fd_check(const Builder& build, std::vector<Tensor> inputs, Rng& rng,
                         double eps = 1e-5) {
  std::vector<std::size_t> sizes;
  std::vector<double> flat;
  for (const auto& t : inputs) {
    sizes.push_back(t.size());
    flat.insert(flat.end(), t.data().begin(), t.data().end());
  }
  Tensor weights;
  const rallycast::tensor::Objective f = [&](std::span<const double> x,
                                             std::vector<double>* grad) {
    Tape tape;
    std::vector<Var> leaves;
    std::size_t at = 0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      Tensor t(inputs[i].shape(), std::vector<double>(x.begin() + at, x.begin() + at + sizes[i]));
      at += sizes[i];
      leaves.push_back(tape.leaf(std::move(t)));
    }
    const auto out = build(tape, leaves);
    if (weights.empty()) weights = random_tensor(rng, out.value().shape());
    const auto loss = rallycast::tensor::sum(rallycast::tensor::mul_constant(out, weights));
    if (grad) {
      tape.backward(loss);
      grad->clear();
      for (const auto& l : leaves) {
        const auto g = tape.grad(l);
        grad->insert(grad->end(), g.data().begin(), g.data().end());
      }
    }
    return loss.value()[0];
  };
  const auto r = rallycast::tensor::grad_check(f, flat, eps);
  return {r.max_relative_error, flat.size()};
}

}  // namespace testing
