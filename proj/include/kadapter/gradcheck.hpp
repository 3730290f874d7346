#pragma once

// Central finite differences against reverse-mode gradients.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "kadapter/ndgrad.hpp"

namespace kadapter::gradcheck {

using ndgrad::Tensor;

struct Result {
  double max_rel = 0.0;  // worst per-tensor relative error
  std::string worst;     // label of that tensor
};

inline Tensor random_tensor(ndgrad::Shape shape, std::mt19937_64& rng, double lo = -2.0, double hi = 2.0,
                            bool requires_grad = true) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(ndgrad::numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

// sum(t * w) for a fixed weight vector, so every output element matters.
inline Tensor weighted_sum(const Tensor& t, const std::vector<double>& w) {
  const Tensor flat = ndgrad::reshape(t, {1, t.size()});
  return ndgrad::matmul(flat, Tensor::from({t.size(), 1}, w));
}

inline std::vector<double> random_weights(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> w(n);
  for (auto& x : w) x = u(rng);
  return w;
}

// Worst absolute deviation per tensor, divided by the largest gradient
// magnitude seen over all inputs. Normalizing per tensor would turn round-off
// on exactly-zero gradients (e.g. attention key biases) into huge ratios.
inline Result check(const std::function<Tensor()>& loss_fn, std::vector<Tensor> inputs,
                    const std::vector<std::string>& labels = {}, double eps = 1e-5, double floor = 1e-8) {
  for (auto& t : inputs) t.clear_grad();
  ndgrad::backward(loss_fn());
  std::vector<double> diffs(inputs.size(), 0.0);
  double scale = floor;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor& t = inputs[k];
    std::vector<double> analytic(t.size(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    auto data = t.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + eps;
      const double up = loss_fn().item();
      data[i] = saved - eps;
      const double down = loss_fn().item();
      data[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      diffs[k] = std::max(diffs[k], std::abs(analytic[i] - numeric));
      scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric)});
    }
    t.clear_grad();
  }
  Result r;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    if (diffs[k] / scale >= r.max_rel) {
      r.max_rel = diffs[k] / scale;
      r.worst = k < labels.size() ? labels[k] : "input " + std::to_string(k);
    }
  }
  return r;
}

}  // namespace kadapter::gradcheck
