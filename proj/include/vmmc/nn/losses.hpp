#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>

#include "vmmc/nn/tensor.hpp"

namespace vmmc::nn {

// Quadratic below unit residual, linear above; continuous with slope 1 at |x| = 1.
template <typename T>
T smooth_l1(T x) {
  const T a = std::abs(x);
  return a < T(1) ? T(0.5) * x * x : a - T(0.5);
}

template <typename T>
T smooth_l1_grad(T x) {
  if (std::abs(x) < T(1)) return x;
  return x > T(0) ? T(1) : T(-1);
}

// Numerically stable softmax.
template <typename T>
void softmax(std::span<const T> logits, std::span<T> probs) {
  if (logits.size() != probs.size() || logits.empty()) {
    throw std::invalid_argument("softmax: size mismatch");
  }
  const T peak = *std::max_element(logits.begin(), logits.end());
  T total = T(0);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    probs[i] = std::exp(logits[i] - peak);
    total += probs[i];
  }
  for (T& p : probs) p /= total;
}

// -log softmax(logits)[target]; writes d/d(logits) into grad when it is non-empty.
template <typename T>
T cross_entropy(std::span<const T> logits, std::size_t target, std::span<T> grad = {}) {
  if (target >= logits.size()) throw std::out_of_range("cross_entropy: target out of range");
  const T peak = *std::max_element(logits.begin(), logits.end());
  T total = T(0);
  for (T v : logits) total += std::exp(v - peak);
  const T log_z = std::log(total) + peak;
  if (!grad.empty()) {
    for (std::size_t i = 0; i < logits.size(); ++i) {
      grad[i] = std::exp(logits[i] - log_z) - (i == target ? T(1) : T(0));
    }
  }
  return log_z - logits[target];
}

// Mean categorical cross entropy of (n,1,1,k) logits. grad receives d(mean)/d(logits).
float softmax_cross_entropy(const Tensor& logits, std::span<const int> labels, Tensor* grad);

}  // namespace vmmc::nn
