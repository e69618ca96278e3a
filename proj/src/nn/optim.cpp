#include "vmmc/nn/optim.hpp"

#include <cmath>

#include "vmmc/nn/losses.hpp"

namespace vmmc::nn {

Adam::Adam(std::vector<Parameter*> params, AdamOptions opts)
    : params_(std::move(params)), opts_(opts) {
  first_moment_.reserve(params_.size());
  second_moment_.reserve(params_.size());
  for (const Parameter* p : params_) {
    first_moment_.emplace_back(p->value.shape());
    second_moment_.emplace_back(p->value.shape());
  }
}

void Adam::zero_grad() { nn::zero_grad(params_); }

void Adam::step() {
  ++steps_;
  const double correction1 = 1.0 - std::pow(double(opts_.beta1), double(steps_));
  const double correction2 = 1.0 - std::pow(double(opts_.beta2), double(steps_));
  const float rate = static_cast<float>(opts_.learning_rate * std::sqrt(correction2) / correction1);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    if (!p.trainable) continue;
    float* w = p.value.data();
    const float* g = p.grad.data();
    float* m = first_moment_[i].data();
    float* v = second_moment_[i].data();
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      m[j] = opts_.beta1 * m[j] + (1.0f - opts_.beta1) * g[j];
      v[j] = opts_.beta2 * v[j] + (1.0f - opts_.beta2) * g[j] * g[j];
      w[j] -= rate * m[j] / (std::sqrt(v[j]) + opts_.epsilon);
    }
  }
}

float softmax_cross_entropy(const Tensor& logits, std::span<const int> labels, Tensor* grad) {
  const Shape& s = logits.shape();
  const auto k = s.sample_size();
  if (labels.size() != static_cast<std::size_t>(s.n)) {
    throw std::invalid_argument("softmax_cross_entropy: label count mismatch");
  }
  if (grad != nullptr) *grad = Tensor(s);
  double total = 0.0;
  const float inv_n = 1.0f / static_cast<float>(s.n);
  for (int n = 0; n < s.n; ++n) {
    std::span<const float> row(logits.sample(n), k);
    std::span<float> g;
    if (grad != nullptr) g = std::span<float>(grad->sample(n), k);
    total += cross_entropy<float>(row, static_cast<std::size_t>(labels[n]), g);
    for (float& v : g) v *= inv_n;
  }
  return static_cast<float>(total / s.n);
}

}  // namespace vmmc::nn
