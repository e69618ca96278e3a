#pragma once

#include <vector>

#include "vmmc/nn/layers.hpp"

namespace vmmc::nn {

struct AdamOptions {
  float learning_rate = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float epsilon = 1e-7f;
};

// Adaptive moment estimation. Parameters with trainable == false are left untouched.
class Adam {
 public:
  Adam(std::vector<Parameter*> params, AdamOptions opts = {});

  void step();
  void zero_grad();
  long steps() const { return steps_; }
  const AdamOptions& options() const { return opts_; }

 private:
  std::vector<Parameter*> params_;
  AdamOptions opts_;
  std::vector<Tensor> first_moment_;
  std::vector<Tensor> second_moment_;
  long steps_ = 0;
};

}  // namespace vmmc::nn
