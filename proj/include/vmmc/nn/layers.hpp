#pragma once

#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "vmmc/nn/tensor.hpp"

namespace vmmc::nn {

enum class Mode { train, infer };

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;
};

// Non-trainable state that still belongs in a checkpoint (normalization statistics).
struct Buffer {
  std::string name;
  Tensor* value = nullptr;
};

// A differentiable stage. forward() caches what backward() needs, so a layer
// instance serves one forward/backward pair at a time.
class Layer {
 public:
  explicit Layer(std::string name) : name_(std::move(name)) {}
  virtual ~Layer() = default;
  Layer(const Layer&) = delete;
  Layer& operator=(const Layer&) = delete;

  const std::string& name() const { return name_; }

  virtual Tensor forward(const Tensor& x, Mode mode) = 0;
  // Accumulates parameter gradients and returns d(loss)/d(input).
  virtual Tensor backward(const Tensor& grad_out) = 0;
  virtual Shape output_shape(const Shape& in) const = 0;

  virtual void collect_parameters(std::vector<Parameter*>& /*out*/) {}
  virtual void collect_buffers(std::vector<Buffer>& /*out*/) {}
  virtual void initialize(std::mt19937_64& /*rng*/) {}

 private:
  std::string name_;
};

using LayerPtr = std::unique_ptr<Layer>;

struct Conv2DOptions {
  int in_channels = 0;
  int filters = 0;
  int kernel = 3;
  int stride = 1;
  int padding = 0;
  int dilation = 1;
  bool bias = true;
};

// Kernel layout is (kh, kw, in, out), the channels-last convention.
class Conv2D final : public Layer {
 public:
  Conv2D(std::string name, Conv2DOptions opts);

  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  Shape output_shape(const Shape& in) const override;
  void collect_parameters(std::vector<Parameter*>& out) override;
  void initialize(std::mt19937_64& rng) override;

  const Conv2DOptions& options() const { return opts_; }
  Parameter& kernel() { return kernel_; }
  Parameter& bias() { return bias_; }

 private:
  bool is_pointwise() const;
  void im2col(const Tensor& x, int first, int count, int out_h, int out_w, float* col) const;
  void col2im(const float* col, int first, int count, int out_h, int out_w, Tensor& dx) const;
  int chunk_images(int out_h, int out_w) const;

  Conv2DOptions opts_;
  Parameter kernel_;
  Parameter bias_;
  Tensor input_;
};

class BatchNorm final : public Layer {
 public:
  BatchNorm(std::string name, int channels, float momentum = 0.9f, float epsilon = 1e-3f);

  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  Shape output_shape(const Shape& in) const override { return in; }
  void collect_parameters(std::vector<Parameter*>& out) override;
  void collect_buffers(std::vector<Buffer>& out) override;
  void initialize(std::mt19937_64& rng) override;

  Parameter& gamma() { return gamma_; }
  Parameter& beta() { return beta_; }
  Tensor& moving_mean() { return moving_mean_; }
  Tensor& moving_variance() { return moving_var_; }

 private:
  int channels_;
  float momentum_;
  float epsilon_;
  Parameter gamma_;
  Parameter beta_;
  Tensor moving_mean_;
  Tensor moving_var_;
  Tensor normalized_;
  std::vector<float> inv_std_;
  bool used_batch_stats_ = false;
};

class ReLU final : public Layer {
 public:
  explicit ReLU(std::string name) : Layer(std::move(name)) {}
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  Shape output_shape(const Shape& in) const override { return in; }

 private:
  Tensor output_;
};

class ZeroPad2D final : public Layer {
 public:
  ZeroPad2D(std::string name, int pad) : Layer(std::move(name)), pad_(pad) {}
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  Shape output_shape(const Shape& in) const override;

 private:
  int pad_;
  Shape in_shape_{};
};

// Window pooling without padding ("valid").
class MaxPool2D final : public Layer {
 public:
  MaxPool2D(std::string name, int window, int stride)
      : Layer(std::move(name)), window_(window), stride_(stride) {}
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  Shape output_shape(const Shape& in) const override;

 private:
  int window_;
  int stride_;
  Shape in_shape_{};
  std::vector<std::size_t> argmax_;
};

class GlobalAvgPool final : public Layer {
 public:
  explicit GlobalAvgPool(std::string name) : Layer(std::move(name)) {}
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  Shape output_shape(const Shape& in) const override { return {in.n, 1, 1, in.c}; }

 private:
  Shape in_shape_{};
};

// Fully connected over the flattened sample; output shape (n, 1, 1, units).
class Dense final : public Layer {
 public:
  Dense(std::string name, int inputs, int units);
  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  Shape output_shape(const Shape& in) const override { return {in.n, 1, 1, units_}; }
  void collect_parameters(std::vector<Parameter*>& out) override;
  void initialize(std::mt19937_64& rng) override;

  Parameter& kernel() { return kernel_; }
  Parameter& bias() { return bias_; }

 private:
  int inputs_;
  int units_;
  Parameter kernel_;
  Parameter bias_;
  Tensor input_;
};

class Sequential final : public Layer {
 public:
  explicit Sequential(std::string name) : Layer(std::move(name)) {}

  template <typename L, typename... Args>
  L& add(Args&&... args) {
    auto layer = std::make_unique<L>(std::forward<Args>(args)...);
    L& ref = *layer;
    layers_.push_back(std::move(layer));
    return ref;
  }
  void push_back(LayerPtr layer) { layers_.push_back(std::move(layer)); }

  Tensor forward(const Tensor& x, Mode mode) override;
  Tensor backward(const Tensor& grad_out) override;
  Shape output_shape(const Shape& in) const override;
  void collect_parameters(std::vector<Parameter*>& out) override;
  void collect_buffers(std::vector<Buffer>& out) override;
  void initialize(std::mt19937_64& rng) override;

  std::size_t size() const { return layers_.size(); }
  Layer& operator[](std::size_t i) { return *layers_[i]; }
  const Layer& operator[](std::size_t i) const { return *layers_[i]; }

 private:
  std::vector<LayerPtr> layers_;
};

std::vector<Parameter*> parameters_of(Layer& layer);
std::size_t trainable_count(const std::vector<Parameter*>& params);
void zero_grad(const std::vector<Parameter*>& params);

}  // namespace vmmc::nn
