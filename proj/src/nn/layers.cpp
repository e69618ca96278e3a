#include "vmmc/nn/layers.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <stdexcept>

namespace vmmc::nn {
namespace {

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;
using RowVecMap = Eigen::Map<Eigen::RowVectorXf>;

// im2col scratch budget per GEMM call.
constexpr std::size_t kColumnBudget = std::size_t{8} << 20;  // floats

void check_channels(const std::string& layer, const Shape& s, int expected) {
  if (s.c != expected) {
    throw std::invalid_argument(layer + ": expected " + std::to_string(expected) +
                                " input channels, got " + std::to_string(s.c));
  }
}

}  // namespace

// ---------------------------------------------------------------- Conv2D

Conv2D::Conv2D(std::string name, Conv2DOptions opts) : Layer(std::move(name)), opts_(opts) {
  if (opts.in_channels <= 0 || opts.filters <= 0 || opts.kernel <= 0 || opts.stride <= 0 ||
      opts.padding < 0 || opts.dilation <= 0) {
    throw std::invalid_argument(this->name() + ": invalid convolution options");
  }
  kernel_.name = this->name() + "/kernel";
  kernel_.value = Tensor({opts.kernel, opts.kernel, opts.in_channels, opts.filters});
  kernel_.grad = Tensor(kernel_.value.shape());
  if (opts.bias) {
    bias_.name = this->name() + "/bias";
    bias_.value = Tensor({1, 1, 1, opts.filters});
    bias_.grad = Tensor(bias_.value.shape());
  }
}

Shape Conv2D::output_shape(const Shape& in) const {
  const int span = opts_.dilation * (opts_.kernel - 1) + 1;
  const int oh = (in.h + 2 * opts_.padding - span) / opts_.stride + 1;
  const int ow = (in.w + 2 * opts_.padding - span) / opts_.stride + 1;
  if (in.h + 2 * opts_.padding < span || in.w + 2 * opts_.padding < span) {
    throw std::invalid_argument(name() + ": input " + to_string(in) + " smaller than kernel");
  }
  return {in.n, oh, ow, opts_.filters};
}

void Conv2D::collect_parameters(std::vector<Parameter*>& out) {
  out.push_back(&kernel_);
  if (opts_.bias) out.push_back(&bias_);
}

void Conv2D::initialize(std::mt19937_64& rng) {
  const double fan_in = double(opts_.kernel) * opts_.kernel * opts_.in_channels;
  std::normal_distribution<float> dist(0.0f, static_cast<float>(std::sqrt(2.0 / fan_in)));
  for (float& v : kernel_.value.values()) v = dist(rng);
  if (opts_.bias) bias_.value.fill(0.0f);
}

bool Conv2D::is_pointwise() const {
  return opts_.kernel == 1 && opts_.stride == 1 && opts_.padding == 0;
}

int Conv2D::chunk_images(int out_h, int out_w) const {
  const std::size_t per_image =
      std::size_t(out_h) * out_w * opts_.kernel * opts_.kernel * opts_.in_channels;
  return static_cast<int>(std::max<std::size_t>(1, kColumnBudget / std::max<std::size_t>(1, per_image)));
}

void Conv2D::im2col(const Tensor& x, int first, int count, int out_h, int out_w,
                    float* col) const {
  const Shape& s = x.shape();
  const int k = opts_.kernel;
  const int cin = s.c;
  const std::size_t row_len = std::size_t(k) * k * cin;
  for (int n = 0; n < count; ++n) {
    const float* img = x.sample(first + n);
    for (int oy = 0; oy < out_h; ++oy) {
      for (int ox = 0; ox < out_w; ++ox) {
        float* row = col + ((std::size_t(n) * out_h + oy) * out_w + ox) * row_len;
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy * opts_.stride - opts_.padding + ky * opts_.dilation;
          for (int kx = 0; kx < k; ++kx) {
            const int ix = ox * opts_.stride - opts_.padding + kx * opts_.dilation;
            float* dst = row + (std::size_t(ky) * k + kx) * cin;
            if (iy < 0 || iy >= s.h || ix < 0 || ix >= s.w) {
              std::memset(dst, 0, sizeof(float) * cin);
            } else {
              std::memcpy(dst, img + (std::size_t(iy) * s.w + ix) * cin, sizeof(float) * cin);
            }
          }
        }
      }
    }
  }
}

void Conv2D::col2im(const float* col, int first, int count, int out_h, int out_w,
                    Tensor& dx) const {
  const Shape& s = dx.shape();
  const int k = opts_.kernel;
  const int cin = s.c;
  const std::size_t row_len = std::size_t(k) * k * cin;
  for (int n = 0; n < count; ++n) {
    float* img = dx.sample(first + n);
    for (int oy = 0; oy < out_h; ++oy) {
      for (int ox = 0; ox < out_w; ++ox) {
        const float* row = col + ((std::size_t(n) * out_h + oy) * out_w + ox) * row_len;
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy * opts_.stride - opts_.padding + ky * opts_.dilation;
          if (iy < 0 || iy >= s.h) continue;
          for (int kx = 0; kx < k; ++kx) {
            const int ix = ox * opts_.stride - opts_.padding + kx * opts_.dilation;
            if (ix < 0 || ix >= s.w) continue;
            const float* src = row + (std::size_t(ky) * k + kx) * cin;
            float* dst = img + (std::size_t(iy) * s.w + ix) * cin;
            for (int c = 0; c < cin; ++c) dst[c] += src[c];
          }
        }
      }
    }
  }
}

Tensor Conv2D::forward(const Tensor& x, Mode mode) {
  check_channels(name(), x.shape(), opts_.in_channels);
  const Shape out_shape = output_shape(x.shape());
  Tensor y(out_shape);
  const int K = opts_.kernel * opts_.kernel * opts_.in_channels;
  const int F = opts_.filters;
  ConstMatMap w(kernel_.value.data(), K, F);

  if (is_pointwise()) {
    ConstMatMap in(x.data(), static_cast<Eigen::Index>(x.shape().pixels()), K);
    MatMap out(y.data(), static_cast<Eigen::Index>(out_shape.pixels()), F);
    out.noalias() = in * w;
  } else {
    const int chunk = chunk_images(out_shape.h, out_shape.w);
    const std::size_t rows_per_image = std::size_t(out_shape.h) * out_shape.w;
    std::vector<float> col(rows_per_image * std::min(chunk, x.shape().n) * K);
    for (int first = 0; first < x.shape().n; first += chunk) {
      const int count = std::min(chunk, x.shape().n - first);
      const auto rows = static_cast<Eigen::Index>(rows_per_image * count);
      im2col(x, first, count, out_shape.h, out_shape.w, col.data());
      ConstMatMap cm(col.data(), rows, K);
      MatMap out(y.sample(first), rows, F);
      out.noalias() = cm * w;
    }
  }
  if (opts_.bias) {
    MatMap out(y.data(), static_cast<Eigen::Index>(out_shape.pixels()), F);
    out.rowwise() += RowVecMap(bias_.value.data(), F);
  }
  if (mode == Mode::train) input_ = x;
  return y;
}

Tensor Conv2D::backward(const Tensor& grad_out) {
  if (input_.empty()) throw std::logic_error(name() + ": backward without training forward");
  const Shape& in_shape = input_.shape();
  const Shape out_shape = output_shape(in_shape);
  if (!(grad_out.shape() == out_shape)) {
    throw std::invalid_argument(name() + ": gradient shape " + to_string(grad_out.shape()));
  }
  const int K = opts_.kernel * opts_.kernel * opts_.in_channels;
  const int F = opts_.filters;
  ConstMatMap w(kernel_.value.data(), K, F);
  MatMap dw(kernel_.grad.data(), K, F);
  Tensor dx(in_shape);

  if (opts_.bias) {
    ConstMatMap g(grad_out.data(), static_cast<Eigen::Index>(out_shape.pixels()), F);
    RowVecMap(bias_.grad.data(), F) += g.colwise().sum();
  }

  if (is_pointwise()) {
    const auto rows = static_cast<Eigen::Index>(in_shape.pixels());
    ConstMatMap in(input_.data(), rows, K);
    ConstMatMap g(grad_out.data(), rows, F);
    dw.noalias() += in.transpose() * g;
    MatMap(dx.data(), rows, K).noalias() = g * w.transpose();
    return dx;
  }

  const int chunk = chunk_images(out_shape.h, out_shape.w);
  const std::size_t rows_per_image = std::size_t(out_shape.h) * out_shape.w;
  std::vector<float> col(rows_per_image * std::min(chunk, in_shape.n) * K);
  for (int first = 0; first < in_shape.n; first += chunk) {
    const int count = std::min(chunk, in_shape.n - first);
    const auto rows = static_cast<Eigen::Index>(rows_per_image * count);
    ConstMatMap g(grad_out.sample(first), rows, F);
    im2col(input_, first, count, out_shape.h, out_shape.w, col.data());
    MatMap cm(col.data(), rows, K);
    dw.noalias() += cm.transpose() * g;
    cm.noalias() = g * w.transpose();
    col2im(col.data(), first, count, out_shape.h, out_shape.w, dx);
  }
  return dx;
}

// ---------------------------------------------------------------- BatchNorm

BatchNorm::BatchNorm(std::string name, int channels, float momentum, float epsilon)
    : Layer(std::move(name)), channels_(channels), momentum_(momentum), epsilon_(epsilon) {
  gamma_.name = this->name() + "/gamma";
  gamma_.value = Tensor({1, 1, 1, channels}, 1.0f);
  gamma_.grad = Tensor({1, 1, 1, channels});
  beta_.name = this->name() + "/beta";
  beta_.value = Tensor({1, 1, 1, channels});
  beta_.grad = Tensor({1, 1, 1, channels});
  moving_mean_ = Tensor({1, 1, 1, channels});
  moving_var_ = Tensor({1, 1, 1, channels}, 1.0f);
}

void BatchNorm::collect_parameters(std::vector<Parameter*>& out) {
  out.push_back(&gamma_);
  out.push_back(&beta_);
}

void BatchNorm::collect_buffers(std::vector<Buffer>& out) {
  out.push_back({name() + "/moving_mean", &moving_mean_});
  out.push_back({name() + "/moving_variance", &moving_var_});
}

void BatchNorm::initialize(std::mt19937_64&) {
  gamma_.value.fill(1.0f);
  beta_.value.fill(0.0f);
  moving_mean_.fill(0.0f);
  moving_var_.fill(1.0f);
}

Tensor BatchNorm::forward(const Tensor& x, Mode mode) {
  check_channels(name(), x.shape(), channels_);
  const auto rows = static_cast<Eigen::Index>(x.shape().pixels());
  ConstMatMap in(x.data(), rows, channels_);
  Tensor y(x.shape());
  MatMap out(y.data(), rows, channels_);
  RowVecMap gamma(gamma_.value.data(), channels_);
  RowVecMap beta(beta_.value.data(), channels_);

  Eigen::RowVectorXf mean;
  Eigen::RowVectorXf var;
  used_batch_stats_ = mode == Mode::train;
  if (used_batch_stats_) {
    mean = in.colwise().mean();
    var = (in.rowwise() - mean).array().square().colwise().mean().matrix();
    const float unbias = rows > 1 ? float(rows) / float(rows - 1) : 1.0f;
    RowVecMap mm(moving_mean_.data(), channels_);
    RowVecMap mv(moving_var_.data(), channels_);
    mm = momentum_ * mm + (1.0f - momentum_) * mean;
    mv = momentum_ * mv + (1.0f - momentum_) * (var * unbias);
  } else {
    mean = RowVecMap(moving_mean_.data(), channels_);
    var = RowVecMap(moving_var_.data(), channels_);
  }
  Eigen::RowVectorXf inv_std = (var.array() + epsilon_).rsqrt().matrix();
  if (mode == Mode::train) {
    normalized_ = Tensor(x.shape());
    MatMap xhat(normalized_.data(), rows, channels_);
    xhat = ((in.rowwise() - mean).array().rowwise() * inv_std.array()).matrix();
    out = (xhat.array().rowwise() * gamma.array()).matrix().rowwise() + beta;
    inv_std_.assign(inv_std.data(), inv_std.data() + channels_);
  } else {
    out = (((in.rowwise() - mean).array().rowwise() * (inv_std.array() * gamma.array()))
               .matrix()
               .rowwise() +
           beta);
  }
  return y;
}

Tensor BatchNorm::backward(const Tensor& grad_out) {
  if (normalized_.empty()) throw std::logic_error(name() + ": backward without training forward");
  const auto rows = static_cast<Eigen::Index>(grad_out.shape().pixels());
  ConstMatMap g(grad_out.data(), rows, channels_);
  ConstMatMap xhat(normalized_.data(), rows, channels_);
  Eigen::RowVectorXf dbeta = g.colwise().sum();
  Eigen::RowVectorXf dgamma = (g.array() * xhat.array()).colwise().sum().matrix();
  RowVecMap(gamma_.grad.data(), channels_) += dgamma;
  RowVecMap(beta_.grad.data(), channels_) += dbeta;

  Tensor dx(grad_out.shape());
  MatMap out(dx.data(), rows, channels_);
  Eigen::Map<const Eigen::RowVectorXf> inv_std(inv_std_.data(), channels_);
  RowVecMap gamma(gamma_.value.data(), channels_);
  const float m = static_cast<float>(rows);
  Eigen::RowVectorXf scale = (gamma.array() * inv_std.array() / m).matrix();
  // dx = gamma * inv_std / m * (m * g - sum(g) - xhat * sum(g * xhat))
  out = (((g.array() * m).rowwise() - dbeta.array()) - (xhat.array().rowwise() * dgamma.array()))
            .rowwise() *
        scale.array();
  return dx;
}

// ---------------------------------------------------------------- ReLU

Tensor ReLU::forward(const Tensor& x, Mode mode) {
  Tensor y(x.shape());
  const float* in = x.data();
  float* out = y.data();
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = in[i] > 0.0f ? in[i] : 0.0f;
  if (mode == Mode::train) output_ = y;
  return y;
}

Tensor ReLU::backward(const Tensor& grad_out) {
  if (!(grad_out.shape() == output_.shape())) {
    throw std::invalid_argument(name() + ": gradient shape " + to_string(grad_out.shape()));
  }
  Tensor dx(grad_out.shape());
  const float* y = output_.data();
  const float* g = grad_out.data();
  float* d = dx.data();
  for (std::size_t i = 0; i < dx.size(); ++i) d[i] = y[i] > 0.0f ? g[i] : 0.0f;
  return dx;
}

// ---------------------------------------------------------------- ZeroPad2D

Shape ZeroPad2D::output_shape(const Shape& in) const {
  return {in.n, in.h + 2 * pad_, in.w + 2 * pad_, in.c};
}

Tensor ZeroPad2D::forward(const Tensor& x, Mode) {
  in_shape_ = x.shape();
  Tensor y(output_shape(x.shape()));
  const Shape& s = x.shape();
  const std::size_t row = static_cast<std::size_t>(s.w) * s.c;
  for (int n = 0; n < s.n; ++n) {
    for (int r = 0; r < s.h; ++r) {
      std::memcpy(&y.at(n, r + pad_, pad_, 0), x.sample(n) + r * row, sizeof(float) * row);
    }
  }
  return y;
}

Tensor ZeroPad2D::backward(const Tensor& grad_out) {
  Tensor dx(in_shape_);
  const Shape& o = grad_out.shape();
  const std::size_t row = static_cast<std::size_t>(in_shape_.w) * in_shape_.c;
  for (int n = 0; n < in_shape_.n; ++n) {
    for (int r = 0; r < in_shape_.h; ++r) {
      const float* src = grad_out.sample(n) + (static_cast<std::size_t>(r + pad_) * o.w + pad_) * o.c;
      std::memcpy(dx.sample(n) + r * row, src, sizeof(float) * row);
    }
  }
  return dx;
}

// ---------------------------------------------------------------- MaxPool2D

Shape MaxPool2D::output_shape(const Shape& in) const {
  if (in.h < window_ || in.w < window_) {
    throw std::invalid_argument(name() + ": input " + to_string(in) + " smaller than window");
  }
  return {in.n, (in.h - window_) / stride_ + 1, (in.w - window_) / stride_ + 1, in.c};
}

Tensor MaxPool2D::forward(const Tensor& x, Mode mode) {
  const Shape& s = x.shape();
  Tensor y(output_shape(s));
  const Shape& o = y.shape();
  const bool keep = mode == Mode::train;
  if (keep) {
    in_shape_ = s;
    argmax_.assign(y.size(), 0);
  }
  std::size_t out_index = 0;
  for (int n = 0; n < o.n; ++n) {
    for (int oy = 0; oy < o.h; ++oy) {
      for (int ox = 0; ox < o.w; ++ox) {
        for (int c = 0; c < o.c; ++c, ++out_index) {
          float best = -std::numeric_limits<float>::infinity();
          std::size_t best_index = 0;
          for (int ky = 0; ky < window_; ++ky) {
            for (int kx = 0; kx < window_; ++kx) {
              const int iy = oy * stride_ + ky;
              const int ix = ox * stride_ + kx;
              const std::size_t idx = ((std::size_t(n) * s.h + iy) * s.w + ix) * s.c + c;
              if (x.data()[idx] > best) {
                best = x.data()[idx];
                best_index = idx;
              }
            }
          }
          y.data()[out_index] = best;
          if (keep) argmax_[out_index] = best_index;
        }
      }
    }
  }
  return y;
}

Tensor MaxPool2D::backward(const Tensor& grad_out) {
  Tensor dx(in_shape_);
  for (std::size_t i = 0; i < grad_out.size(); ++i) dx.data()[argmax_[i]] += grad_out.data()[i];
  return dx;
}

// ---------------------------------------------------------------- GlobalAvgPool

Tensor GlobalAvgPool::forward(const Tensor& x, Mode) {
  in_shape_ = x.shape();
  const Shape& s = x.shape();
  Tensor y(output_shape(s));
  const auto hw = static_cast<Eigen::Index>(s.h) * s.w;
  for (int n = 0; n < s.n; ++n) {
    ConstMatMap in(x.sample(n), hw, s.c);
    RowVecMap(y.sample(n), s.c) = in.colwise().mean();
  }
  return y;
}

Tensor GlobalAvgPool::backward(const Tensor& grad_out) {
  const Shape& s = in_shape_;
  Tensor dx(s);
  const auto hw = static_cast<Eigen::Index>(s.h) * s.w;
  for (int n = 0; n < s.n; ++n) {
    Eigen::Map<const Eigen::RowVectorXf> g(grad_out.sample(n), s.c);
    MatMap(dx.sample(n), hw, s.c).rowwise() = g / float(hw);
  }
  return dx;
}

// ---------------------------------------------------------------- Dense

Dense::Dense(std::string name, int inputs, int units)
    : Layer(std::move(name)), inputs_(inputs), units_(units) {
  if (inputs <= 0 || units <= 0) throw std::invalid_argument(this->name() + ": invalid size");
  kernel_.name = this->name() + "/kernel";
  kernel_.value = Tensor({1, 1, inputs, units});
  kernel_.grad = Tensor(kernel_.value.shape());
  bias_.name = this->name() + "/bias";
  bias_.value = Tensor({1, 1, 1, units});
  bias_.grad = Tensor(bias_.value.shape());
}

void Dense::collect_parameters(std::vector<Parameter*>& out) {
  out.push_back(&kernel_);
  out.push_back(&bias_);
}

void Dense::initialize(std::mt19937_64& rng) {
  const float limit = std::sqrt(6.0f / float(inputs_ + units_));
  std::uniform_real_distribution<float> dist(-limit, limit);
  for (float& v : kernel_.value.values()) v = dist(rng);
  bias_.value.fill(0.0f);
}

Tensor Dense::forward(const Tensor& x, Mode mode) {
  if (static_cast<int>(x.shape().sample_size()) != inputs_) {
    throw std::invalid_argument(name() + ": expected " + std::to_string(inputs_) +
                                " inputs per sample, got " + to_string(x.shape()));
  }
  Tensor y({x.shape().n, 1, 1, units_});
  ConstMatMap in(x.data(), x.shape().n, inputs_);
  MatMap out(y.data(), x.shape().n, units_);
  out.noalias() = in * ConstMatMap(kernel_.value.data(), inputs_, units_);
  out.rowwise() += RowVecMap(bias_.value.data(), units_);
  if (mode == Mode::train) input_ = x;
  return y;
}

Tensor Dense::backward(const Tensor& grad_out) {
  const int n = input_.shape().n;
  ConstMatMap g(grad_out.data(), n, units_);
  ConstMatMap in(input_.data(), n, inputs_);
  MatMap(kernel_.grad.data(), inputs_, units_).noalias() += in.transpose() * g;
  RowVecMap(bias_.grad.data(), units_) += g.colwise().sum();
  Tensor dx(input_.shape());
  MatMap(dx.data(), n, inputs_).noalias() =
      g * ConstMatMap(kernel_.value.data(), inputs_, units_).transpose();
  return dx;
}

// ---------------------------------------------------------------- Sequential

Tensor Sequential::forward(const Tensor& x, Mode mode) {
  Tensor out = x;
  for (auto& layer : layers_) out = layer->forward(out, mode);
  return out;
}

Tensor Sequential::backward(const Tensor& grad_out) {
  Tensor g = grad_out;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
  return g;
}

Shape Sequential::output_shape(const Shape& in) const {
  Shape s = in;
  for (const auto& layer : layers_) s = layer->output_shape(s);
  return s;
}

void Sequential::collect_parameters(std::vector<Parameter*>& out) {
  for (auto& layer : layers_) layer->collect_parameters(out);
}

void Sequential::collect_buffers(std::vector<Buffer>& out) {
  for (auto& layer : layers_) layer->collect_buffers(out);
}

void Sequential::initialize(std::mt19937_64& rng) {
  for (auto& layer : layers_) layer->initialize(rng);
}

// ---------------------------------------------------------------- helpers

std::vector<Parameter*> parameters_of(Layer& layer) {
  std::vector<Parameter*> out;
  layer.collect_parameters(out);
  return out;
}

std::size_t trainable_count(const std::vector<Parameter*>& params) {
  std::size_t total = 0;
  for (const Parameter* p : params) {
    if (p->trainable) total += p->value.size();
  }
  return total;
}

void zero_grad(const std::vector<Parameter*>& params) {
  for (Parameter* p : params) p->grad.fill(0.0f);
}

}  // namespace vmmc::nn
