#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace vmmc::nn {

// Batch of feature maps in NHWC order. Dense activations use h = w = 1.
struct Shape {
  int n = 0;
  int h = 0;
  int w = 0;
  int c = 0;

  std::size_t size() const { return static_cast<std::size_t>(n) * h * w * c; }
  std::size_t sample_size() const { return static_cast<std::size_t>(h) * w * c; }
  std::size_t pixels() const { return static_cast<std::size_t>(n) * h * w; }
  bool operator==(const Shape&) const = default;
};

std::string to_string(const Shape& s);

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::span<float> values() { return data_; }
  std::span<const float> values() const { return data_; }

  float* sample(int n) { return data_.data() + n * shape_.sample_size(); }
  const float* sample(int n) const { return data_.data() + n * shape_.sample_size(); }

  float& at(int n, int y, int x, int c) { return data_[index(n, y, x, c)]; }
  float at(int n, int y, int x, int c) const { return data_[index(n, y, x, c)]; }

  void fill(float v);
  // Same element count, new geometry.
  void reshape(Shape shape);
  Tensor& operator+=(const Tensor& other);

 private:
  std::size_t index(int n, int y, int x, int c) const {
    return ((static_cast<std::size_t>(n) * shape_.h + y) * shape_.w + x) * shape_.c + c;
  }

  Shape shape_{};
  std::vector<float> data_;
};

// Copies samples [first, first + count) into a new tensor.
Tensor slice_batch(const Tensor& t, int first, int count);

}  // namespace vmmc::nn
