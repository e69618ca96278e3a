#include "vmmc/nn/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

namespace vmmc::nn {

std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << "(" << s.n << "," << s.h << "," << s.w << "," << s.c << ")";
  return os.str();
}

Tensor::Tensor(Shape shape, float fill) : shape_(shape) {
  if (shape.n < 0 || shape.h < 0 || shape.w < 0 || shape.c < 0) {
    throw std::invalid_argument("negative tensor dimension " + to_string(shape));
  }
  data_.assign(shape.size(), fill);
}

void Tensor::fill(float v) { std::fill(data_.begin(), data_.end(), v); }

void Tensor::reshape(Shape shape) {
  if (shape.size() != data_.size()) {
    throw std::invalid_argument("reshape " + to_string(shape_) + " -> " + to_string(shape));
  }
  shape_ = shape;
}

Tensor& Tensor::operator+=(const Tensor& other) {
  if (!(other.shape_ == shape_)) {
    throw std::invalid_argument("tensor add shape mismatch " + to_string(shape_) + " vs " +
                                to_string(other.shape_));
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Tensor slice_batch(const Tensor& t, int first, int count) {
  Shape s = t.shape();
  if (first < 0 || count < 0 || first + count > s.n) throw std::out_of_range("slice_batch");
  s.n = count;
  Tensor out(s);
  std::copy_n(t.sample(first), s.size(), out.data());
  return out;
}

}  // namespace vmmc::nn
