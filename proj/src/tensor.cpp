#include "dra/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

#include "dra/errors.hpp"

namespace dra {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ArgumentError("negative dimension in shape " + shape_string(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != shape_size(shape_)) {
    throw ArgumentError("tensor data of length " + std::to_string(data_.size()) +
                        " does not match shape " + shape_string(shape_));
  }
}

int Tensor::dim(int axis) const {
  if (axis < 0) axis += rank();
  if (axis < 0 || axis >= rank()) throw ArgumentError("axis out of range for shape " + shape_string(shape_));
  return shape_[axis];
}

MatrixMap Tensor::matrix() {
  const int r = shape_.empty() ? 1 : shape_[0];
  const int c = r == 0 ? 0 : static_cast<int>(data_.size() / r);
  return MatrixMap(data_.data(), r, c);
}

ConstMatrixMap Tensor::matrix() const {
  const int r = shape_.empty() ? 1 : shape_[0];
  const int c = r == 0 ? 0 : static_cast<int>(data_.size() / r);
  return ConstMatrixMap(data_.data(), r, c);
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != data_.size()) {
    throw ArgumentError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

Tensor Tensor::rows(int begin, int end) const {
  if (rank() == 0 || begin < 0 || end > shape_[0] || begin > end) {
    throw ArgumentError("row range out of bounds for shape " + shape_string(shape_));
  }
  const std::size_t stride = shape_[0] == 0 ? 0 : data_.size() / shape_[0];
  Shape s = shape_;
  s[0] = end - begin;
  return Tensor(std::move(s), std::vector<double>(data_.begin() + begin * stride, data_.begin() + end * stride));
}

Tensor Tensor::gather_rows(std::span<const int> indices) const {
  const std::size_t stride = shape_[0] == 0 ? 0 : data_.size() / shape_[0];
  Shape s = shape_;
  s[0] = static_cast<int>(indices.size());
  Tensor out(s);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const int r = indices[i];
    if (r < 0 || r >= shape_[0]) throw ArgumentError("gather index out of range");
    std::copy_n(data_.begin() + r * stride, stride, out.data_.begin() + i * stride);
  }
  return out;
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

bool Tensor::identical(const Tensor& other) const {
  return shape_ == other.shape_ &&
         (data_.empty() || std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(double)) == 0);
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ArgumentError("concat_rows of nothing");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  int n = 0;
  for (const auto& p : parts) {
    if (Shape(p.shape().begin() + 1, p.shape().end()) != tail) {
      throw ArgumentError("concat_rows: trailing shape mismatch " + shape_string(p.shape()));
    }
    n += p.dim(0);
  }
  Shape s = parts[0].shape();
  s[0] = n;
  std::vector<double> data;
  data.reserve(shape_size(s));
  for (const auto& p : parts) data.insert(data.end(), p.storage().begin(), p.storage().end());
  return Tensor(std::move(s), std::move(data));
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0)) {
    throw ArgumentError("concat_cols needs rank-2 tensors with equal rows");
  }
  const int n = a.dim(0), da = a.dim(1), db = b.dim(1);
  Tensor out({n, da + db});
  for (int i = 0; i < n; ++i) {
    std::copy_n(a.data() + i * da, da, out.data() + i * (da + db));
    std::copy_n(b.data() + i * db, db, out.data() + i * (da + db) + da);
  }
  return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ArgumentError("max_abs_diff shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace dra
