#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace deepclust {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream oss;
  oss << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) oss << ',';
    oss << shape[i];
  }
  oss << ']';
  return oss.str();
}

// Dense row-major array of doubles.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
    check_dims();
  }

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_dims();
    if (shape_size(shape_) != data_.size()) {
      throw std::invalid_argument("Tensor: shape " + shape_str(shape_) +
                                  " does not match " +
                                  std::to_string(data_.size()) + " values");
    }
  }

  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> data) {
    return Tensor({rows, cols}, std::move(data));
  }

  static Tensor like(const Tensor& other, double fill = 0.0) {
    return Tensor(other.shape_, fill);
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // Number of entries per leading-axis slice.
  std::size_t row_size() const {
    return shape_.empty() || shape_[0] == 0 ? 0 : data_.size() / shape_[0];
  }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& operator()(std::size_t r, std::size_t c) {
    return data_[r * shape_[1] + c];
  }
  double operator()(std::size_t r, std::size_t c) const {
    return data_[r * shape_[1] + c];
  }

  std::span<double> row(std::size_t r) {
    const std::size_t w = row_size();
    return {data_.data() + r * w, w};
  }
  std::span<const double> row(std::size_t r) const {
    const std::size_t w = row_size();
    return {data_.data() + r * w, w};
  }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != data_.size()) {
      throw std::invalid_argument("reshape " + shape_str(shape_) + " -> " +
                                  shape_str(shape) + ": size mismatch");
    }
    return Tensor(std::move(shape), data_);
  }

  // Rows of the leading axis, in the given order.
  Tensor gather_rows(std::span<const std::size_t> rows) const {
    Shape s = shape_;
    s[0] = rows.size();
    Tensor out(s);
    const std::size_t w = row_size();
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i] >= shape_[0]) throw std::out_of_range("gather_rows: index out of range");
      std::copy_n(data_.begin() + rows[i] * w, w, out.data_.begin() + i * w);
    }
    return out;
  }

  // Flattens all trailing axes: [n, ...] -> [n, prod(...)].
  Tensor flattened() const { return reshaped({shape_.at(0), row_size()}); }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor& operator+=(const Tensor& o) {
    require_same_shape(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  Tensor& operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
  }

  // this += s * o
  void add_scaled(const Tensor& o, double s) {
    require_same_shape(o, "add_scaled");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += s * o.data_[i];
  }

  bool all_finite() const {
    for (double v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  double sum() const {
    double s = 0.0;
    for (double v : data_) s += v;
    return s;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

  void require_same_shape(const Tensor& o, const char* what) const {
    if (o.shape_ != shape_) {
      throw std::invalid_argument(std::string(what) + ": shape " + shape_str(shape_) +
                                  " vs " + shape_str(o.shape_));
    }
  }

 private:
  void check_dims() const {
    for (std::size_t d : shape_) {
      if (d == 0) throw std::invalid_argument("Tensor: zero-sized dimension in " + shape_str(shape_));
    }
  }

  Shape shape_;
  std::vector<double> data_;
};

inline Tensor operator*(Tensor t, double s) { return t *= s; }

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

// Concatenates along the leading axis; trailing shapes must agree.
inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
  if (a.rank() != b.rank() ||
      !std::equal(a.shape().begin() + 1, a.shape().end(), b.shape().begin() + 1)) {
    throw std::invalid_argument("concat_rows: " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  Shape s = a.shape();
  s[0] += b.dim(0);
  std::vector<double> v(a.values());
  v.insert(v.end(), b.values().begin(), b.values().end());
  return Tensor(std::move(s), std::move(v));
}

// Splits [a + b, ...] into its first `first_rows` rows and the remainder.
inline std::pair<Tensor, Tensor> split_rows(const Tensor& t, std::size_t first_rows) {
  if (first_rows == 0 || first_rows >= t.dim(0)) {
    throw std::invalid_argument("split_rows: bad split point");
  }
  const std::size_t w = t.row_size();
  Shape sa = t.shape(), sb = t.shape();
  sa[0] = first_rows;
  sb[0] = t.dim(0) - first_rows;
  std::vector<double> va(t.values().begin(), t.values().begin() + first_rows * w);
  std::vector<double> vb(t.values().begin() + first_rows * w, t.values().end());
  return {Tensor(std::move(sa), std::move(va)), Tensor(std::move(sb), std::move(vb))};
}

}  // namespace deepclust
