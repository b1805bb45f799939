#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <filesystem>
#include <initializer_list>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace crowdtree {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& dims);
std::size_t shape_numel(const Shape& dims);

/// Dense row-major n-d array. Storage is an Eigen column vector so that
/// any contiguous slab can be viewed as an Eigen matrix without copying.
template <typename Scalar>
class BasicTensor {
 public:
  using Storage = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using MatrixMap = Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  using ConstMatrixMap =
      Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

  BasicTensor() = default;

  explicit BasicTensor(Shape dims, Scalar fill = Scalar(0)) : dims_(std::move(dims)) {
    check_dims(dims_);
    data_ = Storage::Constant(static_cast<Eigen::Index>(shape_numel(dims_)), fill);
  }

  BasicTensor(Shape dims, std::span<const Scalar> values) : dims_(std::move(dims)) {
    check_dims(dims_);
    if (values.size() != shape_numel(dims_)) {
      throw std::invalid_argument("tensor: " + std::to_string(values.size()) +
                                  " values for shape " + shape_string(dims_));
    }
    data_ = Eigen::Map<const Storage>(values.data(), static_cast<Eigen::Index>(values.size()));
  }

  BasicTensor(Shape dims, std::initializer_list<Scalar> values)
      : BasicTensor(std::move(dims), std::span<const Scalar>(values.begin(), values.size())) {}

  static BasicTensor zeros_like(const BasicTensor& other) { return BasicTensor(other.dims_); }

  const Shape& dims() const { return dims_; }
  std::size_t ndim() const { return dims_.size(); }
  std::size_t dim(std::size_t i) const { return dims_.at(i); }
  std::size_t size() const { return static_cast<std::size_t>(data_.size()); }
  bool empty() const { return data_.size() == 0; }

  Storage& vec() { return data_; }
  const Storage& vec() const { return data_; }
  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  std::span<Scalar> values() { return {data_.data(), size()}; }
  std::span<const Scalar> values() const { return {data_.data(), size()}; }

  Scalar& operator[](std::size_t i) { return data_[static_cast<Eigen::Index>(i)]; }
  Scalar operator[](std::size_t i) const { return data_[static_cast<Eigen::Index>(i)]; }

  /// Row-major element access for 2-d and 4-d tensors.
  Scalar& at(std::size_t r, std::size_t c) { return data_[index2(r, c)]; }
  Scalar at(std::size_t r, std::size_t c) const { return data_[index2(r, c)]; }
  Scalar& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) {
    return data_[index4(n, c, y, x)];
  }
  Scalar at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return data_[index4(n, c, y, x)];
  }

  /// View of the tensor as rows x (numel / rows), row-major.
  MatrixMap matrix(std::size_t rows) {
    return MatrixMap(data_.data(), static_cast<Eigen::Index>(rows),
                     static_cast<Eigen::Index>(rows == 0 ? 0 : size() / rows));
  }
  ConstMatrixMap matrix(std::size_t rows) const {
    return ConstMatrixMap(data_.data(), static_cast<Eigen::Index>(rows),
                          static_cast<Eigen::Index>(rows == 0 ? 0 : size() / rows));
  }

  Scalar sum() const { return data_.sum(); }
  bool all_finite() const { return data_.allFinite(); }

  BasicTensor reshaped(Shape dims) const {
    if (shape_numel(dims) != size()) {
      throw std::invalid_argument("reshape: " + shape_string(dims_) + " -> " + shape_string(dims));
    }
    BasicTensor out = *this;
    out.dims_ = std::move(dims);
    return out;
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.dims_ == b.dims_ && a.data_ == b.data_;
  }

 private:
  static void check_dims(const Shape& dims) {
    for (std::size_t d : dims) {
      if (d == 0) throw std::invalid_argument("tensor: zero extent in " + shape_string(dims));
    }
  }
  Eigen::Index index2(std::size_t r, std::size_t c) const {
    return static_cast<Eigen::Index>(r * dims_[1] + c);
  }
  Eigen::Index index4(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return static_cast<Eigen::Index>(((n * dims_[1] + c) * dims_[2] + y) * dims_[3] + x);
  }

  Shape dims_;
  Storage data_;
};

using Tensor = BasicTensor<double>;

// Archive format: "TGE1", u8 dtype (1 = f64), u8 ndim, ndim x u32 LE extents,
// row-major LE payload.
void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);
void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

}  // namespace crowdtree
