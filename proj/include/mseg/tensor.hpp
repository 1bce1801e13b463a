#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "mseg/errors.hpp"

namespace mseg {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

inline Index shape_size(const Shape& s) {
  Index n = 1;
  for (Index e : s) n *= e;
  return n;
}

template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using PlaneMap = Eigen::Map<RowMatrix<Scalar>>;

template <typename Scalar>
using ConstPlaneMap = Eigen::Map<const RowMatrix<Scalar>>;

/// Dense row-major n-d array with an optional gradient slot.
/// Image batches use (N, C, H, W) order.
template <typename Scalar>
class Tensor {
 public:
  using scalar_type = Scalar;

  Tensor() = default;
  explicit Tensor(Shape shape, Scalar fill = Scalar(0))
      : shape_(std::move(shape)), data_(VectorX<Scalar>::Constant(shape_size(shape_), fill)) {
    for (Index e : shape_)
      if (e < 0) throw ContractViolation("negative extent in shape " + shape_str(shape_));
  }
  Tensor(std::initializer_list<Index> shape, Scalar fill = Scalar(0)) : Tensor(Shape(shape), fill) {}
  Tensor(Shape shape, VectorX<Scalar> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size())
      throw ContractViolation("tensor data length " + std::to_string(data_.size()) +
                              " does not match shape " + shape_str(shape_));
  }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index i) const { return shape_[static_cast<std::size_t>(i)]; }
  Index size() const { return data_.size(); }

  // Image-batch accessors; only meaningful for rank-4 tensors.
  Index batch() const { return shape_[0]; }
  Index channels() const { return shape_[1]; }
  Index height() const { return shape_[2]; }
  Index width() const { return shape_[3]; }

  VectorX<Scalar>& data() { return data_; }
  const VectorX<Scalar>& data() const { return data_; }
  Scalar* ptr() { return data_.data(); }
  const Scalar* ptr() const { return data_.data(); }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  Scalar& at(Index n, Index c, Index y, Index x) {
    return data_[((n * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
  }
  Scalar at(Index n, Index c, Index y, Index x) const {
    return data_[((n * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
  }

  /// (H, W) view of one channel plane of a rank-4 tensor.
  PlaneMap<Scalar> plane(Index n, Index c) {
    return PlaneMap<Scalar>(data_.data() + (n * shape_[1] + c) * shape_[2] * shape_[3], shape_[2],
                            shape_[3]);
  }
  ConstPlaneMap<Scalar> plane(Index n, Index c) const {
    return ConstPlaneMap<Scalar>(data_.data() + (n * shape_[1] + c) * shape_[2] * shape_[3],
                                 shape_[2], shape_[3]);
  }

  /// (C, H*W) view of one batch item.
  PlaneMap<Scalar> item(Index n) {
    const Index hw = shape_[2] * shape_[3];
    return PlaneMap<Scalar>(data_.data() + n * shape_[1] * hw, shape_[1], hw);
  }
  ConstPlaneMap<Scalar> item(Index n) const {
    const Index hw = shape_[2] * shape_[3];
    return ConstPlaneMap<Scalar>(data_.data() + n * shape_[1] * hw, shape_[1], hw);
  }

  bool has_grad() const { return grad_.has_value(); }
  VectorX<Scalar>& grad() {
    if (!grad_) grad_ = VectorX<Scalar>::Zero(data_.size());
    return *grad_;
  }
  const VectorX<Scalar>& grad() const {
    if (!grad_) throw ContractViolation("tensor has no gradient buffer");
    return *grad_;
  }
  void zero_grad() {
    if (grad_) grad_->setZero();
  }
  void drop_grad() { grad_.reset(); }

  bool all_finite() const { return data_.allFinite(); }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>().eval());
  }

 private:
  Shape shape_;
  VectorX<Scalar> data_;
  std::optional<VectorX<Scalar>> grad_;
};

template <typename Scalar>
void require_rank4(const Tensor<Scalar>& t, const char* what) {
  if (t.rank() != 4)
    throw ContractViolation(std::string(what) + ": expected rank-4 (N,C,H,W) tensor, got " +
                            shape_str(t.shape()));
}

template <typename Scalar>
void require_same_shape(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* what) {
  if (a.shape() != b.shape())
    throw ContractViolation(std::string(what) + ": shape mismatch " + shape_str(a.shape()) +
                            " vs " + shape_str(b.shape()));
}

/// Throws NumericError when any value is NaN/Inf.
template <typename Scalar>
void check_finite(const Tensor<Scalar>& t, const std::string& context) {
  if (!t.all_finite()) throw NumericError("non-finite values in " + context);
}

}  // namespace mseg
