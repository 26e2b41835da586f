#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cstddef>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "modguide/errors.hpp"

namespace modguide {

using Index = Eigen::Index;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;
template <typename Scalar>
using MatrixMap = Eigen::Map<Matrix<Scalar>>;
template <typename Scalar>
using ConstMatrixMap = Eigen::Map<const Matrix<Scalar>>;

using Shape = std::vector<Index>;

/// Heap storage aligned for the widest vector unit. Eigen's kernels choose
/// their peeling by address, so unaligned storage would make results depend
/// on where the allocator happened to place a buffer.
///
/// Growing a buffer without a fill value leaves the new elements
/// uninitialized; kernels that overwrite every element use that to skip a
/// redundant zero pass.
template <typename T>
struct BufferAllocator : Eigen::aligned_allocator<T> {
  using value_type = T;
  template <typename U>
  struct rebind {
    using other = BufferAllocator<U>;
  };
  BufferAllocator() = default;
  template <typename U>
  BufferAllocator(const BufferAllocator<U>&) noexcept {}

  template <typename U>
  void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>) {
    ::new (static_cast<void*>(p)) U;
  }
  template <typename U, typename... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};

template <typename T, typename U>
bool operator==(const BufferAllocator<T>&, const BufferAllocator<U>&) {
  return true;
}

template <typename Scalar>
using Buffer = std::vector<Scalar, BufferAllocator<Scalar>>;

/// Tag for constructing a tensor whose contents the caller will overwrite.
struct Uninitialized {};
inline constexpr Uninitialized uninitialized{};

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Dense row-major n-dimensional array.
///
/// Every tensor also exposes a 2-D view in which all leading axes are
/// flattened into rows and the last axis is the column axis. Model math is
/// written against that view, so a sequence [n x d] and an image [3 x 16 x 16]
/// share the same kernels.
template <typename Scalar>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(static_cast<std::size_t>(shape_size(shape_)), Scalar(0));
  }

  Tensor(Shape shape, Uninitialized) : shape_(std::move(shape)) {
    validate_shape();
    data_.resize(static_cast<std::size_t>(shape_size(shape_)));
  }

  Tensor(Shape shape, const std::vector<Scalar>& data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    validate_shape();
    if (static_cast<Index>(data_.size()) != shape_size(shape_)) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_string(shape_));
    }
  }

  template <typename Derived>
  static Tensor from_matrix(const Eigen::MatrixBase<Derived>& m) {
    Tensor t({m.rows(), m.cols()}, uninitialized);
    t.matrix() = m;
    return t;
  }

  template <typename Derived>
  static Tensor from_matrix(Shape shape, const Eigen::MatrixBase<Derived>& m) {
    Tensor t(std::move(shape), uninitialized);
    if (t.size() != m.size()) {
      throw DimensionError("matrix of " + std::to_string(m.size()) + " values cannot fill " +
                           shape_string(t.shape()));
    }
    t.matrix() = m.derived().template reshaped<Eigen::RowMajor>(t.rows(), t.cols());
    return t;
  }

  static Tensor scalar(Scalar v) { return Tensor({1}, {v}); }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index size() const { return static_cast<Index>(data_.size()); }
  Index dim(Index axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  Index cols() const { return shape_.empty() ? 0 : shape_.back(); }
  Index rows() const { return cols() == 0 ? 0 : size() / cols(); }

  MatrixMap<Scalar> matrix() { return MatrixMap<Scalar>(data_.data(), rows(), cols()); }
  ConstMatrixMap<Scalar> matrix() const { return ConstMatrixMap<Scalar>(data_.data(), rows(), cols()); }

  std::span<Scalar> data() { return data_; }
  std::span<const Scalar> data() const { return data_; }
  Scalar& operator[](Index i) { return data_[static_cast<std::size_t>(i)]; }
  Scalar operator[](Index i) const { return data_[static_cast<std::size_t>(i)]; }

  /// Same storage, new shape of equal size.
  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != size()) {
      throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    Tensor out = *this;
    out.shape_ = std::move(shape);
    out.validate_shape();
    out.grad_.reset();
    out.requires_grad_ = false;
    return out;
  }

  /// x * 0 is 0 for finite x and NaN otherwise, so the sum is a vectorizable
  /// finiteness test.
  bool all_finite() const {
    return (ConstMatrixMap<Scalar>(data_.data(), 1, size()).array() * Scalar(0)).sum() == Scalar(0);
  }

  template <typename Other>
  Tensor<Other> cast() const {
    Tensor<Other> out(shape_);
    std::transform(data_.begin(), data_.end(), out.data().begin(), [](Scalar v) { return static_cast<Other>(v); });
    return out;
  }

  // Optional gradient storage, used by parameters.
  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool on) {
    requires_grad_ = on;
    if (!on) grad_.reset();
  }
  bool has_grad() const { return grad_.has_value(); }
  Buffer<Scalar>& grad() {
    if (!grad_) grad_.emplace(data_.size(), Scalar(0));
    return *grad_;
  }
  const std::optional<Buffer<Scalar>>& grad_storage() const { return grad_; }
  void zero_grad() {
    if (grad_) std::fill(grad_->begin(), grad_->end(), Scalar(0));
  }
  MatrixMap<Scalar> grad_matrix() { return MatrixMap<Scalar>(grad().data(), rows(), cols()); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void validate_shape() const {
    if (shape_.empty()) throw DimensionError("tensor shape must have at least one axis");
    for (Index d : shape_) {
      if (d <= 0) throw DimensionError("tensor shape " + shape_string(shape_) + " has a non-positive axis");
    }
  }

  Shape shape_;
  Buffer<Scalar> data_;
  std::optional<Buffer<Scalar>> grad_;
  bool requires_grad_ = false;
};

/// Byte-exact equality of two tensors (distinguishes signed zeros and NaN payloads).
template <typename Scalar>
bool bit_identical(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.shape() != b.shape()) return false;
  const auto da = a.data();
  const auto db = b.data();
  return std::memcmp(da.data(), db.data(), da.size_bytes()) == 0;
}

}  // namespace modguide
