#pragma once

#include <cassert>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "tsq/errors.hpp"

namespace tsq {

// Dense row-major tensor. Two scalar precisions share this interface:
// Tensor<float> for training speed, Tensor<double> for oracle and gradient
// work. No broadcasting; shape handling is always explicit. Reshape never
// moves elements, it only rewrites the dims of the same contiguous buffer.
template <class T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape)
      : shape_(std::move(shape)), data_(checked_size(shape_), T(0)) {}

  Tensor(std::vector<std::size_t> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != checked_size(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape volume " +
                       std::to_string(checked_size(shape_)));
    }
  }

  static Tensor full(std::vector<std::size_t> shape, T value) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = value;
    return t;
  }

  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.data_[i * n + i] = T(1);
    return t;
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t axis) const {
    if (axis >= shape_.size()) throw ShapeError("axis out of range");
    return shape_[axis];
  }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& operator()(std::size_t i, std::size_t j) {
    assert(rank() == 2);
    return data_[i * shape_[1] + j];
  }
  const T& operator()(std::size_t i, std::size_t j) const {
    assert(rank() == 2);
    return data_[i * shape_[1] + j];
  }
  T& operator()(std::size_t i, std::size_t j, std::size_t k) {
    assert(rank() == 3);
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  const T& operator()(std::size_t i, std::size_t j, std::size_t k) const {
    assert(rank() == 3);
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  T& operator()(std::size_t i, std::size_t j, std::size_t k, std::size_t l) {
    assert(rank() == 4);
    return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
  }
  const T& operator()(std::size_t i, std::size_t j, std::size_t k,
                      std::size_t l) const {
    assert(rank() == 4);
    return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
  }

  Tensor reshape(std::vector<std::size_t> new_shape) const& {
    Tensor t;
    t.shape_ = std::move(new_shape);
    if (checked_size(t.shape_) != data_.size()) {
      throw ShapeError("reshape volume mismatch");
    }
    t.data_ = data_;
    return t;
  }

  Tensor reshape(std::vector<std::size_t> new_shape) && {
    Tensor t;
    t.shape_ = std::move(new_shape);
    if (checked_size(t.shape_) != data_.size()) {
      throw ShapeError("reshape volume mismatch");
    }
    t.data_ = std::move(data_);
    return t;
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

 private:
  static std::size_t checked_size(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) {
      if (d == 0) throw ShapeError("zero-sized dimension");
      n *= d;
    }
    return n;
  }

  std::vector<std::size_t> shape_;
  std::vector<T> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

// ---------------------------------------------------------------------------
// Linear-algebra kernels
// ---------------------------------------------------------------------------

// Standard matrix product of two rank-2 tensors, m-k times k-n.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// Rank-2 transpose.
template <class T>
Tensor<T> transpose(const Tensor<T>& a);

// Cached lower-triangular Cholesky factor of an SPD matrix.
template <class T>
struct CholeskyFactor {
  Tensor<T> l;  // d x d, lower triangle populated
  std::size_t dim() const { return l.rank() == 2 ? l.dim(0) : 0; }
};

// Factor an SPD matrix; a non-positive pivot raises SingularError with the
// index of the failing pivot.
template <class T>
CholeskyFactor<T> cholesky(const Tensor<T>& m);

// Solve L L^T s = rhs for a d x n right-hand side, one column at a time.
template <class T>
Tensor<T> cholesky_solve(const CholeskyFactor<T>& f, const Tensor<T>& rhs);

// One-shot SPD solve; never materializes an inverse.
template <class T>
Tensor<T> solve_spd(const Tensor<T>& m, const Tensor<T>& rhs);

// Arithmetic mean over the given axes; the output shape drops those axes.
template <class T>
Tensor<T> reduce_mean(const Tensor<T>& t, const std::vector<std::size_t>& axes);

// ---------------------------------------------------------------------------
// TSQ1 binary tensor files
//
// magic "TSQ1" | u32 rank | rank x u32 dims | u8 precision (4 or 8) |
// little-endian scalar payload. Round trips are bit-exact when the in-memory
// precision matches the stored tag.
// ---------------------------------------------------------------------------

template <class T>
void write_tsq1(const std::string& path, const Tensor<T>& t);

template <class T>
Tensor<T> read_tsq1(const std::string& path);

// Serialize to / parse from an in-memory buffer (checkpoints embed these).
template <class T>
void append_tsq1(std::vector<std::uint8_t>& out, const Tensor<T>& t);

template <class T>
Tensor<T> parse_tsq1(const std::uint8_t* data, std::size_t size,
                     std::size_t& offset);

}  // namespace tsq
