#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace se2 {

/// Inconsistent shapes, axes or layer wiring.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid dataset contents (bad labels, unreadable files).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite values or diverged computations.
class DiagnosticError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dense row-major tensor, channel innermost. Rank and extents are dynamic;
/// every layer documents its axis convention ([B,H,W,C] for planar maps,
/// [B,N,H,W,C] for maps with an orientation axis).
template <class T>
class TensorT {
 public:
  TensorT() = default;

  explicit TensorT(std::vector<int> shape) : shape_(std::move(shape)) {
    std::size_t total = 1;
    for (int e : shape_) {
      if (e < 1) throw ConfigError("tensor extent must be >= 1, got " + std::to_string(e));
      total *= static_cast<std::size_t>(e);
    }
    data_.assign(total, T(0));
  }

  TensorT(std::vector<int> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    std::size_t total = 1;
    for (int e : shape_) total *= static_cast<std::size_t>(e);
    if (total != data_.size())
      throw ConfigError("tensor data length " + std::to_string(data_.size()) +
                        " does not match shape product " + std::to_string(total));
  }

  static TensorT zeros(std::vector<int> shape) { return TensorT(std::move(shape)); }

  static TensorT full(std::vector<int> shape, T v) {
    TensorT t(std::move(shape));
    t.fill(v);
    return t;
  }

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::size_t size() const { return data_.size(); }

  /// Extent along `axis`; negative axes count from the end.
  int dim(int axis) const {
    const int r = rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r)
      throw ConfigError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(r));
    return shape_[static_cast<std::size_t>(axis)];
  }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  template <class... I>
  T& operator()(I... idx) {
    return data_[offset(idx...)];
  }
  template <class... I>
  const T& operator()(I... idx) const {
    return data_[offset(idx...)];
  }

  template <class... I>
  std::size_t offset(I... idx) const {
    static_assert((std::is_convertible_v<I, int> && ...));
    const int ids[] = {static_cast<int>(idx)...};
    const std::size_t n = sizeof...(idx);
    std::size_t off = 0;
    for (std::size_t a = 0; a < n; ++a) off = off * static_cast<std::size_t>(shape_[a]) + static_cast<std::size_t>(ids[a]);
    // Trailing axes left unindexed address the start of that block.
    for (std::size_t a = n; a < shape_.size(); ++a) off *= static_cast<std::size_t>(shape_[a]);
    return off;
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const TensorT& other) const { return shape_ == other.shape_; }

  bool all_finite() const {
    for (T v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <class U>
  TensorT<U> cast() const {
    TensorT<U> out(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

  std::string shape_str() const {
    std::string s = "[";
    for (std::size_t i = 0; i < shape_.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape_[i]);
    }
    return s + "]";
  }

 private:
  std::vector<int> shape_;
  std::vector<T> data_;
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

/// A trainable value and its accumulated gradient.
template <class T>
struct GradPairT {
  TensorT<T> value;
  TensorT<T> grad;

  GradPairT() = default;
  explicit GradPairT(std::vector<int> shape) : value(shape), grad(std::move(shape)) {}
  explicit GradPairT(TensorT<T> v) : value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad.fill(T(0)); }
};

using GradPair = GradPairT<float>;
using GradPairD = GradPairT<double>;

#ifndef NDEBUG
template <class T>
inline void debug_check_finite(const TensorT<T>& t, const char* where) {
  if (!t.all_finite()) throw DiagnosticError(std::string("non-finite values in ") + where);
}
#else
template <class T>
inline void debug_check_finite(const TensorT<T>&, const char*) {}
#endif

}  // namespace se2
