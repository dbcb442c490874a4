#pragma once

#include <Eigen/Core>
#include <initializer_list>
#include <memory>
#include <optional>
#include <string>

#include "mobilesal/error.hpp"
#include "mobilesal/rng.hpp"

namespace mobilesal {

// Extents of a dense 4-D feature map: batch, channels, height, width.
struct TensorShape {
  Eigen::Index n = 0, c = 0, h = 0, w = 0;

  Eigen::Index count() const { return n * c * h * w; }
  Eigen::Index plane() const { return h * w; }

  bool operator==(const TensorShape&) const = default;

  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
           std::to_string(h) + "," + std::to_string(w) + ")";
  }
};

// Dense (n,c,h,w) tensor in row-major order with an optional gradient slot.
//
// A Tensor is a value-semantic handle: copies share the underlying data and
// gradient storage, so gradients accumulated through any copy are visible to
// every other. Data is filled once by the producing operation and treated as
// read-only afterwards.
template <typename Scalar>
class Tensor {
 public:
  using Buffer = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using Map = Eigen::Map<Buffer>;
  using ConstMap = Eigen::Map<const Buffer>;

  Tensor() = default;

  explicit Tensor(TensorShape s) : shape_(s) {
    if (s.n < 1 || s.c < 1 || s.h < 1 || s.w < 1) {
      throw ShapeError("tensor extents must all be >= 1, got " + s.str());
    }
    data_ = std::make_shared<Buffer>(Buffer::Zero(s.count()));
    grad_ = std::make_shared<std::optional<Buffer>>();
  }

  static Tensor full(TensorShape s, Scalar v) {
    Tensor t(s);
    t.array() = v;
    return t;
  }

  static Tensor scalar(Scalar v) { return full({1, 1, 1, 1}, v); }

  static Tensor from(TensorShape s, std::initializer_list<Scalar> vals) {
    Tensor t(s);
    if (static_cast<Eigen::Index>(vals.size()) != s.count()) {
      throw ShapeError("initializer size does not match shape " + s.str());
    }
    Eigen::Index i = 0;
    for (Scalar v : vals) t.data()[i++] = v;
    return t;
  }

  static Tensor randn(TensorShape s, Pcg32& rng, double stddev = 1.0) {
    Tensor t(s);
    for (Eigen::Index i = 0; i < s.count(); ++i) {
      t.data()[i] = static_cast<Scalar>(rng.normal() * stddev);
    }
    return t;
  }

  bool valid() const { return data_ != nullptr; }
  const TensorShape& shape() const { return shape_; }
  Eigen::Index size() const { return shape_.count(); }

  Scalar* data() { return data_->data(); }
  const Scalar* data() const { return data_->data(); }

  Map array() { return Map(data_->data(), data_->size()); }
  ConstMap array() const { return ConstMap(data_->data(), data_->size()); }

  Eigen::Index offset(Eigen::Index n, Eigen::Index c, Eigen::Index y,
                      Eigen::Index x) const {
    return ((n * shape_.c + c) * shape_.h + y) * shape_.w + x;
  }

  Scalar& at(Eigen::Index n, Eigen::Index c, Eigen::Index y, Eigen::Index x) {
    return (*data_)[offset(n, c, y, x)];
  }
  Scalar at(Eigen::Index n, Eigen::Index c, Eigen::Index y,
            Eigen::Index x) const {
    return (*data_)[offset(n, c, y, x)];
  }

  // First element; for (1,1,1,1) loss tensors.
  Scalar value() const { return (*data_)[0]; }

  // --- gradient slot -------------------------------------------------------

  bool has_grad() const { return grad_ && grad_->has_value(); }

  // Gradient buffer, created zero-filled on first access.
  Buffer& grad() {
    if (!grad_->has_value()) grad_->emplace(Buffer::Zero(size()));
    return **grad_;
  }

  const Buffer& grad() const { return **grad_; }

  template <typename Derived>
  void add_grad(const Eigen::DenseBase<Derived>& g) {
    grad() += g.derived().array();
  }

  void clear_grad() {
    if (grad_) grad_->reset();
  }

  // Deep copy of the data (fresh gradient slot).
  Tensor clone() const {
    Tensor t(shape_);
    t.array() = array();
    return t;
  }

  template <typename To>
  Tensor<To> cast() const {
    Tensor<To> t(shape_);
    t.array() = array().template cast<To>();
    return t;
  }

  bool same_storage(const Tensor& o) const { return data_ == o.data_; }

 private:
  TensorShape shape_{};
  std::shared_ptr<Buffer> data_;
  std::shared_ptr<std::optional<Buffer>> grad_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace mobilesal
