#pragma once

#include <memory>
#include <random>

#include "slora/common.h"

namespace slora {

// Dense row-major tensor with optional gradient buffer. Handles share storage:
// copying a Tensor aliases the same data, which is what the tape relies on.
template <typename S>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Tensor t;
    t.d_ = std::make_shared<Data>();
    t.d_->shape = std::move(shape);
    t.d_->data.assign(shape_numel(t.d_->shape), S(0));
    t.d_->requires_grad = requires_grad;
    return t;
  }

  static Tensor from_data(Shape shape, std::vector<S> values,
                          bool requires_grad = false) {
    SLORA_CHECK(shape_numel(shape) == (int64_t)values.size(),
                "tensor: shape ", shape_str(shape), " wants ",
                shape_numel(shape), " values, got ", values.size());
    Tensor t;
    t.d_ = std::make_shared<Data>();
    t.d_->shape = std::move(shape);
    t.d_->data = std::move(values);
    t.d_->requires_grad = requires_grad;
    return t;
  }

  static Tensor randn(Shape shape, std::mt19937_64& rng, S stddev,
                      bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::normal_distribution<double> dist(0.0, 1.0);
    for (S& v : t.d_->data) v = S(dist(rng)) * stddev;
    return t;
  }

  bool defined() const { return d_ != nullptr; }
  const Shape& shape() const { return d_->shape; }
  int ndim() const { return (int)d_->shape.size(); }
  int64_t dim(int i) const { return d_->shape[i]; }
  int64_t numel() const { return (int64_t)d_->data.size(); }

  S* data() { return d_->data.data(); }
  const S* data() const { return d_->data.data(); }
  std::vector<S>& vec() { return d_->data; }
  const std::vector<S>& vec() const { return d_->data; }

  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool rg) { d_->requires_grad = rg; }

  bool has_grad() const { return !d_->grad.empty(); }
  void ensure_grad() {
    if (d_->grad.empty()) d_->grad.assign(d_->data.size(), S(0));
  }
  void zero_grad() {
    if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), S(0));
  }
  void drop_grad() { d_->grad.clear(); }
  S* grad() {
    ensure_grad();
    return d_->grad.data();
  }
  const std::vector<S>& grad_vec() const { return d_->grad; }

  // Identity of the underlying storage; used for aliasing checks in tests.
  const void* id() const { return d_.get(); }

 private:
  struct Data {
    Shape shape;
    std::vector<S> data;
    std::vector<S> grad;  // empty until touched by backward
    bool requires_grad = false;
  };
  std::shared_ptr<Data> d_;
};

}  // namespace slora
