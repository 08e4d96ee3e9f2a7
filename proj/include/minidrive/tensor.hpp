#pragma once
// Dense f64 tensors with reverse-mode autodiff on a flat tape. Ops record a
// backward closure when a tape is active and any input requires grad; the
// tape replays closures in exact reverse append order and is cleared by
// backward(). Tensors are immutable values after creation.

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "minidrive/errors.hpp"

namespace md {

struct TensorData {
  std::vector<int> shape;
  std::vector<double> data;
  std::vector<double> grad;  // sized lazily, zero-filled
  bool requires_grad = false;

  ~TensorData();  // returns buffers to the thread-local pool

  std::size_t size() const { return data.size(); }
  void ensure_grad();
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, double value, bool requires_grad = false);
  static Tensor from(std::vector<int> shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double v);

  bool defined() const { return static_cast<bool>(p_); }
  const std::vector<int>& shape() const { return p_->shape; }
  int dim(int i) const { return p_->shape[static_cast<std::size_t>(i)]; }
  int rank() const { return static_cast<int>(p_->shape.size()); }
  std::size_t size() const { return p_->data.size(); }
  bool requires_grad() const { return p_->requires_grad; }

  double* data() { return p_->data.data(); }
  const double* data() const { return p_->data.data(); }
  std::vector<double>& vec() { return p_->data; }
  const std::vector<double>& vec() const { return p_->data; }

  double* grad() { p_->ensure_grad(); return p_->grad.data(); }
  const std::vector<double>& grad_vec() const { return p_->grad; }
  void zero_grad() { if (!p_->grad.empty()) std::fill(p_->grad.begin(), p_->grad.end(), 0.0); }

  double value() const;                    // scalar tensors only
  double at(std::initializer_list<int> idx) const;

  const std::shared_ptr<TensorData>& ptr() const { return p_; }

 private:
  explicit Tensor(std::shared_ptr<TensorData> p) : p_(std::move(p)) {}
  std::shared_ptr<TensorData> p_;
  friend Tensor wrap(std::shared_ptr<TensorData>);
};

inline Tensor wrap(std::shared_ptr<TensorData> p) { return Tensor(std::move(p)); }

class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  // Appends one op record; backward() replays them in reverse.
  void record(std::function<void()> bwd) { nodes_.push_back(std::move(bwd)); }
  std::size_t size() const { return nodes_.size(); }

  // Seeds dLoss = 1, replays the tape in reverse, then clears it.
  void backward(const Tensor& loss);

 private:
  std::vector<std::function<void()>> nodes_;
  Tape* prev_;
};

namespace ops {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose2d(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor tanh_op(const Tensor& a);
Tensor softmax(const Tensor& a, int axis);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
// y = x·W + b, W is [in x out], b optional [out]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);
Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);
// feature [C,H,W], points [P,2] as (row, col); clamp-to-edge, differentiable
// w.r.t. both arguments.
Tensor bilinear_sample(const Tensor& feature, const Tensor& points);
Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice0(const Tensor& x, int i0, int i1);
Tensor slice_cols(const Tensor& x, int c0, int c1);
Tensor reshape(const Tensor& x, std::vector<int> shape);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor avg_pool2d(const Tensor& x, int k);
// values [G*K, d] with weights [G, K] -> out[g] = sum_k w[g,k] * values[g*K+k]
Tensor weighted_sum_groups(const Tensor& values, const Tensor& weights);

}  // namespace ops

namespace detail {
std::size_t numel(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);
bool grad_wanted(std::initializer_list<const Tensor*> ins);
// zero=false skips the fill for ops that overwrite every element.
Tensor make_out(std::vector<int> shape, bool requires_grad, bool zero = true);
// Thread-local recycled buffers; transparent to callers.
std::vector<double> pool_alloc(std::size_t n, bool zero);
void pool_release(std::vector<double>&& buf);
}  // namespace detail

}  // namespace md
