#include "minidrive/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "minidrive/kernels.hpp"

namespace md {

namespace detail {

namespace {
// Recycling pool for tensor storage: large fresh allocations cost page
// faults every op, which dominates attention-sized workloads.
struct BufferPool {
  std::unordered_map<std::size_t, std::vector<std::vector<double>>> buckets;
  std::size_t pooled_doubles = 0;
  static constexpr std::size_t kMaxPooledDoubles = 64ull << 20;  // 512 MB
};
thread_local BufferPool g_pool;
}  // namespace

std::vector<double> pool_alloc(std::size_t n, bool zero) {
  auto it = g_pool.buckets.find(n);
  if (it != g_pool.buckets.end() && !it->second.empty()) {
    std::vector<double> buf = std::move(it->second.back());
    it->second.pop_back();
    g_pool.pooled_doubles -= n;
    if (zero) std::memset(buf.data(), 0, n * sizeof(double));
    return buf;
  }
  return std::vector<double>(n, 0.0);
}

void pool_release(std::vector<double>&& buf) {
  const std::size_t n = buf.size();
  if (n < 1024 || g_pool.pooled_doubles + n > BufferPool::kMaxPooledDoubles) return;
  g_pool.pooled_doubles += n;
  g_pool.buckets[n].push_back(std::move(buf));
}

std::size_t numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int e : shape) {
    if (e <= 0) throw DimensionError("tensor: non-positive extent in " + shape_str(shape));
    n *= static_cast<std::size_t>(e);
  }
  return n;
}

std::string shape_str(const std::vector<int>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

bool grad_wanted(std::initializer_list<const Tensor*> ins) {
  if (!Tape::active()) return false;
  for (const Tensor* t : ins)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

Tensor make_out(std::vector<int> shape, bool requires_grad, bool zero) {
  auto td = std::make_shared<TensorData>();
  const std::size_t n = numel(shape);
  td->shape = std::move(shape);
  td->data = pool_alloc(n, zero);
  td->requires_grad = requires_grad;
  return wrap(std::move(td));
}

}  // namespace detail

TensorData::~TensorData() {
  detail::pool_release(std::move(data));
  detail::pool_release(std::move(grad));
}

void TensorData::ensure_grad() {
  if (grad.size() != data.size()) grad = detail::pool_alloc(data.size(), true);
}

using detail::grad_wanted;
using detail::make_out;
using detail::numel;
using detail::shape_str;

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  return make_out(std::move(shape), requires_grad);
}

Tensor Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
  Tensor t = make_out(std::move(shape), requires_grad);
  std::fill(t.vec().begin(), t.vec().end(), value);
  return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
  auto td = std::make_shared<TensorData>();
  std::size_t n = numel(shape);
  if (n != data.size())
    throw DimensionError("tensor: data size " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
  td->shape = std::move(shape);
  td->data = std::move(data);
  td->requires_grad = requires_grad;
  return wrap(std::move(td));
}

Tensor Tensor::scalar(double v) { return from({1}, {v}); }

double Tensor::value() const {
  if (size() != 1) throw ContractError("value() on non-scalar tensor " + shape_str(shape()));
  return p_->data[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
  const auto& sh = p_->shape;
  if (idx.size() != sh.size()) throw DimensionError("at(): rank mismatch");
  std::size_t flat = 0;
  std::size_t d = 0;
  for (int i : idx) {
    if (i < 0 || i >= sh[d]) throw DimensionError("at(): index out of range");
    flat = flat * static_cast<std::size_t>(sh[d]) + static_cast<std::size_t>(i);
    ++d;
  }
  return p_->data[flat];
}

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape::Tape() : prev_(g_active_tape) { g_active_tape = this; }
Tape::~Tape() { g_active_tape = prev_; }
Tape* Tape::active() { return g_active_tape; }

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1)
    throw ContractError("backward: loss must be scalar");
  if (!loss.requires_grad())
    throw ContractError("backward: loss is not on the tape");
  loss.ptr()->ensure_grad();
  loss.ptr()->grad[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  nodes_.clear();
}

namespace ops {

namespace {

const kern::Kernels& K() { return kern::active(); }

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

void accumulate(const std::shared_ptr<TensorData>& t, const double* g, std::size_t n) {
  if (!t->requires_grad) return;
  t->ensure_grad();
  K().add(t->grad.data(), g, t->grad.data(), n);
}

// Dense transpose of [m x n] into [n x m], tiled for cache locality.
void transpose_into(const double* a, double* out, int m, int n) {
  constexpr int kTile = 32;
  for (int i0 = 0; i0 < m; i0 += kTile) {
    const int i1 = std::min(i0 + kTile, m);
    for (int j0 = 0; j0 < n; j0 += kTile) {
      const int j1 = std::min(j0 + kTile, n);
      for (int i = i0; i < i1; ++i)
        for (int j = j0; j < j1; ++j)
          out[static_cast<std::size_t>(j) * m + i] = a[static_cast<std::size_t>(i) * n + j];
    }
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  bool rg = grad_wanted({&a, &b});
  Tensor out = make_out(a.shape(), rg, /*zero=*/false);
  K().add(a.data(), b.data(), out.data(), a.size());
  if (rg) {
    auto pa = a.ptr(), pb = b.ptr(), po = out.ptr();
    Tape::active()->record([pa, pb, po] {
      if (po->grad.empty()) return;
      accumulate(pa, po->grad.data(), po->data.size());
      accumulate(pb, po->grad.data(), po->data.size());
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  bool rg = grad_wanted({&a, &b});
  Tensor out = make_out(a.shape(), rg, /*zero=*/false);
  const double* pa_ = a.data();
  const double* pb_ = b.data();
  double* po_ = out.data();
  for (std::size_t i = 0; i < a.size(); ++i) po_[i] = pa_[i] - pb_[i];
  if (rg) {
    auto pa = a.ptr(), pb = b.ptr(), po = out.ptr();
    Tape::active()->record([pa, pb, po] {
      if (po->grad.empty()) return;
      accumulate(pa, po->grad.data(), po->data.size());
      if (pb->requires_grad) {
        pb->ensure_grad();
        K().axpy(-1.0, po->grad.data(), pb->grad.data(), po->data.size());
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  bool rg = grad_wanted({&a, &b});
  Tensor out = make_out(a.shape(), rg, /*zero=*/false);
  K().mul(a.data(), b.data(), out.data(), a.size());
  if (rg) {
    auto pa = a.ptr(), pb = b.ptr(), po = out.ptr();
    Tape::active()->record([pa, pb, po] {
      if (po->grad.empty()) return;
      std::vector<double> tmp(po->data.size());
      if (pa->requires_grad) {
        K().mul(po->grad.data(), pb->data.data(), tmp.data(), tmp.size());
        accumulate(pa, tmp.data(), tmp.size());
      }
      if (pb->requires_grad) {
        K().mul(po->grad.data(), pa->data.data(), tmp.data(), tmp.size());
        accumulate(pb, tmp.data(), tmp.size());
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& a, double c) {
  bool rg = grad_wanted({&a});
  Tensor out = make_out(a.shape(), rg, /*zero=*/false);
  K().scale(a.data(), c, out.data(), a.size());
  if (rg) {
    auto pa = a.ptr();
    auto po = out.ptr();
    Tape::active()->record([pa, po, c] {
      if (po->grad.empty()) return;
      pa->ensure_grad();
      K().axpy(c, po->grad.data(), pa->grad.data(), po->data.size());
    });
  }
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw DimensionError("matmul: expects rank-2 operands");
  if (a.dim(1) != b.dim(0))
    throw DimensionError("matmul: inner dims differ, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  bool rg = grad_wanted({&a, &b});
  Tensor out = make_out({m, n}, rg);
  K().matmul(a.data(), b.data(), out.data(), m, k, n);
  if (rg) {
    auto pa = a.ptr(), pb = b.ptr(), po = out.ptr();
    Tape::active()->record([pa, pb, po, m, k, n] {
      if (po->grad.empty()) return;
      if (pa->requires_grad) {  // dA = dC * B^T
        pa->ensure_grad();
        std::vector<double> bt(static_cast<std::size_t>(n) * k);
        transpose_into(pb->data.data(), bt.data(), k, n);
        K().matmul(po->grad.data(), bt.data(), pa->grad.data(), m, n, k);
      }
      if (pb->requires_grad) {  // dB = A^T * dC
        pb->ensure_grad();
        std::vector<double> at(static_cast<std::size_t>(k) * m);
        transpose_into(pa->data.data(), at.data(), m, k);
        K().matmul(at.data(), po->grad.data(), pb->grad.data(), k, m, n);
      }
    });
  }
  return out;
}

Tensor transpose2d(const Tensor& a) {
  if (a.rank() != 2) throw DimensionError("transpose2d: expects rank-2");
  const int m = a.dim(0), n = a.dim(1);
  bool rg = grad_wanted({&a});
  Tensor out = make_out({n, m}, rg, /*zero=*/false);
  transpose_into(a.data(), out.data(), m, n);
  if (rg) {
    auto pa = a.ptr();
    auto po = out.ptr();
    Tape::active()->record([pa, po, m, n] {
      if (po->grad.empty()) return;
      pa->ensure_grad();
      std::vector<double> gt(pa->data.size());
      transpose_into(po->grad.data(), gt.data(), n, m);
      K().add(pa->grad.data(), gt.data(), pa->grad.data(), gt.size());
    });
  }
  return out;
}

Tensor relu(const Tensor& a) {
  bool rg = grad_wanted({&a});
  Tensor out = make_out(a.shape(), rg, /*zero=*/false);
  K().relu(a.data(), out.data(), a.size());
  if (rg) {
    auto pa = a.ptr();
    auto po = out.ptr();
    Tape::active()->record([pa, po] {
      if (po->grad.empty()) return;
      if (!pa->requires_grad) return;
      std::vector<double> g(po->data.size());
      K().relu_bwd(pa->data.data(), po->grad.data(), g.data(), g.size());
      accumulate(pa, g.data(), g.size());
    });
  }
  return out;
}

Tensor sigmoid(const Tensor& a) {
  bool rg = grad_wanted({&a});
  Tensor out = make_out(a.shape(), rg, /*zero=*/false);
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = 1.0 / (1.0 + std::exp(-a.data()[i]));
  if (rg) {
    auto pa = a.ptr();
    auto po = out.ptr();
    Tape::active()->record([pa, po] {
      if (po->grad.empty()) return;
      if (!pa->requires_grad) return;
      pa->ensure_grad();
      for (std::size_t i = 0; i < po->data.size(); ++i) {
        const double y = po->data[i];
        pa->grad[i] += po->grad[i] * y * (1.0 - y);
      }
    });
  }
  return out;
}

Tensor tanh_op(const Tensor& a) {
  bool rg = grad_wanted({&a});
  Tensor out = make_out(a.shape(), rg, /*zero=*/false);
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = std::tanh(a.data()[i]);
  if (rg) {
    auto pa = a.ptr();
    auto po = out.ptr();
    Tape::active()->record([pa, po] {
      if (po->grad.empty()) return;
      if (!pa->requires_grad) return;
      pa->ensure_grad();
      for (std::size_t i = 0; i < po->data.size(); ++i) {
        const double y = po->data[i];
        pa->grad[i] += po->grad[i] * (1.0 - y * y);
      }
    });
  }
  return out;
}

Tensor softmax(const Tensor& a, int axis) {
  if (axis < 0 || axis >= a.rank()) throw DimensionError("softmax: bad axis");
  const auto& sh = a.shape();
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(sh[i]);
  for (int i = axis + 1; i < a.rank(); ++i) inner *= static_cast<std::size_t>(sh[i]);
  const std::size_t len = static_cast<std::size_t>(sh[axis]);

  bool rg = grad_wanted({&a});
  Tensor out = make_out(sh, rg, /*zero=*/false);
  const double* x = a.data();
  double* y = out.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = x[base];
      for (std::size_t l = 1; l < len; ++l) mx = std::max(mx, x[base + l * inner]);
      for (std::size_t l = 0; l < len; ++l) y[base + l * inner] = x[base + l * inner] - mx;
    }
  }
  K().exp_vec(y, y, a.size());  // in place: elementwise, same offsets
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double z = 0.0;
      for (std::size_t l = 0; l < len; ++l) z += y[base + l * inner];
      const double invz = 1.0 / z;
      for (std::size_t l = 0; l < len; ++l) y[base + l * inner] *= invz;
    }
  }
  if (rg) {
    auto pa = a.ptr();
    auto po = out.ptr();
    Tape::active()->record([pa, po, outer, inner, len] {
      if (po->grad.empty()) return;
      if (!pa->requires_grad) return;
      pa->ensure_grad();
      const double* yv = po->data.data();
      const double* gy = po->grad.data();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * len * inner + in;
          double dot = 0.0;
          for (std::size_t l = 0; l < len; ++l) dot += gy[base + l * inner] * yv[base + l * inner];
          for (std::size_t l = 0; l < len; ++l) {
            const std::size_t idx = base + l * inner;
            pa->grad[idx] += yv[idx] * (gy[idx] - dot);
          }
        }
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() < 1) throw DimensionError("layer_norm: rank must be >= 1");
  const int d = x.dim(x.rank() - 1);
  if (gamma.size() != static_cast<std::size_t>(d) || beta.size() != static_cast<std::size_t>(d))
    throw DimensionError("layer_norm: gamma/beta size mismatch");
  const std::size_t rows = x.size() / static_cast<std::size_t>(d);

  bool rg = grad_wanted({&x, &gamma, &beta});
  Tensor out = make_out(x.shape(), rg, /*zero=*/false);
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto inv_sigma = std::make_shared<std::vector<double>>(rows);

  const double* xv = x.data();
  const double* gv = gamma.data();
  const double* bv = beta.data();
  double* yv = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv + r * d;
    double mu = 0.0;
    for (int i = 0; i < d; ++i) mu += xr[i];
    mu /= d;
    double var = 0.0;
    for (int i = 0; i < d; ++i) var += (xr[i] - mu) * (xr[i] - mu);
    var /= d;
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_sigma)[r] = is;
    for (int i = 0; i < d; ++i) {
      const double xh = (xr[i] - mu) * is;
      (*xhat)[r * d + i] = xh;
      yv[r * d + i] = xh * gv[i] + bv[i];
    }
  }
  if (rg) {
    auto px = x.ptr();
    auto pg = gamma.ptr();
    auto pb = beta.ptr();
    auto po = out.ptr();
    Tape::active()->record([px, pg, pb, po, xhat, inv_sigma, rows, d] {
      if (po->grad.empty()) return;
      const double* gy = po->grad.data();
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (int i = 0; i < d; ++i) pb->grad[i] += gy[r * d + i];
      }
      if (pg->requires_grad) {
        pg->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (int i = 0; i < d; ++i) pg->grad[i] += gy[r * d + i] * (*xhat)[r * d + i];
      }
      if (px->requires_grad) {
        px->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
          double m1 = 0.0, m2 = 0.0;
          for (int i = 0; i < d; ++i) {
            const double dxh = gy[r * d + i] * pg->data[i];
            m1 += dxh;
            m2 += dxh * (*xhat)[r * d + i];
          }
          m1 /= d;
          m2 /= d;
          const double is = (*inv_sigma)[r];
          for (int i = 0; i < d; ++i) {
            const double dxh = gy[r * d + i] * pg->data[i];
            px->grad[r * d + i] += is * (dxh - m1 - (*xhat)[r * d + i] * m2);
          }
        }
      }
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 2 || w.rank() != 2) throw DimensionError("linear: rank-2 x and w expected");
  if (x.dim(1) != w.dim(0)) throw DimensionError("linear: in-dim mismatch");
  const int n = x.dim(0), in = x.dim(1), outd = w.dim(1);
  if (b.defined() && b.size() != static_cast<std::size_t>(outd))
    throw DimensionError("linear: bias size mismatch");

  bool rg = grad_wanted({&x, &w, &b});
  Tensor out = make_out({n, outd}, rg, /*zero=*/!b.defined());
  if (b.defined()) {
    for (int r = 0; r < n; ++r)
      std::memcpy(out.data() + static_cast<std::size_t>(r) * outd, b.data(), sizeof(double) * outd);
  }
  K().matmul(x.data(), w.data(), out.data(), n, in, outd);
  if (rg) {
    auto px = x.ptr(), pw = w.ptr(), po = out.ptr();
    auto pb = b.defined() ? b.ptr() : nullptr;
    Tape::active()->record([px, pw, pb, po, n, in, outd] {
      if (po->grad.empty()) return;
      if (px->requires_grad) {
        px->ensure_grad();
        std::vector<double> wt(static_cast<std::size_t>(outd) * in);
        transpose_into(pw->data.data(), wt.data(), in, outd);
        K().matmul(po->grad.data(), wt.data(), px->grad.data(), n, outd, in);
      }
      if (pw->requires_grad) {
        pw->ensure_grad();
        std::vector<double> xt(static_cast<std::size_t>(in) * n);
        transpose_into(px->data.data(), xt.data(), n, in);
        K().matmul(xt.data(), po->grad.data(), pw->grad.data(), in, n, outd);
      }
      if (pb && pb->requires_grad) {
        pb->ensure_grad();
        for (int r = 0; r < n; ++r)
          K().add(pb->grad.data(), po->grad.data() + static_cast<std::size_t>(r) * outd,
                  pb->grad.data(), static_cast<std::size_t>(outd));
      }
    });
  }
  return out;
}

namespace {
kern::Conv2dShape conv_shape(const Tensor& x, const Tensor& w, int stride, int pad) {
  kern::Conv2dShape s;
  s.c_in = x.dim(0);
  s.h_in = x.dim(1);
  s.w_in = x.dim(2);
  s.c_out = w.dim(0);
  s.k = w.dim(2);
  s.stride = stride;
  s.pad = pad;
  if (w.dim(1) != s.c_in) throw DimensionError("conv2d: channel mismatch");
  if (w.dim(2) != w.dim(3) || s.k % 2 == 0) throw DimensionError("conv2d: kernel must be square and odd");
  const int hn = x.dim(1) + 2 * pad - s.k;
  const int wn = x.dim(2) + 2 * pad - s.k;
  if (hn < 0 || wn < 0 || hn % stride != 0 || wn % stride != 0)
    throw DimensionError("conv2d: non-integral output size");
  s.h_out = hn / stride + 1;
  s.w_out = wn / stride + 1;
  return s;
}
}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  if (x.rank() != 3 || w.rank() != 4) throw DimensionError("conv2d: x[C,H,W], w[C',C,k,k] expected");
  kern::Conv2dShape s = conv_shape(x, w, stride, pad);
  bool rg = grad_wanted({&x, &w, &b});
  Tensor out = make_out({s.c_out, s.h_out, s.w_out}, rg);
  K().conv2d(x.data(), w.data(), b.defined() ? b.data() : nullptr, out.data(), s);
  if (rg) {
    auto px = x.ptr(), pw = w.ptr(), po = out.ptr();
    auto pb = b.defined() ? b.ptr() : nullptr;
    Tape::active()->record([px, pw, pb, po, s] {
      if (po->grad.empty()) return;
      const double* go = po->grad.data();
      if (pb && pb->requires_grad) {
        pb->ensure_grad();
        for (int co = 0; co < s.c_out; ++co) {
          double acc = 0.0;
          const double* g = go + static_cast<std::size_t>(co) * s.h_out * s.w_out;
          for (int i = 0; i < s.h_out * s.w_out; ++i) acc += g[i];
          pb->grad[co] += acc;
        }
      }
      const bool want_x = px->requires_grad;
      const bool want_w = pw->requires_grad;
      if (!want_x && !want_w) return;
      if (want_x) px->ensure_grad();
      if (want_w) pw->ensure_grad();
      for (int co = 0; co < s.c_out; ++co) {
        const double* g = go + static_cast<std::size_t>(co) * s.h_out * s.w_out;
        for (int ho = 0; ho < s.h_out; ++ho) {
          for (int wo = 0; wo < s.w_out; ++wo) {
            const double gv = g[ho * s.w_out + wo];
            if (gv == 0.0) continue;
            const int hi0 = ho * s.stride - s.pad;
            const int wi0 = wo * s.stride - s.pad;
            for (int ci = 0; ci < s.c_in; ++ci) {
              const std::size_t xoff = static_cast<std::size_t>(ci) * s.h_in * s.w_in;
              const std::size_t woff =
                  (static_cast<std::size_t>(co) * s.c_in + ci) * s.k * s.k;
              for (int kh = 0; kh < s.k; ++kh) {
                const int hi = hi0 + kh;
                if (hi < 0 || hi >= s.h_in) continue;
                for (int kw = 0; kw < s.k; ++kw) {
                  const int wi = wi0 + kw;
                  if (wi < 0 || wi >= s.w_in) continue;
                  if (want_x) px->grad[xoff + hi * s.w_in + wi] += gv * pw->data[woff + kh * s.k + kw];
                  if (want_w) pw->grad[woff + kh * s.k + kw] += gv * px->data[xoff + hi * s.w_in + wi];
                }
              }
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  if (x.rank() != 3 || w.rank() != 4) throw DimensionError("conv_transpose2d: x[C,H,W], w[C,C',k,k]");
  const int c_in = x.dim(0), h_in = x.dim(1), w_in = x.dim(2);
  if (w.dim(0) != c_in) throw DimensionError("conv_transpose2d: channel mismatch");
  const int c_out = w.dim(1), k = w.dim(2);
  if (w.dim(3) != k) throw DimensionError("conv_transpose2d: kernel must be square");
  const int h_out = (h_in - 1) * stride - 2 * pad + k;
  const int w_out = (w_in - 1) * stride - 2 * pad + k;
  if (h_out <= 0 || w_out <= 0) throw DimensionError("conv_transpose2d: empty output");

  bool rg = grad_wanted({&x, &w, &b});
  Tensor out = make_out({c_out, h_out, w_out}, rg);
  double* ov = out.data();
  if (b.defined()) {
    for (int co = 0; co < c_out; ++co)
      for (int i = 0; i < h_out * w_out; ++i) ov[static_cast<std::size_t>(co) * h_out * w_out + i] = b.data()[co];
  }
  const double* xv = x.data();
  const double* wv = w.data();
  for (int ci = 0; ci < c_in; ++ci) {
    for (int hi = 0; hi < h_in; ++hi) {
      for (int wi = 0; wi < w_in; ++wi) {
        const double v = xv[(static_cast<std::size_t>(ci) * h_in + hi) * w_in + wi];
        for (int co = 0; co < c_out; ++co) {
          const std::size_t woff = (static_cast<std::size_t>(ci) * c_out + co) * k * k;
          for (int kh = 0; kh < k; ++kh) {
            const int ho = hi * stride - pad + kh;
            if (ho < 0 || ho >= h_out) continue;
            for (int kw = 0; kw < k; ++kw) {
              const int wo = wi * stride - pad + kw;
              if (wo < 0 || wo >= w_out) continue;
              ov[(static_cast<std::size_t>(co) * h_out + ho) * w_out + wo] += v * wv[woff + kh * k + kw];
            }
          }
        }
      }
    }
  }
  if (rg) {
    auto px = x.ptr(), pw = w.ptr(), po = out.ptr();
    auto pb = b.defined() ? b.ptr() : nullptr;
    Tape::active()->record([px, pw, pb, po, c_in, h_in, w_in, c_out, h_out, w_out, k, stride, pad] {
      if (po->grad.empty()) return;
      const double* go = po->grad.data();
      if (pb && pb->requires_grad) {
        pb->ensure_grad();
        for (int co = 0; co < c_out; ++co) {
          double acc = 0.0;
          for (int i = 0; i < h_out * w_out; ++i) acc += go[static_cast<std::size_t>(co) * h_out * w_out + i];
          pb->grad[co] += acc;
        }
      }
      const bool want_x = px->requires_grad;
      const bool want_w = pw->requires_grad;
      if (!want_x && !want_w) return;
      if (want_x) px->ensure_grad();
      if (want_w) pw->ensure_grad();
      for (int ci = 0; ci < c_in; ++ci) {
        for (int hi = 0; hi < h_in; ++hi) {
          for (int wi = 0; wi < w_in; ++wi) {
            const std::size_t xidx = (static_cast<std::size_t>(ci) * h_in + hi) * w_in + wi;
            double gx = 0.0;
            for (int co = 0; co < c_out; ++co) {
              const std::size_t woff = (static_cast<std::size_t>(ci) * c_out + co) * k * k;
              for (int kh = 0; kh < k; ++kh) {
                const int ho = hi * stride - pad + kh;
                if (ho < 0 || ho >= h_out) continue;
                for (int kw = 0; kw < k; ++kw) {
                  const int wo = wi * stride - pad + kw;
                  if (wo < 0 || wo >= w_out) continue;
                  const double g = go[(static_cast<std::size_t>(co) * h_out + ho) * w_out + wo];
                  if (want_x) gx += g * pw->data[woff + kh * k + kw];
                  if (want_w) pw->grad[woff + kh * k + kw] += g * px->data[xidx];
                }
              }
            }
            if (want_x) px->grad[xidx] += gx;
          }
        }
      }
    });
  }
  return out;
}

Tensor bilinear_sample(const Tensor& feature, const Tensor& points) {
  if (feature.rank() != 3) throw DimensionError("bilinear_sample: feature [C,H,W] expected");
  if (points.rank() != 2 || points.dim(1) != 2)
    throw DimensionError("bilinear_sample: points [P,2] expected");
  const int c = feature.dim(0), h = feature.dim(1), w = feature.dim(2);
  const int p = points.dim(0);

  bool rg = grad_wanted({&feature, &points});
  Tensor out = make_out({p, c}, rg, /*zero=*/false);
  // Per point: clamped coords, cell corner, fractions, clamp flags.
  struct SampleInfo { int r0, c0; double fr, fc; bool r_free, c_free; };
  auto info = std::make_shared<std::vector<SampleInfo>>(static_cast<std::size_t>(p));

  const double* fv = feature.data();
  const double* pv = points.data();
  double* ov = out.data();
  for (int i = 0; i < p; ++i) {
    double r = pv[2 * i], cc = pv[2 * i + 1];
    const bool r_free = r > 0.0 && r < h - 1;
    const bool c_free = cc > 0.0 && cc < w - 1;
    r = std::min(std::max(r, 0.0), static_cast<double>(h - 1));
    cc = std::min(std::max(cc, 0.0), static_cast<double>(w - 1));
    int r0 = std::min(static_cast<int>(r), h - 2);
    int c0 = std::min(static_cast<int>(cc), w - 2);
    if (h == 1) r0 = 0;
    if (w == 1) c0 = 0;
    const double fr = r - r0, fc = cc - c0;
    (*info)[i] = {r0, c0, fr, fc, r_free, c_free};
    for (int ch = 0; ch < c; ++ch) {
      const double* fp = fv + static_cast<std::size_t>(ch) * h * w;
      const double v00 = fp[r0 * w + c0];
      const double v01 = (w > 1) ? fp[r0 * w + c0 + 1] : v00;
      const double v10 = (h > 1) ? fp[(r0 + 1) * w + c0] : v00;
      const double v11 = (h > 1 && w > 1) ? fp[(r0 + 1) * w + c0 + 1] : v00;
      ov[static_cast<std::size_t>(i) * c + ch] =
          (1 - fr) * ((1 - fc) * v00 + fc * v01) + fr * ((1 - fc) * v10 + fc * v11);
    }
  }
  if (rg) {
    auto pf = feature.ptr(), pp = points.ptr(), po = out.ptr();
    Tape::active()->record([pf, pp, po, info, c, h, w, p] {
      if (po->grad.empty()) return;
      const double* go = po->grad.data();
      const bool want_f = pf->requires_grad;
      const bool want_p = pp->requires_grad;
      if (want_f) pf->ensure_grad();
      if (want_p) pp->ensure_grad();
      for (int i = 0; i < p; ++i) {
        const SampleInfo& s = (*info)[i];
        double dr = 0.0, dc = 0.0;
        for (int ch = 0; ch < c; ++ch) {
          const double g = go[static_cast<std::size_t>(i) * c + ch];
          if (g == 0.0) continue;
          const std::size_t base = static_cast<std::size_t>(ch) * h * w;
          const int i00 = s.r0 * w + s.c0;
          const int i01 = (w > 1) ? i00 + 1 : i00;
          const int i10 = (h > 1) ? i00 + w : i00;
          const int i11 = (h > 1) ? i01 + w : i01;
          if (want_f) {
            pf->grad[base + i00] += g * (1 - s.fr) * (1 - s.fc);
            pf->grad[base + i01] += g * (1 - s.fr) * s.fc;
            pf->grad[base + i10] += g * s.fr * (1 - s.fc);
            pf->grad[base + i11] += g * s.fr * s.fc;
          }
          if (want_p) {
            const double v00 = pf->data[base + i00], v01 = pf->data[base + i01];
            const double v10 = pf->data[base + i10], v11 = pf->data[base + i11];
            dr += g * ((1 - s.fc) * (v10 - v00) + s.fc * (v11 - v01));
            dc += g * ((1 - s.fr) * (v01 - v00) + s.fr * (v11 - v10));
          }
        }
        if (want_p) {
          if (s.r_free) pp->grad[2 * i] += dr;
          if (s.c_free) pp->grad[2 * i + 1] += dc;
        }
      }
    });
  }
  return out;
}

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids) {
  if (table.rank() != 2) throw DimensionError("embedding_lookup: table [V,d] expected");
  const int v = table.dim(0), d = table.dim(1);
  for (int id : ids)
    if (id < 0 || id >= v) throw VocabularyError("embedding_lookup: id " + std::to_string(id) + " out of range");
  bool rg = grad_wanted({&table});
  Tensor out = make_out({static_cast<int>(ids.size()), d}, rg, /*zero=*/false);
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::memcpy(out.data() + i * d, table.data() + static_cast<std::size_t>(ids[i]) * d, sizeof(double) * d);
  if (rg) {
    auto pt = table.ptr();
    auto po = out.ptr();
    auto idc = std::make_shared<std::vector<int>>(ids);
    Tape::active()->record([pt, po, idc, d] {
      if (po->grad.empty()) return;
      if (!pt->requires_grad) return;
      pt->ensure_grad();
      for (std::size_t i = 0; i < idc->size(); ++i)
        K().add(pt->grad.data() + static_cast<std::size_t>((*idc)[i]) * d, po->grad.data() + i * d,
                pt->grad.data() + static_cast<std::size_t>((*idc)[i]) * d, static_cast<std::size_t>(d));
    });
  }
  return out;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const int rank = parts[0].rank();
  if (axis < 0 || axis >= rank) throw DimensionError("concat: bad axis");
  std::vector<int> out_shape = parts[0].shape();
  int axis_total = 0;
  for (const Tensor& t : parts) {
    if (t.rank() != rank) throw DimensionError("concat: rank mismatch");
    for (int i = 0; i < rank; ++i)
      if (i != axis && t.dim(i) != out_shape[static_cast<std::size_t>(i)])
        throw DimensionError("concat: incompatible shapes");
    axis_total += t.dim(axis);
  }
  out_shape[static_cast<std::size_t>(axis)] = axis_total;

  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(out_shape[i]);
  for (int i = axis + 1; i < rank; ++i) inner *= static_cast<std::size_t>(out_shape[i]);

  bool rg = false;
  for (const Tensor& t : parts) rg = rg || grad_wanted({&t});
  Tensor out = make_out(out_shape, rg, /*zero=*/false);

  std::size_t col_off = 0;
  for (const Tensor& t : parts) {
    const std::size_t cols = static_cast<std::size_t>(t.dim(axis)) * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::memcpy(out.data() + o * static_cast<std::size_t>(axis_total) * inner + col_off,
                  t.data() + o * cols, sizeof(double) * cols);
    col_off += cols;
  }
  if (rg) {
    auto po = out.ptr();
    std::vector<std::shared_ptr<TensorData>> srcs;
    std::vector<std::size_t> widths;
    for (const Tensor& t : parts) {
      srcs.push_back(t.ptr());
      widths.push_back(static_cast<std::size_t>(t.dim(axis)) * inner);
    }
    const std::size_t total = static_cast<std::size_t>(axis_total) * inner;
    Tape::active()->record([po, srcs, widths, outer, total] {
      if (po->grad.empty()) return;
      std::size_t off = 0;
      for (std::size_t s = 0; s < srcs.size(); ++s) {
        if (srcs[s]->requires_grad) {
          srcs[s]->ensure_grad();
          for (std::size_t o = 0; o < outer; ++o)
            K().add(srcs[s]->grad.data() + o * widths[s], po->grad.data() + o * total + off,
                    srcs[s]->grad.data() + o * widths[s], widths[s]);
        }
        off += widths[s];
      }
    });
  }
  return out;
}

Tensor slice0(const Tensor& x, int i0, int i1) {
  if (x.rank() < 1 || i0 < 0 || i1 > x.dim(0) || i0 >= i1) throw DimensionError("slice0: bad range");
  std::vector<int> sh = x.shape();
  sh[0] = i1 - i0;
  std::size_t inner = x.size() / static_cast<std::size_t>(x.dim(0));
  bool rg = grad_wanted({&x});
  Tensor out = make_out(sh, rg, /*zero=*/false);
  std::memcpy(out.data(), x.data() + static_cast<std::size_t>(i0) * inner,
              sizeof(double) * out.size());
  if (rg) {
    auto px = x.ptr();
    auto po = out.ptr();
    Tape::active()->record([px, po, i0, inner] {
      if (po->grad.empty()) return;
      if (!px->requires_grad) return;
      px->ensure_grad();
      K().add(px->grad.data() + static_cast<std::size_t>(i0) * inner, po->grad.data(),
              px->grad.data() + static_cast<std::size_t>(i0) * inner, po->data.size());
    });
  }
  return out;
}

Tensor slice_cols(const Tensor& x, int c0, int c1) {
  if (x.rank() != 2 || c0 < 0 || c1 > x.dim(1) || c0 >= c1) throw DimensionError("slice_cols: bad range");
  const int n = x.dim(0), w = x.dim(1), cw = c1 - c0;
  bool rg = grad_wanted({&x});
  Tensor out = make_out({n, cw}, rg, /*zero=*/false);
  for (int r = 0; r < n; ++r)
    std::memcpy(out.data() + static_cast<std::size_t>(r) * cw,
                x.data() + static_cast<std::size_t>(r) * w + c0, sizeof(double) * cw);
  if (rg) {
    auto px = x.ptr();
    auto po = out.ptr();
    Tape::active()->record([px, po, n, w, c0, cw] {
      if (po->grad.empty()) return;
      if (!px->requires_grad) return;
      px->ensure_grad();
      for (int r = 0; r < n; ++r)
        K().add(px->grad.data() + static_cast<std::size_t>(r) * w + c0,
                po->grad.data() + static_cast<std::size_t>(r) * cw,
                px->grad.data() + static_cast<std::size_t>(r) * w + c0, static_cast<std::size_t>(cw));
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, std::vector<int> shape) {
  if (numel(shape) != x.size()) throw DimensionError("reshape: element count mismatch");
  bool rg = grad_wanted({&x});
  Tensor out = make_out(std::move(shape), rg, /*zero=*/false);
  std::memcpy(out.data(), x.data(), sizeof(double) * x.size());
  if (rg) {
    auto px = x.ptr();
    auto po = out.ptr();
    Tape::active()->record([px, po] {
      if (po->grad.empty()) return;
      if (!px->requires_grad) return;
      px->ensure_grad();
      K().add(px->grad.data(), po->grad.data(), px->grad.data(), po->data.size());
    });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  bool rg = grad_wanted({&x});
  Tensor out = make_out({1}, rg);
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += x.data()[i];
  out.data()[0] = acc;
  if (rg) {
    auto px = x.ptr();
    auto po = out.ptr();
    Tape::active()->record([px, po] {
      if (po->grad.empty()) return;
      if (!px->requires_grad) return;
      px->ensure_grad();
      const double g = po->grad[0];
      for (std::size_t i = 0; i < px->grad.size(); ++i) px->grad[i] += g;
    });
  }
  return out;
}

Tensor mean(const Tensor& x) {
  const double inv = 1.0 / static_cast<double>(x.size());
  return scale(sum(x), inv);
}

Tensor avg_pool2d(const Tensor& x, int k) {
  if (x.rank() != 3) throw DimensionError("avg_pool2d: [C,H,W] expected");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h % k != 0 || w % k != 0) throw DimensionError("avg_pool2d: extent not divisible by k");
  const int ho = h / k, wo = w / k;
  bool rg = grad_wanted({&x});
  Tensor out = make_out({c, ho, wo}, rg, /*zero=*/false);
  const double inv = 1.0 / (k * k);
  for (int ch = 0; ch < c; ++ch)
    for (int r = 0; r < ho; ++r)
      for (int cc = 0; cc < wo; ++cc) {
        double acc = 0.0;
        for (int i = 0; i < k; ++i)
          for (int j = 0; j < k; ++j)
            acc += x.data()[(static_cast<std::size_t>(ch) * h + r * k + i) * w + cc * k + j];
        out.data()[(static_cast<std::size_t>(ch) * ho + r) * wo + cc] = acc * inv;
      }
  if (rg) {
    auto px = x.ptr();
    auto po = out.ptr();
    Tape::active()->record([px, po, c, h, w, ho, wo, k, inv] {
      if (po->grad.empty()) return;
      if (!px->requires_grad) return;
      px->ensure_grad();
      for (int ch = 0; ch < c; ++ch)
        for (int r = 0; r < ho; ++r)
          for (int cc = 0; cc < wo; ++cc) {
            const double g = po->grad[(static_cast<std::size_t>(ch) * ho + r) * wo + cc] * inv;
            for (int i = 0; i < k; ++i)
              for (int j = 0; j < k; ++j)
                px->grad[(static_cast<std::size_t>(ch) * h + r * k + i) * w + cc * k + j] += g;
          }
    });
  }
  return out;
}

Tensor weighted_sum_groups(const Tensor& values, const Tensor& weights) {
  if (values.rank() != 2 || weights.rank() != 2)
    throw DimensionError("weighted_sum_groups: rank-2 inputs expected");
  const int g = weights.dim(0), kk = weights.dim(1), d = values.dim(1);
  if (values.dim(0) != g * kk) throw DimensionError("weighted_sum_groups: values rows != G*K");
  bool rg = grad_wanted({&values, &weights});
  Tensor out = make_out({g, d}, rg);
  for (int gi = 0; gi < g; ++gi) {
    double* orow = out.data() + static_cast<std::size_t>(gi) * d;
    for (int ki = 0; ki < kk; ++ki)
      K().axpy(weights.at({gi, ki}), values.data() + (static_cast<std::size_t>(gi) * kk + ki) * d,
               orow, static_cast<std::size_t>(d));
  }
  if (rg) {
    auto pv = values.ptr(), pw = weights.ptr(), po = out.ptr();
    Tape::active()->record([pv, pw, po, g, kk, d] {
      if (po->grad.empty()) return;
      for (int gi = 0; gi < g; ++gi) {
        const double* gout = po->grad.data() + static_cast<std::size_t>(gi) * d;
        for (int ki = 0; ki < kk; ++ki) {
          const std::size_t vrow = (static_cast<std::size_t>(gi) * kk + ki) * d;
          if (pv->requires_grad) {
            pv->ensure_grad();
            K().axpy(pw->data[static_cast<std::size_t>(gi) * kk + ki], gout, pv->grad.data() + vrow,
                     static_cast<std::size_t>(d));
          }
          if (pw->requires_grad) {
            pw->ensure_grad();
            double dot = 0.0;
            for (int i = 0; i < d; ++i) dot += gout[i] * pv->data[vrow + i];
            pw->grad[static_cast<std::size_t>(gi) * kk + ki] += dot;
          }
        }
      }
    });
  }
  return out;
}

}  // namespace ops
}  // namespace md
