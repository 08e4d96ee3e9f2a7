#include "minidrive/kernels.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>

namespace md::kern {

namespace {

inline double exp_one(double x) {
  using namespace detail;
  if (x > kExpClamp) x = kExpClamp;
  if (x < -kExpClamp) x = -kExpClamp;
  const double nd = std::nearbyint(x * kLog2E);
  const int n = static_cast<int>(nd);
  const double r = (x - nd * kLn2Hi) - nd * kLn2Lo;
  double p = kExpPoly[0];
  for (int i = 1; i < 12; ++i) p = p * r + kExpPoly[i];
  std::uint64_t bits = static_cast<std::uint64_t>(n + 1023) << 52;
  double scale;
  std::memcpy(&scale, &bits, sizeof scale);
  return p * scale;
}

void add_scalar(const double* a, const double* b, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

void mul_scalar(const double* a, const double* b, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

void scale_scalar(const double* a, double c, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * c;
}

void axpy_scalar(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void relu_scalar(const double* a, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
}

void relu_bwd_scalar(const double* a, const double* g, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] > 0.0 ? g[i] : 0.0;
}

void exp_scalar(const double* a, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = exp_one(a[i]);
}

// C += A*B with (i, k, j) loop order: each C element accumulates over k in
// sequence, the order the AVX2 variant reproduces.
void matmul_scalar(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<std::size_t>(i) * k;
    double* crow = c + static_cast<std::size_t>(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      const double aik = arow[kk];
      const double* brow = b + static_cast<std::size_t>(kk) * n;
      for (int j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  }
}

void conv2d_scalar(const double* in, const double* w, const double* bias,
                   double* out, const Conv2dShape& s) {
  for (int co = 0; co < s.c_out; ++co) {
    const double* wc = w + static_cast<std::size_t>(co) * s.c_in * s.k * s.k;
    double* oc = out + static_cast<std::size_t>(co) * s.h_out * s.w_out;
    for (int ho = 0; ho < s.h_out; ++ho) {
      for (int wo = 0; wo < s.w_out; ++wo) {
        double acc = bias ? bias[co] : 0.0;
        const int hi0 = ho * s.stride - s.pad;
        const int wi0 = wo * s.stride - s.pad;
        for (int ci = 0; ci < s.c_in; ++ci) {
          const double* ic = in + static_cast<std::size_t>(ci) * s.h_in * s.w_in;
          const double* wk = wc + static_cast<std::size_t>(ci) * s.k * s.k;
          for (int kh = 0; kh < s.k; ++kh) {
            const int hi = hi0 + kh;
            if (hi < 0 || hi >= s.h_in) continue;
            for (int kw = 0; kw < s.k; ++kw) {
              const int wi = wi0 + kw;
              if (wi < 0 || wi >= s.w_in) continue;
              acc += ic[hi * s.w_in + wi] * wk[kh * s.k + kw];
            }
          }
        }
        oc[ho * s.w_out + wo] += acc;
      }
    }
  }
}

}  // namespace

const Kernels& scalar() {
  static const Kernels k = {
      "scalar",    add_scalar,      mul_scalar, scale_scalar,  axpy_scalar,
      relu_scalar, relu_bwd_scalar, exp_scalar, matmul_scalar, conv2d_scalar,
  };
  return k;
}

}  // namespace md::kern
