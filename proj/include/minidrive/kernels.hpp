#pragma once
// Hot inner loops behind a runtime-dispatched table. Every entry has a scalar
// reference implementation; an AVX2 variant is selected at startup when the
// CPU supports it. Both variants must produce bit-identical output (they use
// the same accumulation order and no FMA), which the kernel tests enforce.

#include <cstddef>

namespace md::kern {

struct Conv2dShape {
  int c_in, h_in, w_in;
  int c_out, k;        // square kernel, k odd
  int stride, pad;
  int h_out, w_out;
};

struct Kernels {
  const char* name;

  void (*add)(const double* a, const double* b, double* out, std::size_t n);
  void (*mul)(const double* a, const double* b, double* out, std::size_t n);
  void (*scale)(const double* a, double c, double* out, std::size_t n);
  // y += alpha * x
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  void (*relu)(const double* a, double* out, std::size_t n);
  // out = g where a > 0 else 0 (backward mask for relu)
  void (*relu_bwd)(const double* a, const double* g, double* out, std::size_t n);
  // elementwise exp via a shared range-reduction polynomial (~1e-14 rel);
  // scalar and SIMD variants perform the identical operation sequence
  void (*exp_vec)(const double* a, double* out, std::size_t n);
  // C[MxN] += A[MxK] * B[KxN]; caller zero-fills C when needed
  void (*matmul)(const double* a, const double* b, double* c, int m, int k, int n);
  // out[c_out][h_out][w_out] += cross-correlation of in with w; bias optional
  void (*conv2d)(const double* in, const double* w, const double* bias,
                 double* out, const Conv2dShape& s);
};

const Kernels& scalar();
// nullptr when unavailable on this CPU / not compiled in.
const Kernels* avx2();

// Selected once per process. MINIDRIVE_KERNELS=scalar|avx2 overrides.
const Kernels& active();

namespace detail {
// Shared constants of the exp kernel: x = n*ln2 + r, e^x = 2^n * P(r).
// Horner coefficients of P, highest degree first.
constexpr double kExpClamp = 708.0;
constexpr double kLog2E = 1.4426950408889634074;
constexpr double kLn2Hi = 6.93147180369123816490e-01;
constexpr double kLn2Lo = 1.90821492927058770002e-10;
constexpr double kExpPoly[12] = {
    1.0 / 39916800.0, 1.0 / 3628800.0, 1.0 / 362880.0, 1.0 / 40320.0,
    1.0 / 5040.0,     1.0 / 720.0,     1.0 / 120.0,    1.0 / 24.0,
    1.0 / 6.0,        0.5,             1.0,            1.0,
};
}  // namespace detail

}  // namespace md::kern
