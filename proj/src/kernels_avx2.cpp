// AVX2 variants. Accumulation order matches the scalar kernels exactly and
// multiply/add stay separate instructions, so outputs are bit-identical to
// the reference (-ffp-contract=off project-wide).

#include "minidrive/kernels.hpp"

#if defined(__x86_64__) || defined(__i386__)
#include <immintrin.h>

#include <cmath>
#include <cstdint>
#include <cstring>

namespace md::kern {
namespace {

void add_avx2(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  }
  for (; i < n; ++i) out[i] = a[i] + b[i];
}

void mul_avx2(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  }
  for (; i < n; ++i) out[i] = a[i] * b[i];
}

void scale_avx2(const double* a, double c, double* out, std::size_t n) {
  const __m256d vc = _mm256_set1_pd(c);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), vc));
  }
  for (; i < n; ++i) out[i] = a[i] * c;
}

void axpy_avx2(double alpha, const double* x, double* y, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d prod = _mm256_mul_pd(va, _mm256_loadu_pd(x + i));
    _mm256_storeu_pd(y + i, _mm256_add_pd(_mm256_loadu_pd(y + i), prod));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void relu_avx2(const double* a, double* out, std::size_t n) {
  const __m256d zero = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(out + i, _mm256_max_pd(_mm256_loadu_pd(a + i), zero));
  }
  for (; i < n; ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
}

void relu_bwd_avx2(const double* a, const double* g, double* out, std::size_t n) {
  const __m256d zero = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d mask = _mm256_cmp_pd(_mm256_loadu_pd(a + i), zero, _CMP_GT_OQ);
    _mm256_storeu_pd(out + i, _mm256_and_pd(mask, _mm256_loadu_pd(g + i)));
  }
  for (; i < n; ++i) out[i] = a[i] > 0.0 ? g[i] : 0.0;
}

inline double exp_one_tail(double x) {
  using namespace detail;
  if (x > kExpClamp) x = kExpClamp;
  if (x < -kExpClamp) x = -kExpClamp;
  const double nd = std::nearbyint(x * kLog2E);
  const double r = (x - nd * kLn2Hi) - nd * kLn2Lo;
  double p = kExpPoly[0];
  for (int i = 1; i < 12; ++i) p = p * r + kExpPoly[i];
  std::uint64_t bits = static_cast<std::uint64_t>(static_cast<int>(nd) + 1023) << 52;
  double scale;
  std::memcpy(&scale, &bits, sizeof scale);
  return p * scale;
}

void exp_avx2(const double* a, double* out, std::size_t n) {
  using namespace detail;
  const __m256d clamp_hi = _mm256_set1_pd(kExpClamp);
  const __m256d clamp_lo = _mm256_set1_pd(-kExpClamp);
  const __m256d log2e = _mm256_set1_pd(kLog2E);
  const __m256d ln2_hi = _mm256_set1_pd(kLn2Hi);
  const __m256d ln2_lo = _mm256_set1_pd(kLn2Lo);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d x = _mm256_loadu_pd(a + i);
    x = _mm256_min_pd(x, clamp_hi);
    x = _mm256_max_pd(x, clamp_lo);
    // nearest-even, matching std::nearbyint in the default FP environment
    const __m256d nd = _mm256_round_pd(_mm256_mul_pd(x, log2e),
                                       _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
    __m256d r = _mm256_sub_pd(x, _mm256_mul_pd(nd, ln2_hi));
    r = _mm256_sub_pd(r, _mm256_mul_pd(nd, ln2_lo));
    __m256d p = _mm256_set1_pd(kExpPoly[0]);
    for (int c = 1; c < 12; ++c)
      p = _mm256_add_pd(_mm256_mul_pd(p, r), _mm256_set1_pd(kExpPoly[c]));
    // 2^n assembled in the exponent field
    const __m128i n32 = _mm256_cvtpd_epi32(nd);
    const __m256i n64 = _mm256_cvtepi32_epi64(n32);
    const __m256i bits = _mm256_slli_epi64(_mm256_add_epi64(n64, _mm256_set1_epi64x(1023)), 52);
    _mm256_storeu_pd(out + i, _mm256_mul_pd(p, _mm256_castsi256_pd(bits)));
  }
  for (; i < n; ++i) out[i] = exp_one_tail(a[i]);
}

// C += A*B, (i, k, j) order with j vectorized: every C element still sees its
// k-terms in sequence, so rounding matches the scalar kernel.
void matmul_avx2(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<std::size_t>(i) * k;
    double* crow = c + static_cast<std::size_t>(i) * n;
    int j = 0;
    for (; j + 16 <= n; j += 16) {
      __m256d c0 = _mm256_loadu_pd(crow + j);
      __m256d c1 = _mm256_loadu_pd(crow + j + 4);
      __m256d c2 = _mm256_loadu_pd(crow + j + 8);
      __m256d c3 = _mm256_loadu_pd(crow + j + 12);
      for (int kk = 0; kk < k; ++kk) {
        const __m256d av = _mm256_set1_pd(arow[kk]);
        const double* brow = b + static_cast<std::size_t>(kk) * n + j;
        c0 = _mm256_add_pd(c0, _mm256_mul_pd(av, _mm256_loadu_pd(brow)));
        c1 = _mm256_add_pd(c1, _mm256_mul_pd(av, _mm256_loadu_pd(brow + 4)));
        c2 = _mm256_add_pd(c2, _mm256_mul_pd(av, _mm256_loadu_pd(brow + 8)));
        c3 = _mm256_add_pd(c3, _mm256_mul_pd(av, _mm256_loadu_pd(brow + 12)));
      }
      _mm256_storeu_pd(crow + j, c0);
      _mm256_storeu_pd(crow + j + 4, c1);
      _mm256_storeu_pd(crow + j + 8, c2);
      _mm256_storeu_pd(crow + j + 12, c3);
    }
    for (; j + 4 <= n; j += 4) {
      __m256d c0 = _mm256_loadu_pd(crow + j);
      for (int kk = 0; kk < k; ++kk) {
        const __m256d av = _mm256_set1_pd(arow[kk]);
        c0 = _mm256_add_pd(c0, _mm256_mul_pd(av, _mm256_loadu_pd(b + static_cast<std::size_t>(kk) * n + j)));
      }
      _mm256_storeu_pd(crow + j, c0);
    }
    for (; j < n; ++j) {
      double acc = crow[j];
      for (int kk = 0; kk < k; ++kk) acc += arow[kk] * b[static_cast<std::size_t>(kk) * n + j];
      crow[j] = acc;
    }
  }
}

// Interior outputs (all taps in-bounds for 4 consecutive wo) vectorized;
// boundary outputs fall back to the scalar tap loop.
void conv2d_avx2(const double* in, const double* w, const double* bias,
                 double* out, const Conv2dShape& s) {
  auto scalar_cell = [&](int co, int ho, int wo) {
    const double* wc = w + static_cast<std::size_t>(co) * s.c_in * s.k * s.k;
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
    out[(static_cast<std::size_t>(co) * s.h_out + ho) * s.w_out + wo] += acc;
  };

  for (int co = 0; co < s.c_out; ++co) {
    const double* wc = w + static_cast<std::size_t>(co) * s.c_in * s.k * s.k;
    double* oc = out + static_cast<std::size_t>(co) * s.h_out * s.w_out;
    const __m256d vbias = _mm256_set1_pd(bias ? bias[co] : 0.0);
    for (int ho = 0; ho < s.h_out; ++ho) {
      const int hi0 = ho * s.stride - s.pad;
      const bool h_ok = hi0 >= 0 && hi0 + s.k <= s.h_in;
      int wo = 0;
      if (h_ok) {
        for (; wo + 4 <= s.w_out; wo += 4) {
          const int wi0 = wo * s.stride - s.pad;
          const int wi_last = wi0 + 3 * s.stride + s.k - 1;
          if (wi0 < 0 || wi_last >= s.w_in) break;
          __m256d acc = vbias;
          for (int ci = 0; ci < s.c_in; ++ci) {
            const double* ic = in + static_cast<std::size_t>(ci) * s.h_in * s.w_in;
            const double* wk = wc + static_cast<std::size_t>(ci) * s.k * s.k;
            for (int kh = 0; kh < s.k; ++kh) {
              const double* irow = ic + (hi0 + kh) * s.w_in + wi0;
              for (int kw = 0; kw < s.k; ++kw) {
                __m256d iv;
                if (s.stride == 1) {
                  iv = _mm256_loadu_pd(irow + kw);
                } else {
                  iv = _mm256_setr_pd(irow[kw], irow[kw + s.stride],
                                      irow[kw + 2 * s.stride], irow[kw + 3 * s.stride]);
                }
                acc = _mm256_add_pd(acc, _mm256_mul_pd(iv, _mm256_set1_pd(wk[kh * s.k + kw])));
              }
            }
          }
          double* op = oc + ho * s.w_out + wo;
          _mm256_storeu_pd(op, _mm256_add_pd(_mm256_loadu_pd(op), acc));
        }
      }
      for (; wo < s.w_out; ++wo) scalar_cell(co, ho, wo);
    }
  }
}

}  // namespace

const Kernels* avx2() {
  if (!__builtin_cpu_supports("avx2")) return nullptr;
  static const Kernels k = {
      "avx2",    add_avx2,      mul_avx2, scale_avx2,  axpy_avx2,
      relu_avx2, relu_bwd_avx2, exp_avx2, matmul_avx2, conv2d_avx2,
  };
  return &k;
}

}  // namespace md::kern

#else

namespace md::kern {
const Kernels* avx2() { return nullptr; }
}  // namespace md::kern

#endif
