#include "minidrive/kernels.hpp"

#include <cstdlib>
#include <cstring>

namespace md::kern {

#ifndef MINIDRIVE_HAVE_AVX2
const Kernels* avx2() { return nullptr; }
#endif

namespace {

const Kernels& select() {
  const char* want = std::getenv("MINIDRIVE_KERNELS");
  if (want && std::strcmp(want, "scalar") == 0) return scalar();
  const Kernels* simd = avx2();
  if (want && std::strcmp(want, "avx2") == 0 && simd) return *simd;
  return simd ? *simd : scalar();
}

}  // namespace

const Kernels& active() {
  static const Kernels& k = select();
  return k;
}

}  // namespace md::kern
