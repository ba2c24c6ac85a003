#include "nn/gemm.hpp"

#include <algorithm>
#include <cstring>
#include <vector>

namespace voxelseg::nn {
namespace {

constexpr int kMr = 8;

template <typename T>
constexpr int kNr = 128 / static_cast<int>(sizeof(T));  // two 512-bit vectors

template <typename T>
thread_local std::vector<T> t_pack_a;
template <typename T>
thread_local std::vector<T> t_pack_b;

// Ap: [K][kMr] panel, B: K rows of kNr contiguous values (stride ldb).
template <typename T>
inline void micro_kernel(int K, const T* __restrict Ap, const T* __restrict B, int ldb, T* __restrict C, int ldc, int mr,
                         int nr, bool accumulate) {
  constexpr int NR = kNr<T>;
  T acc[kMr][NR];
  for (int i = 0; i < kMr; ++i)
    for (int j = 0; j < NR; ++j) acc[i][j] = T(0);
  for (int k = 0; k < K; ++k) {
    const T* b = B + static_cast<std::int64_t>(k) * ldb;
    const T* a = Ap + static_cast<std::int64_t>(k) * kMr;
#pragma GCC unroll 8
    for (int i = 0; i < kMr; ++i) {
      const T ai = a[i];
#pragma GCC unroll 32
      for (int j = 0; j < NR; ++j) acc[i][j] += ai * b[j];
    }
  }
  for (int i = 0; i < mr; ++i) {
    T* c = C + static_cast<std::int64_t>(i) * ldc;
    if (accumulate) {
      for (int j = 0; j < nr; ++j) c[j] += acc[i][j];
    } else {
      for (int j = 0; j < nr; ++j) c[j] = acc[i][j];
    }
  }
}

}  // namespace

template <typename T>
void gemm(int M, int N, int K, const T* A, int lda, const T* B, int ldb, T* C, int ldc, bool accumulate) {
  constexpr int NR = kNr<T>;
  if (M <= 0 || N <= 0) return;
  if (K <= 0) {
    if (!accumulate)
      for (int i = 0; i < M; ++i) std::fill(C + static_cast<std::int64_t>(i) * ldc, C + static_cast<std::int64_t>(i) * ldc + N, T(0));
    return;
  }
  const int panels = (M + kMr - 1) / kMr;
  auto& pa = t_pack_a<T>;
  pa.assign(static_cast<std::size_t>(panels) * K * kMr, T(0));
  for (int p = 0; p < panels; ++p) {
    T* dst = pa.data() + static_cast<std::size_t>(p) * K * kMr;
    for (int i = 0; i < kMr && p * kMr + i < M; ++i) {
      const T* src = A + static_cast<std::int64_t>(p * kMr + i) * lda;
      for (int k = 0; k < K; ++k) dst[k * kMr + i] = src[k];
    }
  }
  auto& pb = t_pack_b<T>;
  for (int j0 = 0; j0 < N; j0 += NR) {
    const int nr = std::min(NR, N - j0);
    const T* bptr = B + j0;
    int bld = ldb;
    if (nr < NR) {
      pb.assign(static_cast<std::size_t>(K) * NR, T(0));
      for (int k = 0; k < K; ++k) std::memcpy(pb.data() + static_cast<std::size_t>(k) * NR, B + static_cast<std::int64_t>(k) * ldb + j0, sizeof(T) * nr);
      bptr = pb.data();
      bld = NR;
    }
    for (int p = 0; p < panels; ++p) {
      const int mr = std::min(kMr, M - p * kMr);
      micro_kernel<T>(K, pa.data() + static_cast<std::size_t>(p) * K * kMr, bptr, bld,
                      C + static_cast<std::int64_t>(p * kMr) * ldc + j0, ldc, mr, nr, accumulate);
    }
  }
}

template <typename T>
void gemm_abt(int M, int K, int N, const T* A, int lda, const T* B, int ldb, T* C, int ldc) {
  if (M <= 0 || K <= 0 || N <= 0) return;
  static thread_local std::vector<T> bt;
  bt.resize(static_cast<std::size_t>(N) * K);
  constexpr int kBlock = 32;
  for (int k0 = 0; k0 < K; k0 += kBlock) {
    for (int j0 = 0; j0 < N; j0 += kBlock) {
      const int k1 = std::min(K, k0 + kBlock);
      const int j1 = std::min(N, j0 + kBlock);
      for (int k = k0; k < k1; ++k) {
        const T* src = B + static_cast<std::int64_t>(k) * ldb;
        for (int j = j0; j < j1; ++j) bt[static_cast<std::size_t>(j) * K + k] = src[j];
      }
    }
  }
  gemm<T>(M, K, N, A, lda, bt.data(), K, C, ldc, true);
}

template void gemm<float>(int, int, int, const float*, int, const float*, int, float*, int, bool);
template void gemm<double>(int, int, int, const double*, int, const double*, int, double*, int, bool);
template void gemm_abt<float>(int, int, int, const float*, int, const float*, int, float*, int);
template void gemm_abt<double>(int, int, int, const double*, int, const double*, int, double*, int);

}  // namespace voxelseg::nn
