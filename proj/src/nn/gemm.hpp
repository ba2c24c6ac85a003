#pragma once

#include <cstdint>

namespace voxelseg::nn {

/// C[M x N] = (accumulate ? C : 0) + A[M x K] * B[K x N], all row-major.
/// Every output element is accumulated over k in ascending order, so the
/// result does not depend on how callers split the N dimension.
template <typename T>
void gemm(int M, int N, int K, const T* A, int lda, const T* B, int ldb, T* C, int ldc, bool accumulate);

/// C[M x K] += A[M x N] * B[K x N]^T (row-by-row dot products of length N).
template <typename T>
void gemm_abt(int M, int K, int N, const T* A, int lda, const T* B, int ldb, T* C, int ldc);

}  // namespace voxelseg::nn
