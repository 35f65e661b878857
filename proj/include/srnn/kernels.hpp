#pragma once

#include <cstddef>

// Dense row-major matrix kernels used by the MLP and its backward pass.
// The OpenMP versions split work over output rows only, so every output
// element is summed in the same order as the serial reference and the two
// agree bitwise for any thread count.
namespace srnn::kernels {

// C[M,N] = A[M,K] * B[K,N]
void matmul(const double* A, const double* B, double* C, std::size_t M, std::size_t K, std::size_t N);
// C[M,N] = A[M,K] * B[N,K]^T
void matmul_nt(const double* A, const double* B, double* C, std::size_t M, std::size_t K, std::size_t N);
// C[K,N] = A[M,K]^T * B[M,N]
void matmul_tn(const double* A, const double* B, double* C, std::size_t M, std::size_t K, std::size_t N);

/// Threads used by the kernels. Initialized from SRNN_NUM_THREADS if set,
/// otherwise the OpenMP default.
int num_threads();
void set_num_threads(int n);

namespace reference {
void matmul(const double* A, const double* B, double* C, std::size_t M, std::size_t K, std::size_t N);
void matmul_nt(const double* A, const double* B, double* C, std::size_t M, std::size_t K, std::size_t N);
void matmul_tn(const double* A, const double* B, double* C, std::size_t M, std::size_t K, std::size_t N);
}  // namespace reference

}  // namespace srnn::kernels
