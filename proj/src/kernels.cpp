#include "srnn/kernels.hpp"

#include <omp.h>

#include <cstdlib>
#include <string>

namespace srnn::kernels {

namespace {

int initial_threads() {
  if (const char* env = std::getenv("SRNN_NUM_THREADS")) {
    try {
      const int n = std::stoi(env);
      if (n > 0) return n;
    } catch (...) {
    }
  }
  return omp_get_max_threads();
}

int& thread_count() {
  static int n = initial_threads();
  return n;
}

// Row blocks small enough that a single-row problem does not spawn a team.
bool worth_parallel(std::size_t rows, std::size_t work) { return thread_count() > 1 && rows > 1 && work > 32768; }

}  // namespace

int num_threads() { return thread_count(); }

void set_num_threads(int n) { thread_count() = n > 0 ? n : 1; }

void matmul(const double* A, const double* B, double* C, std::size_t M, std::size_t K, std::size_t N) {
  const long rows = static_cast<long>(M);
#pragma omp parallel for schedule(static) num_threads(thread_count()) if (worth_parallel(M, M * K * N))
  for (long i = 0; i < rows; ++i) {
    double* c = C + i * N;
    for (std::size_t j = 0; j < N; ++j) c[j] = 0.0;
    const double* a = A + i * K;
    for (std::size_t k = 0; k < K; ++k) {
      const double aik = a[k];
      const double* b = B + k * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += aik * b[j];
    }
  }
}

void matmul_nt(const double* A, const double* B, double* C, std::size_t M, std::size_t K, std::size_t N) {
  const long rows = static_cast<long>(M);
#pragma omp parallel for schedule(static) num_threads(thread_count()) if (worth_parallel(M, M * K * N))
  for (long i = 0; i < rows; ++i) {
    const double* a = A + i * K;
    for (std::size_t j = 0; j < N; ++j) {
      const double* b = B + j * K;
      double s = 0.0;
      for (std::size_t k = 0; k < K; ++k) s += a[k] * b[k];
      C[i * N + j] = s;
    }
  }
}

void matmul_tn(const double* A, const double* B, double* C, std::size_t M, std::size_t K, std::size_t N) {
  const long rows = static_cast<long>(K);
#pragma omp parallel for schedule(static) num_threads(thread_count()) if (worth_parallel(K, M * K * N))
  for (long k = 0; k < rows; ++k) {
    double* c = C + k * N;
    for (std::size_t j = 0; j < N; ++j) c[j] = 0.0;
    for (std::size_t m = 0; m < M; ++m) {
      const double amk = A[m * K + k];
      const double* b = B + m * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += amk * b[j];
    }
  }
}

namespace reference {

void matmul(const double* A, const double* B, double* C, std::size_t M, std::size_t K, std::size_t N) {
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < N; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < K; ++k) s += A[i * K + k] * B[k * N + j];
      C[i * N + j] = s;
    }
}

void matmul_nt(const double* A, const double* B, double* C, std::size_t M, std::size_t K, std::size_t N) {
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < N; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < K; ++k) s += A[i * K + k] * B[j * K + k];
      C[i * N + j] = s;
    }
}

void matmul_tn(const double* A, const double* B, double* C, std::size_t M, std::size_t K, std::size_t N) {
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t j = 0; j < N; ++j) {
      double s = 0.0;
      for (std::size_t m = 0; m < M; ++m) s += A[m * K + k] * B[m * N + j];
      C[k * N + j] = s;
    }
}

}  // namespace reference

}  // namespace srnn::kernels
