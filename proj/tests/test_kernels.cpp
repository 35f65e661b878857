#include <doctest.h>

#include <array>
#include <random>
#include <vector>

#include "srnn/kernels.hpp"

using namespace srnn;

namespace {

std::vector<double> random_buffer(std::mt19937_64& rng, std::size_t n) {
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<double> v(n);
  for (double& x : v) x = d(rng);
  return v;
}

struct ThreadGuard {
  int saved = kernels::num_threads();
  ~ThreadGuard() { kernels::set_num_threads(saved); }
};

}  // namespace

TEST_CASE("parallel kernels agree bitwise with the serial reference") {
  ThreadGuard guard;
  std::mt19937_64 rng(1);
  // Includes shapes below and above the parallel threshold.
  const std::array<std::array<std::size_t, 3>, 4> shapes{{{1, 5, 3}, {7, 3, 11}, {256, 64, 64}, {300, 37, 129}}};
  for (auto [M, K, N] : shapes) {
    const auto A = random_buffer(rng, M * K), B = random_buffer(rng, K * N), Bt = random_buffer(rng, N * K);
    const auto G = random_buffer(rng, M * N);
    for (int threads : {1, 2, 4}) {
      kernels::set_num_threads(threads);
      INFO("M=" << M << " K=" << K << " N=" << N << " threads=" << threads);
      std::vector<double> c(M * N), r(M * N), ct(K * N), rt(K * N);
      kernels::matmul(A.data(), B.data(), c.data(), M, K, N);
      kernels::reference::matmul(A.data(), B.data(), r.data(), M, K, N);
      CHECK(c == r);
      kernels::matmul_nt(A.data(), Bt.data(), c.data(), M, K, N);
      kernels::reference::matmul_nt(A.data(), Bt.data(), r.data(), M, K, N);
      CHECK(c == r);
      kernels::matmul_tn(A.data(), G.data(), ct.data(), M, K, N);
      kernels::reference::matmul_tn(A.data(), G.data(), rt.data(), M, K, N);
      CHECK(ct == rt);
    }
  }
}

TEST_CASE("kernel values on a small case") {
  const std::vector<double> A{1, 2, 3, 4, 5, 6};  // 2x3
  const std::vector<double> B{1, 0, 0, 1, 1, 1};  // 3x2
  std::vector<double> C(4);
  kernels::matmul(A.data(), B.data(), C.data(), 2, 3, 2);
  CHECK(C == std::vector<double>{4, 5, 10, 11});
  kernels::set_num_threads(0);
  CHECK(kernels::num_threads() == 1);
}
