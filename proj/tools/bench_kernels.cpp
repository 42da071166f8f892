// Times the OpenMP kernels against the serial reference implementations at
// the shapes the training loop actually hits, and cross-checks their outputs.

#include <chrono>
#include <cstdio>
#include <random>
#include <vector>

#include <omp.h>

#include "transhp/kernels.hpp"

namespace {

template <class F>
double seconds_per_call(F&& f, double min_time = 0.3) {
  f();  // warm-up
  const auto t0 = std::chrono::steady_clock::now();
  int iters = 0;
  double elapsed = 0.0;
  do {
    f();
    ++iters;
    elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  } while (elapsed < min_time);
  return elapsed / iters;
}

std::mt19937_64 rng(7);

std::vector<float> random_vec(size_t n) {
  std::uniform_real_distribution<float> d(-1.0f, 1.0f);
  std::vector<float> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

void bench_matmul(int m, int k, int n, const char* tag) {
  const auto A = random_vec(static_cast<size_t>(m) * k);
  const auto B = random_vec(static_cast<size_t>(k) * n);
  std::vector<float> Cp(static_cast<size_t>(m) * n), Cs(static_cast<size_t>(m) * n);
  const double par = seconds_per_call([&] { transhp::kern::mm_nn(A.data(), B.data(), Cp.data(), m, k, n); });
  const double ser = seconds_per_call([&] { transhp::ref::matmul(A.data(), B.data(), Cs.data(), m, k, n); });
  double maxdiff = 0.0;
  for (size_t i = 0; i < Cp.size(); ++i) maxdiff = std::max(maxdiff, static_cast<double>(std::abs(Cp[i] - Cs[i])));
  const double flops = 2.0 * m * k * n;
  std::printf("%-28s parallel %8.3f ms (%6.1f GF/s)   serial %8.3f ms (%6.1f GF/s)   speedup %5.2fx  maxdiff %.2e\n",
              tag, par * 1e3, flops / par / 1e9, ser * 1e3, flops / ser / 1e9, ser / par, maxdiff);
}

void bench_softmax(long rows, int n, const char* tag) {
  const auto X = random_vec(static_cast<size_t>(rows) * n);
  std::vector<float> Yp(X.size()), Ys(X.size());
  const double par = seconds_per_call([&] { transhp::kern::softmax_rows(X.data(), Yp.data(), rows, n); });
  const double ser = seconds_per_call([&] { transhp::ref::softmax_rows(X.data(), Ys.data(), rows, n); });
  double maxdiff = 0.0;
  for (size_t i = 0; i < Yp.size(); ++i) maxdiff = std::max(maxdiff, static_cast<double>(std::abs(Yp[i] - Ys[i])));
  std::printf("%-28s parallel %8.3f ms (%6.1f Melem/s) serial %8.3f ms (%6.1f Melem/s) speedup %5.2fx  maxdiff %.2e\n",
              tag, par * 1e3, X.size() / par / 1e6, ser * 1e3, X.size() / ser / 1e6, ser / par, maxdiff);
}

void bench_gelu(long n) {
  const auto X = random_vec(static_cast<size_t>(n));
  std::vector<float> Yp(X.size()), Ys(X.size());
  const double par = seconds_per_call([&] {
#pragma omp parallel for simd schedule(static)
    for (long i = 0; i < n; ++i) {
      const float x = X[static_cast<size_t>(i)];
      const float c = 0.7978845608f;
      const float t = transhp::fastmath::tanh_approx(c * (x + 0.044715f * x * x * x));
      Yp[static_cast<size_t>(i)] = 0.5f * x * (1.0f + t);
    }
  });
  const double ser = seconds_per_call([&] {
    for (long i = 0; i < n; ++i) Ys[static_cast<size_t>(i)] = transhp::ref::gelu(X[static_cast<size_t>(i)]);
  });
  double maxdiff = 0.0;
  for (size_t i = 0; i < Yp.size(); ++i) maxdiff = std::max(maxdiff, static_cast<double>(std::abs(Yp[i] - Ys[i])));
  std::printf("%-28s parallel %8.3f ms (%6.1f Melem/s) serial %8.3f ms (%6.1f Melem/s) speedup %5.2fx  maxdiff %.2e\n",
              "gelu 1M", par * 1e3, n / par / 1e6, ser * 1e3, n / ser / 1e6, ser / par, maxdiff);
}

}  // namespace

int main() {
  std::printf("threads: %d\n\n", omp_get_max_threads());
  // batch 64 of 65 tokens, embed 64: the projection shapes of the desk model
  bench_matmul(4160, 64, 192, "qkv projection");
  bench_matmul(4160, 64, 256, "mlp expand");
  bench_matmul(4160, 256, 64, "mlp contract");
  bench_matmul(4160, 64, 64, "attn output");
  bench_matmul(512, 512, 512, "square 512");
  std::printf("\n");
  bench_softmax(64 * 4 * 65, 65, "attention softmax rows");
  bench_gelu(1 << 20);
  return 0;
}
