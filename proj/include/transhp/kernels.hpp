#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "transhp/fastmath.hpp"

// Dense kernels used by the tensor ops. Every kernel accumulates each output
// element in a fixed index order on a single thread, so results are bitwise
// identical for any thread count. OpenMP splits work across independent
// output elements only.
//
// The project builds with -ffp-contract=off so fp64 results match the naive
// reference loops bit-for-bit; the float instantiations are routed through
// src/kernels_f32.cpp, which re-enables FMA contraction for throughput.
//
// transhp::ref holds the serial naive counterparts (textbook triple loops,
// direct formulas). Tests use them as oracles and tools/bench_kernels
// compares the two.

namespace transhp::kern {

// Parallelism cutoff: below this many scalar ops the parallel region costs
// more than it saves (tiny tensors dominate the gradient-check workloads).
inline constexpr long kParMin = 1 << 15;

namespace detail {

// C[m,n] = A[m,k] * B[k,n]  (+= when accumulate)
template <class S>
void mm_nn_generic(const S* A, const S* B, S* C, int m, int k, int n, bool accumulate) {
  const long work = static_cast<long>(m) * k * n;
#pragma omp parallel for schedule(static) if (work > kParMin)
  for (int i = 0; i < m; ++i) {
    S* c = C + static_cast<size_t>(i) * n;
    if (!accumulate) std::fill(c, c + n, S(0));
    const S* a = A + static_cast<size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const S av = a[p];
      const S* b = B + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

// C[k,n] = A[m,k]^T * B[m,n]  (+= when accumulate)
template <class S>
void mm_tn_generic(const S* A, const S* B, S* C, int m, int k, int n, bool accumulate) {
  const long work = static_cast<long>(m) * k * n;
#pragma omp parallel for schedule(static) if (work > kParMin)
  for (int p = 0; p < k; ++p) {
    S* c = C + static_cast<size_t>(p) * n;
    if (!accumulate) std::fill(c, c + n, S(0));
    for (int i = 0; i < m; ++i) {
      const S av = A[static_cast<size_t>(i) * k + p];
      const S* b = B + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

template <class S>
void transpose_generic(const S* A, S* At, int m, int n) {
  const long work = static_cast<long>(m) * n;
#pragma omp parallel for schedule(static) if (work > kParMin)
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < m; ++i)
      At[static_cast<size_t>(j) * m + i] = A[static_cast<size_t>(i) * n + j];
}

// C[m,n] = A[m,k] * B[n,k]^T, via an explicit transpose of B. The dot-product
// form leaves a serial FP dependency chain that defeats vectorization.
template <class S>
void mm_nt_generic(const S* A, const S* B, S* C, int m, int k, int n, bool accumulate) {
  std::vector<S> Bt(static_cast<size_t>(k) * n);
  transpose_generic(B, Bt.data(), n, k);
  mm_nn_generic(A, Bt.data(), C, m, k, n, accumulate);
}

// Batched variants over L independent [m,k]x[k,n] products.
template <class S>
void bmm_nn_generic(const S* A, const S* B, S* C, int L, int m, int k, int n) {
  const size_t sa = static_cast<size_t>(m) * k, sb = static_cast<size_t>(k) * n,
               sc = static_cast<size_t>(m) * n;
  const long work = static_cast<long>(L) * m * k * n;
#pragma omp parallel for collapse(2) schedule(static) if (work > kParMin)
  for (int l = 0; l < L; ++l) {
    for (int i = 0; i < m; ++i) {
      const S* a = A + sa * l + static_cast<size_t>(i) * k;
      const S* bb = B + sb * l;
      S* c = C + sc * l + static_cast<size_t>(i) * n;
      std::fill(c, c + n, S(0));
      for (int p = 0; p < k; ++p) {
        const S av = a[p];
        const S* b = bb + static_cast<size_t>(p) * n;
        for (int j = 0; j < n; ++j) c[j] += av * b[j];
      }
    }
  }
}

// C[l] = A[l] (m,k) * B[l] (n,k)^T
template <class S>
void bmm_nt_generic(const S* A, const S* B, S* C, int L, int m, int k, int n) {
  std::vector<S> Bt(static_cast<size_t>(L) * k * n);
  const size_t sb = static_cast<size_t>(n) * k;
  const long twork = static_cast<long>(L) * n * k;
#pragma omp parallel for schedule(static) if (twork > kParMin)
  for (int l = 0; l < L; ++l)
    for (int j = 0; j < k; ++j)
      for (int i = 0; i < n; ++i)
        Bt[sb * l + static_cast<size_t>(j) * n + i] = B[sb * l + static_cast<size_t>(i) * k + j];
  bmm_nn_generic(A, Bt.data(), C, L, m, k, n);
}

// C[l] = A[l] (m,k)^T * B[l] (m,n)
template <class S>
void bmm_tn_generic(const S* A, const S* B, S* C, int L, int m, int k, int n) {
  const size_t sa = static_cast<size_t>(m) * k, sb = static_cast<size_t>(m) * n,
               sc = static_cast<size_t>(k) * n;
  const long work = static_cast<long>(L) * m * k * n;
#pragma omp parallel for collapse(2) schedule(static) if (work > kParMin)
  for (int l = 0; l < L; ++l) {
    for (int p = 0; p < k; ++p) {
      S* c = C + sc * l + static_cast<size_t>(p) * n;
      std::fill(c, c + n, S(0));
      for (int i = 0; i < m; ++i) {
        const S av = A[sa * l + static_cast<size_t>(i) * k + p];
        const S* b = B + sb * l + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) c[j] += av * b[j];
      }
    }
  }
}

// out[n] = sum over rows of A[m,n], rows added in ascending order.
template <class S>
void colsum_generic(const S* A, S* out, int m, int n, bool accumulate) {
  const long work = static_cast<long>(m) * n;
#pragma omp parallel for schedule(static) if (work > kParMin)
  for (int j = 0; j < n; ++j) {
    S acc = accumulate ? out[j] : S(0);
    for (int i = 0; i < m; ++i) acc += A[static_cast<size_t>(i) * n + j];
    out[j] = acc;
  }
}

// Row-wise softmax with unconditional max-subtraction. The exponent and
// scale passes vectorize; the max and sum passes stay sequential so the
// reduction order is fixed.
template <class S>
void softmax_rows_generic(const S* x, S* y, long rows, int n) {
  const long work = rows * n;
#pragma omp parallel for schedule(static) if (work > kParMin)
  for (long r = 0; r < rows; ++r) {
    const S* xr = x + r * n;
    S* yr = y + r * n;
    S mx = xr[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, xr[j]);
    for (int j = 0; j < n; ++j) yr[j] = fastmath::exp_approx(xr[j] - mx);
    S sum = S(0);
    for (int j = 0; j < n; ++j) sum += yr[j];
    const S inv = S(1) / sum;
    for (int j = 0; j < n; ++j) yr[j] *= inv;
  }
}

// Backward of row softmax: dx += (dy - <dy,y>) * y per row.
template <class S>
void softmax_rows_backward_generic(const S* y, const S* dy, S* dx, long rows, int n) {
  const long work = rows * n;
#pragma omp parallel for schedule(static) if (work > kParMin)
  for (long r = 0; r < rows; ++r) {
    const S* yr = y + r * n;
    const S* dyr = dy + r * n;
    S* dxr = dx + r * n;
    S dot = S(0);
    for (int j = 0; j < n; ++j) dot += dyr[j] * yr[j];
    for (int j = 0; j < n; ++j) dxr[j] += (dyr[j] - dot) * yr[j];
  }
}

}  // namespace detail

// float entry points living in the FMA-enabled translation unit
void mm_nn_f32(const float* A, const float* B, float* C, int m, int k, int n, bool accumulate);
void mm_tn_f32(const float* A, const float* B, float* C, int m, int k, int n, bool accumulate);
void mm_nt_f32(const float* A, const float* B, float* C, int m, int k, int n, bool accumulate);
void bmm_nn_f32(const float* A, const float* B, float* C, int L, int m, int k, int n);
void bmm_nt_f32(const float* A, const float* B, float* C, int L, int m, int k, int n);
void bmm_tn_f32(const float* A, const float* B, float* C, int L, int m, int k, int n);
void colsum_f32(const float* A, float* out, int m, int n, bool accumulate);
void softmax_rows_f32(const float* x, float* y, long rows, int n);
void softmax_rows_backward_f32(const float* y, const float* dy, float* dx, long rows, int n);

template <class S>
void mm_nn(const S* A, const S* B, S* C, int m, int k, int n, bool accumulate = false) {
  detail::mm_nn_generic(A, B, C, m, k, n, accumulate);
}
template <>
inline void mm_nn<float>(const float* A, const float* B, float* C, int m, int k, int n, bool acc) {
  mm_nn_f32(A, B, C, m, k, n, acc);
}

template <class S>
void mm_tn(const S* A, const S* B, S* C, int m, int k, int n, bool accumulate = false) {
  detail::mm_tn_generic(A, B, C, m, k, n, accumulate);
}
template <>
inline void mm_tn<float>(const float* A, const float* B, float* C, int m, int k, int n, bool acc) {
  mm_tn_f32(A, B, C, m, k, n, acc);
}

template <class S>
void mm_nt(const S* A, const S* B, S* C, int m, int k, int n, bool accumulate = false) {
  detail::mm_nt_generic(A, B, C, m, k, n, accumulate);
}
template <>
inline void mm_nt<float>(const float* A, const float* B, float* C, int m, int k, int n, bool acc) {
  mm_nt_f32(A, B, C, m, k, n, acc);
}

template <class S>
void transpose(const S* A, S* At, int m, int n) {
  detail::transpose_generic(A, At, m, n);
}

template <class S>
void bmm_nn(const S* A, const S* B, S* C, int L, int m, int k, int n) {
  detail::bmm_nn_generic(A, B, C, L, m, k, n);
}
template <>
inline void bmm_nn<float>(const float* A, const float* B, float* C, int L, int m, int k, int n) {
  bmm_nn_f32(A, B, C, L, m, k, n);
}

template <class S>
void bmm_nt(const S* A, const S* B, S* C, int L, int m, int k, int n) {
  detail::bmm_nt_generic(A, B, C, L, m, k, n);
}
template <>
inline void bmm_nt<float>(const float* A, const float* B, float* C, int L, int m, int k, int n) {
  bmm_nt_f32(A, B, C, L, m, k, n);
}

template <class S>
void bmm_tn(const S* A, const S* B, S* C, int L, int m, int k, int n) {
  detail::bmm_tn_generic(A, B, C, L, m, k, n);
}
template <>
inline void bmm_tn<float>(const float* A, const float* B, float* C, int L, int m, int k, int n) {
  bmm_tn_f32(A, B, C, L, m, k, n);
}

template <class S>
void colsum(const S* A, S* out, int m, int n, bool accumulate = false) {
  detail::colsum_generic(A, out, m, n, accumulate);
}
template <>
inline void colsum<float>(const float* A, float* out, int m, int n, bool acc) {
  colsum_f32(A, out, m, n, acc);
}

template <class S>
void softmax_rows(const S* x, S* y, long rows, int n) {
  detail::softmax_rows_generic(x, y, rows, n);
}
template <>
inline void softmax_rows<float>(const float* x, float* y, long rows, int n) {
  softmax_rows_f32(x, y, rows, n);
}

template <class S>
void softmax_rows_backward(const S* y, const S* dy, S* dx, long rows, int n) {
  detail::softmax_rows_backward_generic(y, dy, dx, rows, n);
}
template <>
inline void softmax_rows_backward<float>(const float* y, const float* dy, float* dx, long rows,
                                         int n) {
  softmax_rows_backward_f32(y, dy, dx, rows, n);
}

}  // namespace transhp::kern

namespace transhp::ref {

// Naive i,j,p triple loop; the per-element summation order matches
// kern::mm_nn, so fp64 results agree bit-for-bit.
template <class S>
void matmul(const S* A, const S* B, S* C, int m, int k, int n) {
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      S acc = S(0);
      for (int p = 0; p < k; ++p)
        acc += A[static_cast<size_t>(i) * k + p] * B[static_cast<size_t>(p) * n + j];
      C[static_cast<size_t>(i) * n + j] = acc;
    }
}

// Direct exp/sum, no max-subtraction: the oracle form, valid away from
// overflow.
template <class S>
void softmax_rows(const S* x, S* y, long rows, int n) {
  for (long r = 0; r < rows; ++r) {
    S sum = S(0);
    for (int j = 0; j < n; ++j) {
      y[r * n + j] = std::exp(x[r * n + j]);
      sum += y[r * n + j];
    }
    for (int j = 0; j < n; ++j) y[r * n + j] /= sum;
  }
}

// Explicit mean/variance normalization.
template <class S>
void layer_norm_rows(const S* x, const S* gain, const S* bias, S eps, S* y, long rows, int n) {
  for (long r = 0; r < rows; ++r) {
    S mean = S(0);
    for (int j = 0; j < n; ++j) mean += x[r * n + j];
    mean /= S(n);
    S var = S(0);
    for (int j = 0; j < n; ++j) {
      const S d = x[r * n + j] - mean;
      var += d * d;
    }
    var /= S(n);
    const S inv = S(1) / std::sqrt(var + eps);
    for (int j = 0; j < n; ++j) y[r * n + j] = (x[r * n + j] - mean) * inv * gain[j] + bias[j];
  }
}

// -log softmax(logits)[target], direct formula.
template <class S>
S cross_entropy(const S* logits, int n, int target) {
  S sum = S(0);
  for (int j = 0; j < n; ++j) sum += std::exp(logits[j]);
  return std::log(sum) - logits[target];
}

template <class S>
S gelu(S x) {
  const S c = std::sqrt(S(2) / S(M_PI));
  return S(0.5) * x * (S(1) + std::tanh(c * (x + S(0.044715) * x * x * x)));
}

}  // namespace transhp::ref
