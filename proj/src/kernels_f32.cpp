// Float kernel instantiations. This translation unit builds with FMA
// contraction enabled (see CMakeLists); the rest of the project keeps
// -ffp-contract=off so fp64 matches the naive reference loops bit-for-bit.

#include "transhp/kernels.hpp"

namespace transhp::kern {

void mm_nn_f32(const float* A, const float* B, float* C, int m, int k, int n, bool accumulate) {
  detail::mm_nn_generic(A, B, C, m, k, n, accumulate);
}
void mm_tn_f32(const float* A, const float* B, float* C, int m, int k, int n, bool accumulate) {
  detail::mm_tn_generic(A, B, C, m, k, n, accumulate);
}
void mm_nt_f32(const float* A, const float* B, float* C, int m, int k, int n, bool accumulate) {
  detail::mm_nt_generic(A, B, C, m, k, n, accumulate);
}
void bmm_nn_f32(const float* A, const float* B, float* C, int L, int m, int k, int n) {
  detail::bmm_nn_generic(A, B, C, L, m, k, n);
}
void bmm_nt_f32(const float* A, const float* B, float* C, int L, int m, int k, int n) {
  detail::bmm_nt_generic(A, B, C, L, m, k, n);
}
void bmm_tn_f32(const float* A, const float* B, float* C, int L, int m, int k, int n) {
  detail::bmm_tn_generic(A, B, C, L, m, k, n);
}
void colsum_f32(const float* A, float* out, int m, int n, bool accumulate) {
  detail::colsum_generic(A, out, m, n, accumulate);
}
void softmax_rows_f32(const float* x, float* y, long rows, int n) {
  detail::softmax_rows_generic(x, y, rows, n);
}
void softmax_rows_backward_f32(const float* y, const float* dy, float* dx, long rows, int n) {
  detail::softmax_rows_backward_generic(y, dy, dx, rows, n);
}

}  // namespace transhp::kern
