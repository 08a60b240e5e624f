#include <vector>

#include "vitpose/kernels.hpp"

namespace vitpose::kernels::scalar {

namespace {

// Row-major copy of op(src) with shape [rows, cols].
std::vector<double> pack(bool trans, std::size_t rows, std::size_t cols, const double* src, std::size_t ld) {
  std::vector<double> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = trans ? src[c * ld + r] : src[r * ld + c];
  }
  return out;
}

}  // namespace

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
          const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  std::vector<double> pa, pb;
  if (trans_a) {
    pa = pack(true, m, k, a, lda);
    a = pa.data();
    lda = k;
  }
  if (trans_b) {
    pb = pack(true, k, n, b, ldb);
    b = pb.data();
    ldb = n;
  }
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * ldc;
    if (!accumulate) {
      for (std::size_t j = 0; j < n; ++j) crow[j] = 0.0;
    }
    const double* arow = a + i * lda;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * ldb;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

double dot(const double* x, const double* y, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += x[i] * y[i];
  return s;
}

void axpy(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace vitpose::kernels::scalar
