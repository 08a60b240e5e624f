#pragma once

#include <cstddef>
#include <string_view>

// Dense double-precision kernels behind every matrix product in the library.
// Each kernel has a portable scalar reference and an AVX2+FMA variant; the
// variant is picked once at startup from CPUID and can be pinned with
// POSE_KERNELS=scalar|avx2 or set_isa().

namespace vitpose::kernels {

enum class Isa { scalar, avx2 };

bool isa_supported(Isa isa);
Isa active_isa();
/// Throws std::invalid_argument when the ISA is not available on this CPU.
void set_isa(Isa isa);
std::string_view isa_name(Isa isa);

/// C[m,n] = (accumulate ? C : 0) + op(A)[m,k] * op(B)[k,n]; row-major, leading dims in elements.
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
          const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate);
double dot(const double* x, const double* y, std::size_t n);
/// y += alpha * x
void axpy(double alpha, const double* x, double* y, std::size_t n);

namespace scalar {
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
          const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate);
double dot(const double* x, const double* y, std::size_t n);
void axpy(double alpha, const double* x, double* y, std::size_t n);
}  // namespace scalar

#if defined(__x86_64__) || defined(_M_X64)
namespace avx2 {
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
          const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate);
double dot(const double* x, const double* y, std::size_t n);
void axpy(double alpha, const double* x, double* y, std::size_t n);
}  // namespace avx2
#endif

}  // namespace vitpose::kernels
