#pragma once

#include "cllora/numerics/matrix.hpp"

// Dense products in three layouts. Every output element is accumulated from
// 0.0 in ascending inner index, left to right, so the serial and OpenMP
// variants are bit-identical and either can stand in for the other.
namespace cllora::kernels {

namespace serial {
// out = a * b
void matmul(const Matrix& a, const Matrix& b, Matrix& out);
// out = a^T * b
void matmul_at(const Matrix& a, const Matrix& b, Matrix& out);
// out = a * b^T
void matmul_bt(const Matrix& a, const Matrix& b, Matrix& out);
} // namespace serial

namespace parallel {
void matmul(const Matrix& a, const Matrix& b, Matrix& out);
void matmul_at(const Matrix& a, const Matrix& b, Matrix& out);
void matmul_bt(const Matrix& a, const Matrix& b, Matrix& out);
} // namespace parallel

// Products at or above this many multiply-adds go to the OpenMP variant when
// not already inside a parallel region.
inline constexpr std::size_t kParallelThreshold = std::size_t{1} << 18;

} // namespace cllora::kernels

namespace cllora {

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix matmul_at(const Matrix& a, const Matrix& b);
Matrix matmul_bt(const Matrix& a, const Matrix& b);

} // namespace cllora
