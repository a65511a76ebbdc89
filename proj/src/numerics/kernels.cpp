#include "cllora/numerics/kernels.hpp"

#include <fmt/format.h>
#include <omp.h>

#include "cllora/errors.hpp"

namespace cllora::kernels {

namespace {

void check_ab(const Matrix& a, const Matrix& b, const char* op) {
    if (a.cols() != b.rows()) {
        throw ShapeError(fmt::format("{}: inner dimensions differ ({} x {})", op, a.shape_string(), b.shape_string()));
    }
}

void check_atb(const Matrix& a, const Matrix& b, const char* op) {
    if (a.rows() != b.rows()) {
        throw ShapeError(fmt::format("{}: a^T*b needs equal row counts ({} vs {})", op, a.shape_string(),
                                     b.shape_string()));
    }
}

void check_abt(const Matrix& a, const Matrix& b, const char* op) {
    if (a.cols() != b.cols()) {
        throw ShapeError(fmt::format("{}: a*b^T needs equal column counts ({} vs {})", op, a.shape_string(),
                                     b.shape_string()));
    }
}

void reset(Matrix& out, std::size_t rows, std::size_t cols) {
    if (out.rows() != rows || out.cols() != cols) {
        out = Matrix(rows, cols);
    } else {
        out.fill(0.0);
    }
}

// One output row of a*b: out[j] += a[i,k] * b[k,j] for k ascending.
inline void ab_row(const Matrix& a, const Matrix& b, Matrix& out, std::size_t i) {
    const std::size_t inner = a.cols();
    const std::size_t n = b.cols();
    double* o = out.data() + i * n;
    const double* ai = a.data() + i * inner;
    for (std::size_t k = 0; k < inner; ++k) {
        const double aik = ai[k];
        const double* bk = b.data() + k * n;
        for (std::size_t j = 0; j < n; ++j) {
            o[j] += aik * bk[j];
        }
    }
}

// One output row of a^T*b: out[i,j] += a[k,i] * b[k,j] for k ascending.
inline void atb_row(const Matrix& a, const Matrix& b, Matrix& out, std::size_t i) {
    const std::size_t depth = a.rows();
    const std::size_t m = a.cols();
    const std::size_t n = b.cols();
    double* o = out.data() + i * n;
    for (std::size_t k = 0; k < depth; ++k) {
        const double aki = a.data()[k * m + i];
        const double* bk = b.data() + k * n;
        for (std::size_t j = 0; j < n; ++j) {
            o[j] += aki * bk[j];
        }
    }
}

// a*b^T is computed as a*(b^T) so the inner loop runs along contiguous
// output columns; the accumulation order over k is unchanged.
Matrix transposed(const Matrix& b) {
    Matrix t(b.cols(), b.rows());
    for (std::size_t i = 0; i < b.rows(); ++i) {
        for (std::size_t j = 0; j < b.cols(); ++j) {
            t.data()[j * b.rows() + i] = b.data()[i * b.cols() + j];
        }
    }
    return t;
}

} // namespace

namespace serial {

void matmul(const Matrix& a, const Matrix& b, Matrix& out) {
    check_ab(a, b, "matmul");
    reset(out, a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        ab_row(a, b, out, i);
    }
}

void matmul_at(const Matrix& a, const Matrix& b, Matrix& out) {
    check_atb(a, b, "matmul_at");
    reset(out, a.cols(), b.cols());
    for (std::size_t i = 0; i < a.cols(); ++i) {
        atb_row(a, b, out, i);
    }
}

void matmul_bt(const Matrix& a, const Matrix& b, Matrix& out) {
    check_abt(a, b, "matmul_bt");
    reset(out, a.rows(), b.rows());
    const Matrix bt = transposed(b);
    for (std::size_t i = 0; i < a.rows(); ++i) {
        ab_row(a, bt, out, i);
    }
}

} // namespace serial

namespace parallel {

void matmul(const Matrix& a, const Matrix& b, Matrix& out) {
    check_ab(a, b, "matmul");
    reset(out, a.rows(), b.cols());
    const auto rows = static_cast<std::ptrdiff_t>(a.rows());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < rows; ++i) {
        ab_row(a, b, out, static_cast<std::size_t>(i));
    }
}

void matmul_at(const Matrix& a, const Matrix& b, Matrix& out) {
    check_atb(a, b, "matmul_at");
    reset(out, a.cols(), b.cols());
    const auto rows = static_cast<std::ptrdiff_t>(a.cols());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < rows; ++i) {
        atb_row(a, b, out, static_cast<std::size_t>(i));
    }
}

void matmul_bt(const Matrix& a, const Matrix& b, Matrix& out) {
    check_abt(a, b, "matmul_bt");
    reset(out, a.rows(), b.rows());
    const Matrix bt = transposed(b);
    const auto rows = static_cast<std::ptrdiff_t>(a.rows());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < rows; ++i) {
        ab_row(a, bt, out, static_cast<std::size_t>(i));
    }
}

} // namespace parallel

namespace {
bool use_parallel(std::size_t work) {
    return work >= kParallelThreshold && !omp_in_parallel() && omp_get_max_threads() > 1;
}
} // namespace

} // namespace cllora::kernels

namespace cllora {

Matrix matmul(const Matrix& a, const Matrix& b) {
    Matrix out;
    if (kernels::use_parallel(a.rows() * a.cols() * b.cols())) {
        kernels::parallel::matmul(a, b, out);
    } else {
        kernels::serial::matmul(a, b, out);
    }
    return out;
}

Matrix matmul_at(const Matrix& a, const Matrix& b) {
    Matrix out;
    if (kernels::use_parallel(a.rows() * a.cols() * b.cols())) {
        kernels::parallel::matmul_at(a, b, out);
    } else {
        kernels::serial::matmul_at(a, b, out);
    }
    return out;
}

Matrix matmul_bt(const Matrix& a, const Matrix& b) {
    Matrix out;
    if (kernels::use_parallel(a.rows() * a.cols() * b.rows())) {
        kernels::parallel::matmul_bt(a, b, out);
    } else {
        kernels::serial::matmul_bt(a, b, out);
    }
    return out;
}

} // namespace cllora
