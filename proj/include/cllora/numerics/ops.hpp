#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "cllora/numerics/matrix.hpp"

namespace cllora {

Matrix add(const Matrix& a, const Matrix& b);
void add_inplace(Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, double s);
void scale_inplace(Matrix& a, double s);
Matrix transpose(const Matrix& a);

// Adds `bias` (1 x cols) to every row.
void add_row_bias(Matrix& a, const Matrix& bias);

// Row-wise softmax.
Matrix softmax_rows(const Matrix& x);
// Gradient w.r.t. softmax input given y = softmax_rows(x) and dL/dy.
Matrix softmax_rows_backward(const Matrix& y, const Matrix& dy);

struct LayerNormCache {
    Matrix normalized;               // (x - mean) * rstd
    std::vector<double> rstd;        // per row
};

struct LayerNormGrads {
    Matrix dx;
    Matrix dgain;
    Matrix dbias;
};

inline constexpr double kLayerNormEps = 1e-5;

// Row-wise layer norm with affine gain/bias (each 1 x cols).
Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias, LayerNormCache* cache = nullptr);
Matrix layer_norm_backward_input(const Matrix& dy, const LayerNormCache& cache, const Matrix& gain);
LayerNormGrads layer_norm_backward(const Matrix& dy, const LayerNormCache& cache, const Matrix& gain);

// tanh-approximated GELU.
Matrix gelu(const Matrix& x);
Matrix gelu_backward(const Matrix& x, const Matrix& dy);

struct CrossEntropy {
    double loss = 0.0;
    Matrix grad;
};

// Mean over rows of -log softmax(logits)[target]; grad = (softmax - onehot) / T.
CrossEntropy cross_entropy(const Matrix& logits, std::span<const std::uint32_t> targets);

// Summed negative log-likelihood; `grad` (if non-null) receives
// grad_scale * (softmax - onehot). Used to build token-weighted batch losses.
double cross_entropy_sum(const Matrix& logits, std::span<const std::uint32_t> targets, double grad_scale,
                         Matrix* grad);

// params <- params - eta * grads
void sgd_step(Matrix& params, const Matrix& grads, double eta);

} // namespace cllora
