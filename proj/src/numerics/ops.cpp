#include "cllora/numerics/ops.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>
#include <numbers>

#include "cllora/errors.hpp"

namespace cllora {

Matrix add(const Matrix& a, const Matrix& b) {
    Matrix out = a;
    add_inplace(out, b);
    return out;
}

void add_inplace(Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "add");
    double* x = a.data();
    const double* y = b.data();
    for (std::size_t i = 0; i < a.size(); ++i) {
        x[i] += y[i];
    }
}

Matrix scale(const Matrix& a, double s) {
    Matrix out = a;
    scale_inplace(out, s);
    return out;
}

void scale_inplace(Matrix& a, double s) {
    for (double& x : a.values()) {
        x *= s;
    }
}

Matrix transpose(const Matrix& a) {
    Matrix out(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < a.cols(); ++j) {
            out(j, i) = a(i, j);
        }
    }
    return out;
}

void add_row_bias(Matrix& a, const Matrix& bias) {
    if (bias.rows() != 1 || bias.cols() != a.cols()) {
        throw ShapeError(fmt::format("add_row_bias: bias {} does not fit {}", bias.shape_string(), a.shape_string()));
    }
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto r = a.row(i);
        for (std::size_t j = 0; j < r.size(); ++j) {
            r[j] += bias.data()[j];
        }
    }
}

Matrix softmax_rows(const Matrix& x) {
    Matrix y(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        auto in = x.row(i);
        auto out = y.row(i);
        double top = *std::max_element(in.begin(), in.end());
        double sum = 0.0;
        for (std::size_t j = 0; j < in.size(); ++j) {
            out[j] = std::exp(in[j] - top);
            sum += out[j];
        }
        for (double& v : out) {
            v /= sum;
        }
    }
    return y;
}

Matrix softmax_rows_backward(const Matrix& y, const Matrix& dy) {
    require_same_shape(y, dy, "softmax_rows_backward");
    Matrix dx(y.rows(), y.cols());
    for (std::size_t i = 0; i < y.rows(); ++i) {
        auto yr = y.row(i);
        auto gr = dy.row(i);
        double dot = 0.0;
        for (std::size_t j = 0; j < yr.size(); ++j) {
            dot += yr[j] * gr[j];
        }
        auto out = dx.row(i);
        for (std::size_t j = 0; j < yr.size(); ++j) {
            out[j] = yr[j] * (gr[j] - dot);
        }
    }
    return dx;
}

namespace {
void check_affine(const Matrix& x, const Matrix& p, const char* what) {
    if (p.rows() != 1 || p.cols() != x.cols()) {
        throw ShapeError(fmt::format("layer_norm: {} {} does not fit input {}", what, p.shape_string(),
                                     x.shape_string()));
    }
}
} // namespace

Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias, LayerNormCache* cache) {
    check_affine(x, gain, "gain");
    check_affine(x, bias, "bias");
    const std::size_t n = x.cols();
    Matrix y(x.rows(), n);
    Matrix normalized(x.rows(), n);
    std::vector<double> rstd(x.rows());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        auto in = x.row(i);
        double mean = 0.0;
        for (double v : in) {
            mean += v;
        }
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (double v : in) {
            var += (v - mean) * (v - mean);
        }
        var /= static_cast<double>(n);
        double rs = 1.0 / std::sqrt(var + kLayerNormEps);
        rstd[i] = rs;
        auto xh = normalized.row(i);
        auto out = y.row(i);
        for (std::size_t j = 0; j < n; ++j) {
            xh[j] = (in[j] - mean) * rs;
            out[j] = xh[j] * gain.data()[j] + bias.data()[j];
        }
    }
    if (cache != nullptr) {
        cache->normalized = std::move(normalized);
        cache->rstd = std::move(rstd);
    }
    return y;
}

Matrix layer_norm_backward_input(const Matrix& dy, const LayerNormCache& cache, const Matrix& gain) {
    require_same_shape(dy, cache.normalized, "layer_norm_backward");
    const std::size_t n = dy.cols();
    const double inv_n = 1.0 / static_cast<double>(n);
    Matrix dx(dy.rows(), n);
    std::vector<double> dxhat(n);
    for (std::size_t i = 0; i < dy.rows(); ++i) {
        auto g = dy.row(i);
        auto xh = cache.normalized.row(i);
        double mean_d = 0.0;
        double mean_dx = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            dxhat[j] = g[j] * gain.data()[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xh[j];
        }
        mean_d *= inv_n;
        mean_dx *= inv_n;
        auto out = dx.row(i);
        for (std::size_t j = 0; j < n; ++j) {
            out[j] = cache.rstd[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    return dx;
}

LayerNormGrads layer_norm_backward(const Matrix& dy, const LayerNormCache& cache, const Matrix& gain) {
    LayerNormGrads g;
    g.dx = layer_norm_backward_input(dy, cache, gain);
    g.dgain = Matrix(1, dy.cols());
    g.dbias = Matrix(1, dy.cols());
    for (std::size_t i = 0; i < dy.rows(); ++i) {
        for (std::size_t j = 0; j < dy.cols(); ++j) {
            g.dgain.data()[j] += dy(i, j) * cache.normalized(i, j);
            g.dbias.data()[j] += dy(i, j);
        }
    }
    return g;
}

namespace {
constexpr double kGeluC = 0.7978845608028654; // sqrt(2/pi)
constexpr double kGeluK = 0.044715;
} // namespace

Matrix gelu(const Matrix& x) {
    Matrix y(x.rows(), x.cols());
    const double* in = x.data();
    double* out = y.data();
    for (std::size_t i = 0; i < x.size(); ++i) {
        double z = in[i];
        out[i] = 0.5 * z * (1.0 + std::tanh(kGeluC * (z + kGeluK * z * z * z)));
    }
    return y;
}

Matrix gelu_backward(const Matrix& x, const Matrix& dy) {
    require_same_shape(x, dy, "gelu_backward");
    Matrix dx(x.rows(), x.cols());
    const double* in = x.data();
    const double* g = dy.data();
    double* out = dx.data();
    for (std::size_t i = 0; i < x.size(); ++i) {
        double z = in[i];
        double t = std::tanh(kGeluC * (z + kGeluK * z * z * z));
        double d = 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluK * z * z);
        out[i] = g[i] * d;
    }
    return dx;
}

double cross_entropy_sum(const Matrix& logits, std::span<const std::uint32_t> targets, double grad_scale,
                         Matrix* grad) {
    if (targets.size() != logits.rows()) {
        throw ShapeError(fmt::format("cross_entropy: {} targets for logits {}", targets.size(),
                                     logits.shape_string()));
    }
    const std::size_t vocab = logits.cols();
    for (std::size_t t = 0; t < targets.size(); ++t) {
        if (targets[t] >= vocab) {
            throw NumericError(
                fmt::format("cross_entropy: target {} at position {} outside [0, {})", targets[t], t, vocab));
        }
    }
    if (grad != nullptr && (grad->rows() != logits.rows() || grad->cols() != vocab)) {
        *grad = Matrix(logits.rows(), vocab);
    }
    double total = 0.0;
    for (std::size_t t = 0; t < logits.rows(); ++t) {
        auto in = logits.row(t);
        double top = *std::max_element(in.begin(), in.end());
        double sum = 0.0;
        for (double v : in) {
            sum += std::exp(v - top);
        }
        double log_z = top + std::log(sum);
        total += log_z - in[targets[t]];
        if (grad != nullptr) {
            auto g = grad->row(t);
            for (std::size_t j = 0; j < vocab; ++j) {
                g[j] = grad_scale * std::exp(in[j] - log_z);
            }
            g[targets[t]] -= grad_scale;
        }
    }
    if (!std::isfinite(total)) {
        throw NumericError("cross_entropy: loss is not finite");
    }
    return total;
}

CrossEntropy cross_entropy(const Matrix& logits, std::span<const std::uint32_t> targets) {
    if (logits.rows() == 0) {
        throw ShapeError("cross_entropy: empty logits");
    }
    CrossEntropy out;
    const double inv_t = 1.0 / static_cast<double>(logits.rows());
    out.grad = Matrix(logits.rows(), logits.cols());
    out.loss = cross_entropy_sum(logits, targets, inv_t, &out.grad) * inv_t;
    return out;
}

void sgd_step(Matrix& params, const Matrix& grads, double eta) {
    require_same_shape(params, grads, "sgd_step");
    if (!(eta >= 0.0) || !std::isfinite(eta)) {
        throw NumericError(fmt::format("sgd_step: learning rate must be finite and non-negative, got {}", eta));
    }
    double* p = params.data();
    const double* g = grads.data();
    for (std::size_t i = 0; i < params.size(); ++i) {
        p[i] -= eta * g[i];
    }
    params.require_finite("sgd_step parameters");
}

} // namespace cllora
