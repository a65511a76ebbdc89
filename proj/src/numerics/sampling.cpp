#include "cllora/numerics/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>

#include "cllora/errors.hpp"

namespace cllora {

Matrix sample_normal(Rng& rng, std::size_t rows, std::size_t cols, double std) {
    if (!(std > 0.0)) {
        throw NumericError(fmt::format("sample_normal: std must be positive, got {}", std));
    }
    Matrix m(rows, cols);
    for (double& x : m.values()) {
        x = std * rng.normal();
    }
    return m;
}

namespace {

// Marsaglia & Tsang (2000), valid for shape >= 1.
double marsaglia_tsang(Rng& rng, double shape) {
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
        double x = 0.0;
        double v = 0.0;
        do {
            x = rng.normal();
            v = 1.0 + c * x;
        } while (v <= 0.0);
        v = v * v * v;
        double u = rng.uniform_open();
        double x2 = x * x;
        if (u < 1.0 - 0.0331 * x2 * x2) {
            return d * v;
        }
        if (std::log(u) < 0.5 * x2 + d * (1.0 - v + std::log(v))) {
            return d * v;
        }
    }
}

void require_shape(double shape) {
    if (!(shape > 0.0) || !std::isfinite(shape)) {
        throw NumericError(fmt::format("gamma shape must be positive and finite, got {}", shape));
    }
}

} // namespace

double sample_gamma(Rng& rng, double shape) {
    require_shape(shape);
    if (shape >= 1.0) {
        return marsaglia_tsang(rng, shape);
    }
    double g = marsaglia_tsang(rng, shape + 1.0);
    return g * std::pow(rng.uniform_open(), 1.0 / shape);
}

double sample_log_gamma(Rng& rng, double shape) {
    require_shape(shape);
    if (shape >= 1.0) {
        return std::log(marsaglia_tsang(rng, shape));
    }
    double g = marsaglia_tsang(rng, shape + 1.0);
    return std::log(g) + std::log(rng.uniform_open()) / shape;
}

std::vector<double> sample_dirichlet(Rng& rng, std::span<const double> alpha) {
    if (alpha.size() < 2) {
        throw NumericError(fmt::format("sample_dirichlet: need at least 2 components, got {}", alpha.size()));
    }
    for (std::size_t i = 0; i < alpha.size(); ++i) {
        if (!(alpha[i] > 0.0)) {
            throw NumericError(fmt::format("sample_dirichlet: alpha[{}] = {} is not positive", i, alpha[i]));
        }
    }
    // Normalize in log space: tiny shapes produce gamma draws far below the
    // smallest double.
    std::vector<double> logs(alpha.size());
    for (std::size_t i = 0; i < alpha.size(); ++i) {
        logs[i] = sample_log_gamma(rng, alpha[i]);
    }
    double top = *std::max_element(logs.begin(), logs.end());
    std::vector<double> p(alpha.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        p[i] = std::exp(logs[i] - top);
        sum += p[i];
    }
    for (double& x : p) {
        x /= sum;
    }
    // Second pass pulls the sum to 1 within a few ulps.
    double resum = 0.0;
    for (double x : p) {
        resum += x;
    }
    for (double& x : p) {
        x /= resum;
    }
    return p;
}

std::vector<double> sample_dirichlet_symmetric(Rng& rng, double alpha, std::size_t dim) {
    std::vector<double> a(dim, alpha);
    return sample_dirichlet(rng, a);
}

} // namespace cllora
