#pragma once

#include <span>
#include <vector>

#include "cllora/numerics/matrix.hpp"
#include "cllora/numerics/rng.hpp"

namespace cllora {

// i.i.d. N(0, std^2) entries in row-major draw order. std must be > 0.
Matrix sample_normal(Rng& rng, std::size_t rows, std::size_t cols, double std);

// Gamma(shape, 1) via Marsaglia-Tsang; shape < 1 uses the
// Gamma(shape + 1) * U^(1/shape) boost.
double sample_gamma(Rng& rng, double shape);

// Natural log of a Gamma(shape, 1) draw. Stays finite for tiny shapes where
// the draw itself would underflow.
double sample_log_gamma(Rng& rng, double shape);

// Point on the probability simplex. Requires alpha.size() >= 2 and every
// alpha[i] > 0.
std::vector<double> sample_dirichlet(Rng& rng, std::span<const double> alpha);
std::vector<double> sample_dirichlet_symmetric(Rng& rng, double alpha, std::size_t dim);

} // namespace cllora
