#include "petsr/likelihood.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace petsr {

namespace {

void check_inputs(const Sinogram& y, double epsilon) {
  if (y.kind() != SinogramKind::sampled_counts) {
    throw DomainError("poisson likelihood: measurements must be sampled counts");
  }
  if (!(epsilon > 0.0)) throw DomainError("poisson likelihood: epsilon must be positive");
}

}  // namespace

double poisson_nll_from_expected(const Sinogram& lambda, const Sinogram& y, double epsilon) {
  if (!lambda.same_shape(y)) throw GeometryError("poisson likelihood: measurement shape mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    // The clamp guards the log only; the linear term stays literal.
    const double arg = std::max(lambda[i], 0.0) + epsilon;
    const double term = lambda[i] - (y[i] == 0.0 ? 0.0 : y[i] * std::log(arg));
    if (!std::isfinite(term)) {
      throw NumericalError("poisson likelihood: non-finite term at bin " + std::to_string(i) + " (angle " +
                           std::to_string(i / y.n_radial()) + ", radial " + std::to_string(i % y.n_radial()) + ")");
    }
    total += term;
  }
  return total;
}

double poisson_nll(const GridImage& z, const Sinogram& y, const ScannerConfig& cfg, PsfMode mode, double epsilon) {
  check_inputs(y, epsilon);
  return poisson_nll_from_expected(forward_expected(z, cfg, mode), y, epsilon);
}

LikelihoodEval poisson_nll_grad(const GridImage& z, const Sinogram& y, const ScannerConfig& cfg, PsfMode mode,
                                double epsilon) {
  check_inputs(y, epsilon);
  const Sinogram lambda = forward_expected(z, cfg, mode);
  LikelihoodEval out;
  out.nll = poisson_nll_from_expected(lambda, y, epsilon);
  Sinogram ratio(lambda.n_angles(), lambda.n_radial());
  out.lambda_min = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double denom = std::max(lambda[i], 0.0) + epsilon;
    out.lambda_min = std::min(out.lambda_min, lambda[i] + epsilon);
    ratio[i] = 1.0 - y[i] / denom;
  }
  out.grad = adjoint_apply(ratio, cfg, mode, z);
  out.grad.require_finite("poisson likelihood gradient");
  return out;
}

}  // namespace petsr
