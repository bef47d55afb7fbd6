#pragma once

#include "petsr/core_model.hpp"
#include "petsr/forward_model.hpp"

namespace petsr {

inline constexpr double kDefaultEpsilon = 1e-8;

struct LikelihoodEval {
  double nll = 0.0;
  GridImage grad;
  double lambda_min = 0.0;  // min over bins of A(z) + eps
};

/// Poisson negative log-likelihood up to constants:
///   sum_i lambda_i - y_i * log(lambda_i + eps),  lambda = forward_expected(z).
double poisson_nll(const GridImage& z, const Sinogram& y, const ScannerConfig& cfg, PsfMode mode,
                   double epsilon = kDefaultEpsilon);

/// NLL together with its analytic gradient A^T (1 - y / (lambda + eps)).
/// The background is a constant and does not enter the gradient.
LikelihoodEval poisson_nll_grad(const GridImage& z, const Sinogram& y, const ScannerConfig& cfg, PsfMode mode,
                                double epsilon = kDefaultEpsilon);

/// NLL for precomputed expected counts; exposed for callers that already hold lambda.
double poisson_nll_from_expected(const Sinogram& lambda, const Sinogram& y, double epsilon = kDefaultEpsilon);

}  // namespace petsr
