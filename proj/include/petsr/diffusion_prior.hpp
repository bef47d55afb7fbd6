#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "petsr/core_model.hpp"

namespace petsr {

// ---------------------------------------------------------------------------
// Model-space transform: x = asinh(z / s) / kappa
// ---------------------------------------------------------------------------

struct TransformParams {
  double s_scale = 1.0;
  double kappa = 1.0;
  bool operator==(const TransformParams&) const = default;
};

GridImage to_model_space(const GridImage& z, const TransformParams& p);

/// z = s * sinh(kappa * x). Throws NumericalError when |kappa * x| > 700.
/// With clamp_nonnegative, negative activities are set to 0 and counted in
/// `clamped` (if given).
GridImage from_model_space(const GridImage& x, const TransformParams& p, bool clamp_nonnegative = false,
                           std::size_t* clamped = nullptr);

/// kappa such that the 99.5th percentile of asinh(z / s) over `images` maps to 1.
TransformParams calibrate_transform(const std::vector<GridImage>& images, double s_scale = 1.0);

// ---------------------------------------------------------------------------
// Noise schedule (1-based timesteps, alpha_bar(0) = 1)
// ---------------------------------------------------------------------------

class NoiseSchedule {
 public:
  NoiseSchedule() = default;
  explicit NoiseSchedule(std::vector<double> betas);

  std::uint32_t steps() const { return static_cast<std::uint32_t>(betas_.size()); }
  double beta(std::uint32_t t) const { return betas_.at(t - 1); }
  /// alpha_bar(t) for t in [0, T].
  double alpha_bar(std::uint32_t t) const { return t == 0 ? 1.0 : alpha_bars_.at(t - 1); }
  const std::vector<double>& betas() const { return betas_; }
  const std::vector<double>& alpha_bars() const { return alpha_bars_; }

 private:
  std::vector<double> betas_;
  std::vector<double> alpha_bars_;
};

inline constexpr std::uint32_t kDefaultTrainSteps = 1000;
inline constexpr double kDefaultBetaMin = 1e-4;
inline constexpr double kDefaultBetaMax = 0.02;

/// Linear beta from beta_min to beta_max over T steps.
NoiseSchedule make_schedule(std::uint32_t T = kDefaultTrainSteps, double beta_min = kDefaultBetaMin,
                            double beta_max = kDefaultBetaMax);

/// x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) noise.
GridImage add_noise(const GridImage& x0, std::uint32_t t, const NoiseSchedule& sched, const GridImage& noise);

/// x0_hat = (x_t - sqrt(1 - ab_t) eps_hat) / sqrt(ab_t).
GridImage tweedie_estimate(const GridImage& x_t, std::uint32_t t, const GridImage& eps_hat, const NoiseSchedule& sched);

// ---------------------------------------------------------------------------
// Denoisers
// ---------------------------------------------------------------------------

/// Noise predictor eps(x_t, t, c). Implementations must be safe for concurrent
/// calls to predict().
class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual GridImage predict(const GridImage& x_t, std::uint32_t t, const GridImage& condition) const = 0;
  virtual const NoiseSchedule& schedule() const = 0;
};

/// Exact MMSE noise predictor for the prior x0 ~ Normal(mean, tau^2 I).
class GaussianAnalyticDenoiser final : public Denoiser {
 public:
  GaussianAnalyticDenoiser(GridImage mean, double tau, NoiseSchedule sched);

  GridImage predict(const GridImage& x_t, std::uint32_t t, const GridImage& condition) const override;
  const NoiseSchedule& schedule() const override { return sched_; }

  /// E[x0 | x_t] for this prior.
  GridImage posterior_mean(const GridImage& x_t, std::uint32_t t) const;

 private:
  GridImage mean_;
  double tau_;
  NoiseSchedule sched_;
};

std::shared_ptr<const Denoiser> gaussian_analytic_denoiser(GridImage mean, double tau, NoiseSchedule sched);

}  // namespace petsr
