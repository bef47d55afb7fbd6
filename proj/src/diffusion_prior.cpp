#include "petsr/diffusion_prior.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace petsr {

GridImage to_model_space(const GridImage& z, const TransformParams& p) {
  GridImage x = GridImage::like(z);
  x.set_units(Units::model_space);
  for (std::size_t i = 0; i < z.size(); ++i) x[i] = std::asinh(z[i] / p.s_scale) / p.kappa;
  return x;
}

GridImage from_model_space(const GridImage& x, const TransformParams& p, bool clamp_nonnegative, std::size_t* clamped) {
  GridImage z = GridImage::like(x);
  z.set_units(Units::activity);
  std::size_t n_clamped = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double arg = p.kappa * x[i];
    if (!(std::abs(arg) <= 700.0)) {
      std::ostringstream os;
      os << "from_model_space: |kappa * x| = " << std::abs(arg) << " overflows at pixel " << i;
      throw NumericalError(os.str());
    }
    double v = p.s_scale * std::sinh(arg);
    if (clamp_nonnegative && v < 0.0) {
      v = 0.0;
      ++n_clamped;
    }
    z[i] = v;
  }
  if (clamped) *clamped = n_clamped;
  return z;
}

TransformParams calibrate_transform(const std::vector<GridImage>& images, double s_scale) {
  std::vector<double> values;
  for (const auto& img : images) {
    for (double v : img.values()) values.push_back(std::asinh(v / s_scale));
  }
  if (values.empty()) throw ConfigError("calibrate_transform: no images");
  const auto k = static_cast<std::size_t>(std::floor(0.995 * static_cast<double>(values.size() - 1)));
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(k), values.end());
  const double q = values[k];
  if (!(q > 0.0)) throw ConfigError("calibrate_transform: 99.5th percentile is not positive");
  return {s_scale, q};
}

NoiseSchedule::NoiseSchedule(std::vector<double> betas) : betas_(std::move(betas)) {
  if (betas_.empty()) throw ConfigError("noise schedule: at least one step required");
  alpha_bars_.reserve(betas_.size());
  double prod = 1.0;
  for (double b : betas_) {
    if (!(b > 0.0 && b < 1.0)) throw ConfigError("noise schedule: betas must lie in (0,1)");
    prod *= 1.0 - b;
    alpha_bars_.push_back(prod);
  }
}

NoiseSchedule make_schedule(std::uint32_t T, double beta_min, double beta_max) {
  if (T == 0) throw ConfigError("make_schedule: T must be positive");
  if (!(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0)) {
    throw ConfigError("make_schedule: need 0 < beta_min <= beta_max < 1");
  }
  std::vector<double> betas(T);
  for (std::uint32_t i = 0; i < T; ++i) {
    const double f = T == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(T - 1);
    betas[i] = beta_min + (beta_max - beta_min) * f;
  }
  return NoiseSchedule(std::move(betas));
}

GridImage add_noise(const GridImage& x0, std::uint32_t t, const NoiseSchedule& sched, const GridImage& noise) {
  if (!x0.same_grid(noise)) throw GeometryError("add_noise: noise grid mismatch");
  const double ab = sched.alpha_bar(t);
  const double a = std::sqrt(ab);
  const double b = std::sqrt(1.0 - ab);
  GridImage out = GridImage::like(x0);
  for (std::size_t i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + b * noise[i];
  return out;
}

GridImage tweedie_estimate(const GridImage& x_t, std::uint32_t t, const GridImage& eps_hat, const NoiseSchedule& sched) {
  if (!x_t.same_grid(eps_hat)) throw GeometryError("tweedie_estimate: grid mismatch");
  const double ab = sched.alpha_bar(t);
  if (!(ab > 0.0)) throw NumericalError("tweedie_estimate: alpha_bar is zero at t=" + std::to_string(t));
  const double a = std::sqrt(ab);
  const double b = std::sqrt(1.0 - ab);
  GridImage out = GridImage::like(x_t);
  for (std::size_t i = 0; i < x_t.size(); ++i) out[i] = (x_t[i] - b * eps_hat[i]) / a;
  return out;
}

GaussianAnalyticDenoiser::GaussianAnalyticDenoiser(GridImage mean, double tau, NoiseSchedule sched)
    : mean_(std::move(mean)), tau_(tau), sched_(std::move(sched)) {
  if (!(tau > 0.0)) throw ConfigError("gaussian denoiser: tau must be positive");
}

GridImage GaussianAnalyticDenoiser::posterior_mean(const GridImage& x_t, std::uint32_t t) const {
  if (!x_t.same_grid(mean_)) throw GeometryError("gaussian denoiser: grid mismatch");
  // x_t | x0 ~ N(sqrt(ab) x0, 1 - ab) with x0 ~ N(m, tau^2).
  const double ab = sched_.alpha_bar(t);
  const double a = std::sqrt(ab);
  const double tau2 = tau_ * tau_;
  const double gain = a * tau2 / (ab * tau2 + (1.0 - ab));
  GridImage out = GridImage::like(x_t);
  for (std::size_t i = 0; i < x_t.size(); ++i) out[i] = mean_[i] + gain * (x_t[i] - a * mean_[i]);
  return out;
}

GridImage GaussianAnalyticDenoiser::predict(const GridImage& x_t, std::uint32_t t, const GridImage&) const {
  const double ab = sched_.alpha_bar(t);
  const double a = std::sqrt(ab);
  const double b = std::sqrt(1.0 - ab);
  const GridImage mu = posterior_mean(x_t, t);
  GridImage eps = GridImage::like(x_t);
  for (std::size_t i = 0; i < x_t.size(); ++i) eps[i] = (x_t[i] - a * mu[i]) / b;
  return eps;
}

std::shared_ptr<const Denoiser> gaussian_analytic_denoiser(GridImage mean, double tau, NoiseSchedule sched) {
  return std::make_shared<GaussianAnalyticDenoiser>(std::move(mean), tau, std::move(sched));
}

}  // namespace petsr
