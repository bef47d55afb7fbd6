#include "petsr/core_model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace petsr {

GridImage::GridImage(std::size_t width, std::size_t height, double spacing_mm, Units units)
    : GridImage(width, height, spacing_mm, units, std::vector<double>(width * height, 0.0)) {}

GridImage::GridImage(std::size_t width, std::size_t height, double spacing_mm, Units units,
                     std::vector<double> data)
    : width_(width), height_(height), spacing_mm_(spacing_mm), units_(units), data_(std::move(data)) {
  if (width == 0 || height == 0) {
    throw GeometryError("GridImage: width and height must be positive");
  }
  if (!(spacing_mm > 0.0) || !std::isfinite(spacing_mm)) {
    throw GeometryError("GridImage: spacing_mm must be positive");
  }
  if (data_.size() != width * height) {
    std::ostringstream os;
    os << "GridImage: data length " << data_.size() << " != " << width << "x" << height;
    throw GeometryError(os.str());
  }
}

GridImage GridImage::like(const GridImage& other, double fill) {
  return GridImage(other.width_, other.height_, other.spacing_mm_, other.units_,
                   std::vector<double>(other.size(), fill));
}

void GridImage::require_finite(std::string_view what) const {
  for (std::size_t i = 0; i < data_.size(); ++i) {
    if (!std::isfinite(data_[i])) {
      std::ostringstream os;
      os << what << ": non-finite value at pixel " << i << " (row " << i / width_ << ", col "
         << i % width_ << ")";
      throw NumericalError(os.str());
    }
  }
}

Sinogram::Sinogram(std::size_t n_angles, std::size_t n_radial, SinogramKind kind)
    : Sinogram(n_angles, n_radial, kind, std::vector<double>(n_angles * n_radial, 0.0)) {}

Sinogram::Sinogram(std::size_t n_angles, std::size_t n_radial, SinogramKind kind, std::vector<double> data)
    : n_angles_(n_angles), n_radial_(n_radial), kind_(kind), data_(std::move(data)) {
  if (n_angles == 0 || n_radial == 0) {
    throw GeometryError("Sinogram: n_angles and n_radial must be positive");
  }
  if (data_.size() != n_angles * n_radial) {
    std::ostringstream os;
    os << "Sinogram: data length " << data_.size() << " != " << n_angles << "x" << n_radial;
    throw GeometryError(os.str());
  }
  if (kind_ == SinogramKind::sampled_counts) {
    for (double v : data_) {
      if (!(v >= 0.0) || v != std::floor(v)) {
        throw DomainError("Sinogram: sampled counts must be nonnegative integers");
      }
    }
  }
}

std::size_t LesionMask::count() const {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

ScannerPreset parse_preset(std::string_view name) {
  if (name == "standard" || name == "std") return ScannerPreset::standard;
  if (name == "ood") return ScannerPreset::ood;
  throw ConfigError("unknown scanner preset '" + std::string(name) + "' (expected standard|ood)");
}

std::string_view preset_name(ScannerPreset p) {
  return p == ScannerPreset::standard ? "standard" : "ood";
}

ScannerConfig preset_scanner(std::string_view name, const ScannerConfig& base) {
  return preset_scanner(parse_preset(name), base);
}

ScannerConfig preset_scanner(ScannerPreset preset, const ScannerConfig& base) {
  ScannerConfig cfg = base;
  switch (preset) {
    case ScannerPreset::standard:
      cfg.psf_fwhm_mm = 8.0;
      cfg.dose_fraction = 0.10;
      cfg.angular_rebin = 2;
      cfg.radial_rebin = 2;
      cfg.target_spacing_mm = 8.0;
      break;
    case ScannerPreset::ood:
      cfg.psf_fwhm_mm = 12.0;
      cfg.dose_fraction = 0.05;
      cfg.angular_rebin = 3;
      cfg.radial_rebin = 2;
      cfg.target_spacing_mm = 12.0;
      break;
  }
  return cfg;
}

std::vector<std::string> validate(const ScannerConfig& cfg) {
  std::vector<std::string> v;
  auto finite = [](double x) { return std::isfinite(x); };
  if (!(cfg.psf_fwhm_mm >= 0.0) || !finite(cfg.psf_fwhm_mm)) v.emplace_back("psf_fwhm_mm must be >= 0");
  if (cfg.n_angles_full == 0) v.emplace_back("n_angles_full must be positive");
  if (cfg.n_radial_full == 0) v.emplace_back("n_radial_full must be positive");
  if (cfg.angular_rebin == 0) {
    v.emplace_back("angular_rebin must be positive");
  } else if (cfg.n_angles_full % cfg.angular_rebin != 0) {
    v.emplace_back("n_angles_full (" + std::to_string(cfg.n_angles_full) + ") must be divisible by angular_rebin (" +
                   std::to_string(cfg.angular_rebin) + ")");
  }
  if (cfg.radial_rebin == 0) {
    v.emplace_back("radial_rebin must be positive");
  } else if (cfg.n_radial_full % cfg.radial_rebin != 0) {
    v.emplace_back("n_radial_full (" + std::to_string(cfg.n_radial_full) + ") must be divisible by radial_rebin (" +
                   std::to_string(cfg.radial_rebin) + ")");
  }
  if (!(cfg.dose_fraction > 0.0 && cfg.dose_fraction <= 1.0)) v.emplace_back("dose_fraction must be in (0,1]");
  if (!(cfg.background_per_bin >= 0.0) || !finite(cfg.background_per_bin))
    v.emplace_back("background_per_bin must be >= 0");
  if (!(cfg.background_fraction >= 0.0) || !finite(cfg.background_fraction))
    v.emplace_back("background_fraction must be >= 0");
  if (!(cfg.count_scale > 0.0) || !finite(cfg.count_scale)) v.emplace_back("count_scale must be positive");
  if (!(cfg.count_scale_norm >= 0.0) || !finite(cfg.count_scale_norm))
    v.emplace_back("count_scale_norm must be >= 0 (0 = uncalibrated)");
  if (!(cfg.target_spacing_mm > 0.0) || !finite(cfg.target_spacing_mm))
    v.emplace_back("target_spacing_mm must be positive");
  if (!(cfg.fov_mm > 0.0) || !finite(cfg.fov_mm)) v.emplace_back("fov_mm must be positive");
  return v;
}

std::vector<std::string> validate(const PpcrConfig& cfg) {
  std::vector<std::string> v;
  if (cfg.n_ddim_steps == 0) v.emplace_back("n_ddim_steps must be positive");
  if (cfg.psf_on_from_step < 1 || cfg.psf_on_from_step > cfg.n_ddim_steps + 1)
    v.emplace_back("psf_on_from_step must be in [1, n_ddim_steps + 1]");
  if (cfg.m_start > cfg.m_end) v.emplace_back("m_start must be <= m_end");
  if (!(cfg.eta_dc > 0.0) || !std::isfinite(cfg.eta_dc)) v.emplace_back("eta_dc must be positive");
  if (!(cfg.mu_nesterov >= 0.0 && cfg.mu_nesterov < 1.0)) v.emplace_back("mu_nesterov must be in [0,1)");
  if (!(cfg.alpha_warmstart >= 0.0 && cfg.alpha_warmstart <= 1.0))
    v.emplace_back("alpha_warmstart must be in [0,1]");
  return v;
}

namespace {

template <class Config>
void require_valid_impl(const Config& cfg, std::string_view what) {
  auto v = validate(cfg);
  if (v.empty()) return;
  std::string msg(what);
  msg += " invalid:";
  for (const auto& s : v) msg += "\n  - " + s;
  throw ConfigError(msg);
}

double pairwise_sum(std::span<const double> a) {
  if (a.size() <= 16) {
    double s = 0.0;
    for (double v : a) s += v;
    return s;
  }
  const std::size_t half = a.size() / 2;
  return pairwise_sum(a.first(half)) + pairwise_sum(a.subspan(half));
}

}  // namespace

void require_valid(const ScannerConfig& cfg) { require_valid_impl(cfg, "ScannerConfig"); }
void require_valid(const PpcrConfig& cfg) { require_valid_impl(cfg, "PpcrConfig"); }

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  const std::size_t n = std::min(a.size(), b.size());
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

double sum(std::span<const double> a) { return pairwise_sum(a); }

}  // namespace petsr
