#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace petsr {

// ---------------------------------------------------------------------------
// Errors. Every failure surfaced by the library derives from petsr::Error so
// callers (the CLI in particular) can map the kind onto a stable exit code.
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class GeometryError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class MetricError : public Error {
 public:
  using Error::Error;
};

class GenerationError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Grid images
// ---------------------------------------------------------------------------

enum class Units : std::uint32_t {
  activity = 0,     // MBq/mL-equivalent phantom units
  anatomy = 1,      // arbitrary structural intensity
  model_space = 2,  // arcsinh-transformed activity
};

/// Square-pixel 2D image, row-major, row 0 at the top (+y).
class GridImage {
 public:
  GridImage() = default;
  GridImage(std::size_t width, std::size_t height, double spacing_mm, Units units = Units::activity);
  GridImage(std::size_t width, std::size_t height, double spacing_mm, Units units, std::vector<double> data);

  static GridImage like(const GridImage& other, double fill = 0.0);

  std::size_t width() const { return width_; }
  std::size_t height() const { return height_; }
  std::size_t size() const { return data_.size(); }
  double spacing_mm() const { return spacing_mm_; }
  Units units() const { return units_; }
  void set_units(Units u) { units_ = u; }

  double& operator()(std::size_t row, std::size_t col) { return data_[row * width_ + col]; }
  double operator()(std::size_t row, std::size_t col) const { return data_[row * width_ + col]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  bool same_grid(const GridImage& other) const {
    return width_ == other.width_ && height_ == other.height_ && spacing_mm_ == other.spacing_mm_;
  }

  /// Throws NumericalError if any value is NaN or infinite.
  void require_finite(std::string_view what) const;

 private:
  std::size_t width_ = 0;
  std::size_t height_ = 0;
  double spacing_mm_ = 1.0;
  Units units_ = Units::activity;
  std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// Sinograms
// ---------------------------------------------------------------------------

enum class SinogramKind { expected_counts, sampled_counts };

/// Angle-major projection data: data[angle * n_radial + radial].
class Sinogram {
 public:
  Sinogram() = default;
  Sinogram(std::size_t n_angles, std::size_t n_radial, SinogramKind kind = SinogramKind::expected_counts);
  Sinogram(std::size_t n_angles, std::size_t n_radial, SinogramKind kind, std::vector<double> data);

  std::size_t n_angles() const { return n_angles_; }
  std::size_t n_radial() const { return n_radial_; }
  std::size_t size() const { return data_.size(); }
  SinogramKind kind() const { return kind_; }
  void set_kind(SinogramKind k) { kind_ = k; }

  double& operator()(std::size_t angle, std::size_t radial) { return data_[angle * n_radial_ + radial]; }
  double operator()(std::size_t angle, std::size_t radial) const { return data_[angle * n_radial_ + radial]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  bool same_shape(const Sinogram& other) const {
    return n_angles_ == other.n_angles_ && n_radial_ == other.n_radial_;
  }

 private:
  std::size_t n_angles_ = 0;
  std::size_t n_radial_ = 0;
  SinogramKind kind_ = SinogramKind::expected_counts;
  std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// Lesion masks
// ---------------------------------------------------------------------------

struct LesionMask {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> mask;  // 0/1 per pixel, row-major
  std::string label;

  std::size_t count() const;
};

// ---------------------------------------------------------------------------
// Configuration records
// ---------------------------------------------------------------------------

/// Parameterization of the low-quality acquisition operator.
///
/// `count_scale_norm` and `background_per_bin` are resolved per acquisition by
/// calibrate_acquisition(); a value of zero for the norm means "not calibrated".
struct ScannerConfig {
  double psf_fwhm_mm = 0.0;
  std::uint32_t n_angles_full = 120;
  std::uint32_t n_radial_full = 128;
  std::uint32_t angular_rebin = 1;
  std::uint32_t radial_rebin = 1;
  double dose_fraction = 1.0;
  double background_per_bin = 0.0;
  double background_fraction = 0.05;  // of the mean degraded expected counts
  double count_scale = 50.0;
  double count_scale_norm = 0.0;
  double target_spacing_mm = 2.0;
  double fov_mm = 256.0;  // full-resolution radial extent covers fov_mm * sqrt(2)

  bool operator==(const ScannerConfig&) const = default;
};

struct PpcrConfig {
  std::uint32_t n_ddim_steps = 50;
  std::uint32_t psf_on_from_step = 36;
  std::uint32_t m_start = 2;
  std::uint32_t m_end = 20;
  double eta_dc = 0.05;
  double mu_nesterov = 0.9;
  double alpha_warmstart = 0.3;
  bool nonneg_projection = true;

  bool operator==(const PpcrConfig&) const = default;
};

enum class ScannerPreset { standard, ood };

ScannerPreset parse_preset(std::string_view name);
std::string_view preset_name(ScannerPreset p);

/// Applies the degradation preset (FWHM, dose, rebin factors, target spacing)
/// on top of `base`. Unknown names throw ConfigError.
ScannerConfig preset_scanner(std::string_view name, const ScannerConfig& base = ScannerConfig{});
ScannerConfig preset_scanner(ScannerPreset preset, const ScannerConfig& base = ScannerConfig{});

/// Returns every violated invariant; empty means valid.
std::vector<std::string> validate(const ScannerConfig& cfg);
std::vector<std::string> validate(const PpcrConfig& cfg);

/// Throws ConfigError listing all violations.
void require_valid(const ScannerConfig& cfg);
void require_valid(const PpcrConfig& cfg);

// Small vector helpers shared across modules.
double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);
double sum(std::span<const double> a);

}  // namespace petsr
