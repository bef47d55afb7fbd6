#pragma once

#include <cstdint>
#include <memory>
#include <string_view>
#include <utility>
#include <vector>

#include "petsr/core_model.hpp"
#include "petsr/rng.hpp"

namespace petsr {

// ---------------------------------------------------------------------------
// Point spread function
// ---------------------------------------------------------------------------

/// Separable, normalized, 4-sigma-truncated Gaussian.
struct PsfKernel {
  double fwhm_mm = 0.0;
  double sigma_px = 0.0;
  std::vector<double> taps{1.0};

  std::size_t half_width() const { return taps.size() / 2; }
  bool is_identity() const { return taps.size() == 1; }
};

/// 2*sqrt(2 ln 2): ratio between FWHM and sigma of a Gaussian.
inline constexpr double kFwhmPerSigma = 2.3548200450309493;

PsfKernel make_psf(double fwhm_mm, double spacing_mm);

/// Separable convolution with symmetric ("half-sample") reflection at the
/// borders, so constant images are preserved.
GridImage apply_psf(const GridImage& img, const PsfKernel& k);

/// Exact transpose of apply_psf. Coincides with apply_psf for images whose
/// support stays more than half_width() pixels away from the border.
GridImage apply_psf_adjoint(const GridImage& img, const PsfKernel& k);

// ---------------------------------------------------------------------------
// Parallel-beam projection
// ---------------------------------------------------------------------------

struct ProjectionGeometry {
  std::uint32_t n_angles = 0;  // uniform over [0, pi), first angle at angle_offset_rad
  std::uint32_t n_radial = 0;
  double radial_spacing_mm = 1.0;
  std::uint32_t image_size = 0;  // square images
  double image_spacing_mm = 1.0;
  double angle_offset_rad = 0.0;

  bool operator==(const ProjectionGeometry&) const = default;
  auto operator<=>(const ProjectionGeometry&) const = default;

  double angle(std::uint32_t a) const;
  double radial_offset_mm(std::uint32_t r) const;
};

/// Throws GeometryError when the radial extent does not cover the image diagonal.
void require_valid(const ProjectionGeometry& geom);

/// Ray-driven system matrix (CSR, one row per sinogram bin): each ray is
/// sampled every image_spacing/2 mm and every sample scatters its bilinear
/// weights, times the step length, onto the four neighboring pixels.
class SystemMatrix {
 public:
  explicit SystemMatrix(const ProjectionGeometry& geom);

  const ProjectionGeometry& geometry() const { return geom_; }
  std::size_t rows() const { return row_ptr_.size() - 1; }
  std::size_t cols() const { return static_cast<std::size_t>(geom_.image_size) * geom_.image_size; }
  std::size_t nonzeros() const { return cols_.size(); }

  void forward(std::span<const double> x, std::span<double> y) const;
  void adjoint(std::span<const double> y, std::span<double> x) const;

 private:
  ProjectionGeometry geom_;
  std::vector<std::uint32_t> row_ptr_;
  std::vector<std::uint32_t> cols_;
  std::vector<float> vals_;
};

/// Shared, immutable matrix for `geom`; built on first use and cached.
std::shared_ptr<const SystemMatrix> system_matrix(const ProjectionGeometry& geom);

Sinogram project(const GridImage& img, const ProjectionGeometry& geom);
GridImage backproject(const Sinogram& sino, const ProjectionGeometry& geom);

// ---------------------------------------------------------------------------
// Rebinning
// ---------------------------------------------------------------------------

/// Block sums over ang_factor x rad_factor bins.
Sinogram rebin(const Sinogram& sino, std::uint32_t ang_factor, std::uint32_t rad_factor);

/// Transpose of rebin: every output bin receives the value of its block.
Sinogram rebin_adjoint(const Sinogram& sino, std::uint32_t ang_factor, std::uint32_t rad_factor);

// ---------------------------------------------------------------------------
// Scanner-level operator
// ---------------------------------------------------------------------------

enum class PsfMode { identity, full };

std::string_view psf_mode_name(PsfMode m);

/// Full-resolution geometry for images on `img`'s grid under `cfg`.
ProjectionGeometry full_geometry(const ScannerConfig& cfg, std::uint32_t image_size, double image_spacing_mm);

/// Rebinned measurement dimensions (n_angles, n_radial).
std::pair<std::uint32_t, std::uint32_t> measured_shape(const ScannerConfig& cfg);

/// Resolves count_scale_norm (so that the full-dose, full-PSF mean expected
/// counts per measured bin of `reference` equals count_scale) and
/// background_per_bin (background_fraction of the dose-scaled mean).
ScannerConfig calibrate_acquisition(const GridImage& reference, const ScannerConfig& cfg);

/// Expected counts: dose * norm * rebin(project(H z)) + background.
Sinogram forward_expected(const GridImage& z, const ScannerConfig& cfg, PsfMode mode);

/// Transpose of the linear part of forward_expected, onto `grid`'s geometry.
GridImage adjoint_apply(const Sinogram& residual, const ScannerConfig& cfg, PsfMode mode, const GridImage& grid);

/// Poisson draw, inversion below 30 and rounded normal approximation above.
double sample_poisson(double lambda, Rng& rng);

struct Acquisition {
  Sinogram expected;
  Sinogram sampled;
  GridImage lr_reference;    // MLEM image at target_spacing_mm
  ScannerConfig calibrated;  // cfg with norm/background resolved
};

inline constexpr int kLrMlemIterations = 20;

/// Simulates the low-quality acquisition of `z_hr` and its MLEM comparator.
Acquisition degrade(const GridImage& z_hr, const ScannerConfig& cfg, std::uint64_t seed);

/// MLEM on the coarse grid implied by target_spacing_mm, using the rebinned
/// geometry directly (no PSF model), `iterations` updates from a uniform
/// image whose total matches the net counts.
GridImage mlem_lr_reconstruct(const Sinogram& y, const ScannerConfig& calibrated, std::uint32_t hr_size,
                              double hr_spacing_mm, int iterations = kLrMlemIterations);

/// Bilinear resampling in physical coordinates (grids share their center),
/// clamping at the border.
GridImage resample_bilinear(const GridImage& img, std::size_t size, double spacing_mm);

}  // namespace petsr
