#include "petsr/forward_model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <numbers>
#include <sstream>

namespace petsr {

// ---------------------------------------------------------------------------
// PSF
// ---------------------------------------------------------------------------

PsfKernel make_psf(double fwhm_mm, double spacing_mm) {
  if (!(fwhm_mm >= 0.0)) throw ConfigError("make_psf: fwhm_mm must be >= 0");
  if (!(spacing_mm > 0.0)) throw ConfigError("make_psf: spacing_mm must be positive");
  PsfKernel k;
  k.fwhm_mm = fwhm_mm;
  if (fwhm_mm == 0.0) return k;
  k.sigma_px = fwhm_mm / (kFwhmPerSigma * spacing_mm);
  const auto half = static_cast<std::size_t>(std::ceil(4.0 * k.sigma_px));
  k.taps.assign(2 * half + 1, 0.0);
  for (std::size_t d = 0; d <= half; ++d) {
    const double x = static_cast<double>(d);
    const double w = std::exp(-0.5 * x * x / (k.sigma_px * k.sigma_px));
    k.taps[half + d] = w;
    k.taps[half - d] = w;
  }
  double total = 0.0;
  for (double w : k.taps) total += w;
  for (double& w : k.taps) w /= total;
  return k;
}

namespace {

// Symmetric reflection: -1 -> 0, -2 -> 1, n -> n-1, with period 2n.
std::size_t fold(std::ptrdiff_t i, std::ptrdiff_t n) {
  const std::ptrdiff_t period = 2 * n;
  std::ptrdiff_t m = i % period;
  if (m < 0) m += period;
  if (m >= n) m = period - 1 - m;
  return static_cast<std::size_t>(m);
}

// One separable pass along rows (axis = 1) or columns (axis = 0).
// transpose = true applies the scatter form, i.e. the exact adjoint.
void convolve_axis(std::span<const double> in, std::span<double> out, std::size_t width, std::size_t height,
                   const std::vector<double>& taps, int axis, bool transpose) {
  const auto half = static_cast<std::ptrdiff_t>(taps.size() / 2);
  const std::size_t len = axis == 1 ? width : height;
  const std::size_t lines = axis == 1 ? height : width;
  const std::size_t stride = axis == 1 ? 1 : width;
  const std::size_t line_stride = axis == 1 ? width : 1;
  std::fill(out.begin(), out.end(), 0.0);
  const auto n = static_cast<std::ptrdiff_t>(len);
  for (std::size_t l = 0; l < lines; ++l) {
    const std::size_t base = l * line_stride;
    for (std::ptrdiff_t i = 0; i < n; ++i) {
      const bool interior = i - half >= 0 && i + half < n;
      if (!transpose) {
        double acc = 0.0;
        if (interior) {
          for (std::ptrdiff_t k = -half; k <= half; ++k) acc += taps[k + half] * in[base + (i + k) * stride];
        } else {
          for (std::ptrdiff_t k = -half; k <= half; ++k) acc += taps[k + half] * in[base + fold(i + k, n) * stride];
        }
        out[base + i * stride] = acc;
      } else {
        const double v = in[base + i * stride];
        if (interior) {
          for (std::ptrdiff_t k = -half; k <= half; ++k) out[base + (i + k) * stride] += taps[k + half] * v;
        } else {
          for (std::ptrdiff_t k = -half; k <= half; ++k) out[base + fold(i + k, n) * stride] += taps[k + half] * v;
        }
      }
    }
  }
}

GridImage psf_impl(const GridImage& img, const PsfKernel& k, bool transpose) {
  if (k.is_identity()) return img;
  GridImage tmp = GridImage::like(img);
  GridImage out = GridImage::like(img);
  convolve_axis(img.values(), tmp.values(), img.width(), img.height(), k.taps, 1, transpose);
  convolve_axis(tmp.values(), out.values(), img.width(), img.height(), k.taps, 0, transpose);
  return out;
}

}  // namespace

GridImage apply_psf(const GridImage& img, const PsfKernel& k) { return psf_impl(img, k, false); }

GridImage apply_psf_adjoint(const GridImage& img, const PsfKernel& k) { return psf_impl(img, k, true); }

// ---------------------------------------------------------------------------
// Projection
// ---------------------------------------------------------------------------

double ProjectionGeometry::angle(std::uint32_t a) const {
  return angle_offset_rad + std::numbers::pi * static_cast<double>(a) / static_cast<double>(n_angles);
}

double ProjectionGeometry::radial_offset_mm(std::uint32_t r) const {
  return (static_cast<double>(r) - 0.5 * static_cast<double>(n_radial - 1)) * radial_spacing_mm;
}

void require_valid(const ProjectionGeometry& g) {
  std::ostringstream os;
  if (g.n_angles == 0 || g.n_radial == 0 || g.image_size == 0) {
    os << "projection geometry: sizes must be positive";
  } else if (!(g.radial_spacing_mm > 0.0) || !(g.image_spacing_mm > 0.0)) {
    os << "projection geometry: spacings must be positive";
  } else {
    const double extent = g.n_radial * g.radial_spacing_mm;
    const double diagonal = std::numbers::sqrt2 * g.image_size * g.image_spacing_mm;
    if (extent < diagonal * (1.0 - 1e-9)) {
      os << "projection geometry: radial extent " << extent << " mm does not cover the image diagonal " << diagonal
         << " mm";
    }
  }
  if (!os.str().empty()) throw GeometryError(os.str());
}

SystemMatrix::SystemMatrix(const ProjectionGeometry& geom) : geom_(geom) {
  require_valid(geom);
  const std::size_t n = geom.image_size;
  const double h = geom.image_spacing_mm;
  const double step = 0.5 * h;
  const double center = 0.5 * static_cast<double>(n - 1);
  const double half_diag = 0.5 * std::numbers::sqrt2 * static_cast<double>(n) * h;
  const auto n_samples = static_cast<std::size_t>(std::ceil(2.0 * half_diag / step)) + 1;
  const double t0 = -0.5 * static_cast<double>(n_samples - 1) * step;

  row_ptr_.reserve(static_cast<std::size_t>(geom.n_angles) * geom.n_radial + 1);
  row_ptr_.push_back(0);
  std::vector<double> row_acc(n * n, 0.0);
  std::vector<std::uint32_t> touched;
  touched.reserve(4 * n_samples);

  for (std::uint32_t a = 0; a < geom.n_angles; ++a) {
    const double theta = geom.angle(a);
    const double ct = std::cos(theta);
    const double st = std::sin(theta);
    for (std::uint32_t r = 0; r < geom.n_radial; ++r) {
      const double s = geom.radial_offset_mm(r);
      touched.clear();
      for (std::size_t k = 0; k < n_samples; ++k) {
        const double t = t0 + static_cast<double>(k) * step;
        const double x = s * ct - t * st;
        const double y = s * st + t * ct;
        const double col_f = x / h + center;
        const double row_f = center - y / h;
        if (col_f <= -1.0 || row_f <= -1.0 || col_f >= static_cast<double>(n) ||
            row_f >= static_cast<double>(n)) {
          continue;
        }
        const double c0f = std::floor(col_f);
        const double r0f = std::floor(row_f);
        const double fc = col_f - c0f;
        const double fr = row_f - r0f;
        const auto c0 = static_cast<std::ptrdiff_t>(c0f);
        const auto r0 = static_cast<std::ptrdiff_t>(r0f);
        const double w[4] = {(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc};
        const std::ptrdiff_t rr[4] = {r0, r0, r0 + 1, r0 + 1};
        const std::ptrdiff_t cc[4] = {c0, c0 + 1, c0, c0 + 1};
        for (int q = 0; q < 4; ++q) {
          if (w[q] == 0.0 || rr[q] < 0 || cc[q] < 0 || rr[q] >= static_cast<std::ptrdiff_t>(n) ||
              cc[q] >= static_cast<std::ptrdiff_t>(n)) {
            continue;
          }
          const auto idx = static_cast<std::uint32_t>(rr[q] * static_cast<std::ptrdiff_t>(n) + cc[q]);
          if (row_acc[idx] == 0.0) touched.push_back(idx);
          row_acc[idx] += w[q] * step;
        }
      }
      std::sort(touched.begin(), touched.end());
      for (std::uint32_t idx : touched) {
        cols_.push_back(idx);
        vals_.push_back(static_cast<float>(row_acc[idx]));
        row_acc[idx] = 0.0;
      }
      row_ptr_.push_back(static_cast<std::uint32_t>(cols_.size()));
    }
  }
}

void SystemMatrix::forward(std::span<const double> x, std::span<double> y) const {
  const std::size_t rows = this->rows();
  for (std::size_t i = 0; i < rows; ++i) {
    double acc = 0.0;
    for (std::uint32_t p = row_ptr_[i]; p < row_ptr_[i + 1]; ++p) acc += static_cast<double>(vals_[p]) * x[cols_[p]];
    y[i] = acc;
  }
}

void SystemMatrix::adjoint(std::span<const double> y, std::span<double> x) const {
  std::fill(x.begin(), x.end(), 0.0);
  const std::size_t rows = this->rows();
  for (std::size_t i = 0; i < rows; ++i) {
    const double v = y[i];
    if (v == 0.0) continue;
    for (std::uint32_t p = row_ptr_[i]; p < row_ptr_[i + 1]; ++p) x[cols_[p]] += static_cast<double>(vals_[p]) * v;
  }
}

std::shared_ptr<const SystemMatrix> system_matrix(const ProjectionGeometry& geom) {
  static std::mutex mutex;
  static std::map<ProjectionGeometry, std::shared_ptr<const SystemMatrix>> cache;
  {
    std::lock_guard lock(mutex);
    if (auto it = cache.find(geom); it != cache.end()) return it->second;
  }
  auto built = std::make_shared<const SystemMatrix>(geom);
  std::lock_guard lock(mutex);
  // Keep memory bounded when many geometries are exercised (tests).
  if (cache.size() >= 16) cache.clear();
  return cache.emplace(geom, std::move(built)).first->second;
}

Sinogram project(const GridImage& img, const ProjectionGeometry& geom) {
  if (img.width() != geom.image_size || img.height() != geom.image_size ||
      img.spacing_mm() != geom.image_spacing_mm) {
    throw GeometryError("project: image grid does not match projection geometry");
  }
  Sinogram out(geom.n_angles, geom.n_radial);
  system_matrix(geom)->forward(img.values(), out.values());
  return out;
}

GridImage backproject(const Sinogram& sino, const ProjectionGeometry& geom) {
  if (sino.n_angles() != geom.n_angles || sino.n_radial() != geom.n_radial) {
    throw GeometryError("backproject: sinogram shape does not match projection geometry");
  }
  GridImage out(geom.image_size, geom.image_size, geom.image_spacing_mm, Units::activity);
  system_matrix(geom)->adjoint(sino.values(), out.values());
  return out;
}

// ---------------------------------------------------------------------------
// Rebinning
// ---------------------------------------------------------------------------

namespace {

void require_divisible(const Sinogram& sino, std::uint32_t fa, std::uint32_t fr, std::string_view what) {
  if (fa == 0 || fr == 0 || sino.n_angles() % fa != 0 || sino.n_radial() % fr != 0) {
    std::ostringstream os;
    os << what << ": sinogram " << sino.n_angles() << "x" << sino.n_radial() << " not divisible by rebin factors ("
       << fa << "," << fr << ")";
    throw GeometryError(os.str());
  }
}

}  // namespace

Sinogram rebin(const Sinogram& sino, std::uint32_t fa, std::uint32_t fr) {
  require_divisible(sino, fa, fr, "rebin");
  if (fa == 1 && fr == 1) return sino;
  const std::size_t na = sino.n_angles() / fa;
  const std::size_t nr = sino.n_radial() / fr;
  Sinogram out(na, nr, sino.kind());
  for (std::size_t a = 0; a < na; ++a) {
    for (std::size_t r = 0; r < nr; ++r) {
      double acc = 0.0;
      for (std::size_t da = 0; da < fa; ++da) {
        for (std::size_t dr = 0; dr < fr; ++dr) acc += sino(a * fa + da, r * fr + dr);
      }
      out(a, r) = acc;
    }
  }
  return out;
}

Sinogram rebin_adjoint(const Sinogram& sino, std::uint32_t fa, std::uint32_t fr) {
  if (fa == 0 || fr == 0) throw GeometryError("rebin_adjoint: factors must be positive");
  if (fa == 1 && fr == 1) return sino;
  Sinogram out(sino.n_angles() * fa, sino.n_radial() * fr);
  for (std::size_t a = 0; a < out.n_angles(); ++a) {
    for (std::size_t r = 0; r < out.n_radial(); ++r) out(a, r) = sino(a / fa, r / fr);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scanner operator
// ---------------------------------------------------------------------------

std::string_view psf_mode_name(PsfMode m) { return m == PsfMode::full ? "full" : "identity"; }

ProjectionGeometry full_geometry(const ScannerConfig& cfg, std::uint32_t image_size, double image_spacing_mm) {
  ProjectionGeometry g;
  g.n_angles = cfg.n_angles_full;
  g.n_radial = cfg.n_radial_full;
  g.radial_spacing_mm = std::numbers::sqrt2 * cfg.fov_mm / static_cast<double>(cfg.n_radial_full);
  g.image_size = image_size;
  g.image_spacing_mm = image_spacing_mm;
  return g;
}

std::pair<std::uint32_t, std::uint32_t> measured_shape(const ScannerConfig& cfg) {
  return {cfg.n_angles_full / cfg.angular_rebin, cfg.n_radial_full / cfg.radial_rebin};
}

namespace {

void require_square(const GridImage& img, std::string_view what) {
  if (img.width() != img.height()) throw GeometryError(std::string(what) + ": images must be square");
}

// rebin(project(H z)) without dose scaling or background.
Sinogram linear_measure(const GridImage& z, const ScannerConfig& cfg, PsfMode mode) {
  require_square(z, "forward model");
  const auto geom = full_geometry(cfg, static_cast<std::uint32_t>(z.width()), z.spacing_mm());
  const GridImage blurred = mode == PsfMode::full ? apply_psf(z, make_psf(cfg.psf_fwhm_mm, z.spacing_mm())) : z;
  return rebin(project(blurred, geom), cfg.angular_rebin, cfg.radial_rebin);
}

void require_calibrated(const ScannerConfig& cfg) {
  require_valid(cfg);
  if (!(cfg.count_scale_norm > 0.0)) {
    throw ConfigError("scanner config is not calibrated (count_scale_norm = 0); call calibrate_acquisition first");
  }
}

}  // namespace

ScannerConfig calibrate_acquisition(const GridImage& reference, const ScannerConfig& cfg) {
  require_valid(cfg);
  const Sinogram g = linear_measure(reference, cfg, PsfMode::full);
  const double mean = sum(g.values()) / static_cast<double>(g.size());
  if (!(mean > 0.0) || !std::isfinite(mean)) {
    throw DomainError("calibrate_acquisition: reference image has no projected activity");
  }
  ScannerConfig out = cfg;
  out.count_scale_norm = cfg.count_scale / mean;
  out.background_per_bin = cfg.background_fraction * cfg.dose_fraction * cfg.count_scale;
  return out;
}

Sinogram forward_expected(const GridImage& z, const ScannerConfig& cfg, PsfMode mode) {
  require_calibrated(cfg);
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (z[i] < 0.0) {
      throw DomainError("forward_expected: negative activity at pixel " + std::to_string(i));
    }
  }
  Sinogram out = linear_measure(z, cfg, mode);
  const double scale = cfg.dose_fraction * cfg.count_scale_norm;
  for (double& v : out.values()) v = scale * v + cfg.background_per_bin;
  out.set_kind(SinogramKind::expected_counts);
  return out;
}

GridImage adjoint_apply(const Sinogram& residual, const ScannerConfig& cfg, PsfMode mode, const GridImage& grid) {
  require_calibrated(cfg);
  require_square(grid, "adjoint_apply");
  const auto [na, nr] = measured_shape(cfg);
  if (residual.n_angles() != na || residual.n_radial() != nr) {
    std::ostringstream os;
    os << "adjoint_apply: residual " << residual.n_angles() << "x" << residual.n_radial() << " does not match measured "
       << na << "x" << nr;
    throw GeometryError(os.str());
  }
  const auto geom = full_geometry(cfg, static_cast<std::uint32_t>(grid.width()), grid.spacing_mm());
  GridImage back = backproject(rebin_adjoint(residual, cfg.angular_rebin, cfg.radial_rebin), geom);
  if (mode == PsfMode::full) back = apply_psf_adjoint(back, make_psf(cfg.psf_fwhm_mm, grid.spacing_mm()));
  const double scale = cfg.dose_fraction * cfg.count_scale_norm;
  for (double& v : back.values()) v *= scale;
  back.set_units(Units::activity);
  return back;
}

// ---------------------------------------------------------------------------
// Acquisition simulation
// ---------------------------------------------------------------------------

double sample_poisson(double lambda, Rng& rng) {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw DomainError("sample_poisson: invalid rate");
  if (lambda < 30.0) {
    const double u = rng.uniform();
    double p = std::exp(-lambda);
    double cdf = p;
    double k = 0.0;
    while (u > cdf && k < 1000.0) {
      k += 1.0;
      p *= lambda / k;
      cdf += p;
    }
    return k;
  }
  return std::max(0.0, std::round(lambda + std::sqrt(lambda) * rng.normal()));
}

GridImage mlem_lr_reconstruct(const Sinogram& y, const ScannerConfig& cal, std::uint32_t hr_size,
                              double hr_spacing_mm, int iterations) {
  require_calibrated(cal);
  const auto [na, nr] = measured_shape(cal);
  if (y.n_angles() != na || y.n_radial() != nr) throw GeometryError("mlem: sinogram shape mismatch");

  const double fov = static_cast<double>(hr_size) * hr_spacing_mm;
  const auto lr_size = static_cast<std::uint32_t>(std::max(1L, std::lround(fov / cal.target_spacing_mm)));
  ProjectionGeometry geom;
  geom.n_angles = na;
  geom.n_radial = nr;
  geom.radial_spacing_mm = std::numbers::sqrt2 * cal.fov_mm / cal.n_radial_full * cal.radial_rebin;
  geom.image_size = lr_size;
  geom.image_spacing_mm = cal.target_spacing_mm;
  geom.angle_offset_rad = 0.5 * (cal.angular_rebin - 1.0) * std::numbers::pi / cal.n_angles_full;
  const auto sys = system_matrix(geom);

  // Each measured bin sums angular_rebin * radial_rebin full-resolution rays.
  const double scale = cal.dose_fraction * cal.count_scale_norm * cal.angular_rebin * cal.radial_rebin;
  const std::size_t npix = static_cast<std::size_t>(lr_size) * lr_size;
  std::vector<double> ones(y.size(), 1.0);
  std::vector<double> sens(npix);
  sys->adjoint(ones, sens);
  for (double& s : sens) s *= scale;

  std::vector<double> row_sums(y.size());
  std::vector<double> all_ones(npix, 1.0);
  sys->forward(all_ones, row_sums);
  const double net = sum(y.values()) - cal.background_per_bin * static_cast<double>(y.size());
  const double init = std::max(net, 1e-6) / (scale * sum(row_sums));

  GridImage x(lr_size, lr_size, cal.target_spacing_mm, Units::activity, std::vector<double>(npix, init));
  std::vector<double> proj(y.size());
  std::vector<double> ratio(y.size());
  std::vector<double> back(npix);
  for (int it = 0; it < iterations; ++it) {
    sys->forward(x.values(), proj);
    for (std::size_t i = 0; i < y.size(); ++i) {
      const double lam = scale * proj[i] + cal.background_per_bin;
      ratio[i] = lam > 0.0 ? y[i] / lam : 0.0;
    }
    sys->adjoint(ratio, back);
    for (std::size_t j = 0; j < npix; ++j) {
      x[j] = sens[j] > 0.0 ? x[j] * scale * back[j] / sens[j] : 0.0;
    }
  }
  x.require_finite("mlem");
  return x;
}

Acquisition degrade(const GridImage& z_hr, const ScannerConfig& cfg, std::uint64_t seed) {
  Acquisition acq;
  acq.calibrated = calibrate_acquisition(z_hr, cfg);
  acq.expected = forward_expected(z_hr, acq.calibrated, PsfMode::full);
  std::vector<double> counts(acq.expected.size());
  Rng rng(seed);
  for (std::size_t i = 0; i < counts.size(); ++i) counts[i] = sample_poisson(acq.expected[i], rng);
  acq.sampled = Sinogram(acq.expected.n_angles(), acq.expected.n_radial(), SinogramKind::sampled_counts,
                         std::move(counts));
  acq.lr_reference = mlem_lr_reconstruct(acq.sampled, acq.calibrated, static_cast<std::uint32_t>(z_hr.width()),
                                         z_hr.spacing_mm());
  return acq;
}

GridImage resample_bilinear(const GridImage& img, std::size_t size, double spacing_mm) {
  GridImage out(size, size, spacing_mm, img.units());
  const double in_center_c = 0.5 * static_cast<double>(img.width() - 1);
  const double in_center_r = 0.5 * static_cast<double>(img.height() - 1);
  const double out_center = 0.5 * static_cast<double>(size - 1);
  const double ratio = spacing_mm / img.spacing_mm();
  const auto max_c = static_cast<double>(img.width() - 1);
  const auto max_r = static_cast<double>(img.height() - 1);
  for (std::size_t r = 0; r < size; ++r) {
    const double rf = std::clamp((static_cast<double>(r) - out_center) * ratio + in_center_r, 0.0, max_r);
    const auto r0 = static_cast<std::size_t>(std::floor(rf));
    const std::size_t r1 = std::min(r0 + 1, img.height() - 1);
    const double fr = rf - static_cast<double>(r0);
    for (std::size_t c = 0; c < size; ++c) {
      const double cf = std::clamp((static_cast<double>(c) - out_center) * ratio + in_center_c, 0.0, max_c);
      const auto c0 = static_cast<std::size_t>(std::floor(cf));
      const std::size_t c1 = std::min(c0 + 1, img.width() - 1);
      const double fc = cf - static_cast<double>(c0);
      out(r, c) = (1 - fr) * ((1 - fc) * img(r0, c0) + fc * img(r0, c1)) + fr * ((1 - fc) * img(r1, c0) + fc * img(r1, c1));
    }
  }
  return out;
}

}  // namespace petsr
