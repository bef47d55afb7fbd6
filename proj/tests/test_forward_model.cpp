#include <doctest.h>

#include <cmath>
#include <numbers>

#include "petsr/forward_model.hpp"
#include "petsr/phantom.hpp"
#include "test_util.hpp"

using namespace petsr;

namespace {

ProjectionGeometry small_geometry(std::uint32_t n, std::uint32_t angles = 24) {
  ProjectionGeometry g;
  g.n_angles = angles;
  g.image_size = n;
  g.image_spacing_mm = 2.0;
  g.n_radial = 2 * n;
  g.radial_spacing_mm = std::numbers::sqrt2 * n * 2.0 / g.n_radial;
  return g;
}

ScannerConfig small_scanner() {
  ScannerConfig c = preset_scanner("standard");
  c.n_angles_full = 24;
  c.n_radial_full = 48;
  c.fov_mm = 64.0;
  return c;
}

GridImage bordered_random(std::size_t n, std::size_t border, std::uint64_t seed) {
  GridImage img = testutil::random_image(n, 2.0, seed);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      if (r < border || c < border || r >= n - border || c >= n - border) img(r, c) = 0.0;
    }
  }
  return img;
}

}  // namespace

TEST_CASE("psf kernel follows the sampled gaussian definition") {
  const PsfKernel id = make_psf(0.0, 2.0);
  CHECK(id.taps == std::vector<double>{1.0});

  const PsfKernel k = make_psf(8.0, 2.0);
  CHECK(k.sigma_px == doctest::Approx(8.0 / (2.0 * std::sqrt(2.0 * std::log(2.0)) * 2.0)).epsilon(1e-14));
  CHECK(k.sigma_px == doctest::Approx(1.69864).epsilon(1e-5));
  CHECK(k.taps.size() == 2 * static_cast<std::size_t>(std::ceil(4.0 * k.sigma_px)) + 1);
  double total = 0.0;
  for (double t : k.taps) total += t;
  CHECK(std::abs(total - 1.0) <= 1e-12);
  for (std::size_t i = 0; i < k.taps.size(); ++i) CHECK(k.taps[i] == k.taps[k.taps.size() - 1 - i]);
  // Ratio of neighboring taps is the gaussian ratio.
  const std::size_t c = k.half_width();
  CHECK(k.taps[c + 1] / k.taps[c] == doctest::Approx(std::exp(-0.5 / (k.sigma_px * k.sigma_px))).epsilon(1e-12));
}

TEST_CASE("psf convolution preserves constants and reproduces the kernel") {
  const PsfKernel k = make_psf(8.0, 2.0);
  GridImage flat(20, 20, 2.0, Units::activity, std::vector<double>(400, 3.5));
  const GridImage out = apply_psf(flat, k);
  for (double v : out.values()) CHECK(v == doctest::Approx(3.5).epsilon(1e-12));

  CHECK(apply_psf(flat, make_psf(0.0, 2.0)).values()[7] == 3.5);

  GridImage delta(31, 31, 2.0);
  delta(15, 15) = 1.0;
  const GridImage psf = apply_psf(delta, k);
  const std::size_t h = k.half_width();
  for (std::size_t dy = 0; dy < k.taps.size(); ++dy) {
    for (std::size_t dx = 0; dx < k.taps.size(); ++dx) {
      CHECK(psf(15 - h + dy, 15 - h + dx) == doctest::Approx(k.taps[dy] * k.taps[dx]).epsilon(1e-12));
    }
  }

  const GridImage img = bordered_random(32, 8, 4);
  CHECK(sum(apply_psf(img, k).values()) == doctest::Approx(sum(img.values())).epsilon(1e-6));
}

TEST_CASE("psf adjoint is exact and self-adjoint on interior support") {
  const PsfKernel k = make_psf(8.0, 2.0);
  const GridImage x = testutil::random_image(24, 2.0, 1, -1.0, 1.0);
  const GridImage y = testutil::random_image(24, 2.0, 2, -1.0, 1.0);
  const double lhs = dot(apply_psf(x, k).values(), y.values());
  const double rhs = dot(x.values(), apply_psf_adjoint(y, k).values());
  CHECK(std::abs(lhs - rhs) <= 1e-12 * std::abs(lhs) + 1e-12);

  const GridImage xi = bordered_random(32, 8, 5);
  const GridImage yi = bordered_random(32, 8, 6);
  const double a = dot(apply_psf(xi, k).values(), yi.values());
  const double b = dot(xi.values(), apply_psf(yi, k).values());
  CHECK(std::abs(a - b) <= 1e-10 * std::abs(a));
}

TEST_CASE("projection of a centered disc follows the chord length") {
  const std::uint32_t n = 64;
  const ProjectionGeometry g = small_geometry(n, 12);
  GridImage disc(n, n, 2.0);
  const double radius = 30.0, value = 2.0;
  // Supersampled disc to approximate the analytic object.
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      int inside = 0;
      for (int sy = 0; sy < 8; ++sy) {
        for (int sx = 0; sx < 8; ++sx) {
          const double x = (c - 0.5 * (n - 1) + (sx + 0.5) / 8 - 0.5) * 2.0;
          const double y = (0.5 * (n - 1) - r + (sy + 0.5) / 8 - 0.5) * 2.0;
          inside += x * x + y * y <= radius * radius;
        }
      }
      disc(r, c) = value * inside / 64.0;
    }
  }
  const Sinogram s = project(disc, g);
  for (std::uint32_t a = 0; a < g.n_angles; ++a) {
    for (std::uint32_t b = 0; b < g.n_radial; ++b) {
      const double off = g.radial_offset_mm(b);
      if (std::abs(off) >= 0.9 * radius) continue;
      const double chord = 2.0 * value * std::sqrt(radius * radius - off * off);
      CHECK(s(a, b) == doctest::Approx(chord).epsilon(0.02));
    }
  }
  CHECK(sum(project(GridImage(n, n, 2.0), g).values()) == 0.0);
}

TEST_CASE("projection is linear and backprojection is its exact adjoint") {
  const ProjectionGeometry g = small_geometry(32);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const GridImage x = testutil::random_image(32, 2.0, seed, -1.0, 1.0);
    const Sinogram y = testutil::random_sinogram(g.n_angles, g.n_radial, seed + 100);
    const Sinogram ax = project(x, g);
    const double lhs = dot(ax.values(), y.values());
    const double rhs = dot(x.values(), backproject(y, g).values());
    CHECK(std::abs(lhs - rhs) <= 1e-5 * norm2(ax.values()) * norm2(y.values()));
  }
  GridImage x = testutil::random_image(32, 2.0, 3);
  const Sinogram p1 = project(x, g);
  for (double& v : x.values()) v *= 3.0;
  const Sinogram p3 = project(x, g);
  for (std::size_t i = 0; i < p1.size(); ++i) CHECK(p3[i] == doctest::Approx(3.0 * p1[i]).epsilon(1e-10));

  ProjectionGeometry bad = g;
  bad.n_radial = 8;
  CHECK_THROWS_AS(project(x, bad), GeometryError);
}

TEST_CASE("rebinning sums blocks and its adjoint broadcasts") {
  Sinogram ones(4, 4, SinogramKind::expected_counts, std::vector<double>(16, 1.0));
  const Sinogram r = rebin(ones, 2, 2);
  CHECK(r.n_angles() == 2);
  CHECK(r.n_radial() == 2);
  for (double v : r.values()) CHECK(v == 4.0);
  const Sinogram id = rebin(ones, 1, 1);
  CHECK(std::equal(id.values().begin(), id.values().end(), ones.values().begin()));
  CHECK_THROWS_AS(rebin(ones, 3, 1), GeometryError);

  const Sinogram s = testutil::random_sinogram(12, 8, 9);
  const Sinogram t = testutil::random_sinogram(4, 4, 10);
  CHECK(sum(rebin(s, 3, 2).values()) == doctest::Approx(sum(s.values())).epsilon(1e-14));
  const double lhs = dot(rebin(s, 3, 2).values(), t.values());
  const double rhs = dot(s.values(), rebin_adjoint(t, 3, 2).values());
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));

  // Integer-valued counts sum exactly.
  Sinogram counts(6, 4);
  for (std::size_t i = 0; i < counts.size(); ++i) counts[i] = static_cast<double>(i % 7);
  CHECK(sum(rebin(counts, 2, 2).values()) == sum(counts.values()));
}

TEST_CASE("scanner operator: affine offset, linearity, calibration") {
  const ScannerConfig base = small_scanner();
  const GridImage ref = bordered_random(32, 4, 11);
  const ScannerConfig cal = calibrate_acquisition(ref, base);
  CHECK(cal.count_scale_norm > 0.0);
  CHECK(cal.background_per_bin == doctest::Approx(0.05 * 0.10 * 50.0));

  const Sinogram zero = forward_expected(GridImage(32, 32, 2.0), cal, PsfMode::full);
  for (double v : zero.values()) CHECK(v == cal.background_per_bin);

  const Sinogram lam = forward_expected(ref, cal, PsfMode::full);
  double net = 0.0;
  for (double v : lam.values()) net += v - cal.background_per_bin;
  CHECK(net / static_cast<double>(lam.size()) == doctest::Approx(0.10 * 50.0).epsilon(1e-6));

  GridImage twice = ref;
  for (double& v : twice.values()) v *= 2.0;
  const Sinogram lam2 = forward_expected(twice, cal, PsfMode::full);
  for (std::size_t i = 0; i < lam.size(); ++i) {
    CHECK(lam2[i] - cal.background_per_bin ==
          doctest::Approx(2.0 * (lam[i] - cal.background_per_bin)).epsilon(1e-10));
  }

  GridImage neg = ref;
  neg[5] = -0.1;
  CHECK_THROWS_AS(forward_expected(neg, cal, PsfMode::full), DomainError);
  CHECK_THROWS_AS(forward_expected(ref, base, PsfMode::full), ConfigError);
  CHECK_THROWS_AS(adjoint_apply(Sinogram(3, 3), cal, PsfMode::full, ref), GeometryError);
}

TEST_CASE("composite adjoint matches the forward operator") {
  const ScannerConfig cal = calibrate_acquisition(bordered_random(32, 4, 1), small_scanner());
  const auto [na, nr] = measured_shape(cal);
  for (PsfMode mode : {PsfMode::full, PsfMode::identity}) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const GridImage x = testutil::random_image(32, 2.0, seed);
      const Sinogram y = testutil::random_sinogram(na, nr, seed + 50);
      Sinogram ax = forward_expected(x, cal, mode);
      for (double& v : ax.values()) v -= cal.background_per_bin;
      const double lhs = dot(ax.values(), y.values());
      const double rhs = dot(x.values(), adjoint_apply(y, cal, mode, x).values());
      CHECK(std::abs(lhs - rhs) <= 1e-5 * norm2(ax.values()) * norm2(y.values()));
    }
  }
  const GridImage zero = adjoint_apply(Sinogram(na, nr), cal, PsfMode::full, GridImage(32, 32, 2.0));
  for (double v : zero.values()) CHECK(v == 0.0);
}

TEST_CASE("poisson sampler: support, determinism and mean") {
  Rng a(5), b(5);
  for (double lam : {0.0, 0.3, 4.0, 29.0, 31.0, 400.0}) {
    const double x = sample_poisson(lam, a);
    CHECK(x >= 0.0);
    CHECK(x == std::floor(x));
    CHECK(x == sample_poisson(lam, b));
  }
  for (double lam : {2.0, 50.0}) {
    Rng r(17);
    double m = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) m += sample_poisson(lam, r);
    CHECK(m / n == doctest::Approx(lam).epsilon(0.03));
  }
  CHECK_THROWS_AS(sample_poisson(-1.0, a), DomainError);
}

TEST_CASE("degrade: determinism, dose ratio, shapes") {
  PhantomSpec spec;
  spec.seed = 3;
  const Phantom ph = generate_phantom(spec);
  const ScannerConfig std_cfg = preset_scanner("standard");
  const Acquisition a = degrade(ph.activity, std_cfg, 99);
  const Acquisition b = degrade(ph.activity, std_cfg, 99);
  CHECK(std::equal(a.sampled.values().begin(), a.sampled.values().end(), b.sampled.values().begin()));
  CHECK(a.sampled.n_angles() == 60);
  CHECK(a.sampled.n_radial() == 64);
  CHECK(a.lr_reference.width() == 32);
  CHECK(a.lr_reference.spacing_mm() == 8.0);
  for (double v : a.sampled.values()) CHECK(v == std::floor(v));

  ScannerConfig half = std_cfg;
  half.dose_fraction = 0.05;
  const Acquisition h = degrade(ph.activity, half, 99);
  CHECK(sum(a.sampled.values()) / sum(h.sampled.values()) == doctest::Approx(2.0).epsilon(0.05));

  const Acquisition o = degrade(ph.activity, preset_scanner("ood"), 99);
  CHECK(o.sampled.n_angles() == 40);
  CHECK(o.sampled.n_radial() == 64);
  CHECK(o.lr_reference.width() == 21);
}

TEST_CASE("mlem comparator recovers a noiseless uniform region") {
  PhantomSpec spec;
  spec.seed = 8;
  spec.n_lesions = 0;
  const Phantom ph = generate_phantom(spec);
  const ScannerConfig cal = calibrate_acquisition(ph.activity, preset_scanner("standard"));
  const Sinogram lam = forward_expected(ph.activity, cal, PsfMode::full);
  Sinogram y(lam.n_angles(), lam.n_radial(), SinogramKind::sampled_counts);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::round(lam[i]);
  const GridImage lr = mlem_lr_reconstruct(y, cal, 128, 2.0, 50);
  const GridImage up = resample_bilinear(lr, 128, 2.0);
  // Net counts fix the total activity.
  CHECK(sum(up.values()) == doctest::Approx(sum(ph.activity.values())).epsilon(0.05));
}

TEST_CASE("bilinear resampling keeps constants and centers") {
  GridImage flat(8, 8, 4.0, Units::activity, std::vector<double>(64, 2.0));
  const GridImage up = resample_bilinear(flat, 32, 1.0);
  for (double v : up.values()) CHECK(v == doctest::Approx(2.0));
  GridImage ramp(4, 4, 2.0);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c) ramp(r, c) = static_cast<double>(c);
  const GridImage same = resample_bilinear(ramp, 4, 2.0);
  for (std::size_t i = 0; i < 16; ++i) CHECK(same[i] == doctest::Approx(ramp[i]));
}
