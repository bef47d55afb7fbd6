#include <doctest.h>

#include <algorithm>
#include <cstring>

#include "petsr/core_model.hpp"
#include "petsr/psrg_io.hpp"
#include "petsr/rng.hpp"
#include "test_util.hpp"

using namespace petsr;

TEST_CASE("grid image rejects inconsistent construction") {
  CHECK_THROWS_AS(GridImage(0, 4, 1.0), GeometryError);
  CHECK_THROWS_AS(GridImage(4, 4, 0.0), GeometryError);
  CHECK_THROWS_AS(GridImage(4, 4, 1.0, Units::activity, std::vector<double>(15)), GeometryError);
  GridImage g(3, 2, 2.0);
  CHECK(g.size() == 6);
  g(1, 2) = 5.0;
  CHECK(g[5] == 5.0);
  g[0] = std::nan("");
  CHECK_THROWS_AS(g.require_finite("g"), NumericalError);
}

TEST_CASE("sampled sinograms hold nonnegative integers") {
  CHECK_THROWS_AS(Sinogram(2, 2, SinogramKind::sampled_counts, {0, 1, 2.5, 3}), DomainError);
  CHECK_THROWS_AS(Sinogram(2, 2, SinogramKind::sampled_counts, {0, 1, -2, 3}), DomainError);
  CHECK_THROWS_AS(Sinogram(2, 3, SinogramKind::expected_counts, std::vector<double>(5)), GeometryError);
  Sinogram s(2, 2, SinogramKind::sampled_counts, {0, 1, 2, 3});
  CHECK(s(1, 0) == 2.0);
}

TEST_CASE("scanner presets carry the degradation table values") {
  const ScannerConfig s = preset_scanner("standard");
  CHECK(s.psf_fwhm_mm == 8.0);
  CHECK(s.dose_fraction == 0.10);
  CHECK(s.angular_rebin == 2);
  CHECK(s.radial_rebin == 2);
  CHECK(s.target_spacing_mm == 8.0);
  const ScannerConfig o = preset_scanner("ood");
  CHECK(o.psf_fwhm_mm == 12.0);
  CHECK(o.dose_fraction == 0.05);
  CHECK(o.angular_rebin == 3);
  CHECK(o.radial_rebin == 2);
  CHECK(o.target_spacing_mm == 12.0);
  CHECK(preset_scanner("standard") == preset_scanner("standard"));
  CHECK(validate(s).empty());
  CHECK(validate(o).empty());
  CHECK_THROWS_AS(preset_scanner("high"), ConfigError);
}

TEST_CASE("validation lists every violation") {
  ScannerConfig c;
  c.dose_fraction = 0.0;
  auto v = validate(c);
  REQUIRE(v.size() == 1);
  CHECK(v[0] == "dose_fraction must be in (0,1]");

  c = ScannerConfig{};
  c.n_angles_full = 90;
  c.angular_rebin = 4;
  v = validate(c);
  REQUIRE(v.size() == 1);
  CHECK(v[0].find("divisible") != std::string::npos);

  c.dose_fraction = 2.0;
  CHECK(validate(c).size() == 2);
  CHECK_THROWS_AS(require_valid(c), ConfigError);

  PpcrConfig p;
  CHECK(validate(p).empty());
  p.psf_on_from_step = p.n_ddim_steps + 1;
  CHECK(validate(p).empty());
  p.psf_on_from_step = p.n_ddim_steps + 2;
  p.m_start = 30;
  p.mu_nesterov = 1.0;
  CHECK(validate(p).size() == 3);
}

TEST_CASE("splitmix stream matches the reference sequence") {
  // Reference outputs of SplitMix64 seeded with 0.
  Rng r(0);
  CHECK(r.next_u64() == 0xE220A8397B1DCDAFULL);
  CHECK(r.next_u64() == 0x6E789E6AA1B965F4ULL);
  CHECK(r.next_u64() == 0x06C45D188009454FULL);

  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.normal() == b.normal());
  Rng c(42);
  CHECK(c.derive(1).next_u64() != c.derive(2).next_u64());
  CHECK(c.derive(1).next_u64() == Rng(42).derive(1).next_u64());

  Rng u(7);
  double mean = 0.0, var = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double x = u.normal();
    mean += x;
    var += x * x;
  }
  mean /= n;
  var = var / n - mean * mean;
  CHECK(std::abs(mean) < 0.03);
  CHECK(std::abs(var - 1.0) < 0.04);
}

TEST_CASE("psrg files round-trip and follow the byte layout") {
  const auto dir = testutil::scratch_dir("psrg");
  GridImage img = testutil::random_image(5, 2.5, 3);
  img.set_units(Units::anatomy);
  write_grid(dir / "a.psrg", img);
  const std::string bytes = testutil::slurp(dir / "a.psrg");
  REQUIRE(bytes.size() == 24 + 4 * 25);
  CHECK(bytes.substr(0, 4) == "PSRG");
  std::uint32_t hdr[4];
  std::memcpy(hdr, bytes.data() + 4, 16);
  CHECK(hdr[0] == 1);
  CHECK(hdr[1] == 1);
  CHECK(hdr[2] == 5);
  CHECK(hdr[3] == 5);
  float spacing;
  std::memcpy(&spacing, bytes.data() + 20, 4);
  CHECK(spacing == 2.5f);

  const GridImage back = read_grid(dir / "a.psrg");
  CHECK(back.units() == Units::anatomy);
  CHECK(back.spacing_mm() == 2.5);
  for (std::size_t i = 0; i < img.size(); ++i) CHECK(back[i] == static_cast<double>(static_cast<float>(img[i])));

  Sinogram s(3, 4, SinogramKind::sampled_counts, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11});
  write_sinogram(dir / "s.psrg", s);
  const Sinogram sb = read_sinogram(dir / "s.psrg", SinogramKind::sampled_counts);
  CHECK(sb.n_angles() == 3);
  CHECK(sb.n_radial() == 4);
  CHECK(std::equal(s.values().begin(), s.values().end(), sb.values().begin()));

  CHECK_THROWS_AS(read_grid(dir / "s.psrg"), IoError);
  CHECK_THROWS_AS(read_grid(dir / "missing.psrg"), IoError);
  testutil::spit(dir / "bad.psrg", "NOPE0000000000000000000000");
  CHECK_THROWS_AS(read_grid(dir / "bad.psrg"), IoError);
}

TEST_CASE("mask files round-trip") {
  const auto dir = testutil::scratch_dir("mask");
  LesionMask m{4, 3, {0, 1, 1, 0, 0, 0, 1, 0, 0, 0, 0, 0}, "lesion_0"};
  write_mask(dir / "m.psrg", m, 2.0);
  const LesionMask b = read_mask(dir / "m.psrg", "lesion_0");
  CHECK(b.width == 4);
  CHECK(b.height == 3);
  CHECK(b.mask == m.mask);
  CHECK(b.count() == 3);
}

TEST_CASE("pgm preview is max-scaled 16-bit") {
  const auto dir = testutil::scratch_dir("pgm");
  GridImage img(2, 1, 1.0, Units::activity, {-1.0, 4.0});
  write_pgm16(dir / "p.pgm", img);
  const std::string bytes = testutil::slurp(dir / "p.pgm");
  const std::string header = "P5\n2 1\n65535\n";
  REQUIRE(bytes.size() == header.size() + 4);
  CHECK(bytes.substr(0, header.size()) == header);
  const auto* px = reinterpret_cast<const unsigned char*>(bytes.data() + header.size());
  CHECK(px[0] == 0);
  CHECK(px[1] == 0);
  CHECK(px[2] == 0xFF);
  CHECK(px[3] == 0xFF);
}
