#pragma once

#include <cstdint>
#include <filesystem>

#include "petsr/core_model.hpp"

namespace petsr {

/// PSRG grid container, all fields little-endian:
///
///   0..3   magic "PSRG"
///   4..7   u32 version (= 1)
///   8..11  u32 units tag (see PsrgTag)
///   12..15 u32 dim0 (height or n_angles)
///   16..19 u32 dim1 (width or n_radial)
///   20..23 f32 spacing_mm
///   24..   dim0*dim1 f32 values, row-major
enum class PsrgTag : std::uint32_t {
  activity = 0,
  anatomy = 1,
  model_space = 2,
  sinogram = 3,
  mask = 4,
};

inline constexpr std::uint32_t kPsrgVersion = 1;

struct PsrgRecord {
  PsrgTag tag = PsrgTag::activity;
  std::uint32_t dim0 = 0;
  std::uint32_t dim1 = 0;
  float spacing_mm = 1.0f;
  std::vector<float> values;
};

void write_psrg(const std::filesystem::path& path, const PsrgRecord& rec);
PsrgRecord read_psrg(const std::filesystem::path& path);

void write_grid(const std::filesystem::path& path, const GridImage& img);
GridImage read_grid(const std::filesystem::path& path);

/// Sinogram kind is not stored in the container; the caller names it.
void write_sinogram(const std::filesystem::path& path, const Sinogram& sino, double radial_spacing_mm = 1.0);
Sinogram read_sinogram(const std::filesystem::path& path, SinogramKind kind);

void write_mask(const std::filesystem::path& path, const LesionMask& mask, double spacing_mm);
LesionMask read_mask(const std::filesystem::path& path, std::string label = {});

/// 16-bit binary portable graymap (P5, maxval 65535, big-endian samples),
/// scaled so max(img) maps to 65535 and negatives clamp to 0.
void write_pgm16(const std::filesystem::path& path, const GridImage& img);

}  // namespace petsr
