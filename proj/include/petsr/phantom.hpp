#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "petsr/core_model.hpp"

namespace petsr {

struct Range {
  double lo = 0.0;
  double hi = 0.0;
  bool operator==(const Range&) const = default;
};

struct PhantomSpec {
  std::uint64_t seed = 0;
  std::uint32_t grid_size = 128;
  double spacing_mm = 2.0;
  std::uint32_t n_organs = 5;   // body outline + inner organs, in [2,6]
  std::uint32_t n_lesions = 2;  // in [0,4]
  Range lesion_radius_mm{4.0, 10.0};
  Range lesion_contrast{2.0, 4.0};
  Range organ_activity{0.5, 3.0};
  bool lesion_in_anatomy = false;

  bool operator==(const PhantomSpec&) const = default;
};

std::vector<std::string> validate(const PhantomSpec& spec);

struct Phantom {
  GridImage activity;
  GridImage anatomy;
  std::vector<LesionMask> lesions;
  /// Per-pixel tissue label (0 = air, 1 = body, 2.. = inner organs).
  std::vector<std::uint8_t> labels;
};

/// Deterministic ellipse phantom. Throws GenerationError (naming the seed) if
/// a lesion cannot be placed inside an organ within 100 attempts.
Phantom generate_phantom(const PhantomSpec& spec);

struct SplitFractions {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

struct SplitCounts {
  std::size_t train = 0;
  std::size_t val = 0;
  std::size_t test = 0;
};

SplitCounts split_counts(std::size_t count, const SplitFractions& split);

struct ManifestEntry {
  std::string case_id;
  std::string split;  // train | val | test
  std::filesystem::path activity;
  std::filesystem::path anatomy;
  std::vector<std::filesystem::path> masks;
  std::uint64_t seed = 0;
};

/// Line format: `case_id,split,activity,anatomy,mask1;mask2,seed`. Paths are
/// relative to the manifest's directory.
std::string format_manifest_line(const ManifestEntry& e);
ManifestEntry parse_manifest_line(const std::string& line);

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& manifest_path);
void write_manifest(const std::filesystem::path& manifest_path, const std::vector<ManifestEntry>& entries);

/// Writes `count` cases under `out_dir` (case seed = base.seed + index) and
/// `out_dir/manifest.csv`. Returns the manifest path.
std::filesystem::path generate_dataset(const PhantomSpec& base, std::size_t count, const SplitFractions& split,
                                       const std::filesystem::path& out_dir);

std::string case_id_for(std::size_t index);

}  // namespace petsr
