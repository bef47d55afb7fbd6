#include "petsr/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "petsr/psrg_io.hpp"
#include "petsr/rng.hpp"

namespace petsr {

namespace {

constexpr int kMaxLesionAttempts = 100;
constexpr int kMaxValueDraws = 100;

struct Ellipse {
  double cx, cy;  // mm, origin at the grid center, +y up
  double a, b;    // semi-axes, mm
  double theta;   // rotation, rad

  bool contains(double x, double y) const {
    const double dx = x - cx;
    const double dy = y - cy;
    const double c = std::cos(theta);
    const double s = std::sin(theta);
    const double u = (c * dx + s * dy) / a;
    const double v = (-s * dx + c * dy) / b;
    return u * u + v * v <= 1.0;
  }
};

// Pixel center in mm; row 0 is the top of the image.
double pixel_x(std::size_t col, std::size_t n, double spacing) {
  return (static_cast<double>(col) - 0.5 * static_cast<double>(n - 1)) * spacing;
}
double pixel_y(std::size_t row, std::size_t n, double spacing) {
  return (0.5 * static_cast<double>(n - 1) - static_cast<double>(row)) * spacing;
}

// Draws `count` values from [lo, hi] with pairwise gaps >= min_gap.
std::vector<double> distinct_values(Rng& rng, std::size_t count, double lo, double hi, double min_gap,
                                    std::uint64_t seed) {
  std::vector<double> out;
  for (std::size_t i = 0; i < count; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < kMaxValueDraws && !placed; ++attempt) {
      const double v = rng.uniform(lo, hi);
      if (std::all_of(out.begin(), out.end(), [&](double o) { return std::abs(o - v) >= min_gap; })) {
        out.push_back(v);
        placed = true;
      }
    }
    if (!placed) {
      throw GenerationError("phantom seed " + std::to_string(seed) + ": cannot draw distinct tissue values");
    }
  }
  return out;
}

}  // namespace

std::vector<std::string> validate(const PhantomSpec& spec) {
  std::vector<std::string> v;
  if (spec.grid_size < 8) v.emplace_back("grid_size must be >= 8");
  if (!(spec.spacing_mm > 0.0)) v.emplace_back("spacing_mm must be positive");
  if (spec.n_organs < 2 || spec.n_organs > 6) v.emplace_back("n_organs must be in [2,6]");
  if (spec.n_lesions > 4) v.emplace_back("n_lesions must be in [0,4]");
  if (!(spec.lesion_radius_mm.lo > 0.0 && spec.lesion_radius_mm.lo <= spec.lesion_radius_mm.hi))
    v.emplace_back("lesion_radius_mm must be a positive range");
  if (!(spec.lesion_contrast.lo > 1.0 && spec.lesion_contrast.lo <= spec.lesion_contrast.hi))
    v.emplace_back("lesion_contrast must be a range of values > 1");
  if (!(spec.organ_activity.lo > 0.0 && spec.organ_activity.lo < spec.organ_activity.hi))
    v.emplace_back("organ_activity must be a positive range with lo < hi");
  return v;
}

Phantom generate_phantom(const PhantomSpec& spec) {
  if (auto v = validate(spec); !v.empty()) {
    std::string msg = "PhantomSpec invalid:";
    for (const auto& s : v) msg += "\n  - " + s;
    throw ConfigError(msg);
  }
  const std::size_t n = spec.grid_size;
  const double h = spec.spacing_mm;
  const double half_fov = 0.5 * static_cast<double>(n) * h;
  Rng rng(spec.seed);

  // Shapes. Index 0 is the body; inner organs are clipped to it.
  std::vector<Ellipse> shapes;
  shapes.push_back({rng.uniform(-0.05, 0.05) * half_fov, rng.uniform(-0.05, 0.05) * half_fov,
                    rng.uniform(0.70, 0.85) * half_fov, rng.uniform(0.55, 0.75) * half_fov,
                    rng.uniform(-0.3, 0.3)});
  const Ellipse body = shapes.front();
  for (std::uint32_t i = 1; i < spec.n_organs; ++i) {
    double cx = 0.0;
    double cy = 0.0;
    for (int attempt = 0; attempt < kMaxValueDraws; ++attempt) {
      cx = body.cx + rng.uniform(-0.6, 0.6) * body.a;
      cy = body.cy + rng.uniform(-0.6, 0.6) * body.b;
      if (body.contains(cx, cy)) break;
    }
    shapes.push_back({cx, cy, rng.uniform(0.12, 0.32) * half_fov, rng.uniform(0.10, 0.25) * half_fov,
                      rng.uniform(0.0, std::numbers::pi)});
  }

  const double act_gap = 0.08 * (spec.organ_activity.hi - spec.organ_activity.lo);
  const std::vector<double> uptake =
      distinct_values(rng, spec.n_organs, spec.organ_activity.lo, spec.organ_activity.hi, act_gap, spec.seed);
  const std::vector<double> tissue = distinct_values(rng, spec.n_organs, 0.2, 1.0, 0.05, spec.seed);
  const double lesion_tissue = 1.1;

  Phantom ph;
  ph.labels.assign(n * n, 0);
  for (std::size_t r = 0; r < n; ++r) {
    const double y = pixel_y(r, n, h);
    for (std::size_t c = 0; c < n; ++c) {
      const double x = pixel_x(c, n, h);
      if (!body.contains(x, y)) continue;
      std::uint8_t label = 1;
      for (std::size_t k = 1; k < shapes.size(); ++k) {
        if (shapes[k].contains(x, y)) label = static_cast<std::uint8_t>(k + 1);
      }
      ph.labels[r * n + c] = label;
    }
  }

  ph.activity = GridImage(n, n, h, Units::activity);
  ph.anatomy = GridImage(n, n, h, Units::anatomy);
  for (std::size_t i = 0; i < n * n; ++i) {
    const std::uint8_t label = ph.labels[i];
    if (label == 0) continue;
    ph.activity[i] = uptake[label - 1];
    ph.anatomy[i] = tissue[label - 1];
  }

  std::vector<std::uint8_t> occupied(n * n, 0);
  for (std::uint32_t l = 0; l < spec.n_lesions; ++l) {
    bool placed = false;
    for (int attempt = 0; attempt < kMaxLesionAttempts && !placed; ++attempt) {
      const double radius = rng.uniform(spec.lesion_radius_mm.lo, spec.lesion_radius_mm.hi);
      const double cx = rng.uniform(-half_fov, half_fov);
      const double cy = rng.uniform(-half_fov, half_fov);
      const double contrast = rng.uniform(spec.lesion_contrast.lo, spec.lesion_contrast.hi);

      // Lesion support plus a one-pixel guard ring must sit in a single organ
      // and stay clear of earlier lesions.
      std::vector<std::size_t> support;
      std::uint8_t organ = 0;
      bool ok = true;
      const double guard = radius + h;
      for (std::size_t r = 0; r < n && ok; ++r) {
        const double y = pixel_y(r, n, h);
        if (std::abs(y - cy) > guard) continue;
        for (std::size_t c = 0; c < n && ok; ++c) {
          const double x = pixel_x(c, n, h);
          const double d = std::hypot(x - cx, y - cy);
          if (d > guard) continue;
          const std::size_t idx = r * n + c;
          const std::uint8_t label = ph.labels[idx];
          if (label == 0 || occupied[idx] || (organ != 0 && label != organ)) {
            ok = false;
            break;
          }
          organ = label;
          if (d <= radius) support.push_back(idx);
        }
      }
      // The guard ring must also lie inside the grid.
      if (std::abs(cx) + guard > half_fov || std::abs(cy) + guard > half_fov) ok = false;
      if (!ok || support.empty()) continue;

      LesionMask mask{n, n, std::vector<std::uint8_t>(n * n, 0), "lesion_" + std::to_string(l)};
      for (std::size_t idx : support) {
        mask.mask[idx] = 1;
        occupied[idx] = 1;
        ph.activity[idx] = contrast * uptake[organ - 1];
        if (spec.lesion_in_anatomy) ph.anatomy[idx] = lesion_tissue;
      }
      ph.lesions.push_back(std::move(mask));
      placed = true;
    }
    if (!placed) {
      throw GenerationError("phantom seed " + std::to_string(spec.seed) + ": lesion " + std::to_string(l) +
                            " could not be placed inside an organ after " + std::to_string(kMaxLesionAttempts) +
                            " attempts");
    }
  }
  return ph;
}

SplitCounts split_counts(std::size_t count, const SplitFractions& split) {
  const double total = split.train + split.val + split.test;
  if (std::abs(total - 1.0) > 1e-9 || split.train < 0.0 || split.val < 0.0 || split.test < 0.0) {
    throw ConfigError("split fractions must be nonnegative and sum to 1");
  }
  SplitCounts out;
  const auto c = static_cast<double>(count);
  out.train = std::min<std::size_t>(count, static_cast<std::size_t>(std::llround(c * split.train)));
  out.val = std::min<std::size_t>(count - out.train, static_cast<std::size_t>(std::llround(c * split.val)));
  out.test = count - out.train - out.val;
  return out;
}

std::string case_id_for(std::size_t index) {
  std::ostringstream os;
  os << "case_";
  os.width(4);
  os.fill('0');
  os << index;
  return os.str();
}

std::string format_manifest_line(const ManifestEntry& e) {
  std::string masks;
  for (std::size_t i = 0; i < e.masks.size(); ++i) {
    if (i) masks += ';';
    masks += e.masks[i].generic_string();
  }
  return e.case_id + "," + e.split + "," + e.activity.generic_string() + "," + e.anatomy.generic_string() + "," +
         masks + "," + std::to_string(e.seed);
}

ManifestEntry parse_manifest_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  fields.push_back(cur);
  if (fields.size() != 6) throw IoError("malformed manifest line: " + line);
  ManifestEntry e;
  e.case_id = fields[0];
  e.split = fields[1];
  e.activity = fields[2];
  e.anatomy = fields[3];
  std::string m;
  for (char ch : fields[4] + ";") {
    if (ch == ';') {
      if (!m.empty()) e.masks.emplace_back(m);
      m.clear();
    } else {
      m += ch;
    }
  }
  try {
    e.seed = std::stoull(fields[5]);
  } catch (const std::exception&) {
    throw IoError("malformed seed in manifest line: " + line);
  }
  return e;
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw IoError("cannot open manifest: " + manifest_path.string());
  std::vector<ManifestEntry> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    out.push_back(parse_manifest_line(line));
  }
  return out;
}

void write_manifest(const std::filesystem::path& manifest_path, const std::vector<ManifestEntry>& entries) {
  if (manifest_path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(manifest_path.parent_path(), ec);
    if (ec) throw IoError("cannot create directory " + manifest_path.parent_path().string());
  }
  std::ofstream out(manifest_path, std::ios::trunc);
  if (!out) throw IoError("cannot open manifest for writing: " + manifest_path.string());
  for (const auto& e : entries) out << format_manifest_line(e) << '\n';
  if (!out) throw IoError("write failed: " + manifest_path.string());
}

std::filesystem::path generate_dataset(const PhantomSpec& base, std::size_t count, const SplitFractions& split,
                                       const std::filesystem::path& out_dir) {
  const SplitCounts counts = split_counts(count, split);
  std::vector<ManifestEntry> entries;
  entries.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    PhantomSpec spec = base;
    spec.seed = base.seed + i;
    Phantom ph = generate_phantom(spec);

    ManifestEntry e;
    e.case_id = case_id_for(i);
    e.split = i < counts.train ? "train" : (i < counts.train + counts.val ? "val" : "test");
    e.seed = spec.seed;
    const std::filesystem::path rel = e.case_id;
    e.activity = rel / "activity.psrg";
    e.anatomy = rel / "anatomy.psrg";
    write_grid(out_dir / e.activity, ph.activity);
    write_grid(out_dir / e.anatomy, ph.anatomy);
    for (const auto& lesion : ph.lesions) {
      e.masks.push_back(rel / (lesion.label + ".psrg"));
      write_mask(out_dir / e.masks.back(), lesion, spec.spacing_mm);
    }
    entries.push_back(std::move(e));
  }
  const auto manifest = out_dir / "manifest.csv";
  write_manifest(manifest, entries);
  return manifest;
}

}  // namespace petsr
