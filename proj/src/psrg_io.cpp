#include "petsr/psrg_io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace petsr {

namespace {

void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

void put_f32(std::string& buf, float f) { put_u32(buf, std::bit_cast<std::uint32_t>(f)); }

std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

float get_f32(const unsigned char* p) { return std::bit_cast<float>(get_u32(p)); }

void write_bytes(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create directory " + path.parent_path().string() + ": " + ec.message());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

Units units_for_tag(PsrgTag tag) {
  switch (tag) {
    case PsrgTag::activity:
      return Units::activity;
    case PsrgTag::anatomy:
      return Units::anatomy;
    case PsrgTag::model_space:
      return Units::model_space;
    default:
      throw IoError("PSRG tag does not describe an image");
  }
}

}  // namespace

void write_psrg(const std::filesystem::path& path, const PsrgRecord& rec) {
  if (rec.values.size() != static_cast<std::size_t>(rec.dim0) * rec.dim1) {
    throw IoError("PSRG record length mismatch for " + path.string());
  }
  std::string buf;
  buf.reserve(24 + 4 * rec.values.size());
  buf.append("PSRG");
  put_u32(buf, kPsrgVersion);
  put_u32(buf, static_cast<std::uint32_t>(rec.tag));
  put_u32(buf, rec.dim0);
  put_u32(buf, rec.dim1);
  put_f32(buf, rec.spacing_mm);
  for (float v : rec.values) put_f32(buf, v);
  write_bytes(path, buf);
}

PsrgRecord read_psrg(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 24 || std::memcmp(bytes.data(), "PSRG", 4) != 0) {
    throw IoError("not a PSRG file: " + path.string());
  }
  PsrgRecord rec;
  const std::uint32_t version = get_u32(bytes.data() + 4);
  if (version != kPsrgVersion) throw IoError("unsupported PSRG version in " + path.string());
  const std::uint32_t tag = get_u32(bytes.data() + 8);
  if (tag > 4) throw IoError("unknown PSRG units tag in " + path.string());
  rec.tag = static_cast<PsrgTag>(tag);
  rec.dim0 = get_u32(bytes.data() + 12);
  rec.dim1 = get_u32(bytes.data() + 16);
  rec.spacing_mm = get_f32(bytes.data() + 20);
  const std::size_t n = static_cast<std::size_t>(rec.dim0) * rec.dim1;
  if (bytes.size() != 24 + 4 * n) throw IoError("truncated PSRG file: " + path.string());
  rec.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) rec.values[i] = get_f32(bytes.data() + 24 + 4 * i);
  return rec;
}

void write_grid(const std::filesystem::path& path, const GridImage& img) {
  PsrgRecord rec;
  rec.tag = static_cast<PsrgTag>(img.units());
  rec.dim0 = static_cast<std::uint32_t>(img.height());
  rec.dim1 = static_cast<std::uint32_t>(img.width());
  rec.spacing_mm = static_cast<float>(img.spacing_mm());
  rec.values.assign(img.values().begin(), img.values().end());
  write_psrg(path, rec);
}

GridImage read_grid(const std::filesystem::path& path) {
  PsrgRecord rec = read_psrg(path);
  std::vector<double> data(rec.values.begin(), rec.values.end());
  return GridImage(rec.dim1, rec.dim0, rec.spacing_mm, units_for_tag(rec.tag), std::move(data));
}

void write_sinogram(const std::filesystem::path& path, const Sinogram& sino, double radial_spacing_mm) {
  PsrgRecord rec;
  rec.tag = PsrgTag::sinogram;
  rec.dim0 = static_cast<std::uint32_t>(sino.n_angles());
  rec.dim1 = static_cast<std::uint32_t>(sino.n_radial());
  rec.spacing_mm = static_cast<float>(radial_spacing_mm);
  rec.values.assign(sino.values().begin(), sino.values().end());
  write_psrg(path, rec);
}

Sinogram read_sinogram(const std::filesystem::path& path, SinogramKind kind) {
  PsrgRecord rec = read_psrg(path);
  if (rec.tag != PsrgTag::sinogram) throw IoError("PSRG file is not a sinogram: " + path.string());
  std::vector<double> data(rec.values.begin(), rec.values.end());
  return Sinogram(rec.dim0, rec.dim1, kind, std::move(data));
}

void write_mask(const std::filesystem::path& path, const LesionMask& mask, double spacing_mm) {
  PsrgRecord rec;
  rec.tag = PsrgTag::mask;
  rec.dim0 = static_cast<std::uint32_t>(mask.height);
  rec.dim1 = static_cast<std::uint32_t>(mask.width);
  rec.spacing_mm = static_cast<float>(spacing_mm);
  rec.values.reserve(mask.mask.size());
  for (auto m : mask.mask) rec.values.push_back(m ? 1.0f : 0.0f);
  write_psrg(path, rec);
}

LesionMask read_mask(const std::filesystem::path& path, std::string label) {
  PsrgRecord rec = read_psrg(path);
  if (rec.tag != PsrgTag::mask) throw IoError("PSRG file is not a mask: " + path.string());
  LesionMask m;
  m.height = rec.dim0;
  m.width = rec.dim1;
  m.label = label.empty() ? path.stem().string() : std::move(label);
  m.mask.reserve(rec.values.size());
  for (float v : rec.values) m.mask.push_back(v > 0.5f ? 1 : 0);
  return m;
}

void write_pgm16(const std::filesystem::path& path, const GridImage& img) {
  double vmax = 0.0;
  for (double v : img.values()) vmax = std::max(vmax, v);
  std::string buf = "P5\n" + std::to_string(img.width()) + " " + std::to_string(img.height()) + "\n65535\n";
  buf.reserve(buf.size() + 2 * img.size());
  for (double v : img.values()) {
    double s = vmax > 0.0 ? std::clamp(v / vmax, 0.0, 1.0) : 0.0;
    auto q = static_cast<std::uint16_t>(std::lround(s * 65535.0));
    buf.push_back(static_cast<char>(q >> 8));
    buf.push_back(static_cast<char>(q & 0xFFu));
  }
  write_bytes(path, buf);
}

}  // namespace petsr
