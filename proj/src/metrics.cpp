#include "petsr/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <tuple>

namespace petsr {

namespace {

void require_same(const GridImage& ref, const GridImage& est, const char* what) {
  if (ref.width() != est.width() || ref.height() != est.height()) {
    throw MetricError(std::string(what) + ": image dimensions differ");
  }
}

double max_value(const GridImage& img) { return *std::max_element(img.values().begin(), img.values().end()); }
double min_value(const GridImage& img) { return *std::min_element(img.values().begin(), img.values().end()); }

constexpr int kSsimWindow = 11;
constexpr double kSsimSigma = 1.5;

std::vector<double> gaussian_window() {
  std::vector<double> g(kSsimWindow);
  double s = 0.0;
  for (int i = 0; i < kSsimWindow; ++i) {
    const double d = i - kSsimWindow / 2;
    g[i] = std::exp(-d * d / (2.0 * kSsimSigma * kSsimSigma));
    s += g[i];
  }
  for (double& v : g) v /= s;
  return g;
}

// Separable "valid" filtering with the normalized window.
std::vector<double> filter_valid(const std::vector<double>& img, std::size_t w, std::size_t h,
                                 const std::vector<double>& g) {
  const std::size_t k = g.size();
  const std::size_t ow = w - k + 1, oh = h - k + 1;
  std::vector<double> tmp(h * ow, 0.0);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      double s = 0.0;
      for (std::size_t i = 0; i < k; ++i) s += g[i] * img[y * w + x + i];
      tmp[y * ow + x] = s;
    }
  }
  std::vector<double> out(oh * ow, 0.0);
  for (std::size_t y = 0; y < oh; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      double s = 0.0;
      for (std::size_t i = 0; i < k; ++i) s += g[i] * tmp[(y + i) * ow + x];
      out[y * ow + x] = s;
    }
  }
  return out;
}

}  // namespace

double psnr(const GridImage& ref, const GridImage& est) {
  require_same(ref, est, "psnr");
  double mse = 0.0;
  for (std::size_t i = 0; i < ref.size(); ++i) mse += (ref[i] - est[i]) * (ref[i] - est[i]);
  mse /= static_cast<double>(ref.size());
  const double peak = max_value(ref);
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  if (peak == 0.0) throw MetricError("psnr: reference maximum is zero");
  return 10.0 * std::log10(peak * peak / mse);
}

double ssim(const GridImage& ref, const GridImage& est) {
  require_same(ref, est, "ssim");
  const std::size_t w = ref.width(), h = ref.height();
  if (w < kSsimWindow || h < kSsimWindow) throw MetricError("ssim: images smaller than the 11x11 window");
  double L = max_value(ref) - min_value(ref);
  if (L == 0.0) L = std::max(std::abs(max_value(ref)), 1.0);
  const double c1 = (0.01 * L) * (0.01 * L);
  const double c2 = (0.03 * L) * (0.03 * L);

  std::vector<double> a(ref.values().begin(), ref.values().end());
  std::vector<double> b(est.values().begin(), est.values().end());
  // Rounding in the variance terms must not pull identical inputs below one.
  if (a == b) return 1.0;

  const std::vector<double> g = gaussian_window();
  std::vector<double> aa(a.size()), bb(a.size()), ab(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    aa[i] = a[i] * a[i];
    bb[i] = b[i] * b[i];
    ab[i] = a[i] * b[i];
  }
  const auto mu_a = filter_valid(a, w, h, g);
  const auto mu_b = filter_valid(b, w, h, g);
  const auto e_aa = filter_valid(aa, w, h, g);
  const auto e_bb = filter_valid(bb, w, h, g);
  const auto e_ab = filter_valid(ab, w, h, g);

  double total = 0.0;
  for (std::size_t i = 0; i < mu_a.size(); ++i) {
    const double va = e_aa[i] - mu_a[i] * mu_a[i];
    const double vb = e_bb[i] - mu_b[i] * mu_b[i];
    const double cov = e_ab[i] - mu_a[i] * mu_b[i];
    const double num = (2.0 * mu_a[i] * mu_b[i] + c1) * (2.0 * cov + c2);
    const double den = (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (va + vb + c2);
    total += num / den;
  }
  return total / static_cast<double>(mu_a.size());
}

double nmse(const GridImage& ref, const GridImage& est) {
  require_same(ref, est, "nmse");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    num += (ref[i] - est[i]) * (ref[i] - est[i]);
    den += ref[i] * ref[i];
  }
  if (den == 0.0) throw MetricError("nmse: reference has zero norm");
  return num / den;
}

LesionStats lesion_stats(const GridImage& ref, const GridImage& est, const LesionMask& mask) {
  require_same(ref, est, "lesion_stats");
  if (mask.width != ref.width() || mask.height != ref.height() || mask.mask.size() != ref.size()) {
    throw MetricError("lesion_stats: mask dimensions differ from the image");
  }
  double max_r = -std::numeric_limits<double>::infinity(), max_e = max_r;
  double sum_r = 0.0, sum_e = 0.0, num = 0.0, den = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    if (!mask.mask[i]) continue;
    ++n;
    max_r = std::max(max_r, ref[i]);
    max_e = std::max(max_e, est[i]);
    sum_r += ref[i];
    sum_e += est[i];
    num += (ref[i] - est[i]) * (ref[i] - est[i]);
    den += ref[i] * ref[i];
  }
  if (n == 0) throw MetricError("lesion_stats: empty lesion mask '" + mask.label + "'");
  if (den == 0.0) throw MetricError("lesion_stats: reference is zero inside mask '" + mask.label + "'");
  LesionStats s;
  s.d_suv_max = std::abs(max_e - max_r);
  s.d_suv_mean = std::abs(sum_e - sum_r) / static_cast<double>(n);
  s.lesion_nmse = num / den;
  return s;
}

MetricReport evaluate(const GridImage& ref, const GridImage& est, const std::vector<LesionMask>& masks) {
  MetricReport r;
  r.psnr_db = psnr(ref, est);
  r.ssim = ssim(ref, est);
  r.nmse = nmse(ref, est);
  for (const auto& m : masks) r.lesions.push_back({m.label, lesion_stats(ref, est, m)});
  return r;
}

std::string format_metric(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

namespace {

double parse_metric(const std::string& s) {
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw IoError("bad metric value '" + s + "'");
    return v;
  } catch (const std::logic_error&) {
    throw IoError("bad metric value '" + s + "'");
  }
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(line);
  while (std::getline(is, cur, ',')) out.push_back(cur);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  return out;
}

}  // namespace

void write_metrics_csv(const std::filesystem::path& path, std::vector<MetricRow> rows) {
  std::stable_sort(rows.begin(), rows.end(), [](const MetricRow& a, const MetricRow& b) {
    return std::tie(a.case_id, a.method) < std::tie(b.case_id, b.method);
  });
  auto out = open_out(path);
  out << "case_id,method,psnr,ssim,nmse\n";
  for (const auto& r : rows) {
    out << r.case_id << ',' << r.method << ',' << format_metric(r.psnr) << ',' << format_metric(r.ssim) << ','
        << format_metric(r.nmse) << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<MetricRow> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open metrics file: " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "case_id,method,psnr,ssim,nmse") {
    throw IoError("unexpected metrics header in " + path.string());
  }
  std::vector<MetricRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != 5) throw IoError("metrics row must have 5 fields: " + line);
    rows.push_back({f[0], f[1], parse_metric(f[2]), parse_metric(f[3]), parse_metric(f[4])});
  }
  return rows;
}

void write_lesion_csv(const std::filesystem::path& path, std::vector<LesionRow> rows) {
  std::stable_sort(rows.begin(), rows.end(), [](const LesionRow& a, const LesionRow& b) {
    return std::tie(a.case_id, a.method, a.lesion) < std::tie(b.case_id, b.method, b.lesion);
  });
  auto out = open_out(path);
  out << "case_id,lesion,method,d_suv_max,d_suv_mean,lesion_nmse\n";
  for (const auto& r : rows) {
    out << r.case_id << ',' << r.lesion << ',' << r.method << ',' << format_metric(r.stats.d_suv_max) << ','
        << format_metric(r.stats.d_suv_mean) << ',' << format_metric(r.stats.lesion_nmse) << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<SummaryRow> summarize(const std::vector<MetricRow>& rows) {
  std::vector<SummaryRow> out;
  std::vector<std::vector<const MetricRow*>> groups;
  for (const auto& r : rows) {
    auto it = std::find_if(out.begin(), out.end(), [&](const SummaryRow& s) { return s.method == r.method; });
    if (it == out.end()) {
      out.push_back({r.method});
      groups.emplace_back();
      it = out.end() - 1;
    }
    groups[static_cast<std::size_t>(it - out.begin())].push_back(&r);
  }
  auto stats = [](const std::vector<const MetricRow*>& g, double MetricRow::*field, double& mean, double& sd) {
    mean = 0.0;
    for (const auto* r : g) mean += r->*field;
    mean /= static_cast<double>(g.size());
    double ss = 0.0;
    for (const auto* r : g) ss += (r->*field - mean) * (r->*field - mean);
    sd = g.size() > 1 ? std::sqrt(ss / static_cast<double>(g.size() - 1)) : 0.0;
  };
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].n = groups[i].size();
    stats(groups[i], &MetricRow::psnr, out[i].psnr_mean, out[i].psnr_std);
    stats(groups[i], &MetricRow::ssim, out[i].ssim_mean, out[i].ssim_std);
    stats(groups[i], &MetricRow::nmse, out[i].nmse_mean, out[i].nmse_std);
  }
  return out;
}

std::string format_summary_table(const std::vector<SummaryRow>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(14) << "Method" << " | " << std::setw(16) << "PSNR (dB)" << " | " << std::setw(16)
     << "SSIM" << " | " << std::setw(18) << "NMSE" << '\n';
  os << std::string(14, '-') << "-+-" << std::string(16, '-') << "-+-" << std::string(16, '-') << "-+-"
     << std::string(18, '-') << '\n';
  auto cell = [](double m, double s, int prec) {
    std::ostringstream c;
    c << std::fixed << std::setprecision(prec) << m << " ± " << s;
    return c.str();
  };
  for (const auto& r : rows) {
    // "±" is two bytes in UTF-8; pad one extra column so cells line up.
    os << std::left << std::setw(14) << r.method << " | " << std::setw(17) << cell(r.psnr_mean, r.psnr_std, 2)
       << " | " << std::setw(17) << cell(r.ssim_mean, r.ssim_std, 4) << " | " << std::setw(19)
       << cell(r.nmse_mean, r.nmse_std, 5) << '\n';
  }
  return os.str();
}

}  // namespace petsr
