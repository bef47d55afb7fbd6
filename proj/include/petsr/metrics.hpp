#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "petsr/core_model.hpp"

namespace petsr {

/// 10 log10(max(ref)^2 / MSE). Identical images give +infinity.
double psnr(const GridImage& ref, const GridImage& est);

/// Mean local SSIM over all positions where the 11x11 Gaussian window
/// (sigma 1.5) fits, K1 = 0.01, K2 = 0.03, L = max(ref) - min(ref).
/// A constant reference uses L = max(|max(ref)|, 1).
double ssim(const GridImage& ref, const GridImage& est);

/// ||ref - est||^2 / ||ref||^2.
double nmse(const GridImage& ref, const GridImage& est);

struct LesionStats {
  double d_suv_max = 0.0;
  double d_suv_mean = 0.0;
  double lesion_nmse = 0.0;
};

LesionStats lesion_stats(const GridImage& ref, const GridImage& est, const LesionMask& mask);

struct LesionReport {
  std::string label;
  LesionStats stats;
};

struct MetricReport {
  double psnr_db = 0.0;
  double ssim = 0.0;
  double nmse = 0.0;
  std::vector<LesionReport> lesions;
};

MetricReport evaluate(const GridImage& ref, const GridImage& est, const std::vector<LesionMask>& masks);

struct MetricRow {
  std::string case_id;
  std::string method;
  double psnr = 0.0;
  double ssim = 0.0;
  double nmse = 0.0;
};

struct LesionRow {
  std::string case_id;
  std::string lesion;
  std::string method;
  LesionStats stats;
};

/// `case_id,method,psnr,ssim,nmse`; rows sorted by (case_id, method).
void write_metrics_csv(const std::filesystem::path& path, std::vector<MetricRow> rows);
std::vector<MetricRow> read_metrics_csv(const std::filesystem::path& path);

/// `case_id,lesion,method,d_suv_max,d_suv_mean,lesion_nmse`; sorted likewise.
void write_lesion_csv(const std::filesystem::path& path, std::vector<LesionRow> rows);

/// Formats a metric for CSV output; infinity is written as `inf`.
std::string format_metric(double v);

struct SummaryRow {
  std::string method;
  std::size_t n = 0;
  double psnr_mean = 0.0, psnr_std = 0.0;
  double ssim_mean = 0.0, ssim_std = 0.0;
  double nmse_mean = 0.0, nmse_std = 0.0;
};

/// Per-method mean and sample standard deviation, methods in first-seen order.
std::vector<SummaryRow> summarize(const std::vector<MetricRow>& rows);

/// Plain-text table: `Method | PSNR | SSIM | NMSE` with mean ± std cells.
std::string format_summary_table(const std::vector<SummaryRow>& rows);

}  // namespace petsr
