#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "petsr/core_model.hpp"
#include "petsr/metrics.hpp"
#include "petsr/phantom.hpp"
#include "petsr/ppcr_sampler.hpp"
#include "petsr/tiny_denoiser.hpp"

namespace petsr {

/// Everything a run needs, parsed from `key = value` lines.
///
/// Only `output_dir` is required. A relative output_dir is resolved against
/// the directory of the config file.
struct RunConfig {
  std::filesystem::path output_dir;

  PhantomSpec phantom;  // phantom.seed is the dataset base seed (`seed`)
  std::size_t n_cases = 50;
  SplitFractions split;

  ScannerConfig scanner;  // preset fields are overwritten per setting
  PpcrConfig ppcr;
  TrainingConfig training;
  TinyArch arch;
  bool train_concat = true;

  std::uint64_t sampler_seed = 11;
  std::uint32_t workers = 1;
  std::vector<std::string> ablate_variants{"full", "no_dc", "no_psf", "no_ppcr", "concat_cond"};
};

/// Throws ConfigError on unknown keys, malformed values, missing
/// `output_dir`, or any violated config invariant.
RunConfig parse_run_config(std::string_view text, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);

/// Every recognized key, in documentation order.
const std::vector<std::string>& run_config_keys();

/// "std" or "ood"; used in file and directory names.
std::string_view setting_tag(ScannerPreset p);

/// Output layout under output_dir.
struct RunPaths {
  std::filesystem::path root;

  std::filesystem::path manifest() const { return root / "phantoms" / "manifest.csv"; }
  std::filesystem::path degraded(ScannerPreset p, const std::string& case_id) const;
  std::filesystem::path weights(Conditioning c) const;
  std::filesystem::path loss_log(Conditioning c) const;
  std::filesystem::path recon(ScannerPreset p, std::string_view variant, const std::string& case_id) const;
  std::filesystem::path eval_dir(ScannerPreset p) const { return root / "eval" / std::string(setting_tag(p)); }
};

/// Calibrated scanner record stored next to each degraded sinogram.
void write_scanner_config(const std::filesystem::path& path, const ScannerConfig& cfg);
ScannerConfig read_scanner_config(const std::filesystem::path& path);

/// Runs fn(0..n-1) on up to `workers` threads; rethrows the failure with the
/// lowest index.
void parallel_for(std::size_t n, std::uint32_t workers, const std::function<void(std::size_t)>& fn);

std::filesystem::path cmd_phantom(const RunConfig& cfg, std::ostream& log);
void cmd_degrade(const RunConfig& cfg, ScannerPreset setting, std::ostream& log);
void cmd_train(const RunConfig& cfg, std::ostream& log);
void cmd_reconstruct(const RunConfig& cfg, ScannerPreset setting, std::string_view variant, std::ostream& log);

/// Evaluates the LR comparator and every reconstructed variant for the given
/// settings (both when empty) and prints the summary tables. Returns the
/// summaries in setting order.
std::vector<std::vector<SummaryRow>> cmd_eval(const RunConfig& cfg, std::vector<ScannerPreset> settings,
                                              std::ostream& log);

/// reconstruct for every configured variant, then eval.
void cmd_ablate(const RunConfig& cfg, std::vector<ScannerPreset> settings, std::ostream& log);

/// Stable process exit code for an exception raised by a command:
/// 2 configuration, 3 I/O, 4 numerical failure.
int exit_code_for(const std::exception& e);

}  // namespace petsr
