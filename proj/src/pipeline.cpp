#include "petsr/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <exception>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

#include "petsr/forward_model.hpp"
#include "petsr/psrg_io.hpp"
#include "petsr/rng.hpp"

namespace petsr {

// ---------------------------------------------------------------------------
// Config parsing
// ---------------------------------------------------------------------------

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <class T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const char* first = value.data();
  const char* last = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(first, last, out);
  if (ec != std::errc{} || ptr != last) throw ConfigError("config key '" + key + "': cannot parse '" + value + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError("config key '" + key + "': expected true|false, got '" + value + "'");
}

std::vector<std::string> parse_list(const std::string& value) {
  std::vector<std::string> out;
  std::istringstream is(value);
  std::string item;
  while (std::getline(is, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& value)>;

template <class T>
Setter number(T RunConfig::*field) {
  return [field](RunConfig& c, const std::string& k, const std::string& v) { c.*field = parse_number<T>(k, v); };
}

template <class S, class T>
Setter nested(S RunConfig::*outer, T S::*field) {
  return [outer, field](RunConfig& c, const std::string& k, const std::string& v) {
    if constexpr (std::is_same_v<T, bool>) {
      (c.*outer).*field = parse_bool(k, v);
    } else {
      (c.*outer).*field = parse_number<T>(k, v);
    }
  };
}

template <class T>
Setter range_lo(Range PhantomSpec::*r) {
  return [r](RunConfig& c, const std::string& k, const std::string& v) { (c.phantom.*r).lo = parse_number<T>(k, v); };
}

template <class T>
Setter range_hi(Range PhantomSpec::*r) {
  return [r](RunConfig& c, const std::string& k, const std::string& v) { (c.phantom.*r).hi = parse_number<T>(k, v); };
}

const std::vector<std::pair<std::string, Setter>>& setters() {
  static const std::vector<std::pair<std::string, Setter>> table = {
      {"output_dir", [](RunConfig& c, const std::string&, const std::string& v) { c.output_dir = v; }},
      // dataset
      {"seed", nested(&RunConfig::phantom, &PhantomSpec::seed)},
      {"n_cases", number(&RunConfig::n_cases)},
      {"grid_size", nested(&RunConfig::phantom, &PhantomSpec::grid_size)},
      {"spacing_mm", nested(&RunConfig::phantom, &PhantomSpec::spacing_mm)},
      {"n_organs", nested(&RunConfig::phantom, &PhantomSpec::n_organs)},
      {"n_lesions", nested(&RunConfig::phantom, &PhantomSpec::n_lesions)},
      {"lesion_radius_min_mm", range_lo<double>(&PhantomSpec::lesion_radius_mm)},
      {"lesion_radius_max_mm", range_hi<double>(&PhantomSpec::lesion_radius_mm)},
      {"lesion_contrast_min", range_lo<double>(&PhantomSpec::lesion_contrast)},
      {"lesion_contrast_max", range_hi<double>(&PhantomSpec::lesion_contrast)},
      {"organ_activity_min", range_lo<double>(&PhantomSpec::organ_activity)},
      {"organ_activity_max", range_hi<double>(&PhantomSpec::organ_activity)},
      {"lesion_in_anatomy", nested(&RunConfig::phantom, &PhantomSpec::lesion_in_anatomy)},
      {"split_train", nested(&RunConfig::split, &SplitFractions::train)},
      {"split_val", nested(&RunConfig::split, &SplitFractions::val)},
      {"split_test", nested(&RunConfig::split, &SplitFractions::test)},
      // scanner
      {"n_angles_full", nested(&RunConfig::scanner, &ScannerConfig::n_angles_full)},
      {"n_radial_full", nested(&RunConfig::scanner, &ScannerConfig::n_radial_full)},
      {"count_scale", nested(&RunConfig::scanner, &ScannerConfig::count_scale)},
      {"background_fraction", nested(&RunConfig::scanner, &ScannerConfig::background_fraction)},
      {"fov_mm", nested(&RunConfig::scanner, &ScannerConfig::fov_mm)},
      // sampler
      {"n_ddim_steps", nested(&RunConfig::ppcr, &PpcrConfig::n_ddim_steps)},
      {"psf_on_from_step", nested(&RunConfig::ppcr, &PpcrConfig::psf_on_from_step)},
      {"m_start", nested(&RunConfig::ppcr, &PpcrConfig::m_start)},
      {"m_end", nested(&RunConfig::ppcr, &PpcrConfig::m_end)},
      {"eta_dc", nested(&RunConfig::ppcr, &PpcrConfig::eta_dc)},
      {"mu_nesterov", nested(&RunConfig::ppcr, &PpcrConfig::mu_nesterov)},
      {"alpha_warmstart", nested(&RunConfig::ppcr, &PpcrConfig::alpha_warmstart)},
      {"nonneg_projection", nested(&RunConfig::ppcr, &PpcrConfig::nonneg_projection)},
      {"sampler_seed", number(&RunConfig::sampler_seed)},
      // training
      {"train_seed", nested(&RunConfig::training, &TrainingConfig::seed)},
      {"train_iterations", nested(&RunConfig::training, &TrainingConfig::steps)},
      {"batch_size", nested(&RunConfig::training, &TrainingConfig::batch)},
      {"crop_size", nested(&RunConfig::training, &TrainingConfig::crop)},
      {"learning_rate", nested(&RunConfig::training, &TrainingConfig::learning_rate)},
      {"grad_clip", nested(&RunConfig::training, &TrainingConfig::grad_clip)},
      {"cond_dropout", nested(&RunConfig::training, &TrainingConfig::cond_dropout)},
      {"log_every", nested(&RunConfig::training, &TrainingConfig::log_every)},
      {"diffusion_steps", nested(&RunConfig::training, &TrainingConfig::train_steps_T)},
      {"beta_min", nested(&RunConfig::training, &TrainingConfig::beta_min)},
      {"beta_max", nested(&RunConfig::training, &TrainingConfig::beta_max)},
      {"s_scale", nested(&RunConfig::training, &TrainingConfig::s_scale)},
      {"width1", nested(&RunConfig::arch, &TinyArch::width1)},
      {"width2", nested(&RunConfig::arch, &TinyArch::width2)},
      {"heads", nested(&RunConfig::arch, &TinyArch::heads)},
      {"window", nested(&RunConfig::arch, &TinyArch::window)},
      {"temb_dim", nested(&RunConfig::arch, &TinyArch::temb_dim)},
      {"train_concat",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.train_concat = parse_bool(k, v); }},
      // orchestration
      {"workers", number(&RunConfig::workers)},
      {"ablate_variants",
       [](RunConfig& c, const std::string&, const std::string& v) { c.ablate_variants = parse_list(v); }},
  };
  return table;
}

void validate_run_config(const RunConfig& c) {
  std::vector<std::string> v;
  for (auto& m : validate(c.phantom)) v.push_back(m);
  for (auto& m : validate(c.scanner)) v.push_back(m);
  for (auto& m : validate(c.ppcr)) v.push_back(m);
  if (c.n_cases == 0) v.emplace_back("n_cases must be positive");
  if (c.workers == 0) v.emplace_back("workers must be positive");
  if (c.training.steps == 0) v.emplace_back("train_iterations must be positive");
  if (c.training.batch == 0) v.emplace_back("batch_size must be positive");
  if (c.training.log_every == 0) v.emplace_back("log_every must be positive");
  if (!(c.training.learning_rate > 0.0)) v.emplace_back("learning_rate must be positive");
  if (!(c.training.cond_dropout >= 0.0 && c.training.cond_dropout <= 1.0)) v.emplace_back("cond_dropout must be in [0,1]");
  if (c.ppcr.n_ddim_steps > c.training.train_steps_T) v.emplace_back("n_ddim_steps must not exceed diffusion_steps");
  if (c.phantom.grid_size % 2 != 0) v.emplace_back("grid_size must be even");
  if (c.training.crop % 2 != 0) v.emplace_back("crop_size must be even");
  for (const auto& name : c.ablate_variants) {
    try {
      (void)ablation_variant(name, c.ppcr);
    } catch (const ConfigError& e) {
      v.emplace_back(e.what());
    }
  }
  try {
    (void)split_counts(c.n_cases, c.split);
  } catch (const ConfigError& e) {
    v.emplace_back(e.what());
  }
  try {
    (void)make_schedule(c.training.train_steps_T, c.training.beta_min, c.training.beta_max);
    (void)parameter_count(c.arch);
    TinyArch concat = c.arch;
    concat.conditioning = Conditioning::concat;
    if (parameter_count(c.arch) > kMaxTinyParameters || parameter_count(concat) > kMaxTinyParameters) {
      v.emplace_back("network exceeds the parameter budget");
    }
  } catch (const ConfigError& e) {
    v.emplace_back(e.what());
  }
  if (v.empty()) return;
  std::string msg = "run config invalid:";
  for (const auto& s : v) msg += "\n  - " + s;
  throw ConfigError(msg);
}

}  // namespace

const std::vector<std::string>& run_config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& [name, _] : setters()) k.push_back(name);
    return k;
  }();
  return keys;
}

RunConfig parse_run_config(std::string_view text, const std::filesystem::path& base_dir) {
  RunConfig cfg;
  std::map<std::string, bool> seen;
  std::istringstream is{std::string(text)};
  std::string raw;
  int line_no = 0;
  while (std::getline(is, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const auto& table = setters();
    const auto it = std::find_if(table.begin(), table.end(), [&](const auto& p) { return p.first == key; });
    if (it == table.end()) throw ConfigError("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    if (seen[key]) throw ConfigError("config line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
    seen[key] = true;
    it->second(cfg, key, value);
  }
  if (!seen["output_dir"] || cfg.output_dir.empty()) throw ConfigError("config: required key 'output_dir' missing");
  if (cfg.output_dir.is_relative() && !base_dir.empty()) cfg.output_dir = base_dir / cfg.output_dir;
  validate_run_config(cfg);
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), path.parent_path());
}

std::string_view setting_tag(ScannerPreset p) { return p == ScannerPreset::standard ? "std" : "ood"; }

std::filesystem::path RunPaths::degraded(ScannerPreset p, const std::string& case_id) const {
  return root / "degraded" / std::string(setting_tag(p)) / case_id;
}

std::filesystem::path RunPaths::weights(Conditioning c) const {
  return root / "models" / (std::string(conditioning_name(c)) + ".psdw");
}

std::filesystem::path RunPaths::loss_log(Conditioning c) const {
  return root / "models" / (std::string(conditioning_name(c)) + "_loss.csv");
}

std::filesystem::path RunPaths::recon(ScannerPreset p, std::string_view variant, const std::string& case_id) const {
  return root / "recon" / std::string(setting_tag(p)) / std::string(variant) / case_id;
}

// ---------------------------------------------------------------------------
// Calibrated scanner record
// ---------------------------------------------------------------------------

void write_scanner_config(const std::filesystem::path& path, const ScannerConfig& c) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << std::setprecision(17);
  out << "psf_fwhm_mm = " << c.psf_fwhm_mm << '\n'
      << "n_angles_full = " << c.n_angles_full << '\n'
      << "n_radial_full = " << c.n_radial_full << '\n'
      << "angular_rebin = " << c.angular_rebin << '\n'
      << "radial_rebin = " << c.radial_rebin << '\n'
      << "dose_fraction = " << c.dose_fraction << '\n'
      << "background_per_bin = " << c.background_per_bin << '\n'
      << "background_fraction = " << c.background_fraction << '\n'
      << "count_scale = " << c.count_scale << '\n'
      << "count_scale_norm = " << c.count_scale_norm << '\n'
      << "target_spacing_mm = " << c.target_spacing_mm << '\n'
      << "fov_mm = " << c.fov_mm << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

ScannerConfig read_scanner_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read scanner record: " + path.string());
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  auto get = [&](const char* k) {
    const auto it = kv.find(k);
    if (it == kv.end()) throw IoError("scanner record " + path.string() + " lacks '" + k + "'");
    return it->second;
  };
  auto num = [&](const char* k) {
    try {
      return parse_number<double>(k, get(k));
    } catch (const ConfigError& e) {
      throw IoError(e.what());
    }
  };
  ScannerConfig c;
  c.psf_fwhm_mm = num("psf_fwhm_mm");
  c.n_angles_full = static_cast<std::uint32_t>(num("n_angles_full"));
  c.n_radial_full = static_cast<std::uint32_t>(num("n_radial_full"));
  c.angular_rebin = static_cast<std::uint32_t>(num("angular_rebin"));
  c.radial_rebin = static_cast<std::uint32_t>(num("radial_rebin"));
  c.dose_fraction = num("dose_fraction");
  c.background_per_bin = num("background_per_bin");
  c.background_fraction = num("background_fraction");
  c.count_scale = num("count_scale");
  c.count_scale_norm = num("count_scale_norm");
  c.target_spacing_mm = num("target_spacing_mm");
  c.fov_mm = num("fov_mm");
  return c;
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

void parallel_for(std::size_t n, std::uint32_t workers, const std::function<void(std::size_t)>& fn) {
  std::vector<std::exception_ptr> errors(n);
  const std::size_t n_threads = std::min<std::size_t>(std::max<std::uint32_t>(workers, 1), n);
  if (n_threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(work);
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

namespace {

std::vector<ManifestEntry> manifest_split(const RunPaths& paths, std::string_view split) {
  if (!std::filesystem::exists(paths.manifest())) {
    throw IoError("manifest not found: " + paths.manifest().string() + " (run `phantom` first)");
  }
  std::vector<ManifestEntry> out;
  for (auto& e : read_manifest(paths.manifest())) {
    if (e.split == split) out.push_back(std::move(e));
  }
  return out;
}

std::uint64_t degrade_seed(const ManifestEntry& e, ScannerPreset p) {
  return Rng(e.seed).derive(p == ScannerPreset::standard ? 1 : 2).next_u64();
}

std::uint64_t sampler_seed_for(const ManifestEntry& e, std::uint64_t sampler_seed) {
  return Rng::mix(e.seed ^ Rng::mix(sampler_seed));
}

void require_file(const std::filesystem::path& p, const char* hint) {
  if (!std::filesystem::exists(p)) throw IoError("missing input " + p.string() + " (" + hint + ")");
}

std::mutex log_mutex;

void log_line(std::ostream& log, const std::string& s) {
  std::lock_guard lock(log_mutex);
  log << s << '\n' << std::flush;
}

}  // namespace

std::filesystem::path cmd_phantom(const RunConfig& cfg, std::ostream& log) {
  const RunPaths paths{cfg.output_dir};
  const auto manifest = generate_dataset(cfg.phantom, cfg.n_cases, cfg.split, paths.manifest().parent_path());
  const SplitCounts n = split_counts(cfg.n_cases, cfg.split);
  log_line(log, "phantoms: " + std::to_string(n.train) + "/" + std::to_string(n.val) + "/" + std::to_string(n.test) +
                    " (train/val/test)");
  log_line(log, manifest.string());
  return manifest;
}

void cmd_degrade(const RunConfig& cfg, ScannerPreset setting, std::ostream& log) {
  const RunPaths paths{cfg.output_dir};
  const auto cases = manifest_split(paths, "test");
  const auto root = paths.manifest().parent_path();
  const ScannerConfig scanner = preset_scanner(setting, cfg.scanner);
  parallel_for(cases.size(), cfg.workers, [&](std::size_t i) {
    const auto& e = cases[i];
    const GridImage z = read_grid(root / e.activity);
    const Acquisition acq = degrade(z, scanner, degrade_seed(e, setting));
    const auto dir = paths.degraded(setting, e.case_id);
    const auto geom = full_geometry(acq.calibrated, static_cast<std::uint32_t>(z.width()), z.spacing_mm());
    const double radial_mm = geom.radial_spacing_mm * acq.calibrated.radial_rebin;
    write_sinogram(dir / "sinogram.psrg", acq.sampled, radial_mm);
    write_grid(dir / "lr_reference.psrg", acq.lr_reference);
    write_pgm16(dir / "lr_reference.pgm", acq.lr_reference);
    write_scanner_config(dir / "scanner.cfg", acq.calibrated);
    log_line(log, "degrade " + std::string(setting_tag(setting)) + " " + e.case_id + ": " +
                      std::to_string(acq.sampled.n_angles()) + "x" + std::to_string(acq.sampled.n_radial()));
  });
}

void cmd_train(const RunConfig& cfg, std::ostream& log) {
  const RunPaths paths{cfg.output_dir};
  if (!std::filesystem::exists(paths.manifest())) {
    throw IoError("manifest not found: " + paths.manifest().string() + " (run `phantom` first)");
  }
  const auto cases = load_cases(paths.manifest(), "train");
  if (cases.empty()) throw ConfigError("train: the training split is empty");
  std::vector<Conditioning> modes{Conditioning::attention};
  if (cfg.train_concat) modes.push_back(Conditioning::concat);
  for (const Conditioning mode : modes) {
    TinyArch arch = cfg.arch;
    arch.conditioning = mode;
    const std::string name(conditioning_name(mode));
    log_line(log, "train " + name + ": " + std::to_string(parameter_count(arch)) + " parameters, " +
                      std::to_string(cases.size()) + " cases, " + std::to_string(cfg.training.steps) + " steps");
    try {
      const TrainingResult res = train_tiny_denoiser(cases, arch, cfg.training);
      save_weights(paths.weights(mode), res.weights);
      write_loss_log(paths.loss_log(mode), res.loss_log);
      if (!res.loss_log.empty()) {
        std::ostringstream os;
        os << "train " << name << ": first loss " << res.loss_log.front().second << ", final loss "
           << res.loss_log.back().second;
        log_line(log, os.str());
      }
    } catch (const TrainingFailure& f) {
      auto last_good = paths.weights(mode);
      last_good.replace_extension(".last_good.psdw");
      save_weights(last_good, f.last_good());
      log_line(log, std::string("train ") + name + " diverged; last good weights in " + last_good.string());
      throw;
    }
  }
}

void cmd_reconstruct(const RunConfig& cfg, ScannerPreset setting, std::string_view variant_name, std::ostream& log) {
  const RunPaths paths{cfg.output_dir};
  const AblationVariant variant = ablation_variant(variant_name, cfg.ppcr);
  const Conditioning mode = variant.concat_conditioning ? Conditioning::concat : Conditioning::attention;
  require_file(paths.weights(mode), "run `train` first");
  const TinyDenoiser denoiser(load_weights(paths.weights(mode)));
  const auto cases = manifest_split(paths, "test");
  const auto root = paths.manifest().parent_path();
  for (const auto& e : cases) require_file(paths.degraded(setting, e.case_id) / "sinogram.psrg", "run `degrade` first");

  parallel_for(cases.size(), cfg.workers, [&](std::size_t i) {
    const auto& e = cases[i];
    const auto in_dir = paths.degraded(setting, e.case_id);
    const ScannerConfig scanner = read_scanner_config(in_dir / "scanner.cfg");
    const Sinogram y = read_sinogram(in_dir / "sinogram.psrg", SinogramKind::sampled_counts);
    const GridImage anatomy = read_grid(root / e.anatomy);
    const auto out_dir = paths.recon(setting, variant.name, e.case_id);
    try {
      const PpcrResult res = ppcr_reconstruct(y, anatomy, denoiser, denoiser.schedule(), scanner, variant.ppcr,
                                              denoiser.transform(), sampler_seed_for(e, cfg.sampler_seed));
      write_grid(out_dir / "z_hr.psrg", res.z_hr);
      write_pgm16(out_dir / "z_hr.pgm", res.z_hr);
      write_trace(out_dir / "trace.csv", res.state.trace);
      std::ostringstream os;
      os << "reconstruct " << setting_tag(setting) << " " << variant.name << " " << e.case_id
         << ": final nll " << std::setprecision(10) << res.state.trace.back().nll_after;
      log_line(log, os.str());
    } catch (const SamplerFailure& f) {
      write_trace(out_dir / "trace.csv", f.trace());
      throw;
    }
  });
}

std::vector<std::vector<SummaryRow>> cmd_eval(const RunConfig& cfg, std::vector<ScannerPreset> settings,
                                              std::ostream& log) {
  const RunPaths paths{cfg.output_dir};
  const auto cases = manifest_split(paths, "test");
  const auto root = paths.manifest().parent_path();
  if (settings.empty()) {
    for (ScannerPreset p : {ScannerPreset::standard, ScannerPreset::ood}) {
      if (std::filesystem::exists(paths.root / "degraded" / std::string(setting_tag(p)))) settings.push_back(p);
    }
    if (settings.empty()) throw IoError("eval: no degraded data found under " + (paths.root / "degraded").string());
  }

  std::vector<std::vector<SummaryRow>> summaries;
  for (const ScannerPreset setting : settings) {
    std::vector<std::string> methods{"lr_mlem"};
    for (const auto& v : cfg.ablate_variants) {
      if (std::filesystem::exists(paths.root / "recon" / std::string(setting_tag(setting)) / v)) methods.push_back(v);
    }
    std::vector<std::vector<MetricRow>> rows(cases.size());
    std::vector<std::vector<LesionRow>> lesion_rows(cases.size());
    parallel_for(cases.size(), cfg.workers, [&](std::size_t i) {
      const auto& e = cases[i];
      const auto ref_path = root / e.activity;
      require_file(ref_path, "phantom activity");
      const GridImage ref = read_grid(ref_path);
      std::vector<LesionMask> masks;
      for (const auto& m : e.masks) masks.push_back(read_mask(root / m));
      for (const auto& method : methods) {
        GridImage est;
        if (method == "lr_mlem") {
          const auto p = paths.degraded(setting, e.case_id) / "lr_reference.psrg";
          require_file(p, "run `degrade` first");
          est = resample_bilinear(read_grid(p), ref.width(), ref.spacing_mm());
        } else {
          const auto p = paths.recon(setting, method, e.case_id) / "z_hr.psrg";
          require_file(p, "run `reconstruct` first");
          est = read_grid(p);
        }
        const MetricReport r = evaluate(ref, est, masks);
        rows[i].push_back({e.case_id, method, r.psnr_db, r.ssim, r.nmse});
        for (const auto& l : r.lesions) lesion_rows[i].push_back({e.case_id, l.label, method, l.stats});
      }
    });
    std::vector<MetricRow> flat;
    std::vector<LesionRow> flat_lesions;
    for (auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
    for (auto& r : lesion_rows) flat_lesions.insert(flat_lesions.end(), r.begin(), r.end());
    // Method order in the summary follows `methods`.
    std::vector<MetricRow> ordered;
    for (const auto& m : methods) {
      for (const auto& r : flat) {
        if (r.method == m) ordered.push_back(r);
      }
    }
    const auto summary = summarize(ordered);
    const auto dir = paths.eval_dir(setting);
    write_metrics_csv(dir / "metrics.csv", flat);
    write_lesion_csv(dir / "lesions.csv", flat_lesions);
    const std::string table = format_summary_table(summary);
    {
      std::ofstream out(dir / "summary.txt", std::ios::trunc);
      if (!out) throw IoError("cannot write " + (dir / "summary.txt").string());
      out << "setting: " << preset_name(setting) << ", " << cases.size() << " test cases\n" << table;
    }
    log_line(log, "setting: " + std::string(preset_name(setting)) + ", " + std::to_string(cases.size()) +
                      " test cases\n" + table);
    summaries.push_back(summary);
  }
  return summaries;
}

void cmd_ablate(const RunConfig& cfg, std::vector<ScannerPreset> settings, std::ostream& log) {
  if (settings.empty()) settings = {ScannerPreset::standard, ScannerPreset::ood};
  for (const ScannerPreset s : settings) {
    for (const auto& v : cfg.ablate_variants) cmd_reconstruct(cfg, s, v, log);
  }
  (void)cmd_eval(cfg, settings, log);
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const GeometryError*>(&e) ||
      dynamic_cast<const DomainError*>(&e) || dynamic_cast<const GenerationError*>(&e)) {
    return 2;
  }
  if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const std::filesystem::filesystem_error*>(&e)) return 3;
  if (dynamic_cast<const NumericalError*>(&e) || dynamic_cast<const TrainingFailure*>(&e) ||
      dynamic_cast<const MetricError*>(&e)) {
    return 4;
  }
  return 1;
}

}  // namespace petsr
