// Acceptance suite: one PASS/FAIL line per criterion.
//
//   petsr_acceptance            run every criterion
//   petsr_acceptance 1 3 8      run a subset (6, 7, 9 and 5 share one pipeline run)

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "petsr/pipeline.hpp"
#include "petsr/psrg_io.hpp"
#include "test_util.hpp"

using namespace petsr;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::map<int, Verdict> g_results;

void report(int id, bool pass, const std::string& detail) {
  g_results[id] = {pass, detail};
  std::cout << "criterion " << id << ": " << (pass ? "PASS" : "FAIL") << "  " << detail << std::endl;
}

std::string fmt(double v, int prec = 3) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

std::string fixed(double v, int prec = 2) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

ScannerConfig scanner_for(std::uint32_t n, double spacing) {
  ScannerConfig c = preset_scanner("standard");
  c.fov_mm = n * spacing;
  c.n_angles_full = 2 * n;
  c.n_radial_full = 2 * n;
  return c;
}

// ---------------------------------------------------------------------------
// 1. Composite adjoint
// ---------------------------------------------------------------------------

void criterion_adjoint() {
  const auto t0 = Clock::now();
  const ScannerConfig cal = calibrate_acquisition(testutil::random_image(32, 4.0, 99), scanner_for(32, 4.0));
  const auto [na, nr] = measured_shape(cal);
  double worst = 0.0;
  for (std::uint64_t k = 0; k < 20; ++k) {
    const GridImage x = testutil::random_image(32, 4.0, 1000 + k);
    const Sinogram y = testutil::random_sinogram(na, nr, 2000 + k);
    for (PsfMode mode : {PsfMode::identity, PsfMode::full}) {
      // Linear part only: subtract the background.
      Sinogram ax = forward_expected(x, cal, mode);
      for (double& v : ax.values()) v -= cal.background_per_bin;
      const GridImage aty = adjoint_apply(y, cal, mode, x);
      const double lhs = dot(ax.values(), y.values());
      const double rhs = dot(x.values(), aty.values());
      worst = std::max(worst, std::abs(lhs - rhs) / std::max(std::abs(lhs), std::abs(rhs)));
    }
  }
  const double secs = seconds_since(t0);
  report(1, worst <= 1e-5 && secs < 10.0,
         "worst relative adjoint error " + fmt(worst) + " (<= 1e-5), " + fixed(secs) + " s (< 10 s)");
}

// ---------------------------------------------------------------------------
// 2. Likelihood gradient
// ---------------------------------------------------------------------------

void criterion_gradient() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  for (std::uint64_t inst = 0; inst < 5; ++inst) {
    const GridImage truth = testutil::random_image(16, 4.0, 300 + inst, 0.2, 1.5);
    const ScannerConfig cal = calibrate_acquisition(truth, scanner_for(16, 4.0));
    const Sinogram lam = forward_expected(truth, cal, PsfMode::full);
    Rng rng(400 + inst);
    Sinogram y(lam.n_angles(), lam.n_radial(), SinogramKind::sampled_counts);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = sample_poisson(lam[i], rng);
    const GridImage z = testutil::random_image(16, 4.0, 500 + inst, 0.2, 1.5);
    const PsfMode mode = inst % 2 ? PsfMode::identity : PsfMode::full;
    const LikelihoodEval e = poisson_nll_grad(z, y, cal, mode);
    for (int k = 0; k < 20; ++k) {
      const auto j = static_cast<std::size_t>(rng.next_u64() % z.size());
      const double h = 1e-4;
      GridImage zp = z, zm = z;
      zp[j] += h;
      zm[j] -= h;
      const double fd = (poisson_nll(zp, y, cal, mode) - poisson_nll(zm, y, cal, mode)) / (2 * h);
      worst = std::max(worst, std::abs(fd - e.grad[j]) / std::max(std::abs(fd), 1e-12));
    }
  }
  const double secs = seconds_since(t0);
  report(2, worst <= 1e-3 && secs < 30.0,
         "worst relative gradient error " + fmt(worst) + " over 100 coordinates (<= 1e-3), " + fixed(secs) +
             " s (< 30 s)");
}

// ---------------------------------------------------------------------------
// 3. Exactness checks
// ---------------------------------------------------------------------------

void criterion_exactness() {
  const auto t0 = Clock::now();

  // Transform round trip over several decades of activity.
  std::vector<GridImage> phantoms;
  for (std::uint64_t s = 0; s < 3; ++s) {
    PhantomSpec spec;
    spec.seed = 700 + s;
    phantoms.push_back(generate_phantom(spec).activity);
  }
  const TransformParams tp = calibrate_transform(phantoms);
  double rt_worst = 0.0;
  GridImage z = testutil::random_image(64, 2.0, 1, -100.0, 1000.0);
  for (std::size_t i = 0; i < 64; ++i) z[i] = std::pow(10.0, -6.0 + 0.15 * static_cast<double>(i));
  for (const GridImage* img : {&z, &phantoms[0]}) {
    const GridImage back = from_model_space(to_model_space(*img, tp), tp);
    for (std::size_t i = 0; i < img->size(); ++i) {
      rt_worst = std::max(rt_worst, std::abs(back[i] - (*img)[i]) / (1.0 + std::abs((*img)[i])));
    }
  }

  // Tweedie inversion with the true noise.
  const NoiseSchedule sched = make_schedule();
  const GridImage x0 = to_model_space(phantoms[1], tp);
  GridImage noise = GridImage::like(x0);
  Rng rng(5);
  for (double& v : noise.values()) v = rng.normal();
  double tw_worst = 0.0;
  for (std::uint32_t t = 1; t <= sched.steps(); t += 37) {
    const GridImage rec = tweedie_estimate(add_noise(x0, t, sched, noise), t, noise, sched);
    for (std::size_t i = 0; i < x0.size(); ++i) tw_worst = std::max(tw_worst, std::abs(rec[i] - x0[i]));
  }

  // Gaussian prior: x0 ~ N(m, tau^2), x_t | x0 ~ N(sqrt(ab) x0, 1 - ab), so
  // E[x0 | x_t] = m + tau^2 sqrt(ab) (x_t - sqrt(ab) m) / (ab tau^2 + 1 - ab).
  const double tau = 0.35;
  const GridImage mean = testutil::random_image(16, 1.0, 6, -0.5, 0.8);
  const GaussianAnalyticDenoiser prior(mean, tau, sched);
  const GridImage xt = testutil::random_image(16, 1.0, 7, -3.0, 3.0);
  double ga_worst = 0.0;
  for (std::uint32_t t : {1u, 50u, 300u, 700u, 1000u}) {
    const double ab = sched.alpha_bar(t);
    const GridImage est = tweedie_estimate(xt, t, prior.predict(xt, t, xt), sched);
    for (std::size_t i = 0; i < xt.size(); ++i) {
      const double closed =
          mean[i] + tau * tau * std::sqrt(ab) * (xt[i] - std::sqrt(ab) * mean[i]) / (ab * tau * tau + 1.0 - ab);
      ga_worst = std::max(ga_worst, std::abs(est[i] - closed));
    }
  }

  const double secs = seconds_since(t0);
  const bool pass = rt_worst <= 1e-9 && tw_worst <= 1e-12 && ga_worst <= 1e-6 && secs < 5.0;
  report(3, pass,
         "round trip " + fmt(rt_worst) + " (<= 1e-9 (1+|z|)), tweedie " + fmt(tw_worst) + " (<= 1e-12), gaussian " +
             fmt(ga_worst) + " (<= 1e-6), " + fixed(secs) + " s (< 5 s)");
}

// ---------------------------------------------------------------------------
// 4. Pure-prior sampler against a scalar recursion
// ---------------------------------------------------------------------------

void criterion_pure_prior() {
  const auto t0 = Clock::now();
  const NoiseSchedule sched = make_schedule();
  GridImage mean(32, 32, 4.0, Units::model_space);
  for (std::size_t r = 0; r < 32; ++r) {
    for (std::size_t c = 0; c < 32; ++c) mean(r, c) = 0.2 + 0.6 * std::exp(-((r - 16.0) * (r - 16.0) + (c - 12.0) * (c - 12.0)) / 60.0);
  }
  const double tau = 0.15;
  const GaussianAnalyticDenoiser prior(mean, tau, sched);
  const TransformParams tp{1.0, 1.8};
  const GridImage truth = from_model_space(mean, tp);
  const ScannerConfig cal = calibrate_acquisition(truth, scanner_for(32, 4.0));
  const Sinogram lam = forward_expected(truth, cal, PsfMode::full);
  Rng prng(3);
  Sinogram y(lam.n_angles(), lam.n_radial(), SinogramKind::sampled_counts);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = sample_poisson(lam[i], prng);

  const PpcrConfig cfg = ablation_variant("no_dc", PpcrConfig{}).ppcr;
  const PpcrResult res = ppcr_reconstruct(y, GridImage(32, 32, 4.0, Units::anatomy), prior, sched, cal, cfg, tp, 21);

  // Every pixel evolves independently under a Gaussian prior without data consistency.
  Rng rng(21);
  std::vector<double> x(mean.size());
  for (double& v : x) v = rng.normal();
  const auto ts = ddim_timesteps(cfg.n_ddim_steps, sched.steps());
  double worst = 0.0;
  for (std::size_t i = 0; i < mean.size(); ++i) {
    double xi = x[i], z = 0.0;
    for (std::size_t s = 0; s < ts.size(); ++s) {
      const double ab = sched.alpha_bar(ts[s]);
      const double ab_next = s + 1 < ts.size() ? sched.alpha_bar(ts[s + 1]) : 1.0;
      const double post = mean[i] + tau * tau * std::sqrt(ab) * (xi - std::sqrt(ab) * mean[i]) / (ab * tau * tau + 1 - ab);
      const double zt = std::max(0.0, tp.s_scale * std::sinh(tp.kappa * std::clamp(post, -2.0, 2.0)));
      z = s == 0 ? zt : (1.0 - cfg.alpha_warmstart) * zt + cfg.alpha_warmstart * z;
      const double x0 = std::asinh(z / tp.s_scale) / tp.kappa;
      xi = std::sqrt(ab_next) * x0 + std::sqrt(1.0 - ab_next) * (xi - std::sqrt(ab) * x0) / std::sqrt(1.0 - ab);
    }
    worst = std::max(worst, std::abs(res.z_hr[i] - z));
  }
  const double secs = seconds_since(t0);
  report(4, worst <= 1e-4 && secs < 10.0,
         "max deviation from the scalar recursion " + fmt(worst) + " (<= 1e-4), " + fixed(secs) + " s (< 10 s)");
}

// ---------------------------------------------------------------------------
// 8. Reproducible ablate
// ---------------------------------------------------------------------------

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(PETSR_CLI_PATH) + " " + args + " >> \"" + log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) files[fs::relative(e.path(), root).generic_string()] = testutil::slurp(e.path());
  }
  return files;
}

void criterion_reproducible(const fs::path& work) {
  const auto t0 = Clock::now();
  const std::string config =
      "output_dir = out\n"
      "seed = 100\n"
      "n_cases = 8\n"
      "grid_size = 32\n"
      "spacing_mm = 4\n"
      "lesion_radius_min_mm = 5\n"
      "lesion_radius_max_mm = 8\n"
      "split_train = 0.5\n"
      "split_val = 0.25\n"
      "split_test = 0.25\n"
      "n_angles_full = 48\n"
      "n_radial_full = 64\n"
      "fov_mm = 136\n"
      "n_ddim_steps = 10\n"
      "psf_on_from_step = 7\n"
      "train_iterations = 20\n"
      "batch_size = 2\n"
      "crop_size = 16\n"
      "log_every = 5\n"
      "workers = 2\n";
  std::vector<std::map<std::string, std::string>> trees;
  bool ok = true;
  for (const char* name : {"run_a", "run_b"}) {
    const fs::path dir = work / "reproducible" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    testutil::spit(dir / "run.cfg", config);
    const std::string cfg = "--config \"" + (dir / "run.cfg").string() + "\"";
    const fs::path log = dir / "log.txt";
    for (const std::string cmd : {"phantom", "degrade --setting standard", "degrade --setting ood", "train", "ablate"}) {
      ok = ok && run_cli(cmd + " " + cfg, log) == 0;
    }
    trees.push_back(snapshot(dir / "out"));
  }
  std::size_t differing = 0;
  for (const auto& [path, bytes] : trees[0]) {
    const auto it = trees[1].find(path);
    differing += it == trees[1].end() || it->second != bytes;
  }
  differing += trees[1].size() > trees[0].size() ? trees[1].size() - trees[0].size() : 0;
  const double secs = seconds_since(t0);
  report(8, ok && differing == 0 && !trees[0].empty(),
         std::to_string(trees[0].size()) + " files, " + std::to_string(differing) +
             " differing between two ablate runs" + (ok ? "" : ", a command failed") + ", " +
             fixed(secs) + " s");
}

// ---------------------------------------------------------------------------
// 6, 7, 9, 5. Reconstruction quality on the synthetic protocol
// ---------------------------------------------------------------------------

constexpr std::uint32_t kTrainIterations = 10000;

RunConfig quality_config(const fs::path& work) {
  RunConfig cfg;
  cfg.output_dir = work / "quality";
  cfg.phantom.seed = 2024;
  cfg.n_cases = 50;
  cfg.split = {0.6, 0.2, 0.2};
  cfg.training.steps = kTrainIterations;
  cfg.training.log_every = 500;
  cfg.train_concat = false;
  cfg.ablate_variants = {"full", "no_ppcr", "no_dc"};
  return cfg;
}

struct MethodMeans {
  double psnr = 0.0;
  double ssim = 0.0;
  std::size_t n = 0;
};

std::map<std::string, MethodMeans> method_means(const fs::path& metrics_csv) {
  std::map<std::string, MethodMeans> out;
  for (const auto& r : read_metrics_csv(metrics_csv)) {
    auto& m = out[r.method];
    m.psnr += r.psnr;
    m.ssim += r.ssim;
    ++m.n;
  }
  for (auto& [k, m] : out) {
    m.psnr /= static_cast<double>(m.n);
    m.ssim /= static_cast<double>(m.n);
  }
  return out;
}

class Quality {
 public:
  explicit Quality(const fs::path& work) : cfg_(quality_config(work)) {}

  void criterion_improvement() {
    const auto t0 = Clock::now();
    std::ostringstream log;
    fs::remove_all(cfg_.output_dir);
    cmd_phantom(cfg_, log);
    cmd_degrade(cfg_, ScannerPreset::standard, log);
    cmd_degrade(cfg_, ScannerPreset::ood, log);
    cmd_train(cfg_, log);
    for (ScannerPreset p : {ScannerPreset::standard, ScannerPreset::ood}) cmd_reconstruct(cfg_, p, "full", log);
    cmd_eval(cfg_, {ScannerPreset::standard, ScannerPreset::ood}, log);
    setup_secs_ = seconds_since(t0);
    ran_ = true;

    const RunPaths paths{cfg_.output_dir};
    const auto std_m = method_means(paths.eval_dir(ScannerPreset::standard) / "metrics.csv");
    const auto ood_m = method_means(paths.eval_dir(ScannerPreset::ood) / "metrics.csv");
    const MethodMeans& sf = std_m.at("full");
    const MethodMeans& sl = std_m.at("lr_mlem");
    const MethodMeans& of = ood_m.at("full");
    const MethodMeans& ol = ood_m.at("lr_mlem");
    const bool pass = sf.n >= 10 && sf.psnr >= sl.psnr + 2.0 && sf.ssim > sl.ssim && of.psnr > ol.psnr &&
                      of.ssim > ol.ssim && setup_secs_ < 30 * 60.0;
    report(6, pass,
           "standard (" + std::to_string(sf.n) + " cases): PSNR " + fixed(sf.psnr) + " vs LR " + fixed(sl.psnr) +
               " dB (need +2), SSIM " + fixed(sf.ssim, 4) + " vs " + fixed(sl.ssim, 4) + "; ood: PSNR " +
               fixed(of.psnr) + " vs " + fixed(ol.psnr) + ", SSIM " + fixed(of.ssim, 4) + " vs " + fixed(ol.ssim, 4) +
               "; " + fixed(setup_secs_ / 60.0, 1) + " min (< 30 min)");
  }

  void criterion_ablation_order() {
    if (!ran_) criterion_improvement();
    const auto t0 = Clock::now();
    std::ostringstream log;
    for (const char* v : {"no_ppcr", "no_dc"}) cmd_reconstruct(cfg_, ScannerPreset::standard, v, log);
    cmd_eval(cfg_, {ScannerPreset::standard}, log);
    const double secs = setup_secs_ + seconds_since(t0);
    const auto m = method_means(RunPaths{cfg_.output_dir}.eval_dir(ScannerPreset::standard) / "metrics.csv");
    const double full = m.at("full").psnr, no_ppcr = m.at("no_ppcr").psnr, no_dc = m.at("no_dc").psnr;
    const bool pass = full >= no_ppcr && no_ppcr >= no_dc && full - no_dc >= 0.5 && secs < 90 * 60.0;
    report(7, pass,
           "mean PSNR full " + fixed(full) + " >= no_ppcr " + fixed(no_ppcr) + " >= no_dc " + fixed(no_dc) +
               ", full - no_dc = " + fixed(full - no_dc) + " dB (>= 0.5); " + fixed(secs / 60.0, 1) +
               " min (< 90 min)");
  }

  void criterion_trace_schedule() {
    if (!ran_) criterion_improvement();
    const RunPaths paths{cfg_.output_dir};
    std::size_t checked = 0, bad = 0;
    for (const auto& e : read_manifest(paths.manifest())) {
      if (e.split != "test") continue;
      std::ifstream in(paths.recon(ScannerPreset::standard, "full", e.case_id) / "trace.csv");
      std::string line;
      std::getline(in, line);
      std::uint32_t expect_step = 1;
      while (std::getline(in, line)) {
        std::vector<std::string> f;
        std::stringstream ss(line);
        for (std::string tok; std::getline(ss, tok, ',');) f.push_back(tok);
        const std::uint32_t step = static_cast<std::uint32_t>(std::stoul(f.at(0)));
        const long m_t = std::stol(f.at(3));
        const long m_ref = std::lround(2.0 + 18.0 * (step - 1) / 49.0);
        const std::string psf_ref = step <= 35 ? "identity" : "full";
        bad += step != expect_step || m_t != m_ref || f.at(2) != psf_ref;
        bad += (step == 1 && m_t != 2) || (step == 50 && m_t != 20);
        ++expect_step;
      }
      bad += expect_step != 51;
      ++checked;
    }
    report(9, checked >= 10 && bad == 0,
           std::to_string(checked) + " traces, " + std::to_string(bad) +
               " deviations from the 2->20 ramp and the step 35/36 PSF switch");
  }

  void criterion_monotone_dc() {
    if (!ran_) criterion_improvement();
    const auto t0 = Clock::now();
    const RunPaths paths{cfg_.output_dir};
    const TinyDenoiser denoiser(load_weights(paths.weights(Conditioning::attention)));
    PpcrConfig ppcr = cfg_.ppcr;
    ppcr.mu_nesterov = 0.0;
    ppcr.eta_dc = 0.05;
    std::size_t rows = 0, violations = 0, cases = 0;
    const fs::path root = paths.manifest().parent_path();
    for (const auto& e : read_manifest(paths.manifest())) {
      if (e.split != "test" || cases == 5) continue;
      const fs::path dir = paths.degraded(ScannerPreset::standard, e.case_id);
      const PpcrResult r = ppcr_reconstruct(read_sinogram(dir / "sinogram.psrg", SinogramKind::sampled_counts),
                                            read_grid(root / e.anatomy), denoiser, denoiser.schedule(),
                                            read_scanner_config(dir / "scanner.cfg"), ppcr, denoiser.transform(), 1);
      for (const auto& row : r.state.trace) {
        ++rows;
        violations += !(row.nll_after <= row.nll_before);
      }
      ++cases;
    }
    const double secs = seconds_since(t0);
    report(5, cases == 5 && violations == 0 && secs < 300.0,
           std::to_string(violations) + " of " + std::to_string(rows) + " trace rows with nll_after > nll_before on " +
               std::to_string(cases) + " phantoms, " + fixed(secs) + " s (< 300 s)");
  }

 private:
  RunConfig cfg_;
  bool ran_ = false;
  double setup_secs_ = 0.0;
};

}  // namespace

int main(int argc, char** argv) {
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
  auto want = [&](int id) { return wanted.empty() || wanted.count(id) > 0; };

  const fs::path work = fs::current_path() / "acceptance_work";
  fs::create_directories(work);
  Quality quality(work);

  const std::vector<std::pair<int, std::function<void()>>> plan{
      {1, criterion_adjoint},
      {2, criterion_gradient},
      {3, criterion_exactness},
      {4, criterion_pure_prior},
      {8, [&] { criterion_reproducible(work); }},
      {6, [&] { quality.criterion_improvement(); }},
      {9, [&] { quality.criterion_trace_schedule(); }},
      {7, [&] { quality.criterion_ablation_order(); }},
      {5, [&] { quality.criterion_monotone_dc(); }},
  };
  for (const auto& [id, fn] : plan) {
    if (!want(id)) continue;
    try {
      fn();
    } catch (const std::exception& e) {
      report(id, false, std::string("threw: ") + e.what());
    }
  }

  std::cout << "\nsummary\n";
  int failed = 0;
  for (const auto& [id, v] : g_results) {
    std::cout << "criterion " << id << ": " << (v.pass ? "PASS" : "FAIL") << '\n';
    failed += !v.pass;
  }
  return failed == 0 ? 0 : 1;
}
