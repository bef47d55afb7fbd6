#include "petsr/ppcr_sampler.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "petsr/rng.hpp"

namespace petsr {

std::vector<std::uint32_t> ddim_timesteps(std::uint32_t n_steps, std::uint32_t T) {
  if (n_steps == 0 || n_steps > T) throw ConfigError("ddim_timesteps: need 1 <= n_steps <= T");
  std::vector<std::uint32_t> ts(n_steps);
  for (std::uint32_t i = 0; i < n_steps; ++i) {
    ts[i] = T - static_cast<std::uint32_t>((static_cast<std::uint64_t>(i) * T) / n_steps);
  }
  return ts;
}

PsfMode psf_mode_for_step(std::uint32_t step, const PpcrConfig& cfg) {
  if (step < 1 || step > cfg.n_ddim_steps) throw ConfigError("psf_mode_for_step: step out of range");
  return step < cfg.psf_on_from_step ? PsfMode::identity : PsfMode::full;
}

std::uint32_t inner_iters_for_step(std::uint32_t step, const PpcrConfig& cfg) {
  if (step < 1 || step > cfg.n_ddim_steps) throw ConfigError("inner_iters_for_step: step out of range");
  if (cfg.n_ddim_steps == 1) return cfg.m_end;
  const double f = static_cast<double>(step - 1) / static_cast<double>(cfg.n_ddim_steps - 1);
  const double m = static_cast<double>(cfg.m_start) + (static_cast<double>(cfg.m_end) - cfg.m_start) * f;
  return static_cast<std::uint32_t>(std::lround(m));
}

DcResult dc_refine(const GridImage& z_init, const Sinogram& y, const ScannerConfig& cfg, PsfMode mode, std::uint32_t m,
                   double eta, double mu, const GridImage* momentum_in, bool nonneg_projection) {
  DcResult out;
  out.z = z_init;
  out.momentum = momentum_in ? *momentum_in : GridImage::like(z_init);
  if (!out.momentum.same_grid(z_init)) throw GeometryError("dc_refine: momentum grid mismatch");

  const bool momentum_zero = std::all_of(out.momentum.values().begin(), out.momentum.values().end(),
                                         [](double v) { return v == 0.0; });
  bool have_initial = false;
  if (m == 0 || (mu != 0.0 && !momentum_zero)) {
    out.nll_initial = poisson_nll(z_init, y, cfg, mode);
    have_initial = true;
  }

  GridImage look = GridImage::like(z_init);
  for (std::uint32_t k = 0; k < m; ++k) {
    for (std::size_t i = 0; i < look.size(); ++i) {
      const double v = out.z[i] + mu * out.momentum[i];
      look[i] = nonneg_projection && v < 0.0 ? 0.0 : v;
    }
    const LikelihoodEval ev = poisson_nll_grad(look, y, cfg, mode);
    if (!std::isfinite(ev.nll)) throw NumericalError("dc_refine: non-finite NLL at inner step " + std::to_string(k));
    if (!have_initial) {
      // The first look-ahead coincides with z_init here.
      out.nll_initial = ev.nll;
      have_initial = true;
    }
    for (std::size_t i = 0; i < look.size(); ++i) {
      out.momentum[i] = mu * out.momentum[i] - eta * ev.grad[i];
      double v = out.z[i] + out.momentum[i];
      if (nonneg_projection && v < 0.0) v = 0.0;
      out.z[i] = v;
    }
  }
  out.nll_final = m == 0 ? out.nll_initial : poisson_nll(out.z, y, cfg, mode);
  if (!std::isfinite(out.nll_final)) throw NumericalError("dc_refine: non-finite NLL after " + std::to_string(m) + " steps");
  return out;
}

PpcrResult ppcr_reconstruct(const Sinogram& y, const GridImage& anatomy, const Denoiser& denoiser,
                            const NoiseSchedule& sched, const ScannerConfig& scanner, const PpcrConfig& ppcr,
                            const TransformParams& transform, std::uint64_t seed) {
  require_valid(ppcr);
  if (y.kind() != SinogramKind::sampled_counts) throw DomainError("ppcr_reconstruct: y must be sampled counts");
  if (scanner.count_scale_norm <= 0.0) throw ConfigError("ppcr_reconstruct: scanner config is not calibrated");
  const auto [na, nr] = measured_shape(scanner);
  if (y.n_angles() != na || y.n_radial() != nr) throw GeometryError("ppcr_reconstruct: sinogram shape mismatch");

  const std::vector<std::uint32_t> ts = ddim_timesteps(ppcr.n_ddim_steps, sched.steps());

  PpcrResult result;
  SamplerState& st = result.state;
  st.x_t = GridImage::like(anatomy);
  st.x_t.set_units(Units::model_space);
  Rng rng(seed);
  for (double& v : st.x_t.values()) v = rng.normal();

  for (std::uint32_t step = 1; step <= ppcr.n_ddim_steps; ++step) {
    const std::uint32_t t = ts[step - 1];
    const std::uint32_t t_prev = step < ppcr.n_ddim_steps ? ts[step] : 0;
    TraceRow row;
    row.step = step;
    row.t_train = t;
    row.psf_mode = psf_mode_for_step(step, ppcr);
    row.m_t = inner_iters_for_step(step, ppcr);
    row.eta = ppcr.eta_dc;
    try {
      const GridImage eps = denoiser.predict(st.x_t, t, anatomy);
      GridImage x0 = tweedie_estimate(st.x_t, t, eps, sched);
      for (double& v : x0.values()) v = std::clamp(v, -kModelSpaceClip, kModelSpaceClip);
      GridImage z0 = from_model_space(x0, transform, true);
      if (st.z_prev_refined) {
        const double a = ppcr.alpha_warmstart;
        for (std::size_t i = 0; i < z0.size(); ++i) z0[i] = (1.0 - a) * z0[i] + a * (*st.z_prev_refined)[i];
      }
      const GridImage* carried = st.momentum ? &*st.momentum : nullptr;
      DcResult dc = dc_refine(z0, y, scanner, row.psf_mode, row.m_t, ppcr.eta_dc, ppcr.mu_nesterov, carried,
                              ppcr.nonneg_projection);
      row.nll_before = dc.nll_initial;
      row.nll_after = dc.nll_final;

      const GridImage x0r = to_model_space(dc.z, transform);
      const double ab = sched.alpha_bar(t);
      const double ab_prev = sched.alpha_bar(t_prev);
      const double a = std::sqrt(ab_prev);
      const double b = std::sqrt(1.0 - ab_prev);
      const double ca = std::sqrt(ab);
      const double cb = std::sqrt(1.0 - ab);
      GridImage next = GridImage::like(st.x_t);
      for (std::size_t i = 0; i < next.size(); ++i) {
        const double dir = (st.x_t[i] - ca * x0r[i]) / cb;
        next[i] = a * x0r[i] + b * dir;
      }
      next.require_finite("sampler state");

      st.x_t = std::move(next);
      st.z_prev_refined = std::move(dc.z);
      st.momentum = std::move(dc.momentum);
      st.step_index = step;
      st.trace.push_back(row);
    } catch (const Error& e) {
      throw SamplerFailure("sampler failed at step " + std::to_string(step) + " (t=" + std::to_string(t) +
                               "): " + e.what(),
                           st.trace);
    }
  }
  result.z_hr = *st.z_prev_refined;
  result.z_hr.set_units(Units::activity);
  return result;
}

void write_trace(const std::filesystem::path& path, const std::vector<TraceRow>& trace) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open trace file for writing: " + path.string());
  out << "step,t_train,psf_mode,m_t,eta,nll_before,nll_after\n";
  out.precision(17);
  for (const auto& r : trace) {
    out << r.step << ',' << r.t_train << ',' << psf_mode_name(r.psf_mode) << ',' << r.m_t << ',' << r.eta << ','
        << r.nll_before << ',' << r.nll_after << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

const std::vector<std::string>& ablation_variant_names() {
  static const std::vector<std::string> names{"full", "no_dc", "no_psf", "no_ppcr", "concat_cond"};
  return names;
}

AblationVariant ablation_variant(std::string_view name, const PpcrConfig& base) {
  AblationVariant v{std::string(name), base, false};
  if (name == "full") {
  } else if (name == "no_dc") {
    v.ppcr.m_start = 0;
    v.ppcr.m_end = 0;
  } else if (name == "no_psf") {
    v.ppcr.psf_on_from_step = base.n_ddim_steps + 1;
  } else if (name == "no_ppcr") {
    v.ppcr.m_start = base.m_end;
    v.ppcr.psf_on_from_step = 1;
    v.ppcr.mu_nesterov = 0.0;
    v.ppcr.alpha_warmstart = 0.0;
  } else if (name == "concat_cond") {
    v.concat_conditioning = true;
  } else {
    throw ConfigError("unknown ablation variant '" + std::string(name) +
                      "' (expected full|no_dc|no_psf|no_ppcr|concat_cond)");
  }
  return v;
}

}  // namespace petsr
