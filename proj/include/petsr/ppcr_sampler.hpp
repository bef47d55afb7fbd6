#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "petsr/core_model.hpp"
#include "petsr/diffusion_prior.hpp"
#include "petsr/forward_model.hpp"
#include "petsr/likelihood.hpp"

namespace petsr {

/// Training timesteps visited by the sampler, noisiest first:
/// t_i = T - floor((i - 1) * T / n) for i = 1..n.
std::vector<std::uint32_t> ddim_timesteps(std::uint32_t n_steps, std::uint32_t T);

PsfMode psf_mode_for_step(std::uint32_t step, const PpcrConfig& cfg);

/// round(m_start + (m_end - m_start) * (step - 1) / (n - 1)); m_end when n = 1.
std::uint32_t inner_iters_for_step(std::uint32_t step, const PpcrConfig& cfg);

struct DcResult {
  GridImage z;
  GridImage momentum;
  double nll_initial = 0.0;
  double nll_final = 0.0;
};

/// m Nesterov steps on the Poisson NLL:
///   z~ = z + mu v,  v <- mu v - eta grad(z~),  z <- max(0, z + v).
/// With nonneg_projection the look-ahead point is projected as well, since the
/// forward model is only defined for nonnegative activity. mu = 0 is projected
/// gradient descent. A missing momentum starts at zero.
DcResult dc_refine(const GridImage& z_init, const Sinogram& y, const ScannerConfig& cfg, PsfMode mode, std::uint32_t m,
                   double eta, double mu, const GridImage* momentum_in = nullptr, bool nonneg_projection = true);

struct TraceRow {
  std::uint32_t step = 0;
  std::uint32_t t_train = 0;
  PsfMode psf_mode = PsfMode::identity;
  std::uint32_t m_t = 0;
  double eta = 0.0;
  double nll_before = 0.0;
  double nll_after = 0.0;
};

struct SamplerState {
  std::uint32_t step_index = 0;  // last completed step
  GridImage x_t;
  std::optional<GridImage> z_prev_refined;
  std::optional<GridImage> momentum;
  std::vector<TraceRow> trace;
};

/// Raised when any step fails; carries the trace up to the failing step.
class SamplerFailure : public NumericalError {
 public:
  SamplerFailure(const std::string& what, std::vector<TraceRow> trace)
      : NumericalError(what), trace_(std::move(trace)) {}
  const std::vector<TraceRow>& trace() const { return trace_; }

 private:
  std::vector<TraceRow> trace_;
};

struct PpcrResult {
  GridImage z_hr;
  SamplerState state;
};

/// Bound on |x0_hat| in model space before it leaves the sampler's prior
/// step. The calibrated model space spans roughly [0, 1].
inline constexpr double kModelSpaceClip = 2.0;

/// Deterministic DDIM with Tweedie estimates and data-consistency refinement.
/// `y` must be sampled counts and `scanner` calibrated.
PpcrResult ppcr_reconstruct(const Sinogram& y, const GridImage& anatomy, const Denoiser& denoiser,
                            const NoiseSchedule& sched, const ScannerConfig& scanner, const PpcrConfig& ppcr,
                            const TransformParams& transform, std::uint64_t seed);

void write_trace(const std::filesystem::path& path, const std::vector<TraceRow>& trace);

// ---------------------------------------------------------------------------
// Ablations
// ---------------------------------------------------------------------------

struct AblationVariant {
  std::string name;
  PpcrConfig ppcr;
  bool concat_conditioning = false;  // use the concat-conditioned denoiser
};

/// full | no_dc | no_psf | no_ppcr | concat_cond. Unknown names throw ConfigError.
AblationVariant ablation_variant(std::string_view name, const PpcrConfig& base);

const std::vector<std::string>& ablation_variant_names();

}  // namespace petsr
