#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "petsr/core_model.hpp"
#include "petsr/diffusion_prior.hpp"

namespace petsr {

/// How the anatomy image reaches the network.
enum class Conditioning : std::uint32_t {
  attention = 0,  // condition branch feeding a windowed cross-attention bottleneck
  concat = 1,     // anatomy stacked with x_t as a second input channel
};

std::string_view conditioning_name(Conditioning c);
Conditioning parse_conditioning(std::string_view name);

/// Two-level encoder-decoder.
///
///   level 1 (full res, width1):  conv_in -> SiLU -> conv -> SiLU [-> attn] = skip
///   level 2 (half res, width2):  pool -> conv -> SiLU -> conv -> SiLU
///   bottleneck (attention mode): queries from the image features, keys and
///       values from the anatomy branch (conv -> SiLU -> pool -> conv -> SiLU),
///       softmax over a window x window neighborhood with a learned relative
///       position bias per head; output projection added residually
///   attn (attention mode):       the same block at full resolution, keys and
///       values from the first anatomy conv
///   decoder:                     upsample, concat skip, conv -> SiLU -> conv_out
///
/// A sinusoidal timestep embedding passes through a SiLU MLP and is added as a
/// per-channel bias after the first convolution of each level.
struct TinyArch {
  Conditioning conditioning = Conditioning::attention;
  std::uint32_t width1 = 16;
  std::uint32_t width2 = 32;
  std::uint32_t heads = 2;
  std::uint32_t window = 3;
  std::uint32_t temb_dim = 32;

  bool operator==(const TinyArch&) const = default;
};

inline constexpr std::size_t kMaxTinyParameters = 200'000;

std::size_t parameter_count(const TinyArch& arch);

/// Weights blob plus everything needed to use it as a prior.
///
/// File layout (little-endian): "PSDW", u32 version, u32 conditioning,
/// u32 width1, u32 width2, u32 heads, u32 window, u32 temb_dim,
/// u32 parameter count, f64 s_scale, f64 kappa, u32 T, f64 beta_min,
/// f64 beta_max, then the f32 parameters in layer order: time MLP, per-level
/// time projections, conv_in, enc1, enc2, enc3, [cond1, q1, k1, v1, o1,
/// relative bias 1, cond2, q, k, v, o, relative bias], dec, conv_out (each
/// weight block followed by its bias).
struct TinyDenoiserWeights {
  static constexpr std::uint32_t kVersion = 1;
  TinyArch arch;
  TransformParams transform;
  std::uint32_t train_steps = kDefaultTrainSteps;
  double beta_min = kDefaultBetaMin;
  double beta_max = kDefaultBetaMax;
  std::vector<float> params;

  bool operator==(const TinyDenoiserWeights&) const = default;
};

TinyDenoiserWeights init_weights(const TinyArch& arch, std::uint64_t seed);

std::string serialize_weights(const TinyDenoiserWeights& w);
TinyDenoiserWeights deserialize_weights(const std::string& bytes);
void save_weights(const std::filesystem::path& path, const TinyDenoiserWeights& w);
TinyDenoiserWeights load_weights(const std::filesystem::path& path);

/// Single-image float tensor, channel-major [c][h][w].
struct Tensor {
  std::uint32_t c = 0, h = 0, w = 0;
  std::vector<float> v;

  Tensor() = default;
  Tensor(std::uint32_t c_, std::uint32_t h_, std::uint32_t w_) : c(c_), h(h_), w(w_), v(std::size_t(c_) * h_ * w_, 0.0f) {}
  std::size_t plane() const { return std::size_t(h) * w; }
  float* ch(std::uint32_t i) { return v.data() + i * plane(); }
  const float* ch(std::uint32_t i) const { return v.data() + i * plane(); }
};

/// Forward/backward for one (x_t, c, t) sample. Spatial dims must be even.
class TinyNetwork {
 public:
  explicit TinyNetwork(const TinyArch& arch);

  const TinyArch& arch() const { return arch_; }
  std::size_t parameter_count() const { return n_params_; }

  struct Cache;
  struct Layout;  // parameter offsets, defined in the implementation

  /// Predicted noise; fills `cache` when given (needed for backward).
  Tensor forward(std::span<const float> params, const Tensor& x, const Tensor& cond, std::uint32_t t,
                 Cache* cache = nullptr) const;

  /// Accumulates d(loss)/d(params) into `grads` for d(loss)/d(output) = `dout`.
  void backward(std::span<const float> params, const Cache& cache, const Tensor& dout, std::span<float> grads) const;

  /// Mean squared error between forward(x, cond, t) and `target`; adds its
  /// gradient (scaled by `weight`) into `grads` when non-empty.
  double loss_and_grad(std::span<const float> params, const Tensor& x, const Tensor& cond, std::uint32_t t,
                       const Tensor& target, std::span<float> grads, double weight = 1.0) const;

 private:
  TinyArch arch_;
  std::size_t n_params_ = 0;
  std::shared_ptr<const Layout> layout_;
};

struct TinyNetwork::Cache {
  std::uint32_t t = 0;
  Tensor x, cond;
  std::vector<float> temb, temb_pre, temb_hidden, tb1, tb2;
  Tensor input;                 // conv_in input (x or [x, cond])
  Tensor a1, h1, a1b, s1, b1, p1, a2, h2, a2b, s2;
  Tensor ga, g1, gp, gb, g2;    // condition branch
  Tensor q1, k1, v1, attn1_out;  // full-resolution attention
  std::vector<float> attn1_w;
  Tensor q, k, v, attn_out;     // bottleneck attention
  std::vector<float> attn_w;    // [head][pixel][window offset]
  Tensor b2, up, cat, d1, hd;
};

/// Trained network behind the Denoiser interface.
class TinyDenoiser final : public Denoiser {
 public:
  explicit TinyDenoiser(TinyDenoiserWeights weights);

  GridImage predict(const GridImage& x_t, std::uint32_t t, const GridImage& condition) const override;
  const NoiseSchedule& schedule() const override { return sched_; }
  const TinyDenoiserWeights& weights() const { return weights_; }
  const TransformParams& transform() const { return weights_.transform; }

 private:
  TinyDenoiserWeights weights_;
  TinyNetwork net_;
  NoiseSchedule sched_;
};

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainingConfig {
  std::uint64_t seed = 7;
  std::uint32_t steps = 2000;
  std::uint32_t batch = 4;
  std::uint32_t crop = 64;  // 0 = full images
  double learning_rate = 2e-3;
  double grad_clip = 1.0;
  double cond_dropout = 0.1;
  std::uint32_t log_every = 50;
  std::uint32_t train_steps_T = kDefaultTrainSteps;
  double beta_min = kDefaultBetaMin;
  double beta_max = kDefaultBetaMax;
  double s_scale = 1.0;
};

struct TrainingCase {
  GridImage activity;
  GridImage anatomy;
};

struct TrainingResult {
  TinyDenoiserWeights weights;
  std::vector<std::pair<std::uint32_t, double>> loss_log;  // (step, mean loss since previous row)
};

class TrainingFailure : public Error {
 public:
  TrainingFailure(const std::string& what, TinyDenoiserWeights last_good)
      : Error(what), last_good_(std::move(last_good)) {}
  const TinyDenoiserWeights& last_good() const { return last_good_; }

 private:
  TinyDenoiserWeights last_good_;
};

/// Epsilon-prediction training with Adam on random crops and flips; fully
/// deterministic for a given seed. Throws TrainingFailure on a non-finite loss.
TrainingResult train_tiny_denoiser(const std::vector<TrainingCase>& cases, const TinyArch& arch,
                                   const TrainingConfig& cfg);

/// Loads the `train` split of a phantom manifest and trains on it.
TrainingResult train_tiny_denoiser(const std::filesystem::path& manifest, const TinyArch& arch,
                                   const TrainingConfig& cfg);

void write_loss_log(const std::filesystem::path& path, const std::vector<std::pair<std::uint32_t, double>>& log);

/// Cases of one split (`train`, `val`, `test`) from a phantom manifest.
std::vector<TrainingCase> load_cases(const std::filesystem::path& manifest, std::string_view split);

struct DenoisingScore {
  double mse = 0.0;            // mean squared noise-prediction error
  double zero_baseline = 0.0;  // same draws scored against an all-zero prediction
};

/// Scores noise prediction at timestep t over `cases` (one seeded noise draw
/// per case, full images).
DenoisingScore denoising_score(const Denoiser& denoiser, const TransformParams& transform,
                               const std::vector<TrainingCase>& cases, std::uint32_t t, std::uint64_t seed);

}  // namespace petsr
