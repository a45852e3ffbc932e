#pragma once

// Noise schedule, forward perturbation, deterministic DDIM sampling, the
// latent codec, a hashed-token text encoder, and the frozen denoiser handle.

#include <nvs/optim.hpp>
#include <nvs/unet.hpp>

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace nvs {

/// Cumulative signal rates alpha_bar[0..T] with alpha_bar[0] = 1.
struct NoiseSchedule {
  std::vector<double> alpha_bar;

  /// Linearly spaced per-step noise rates in [beta_start, beta_end].
  static NoiseSchedule linear(Index steps = 1000, double beta_start = 1e-4, double beta_end = 0.02);

  Index num_steps() const { return static_cast<Index>(alpha_bar.size()) - 1; }
  double at(Index t) const;
};

/// Sampler timesteps round(i * T / steps) for i = 0..steps (ascending, first 0, last T).
std::vector<Index> ddim_timesteps(Index num_train_steps, Index steps);

/// sqrt(alpha_bar) * x0 + sqrt(1 - alpha_bar) * eps.
template <typename Scalar>
Var<Scalar> perturb(const Var<Scalar>& x0, const Var<Scalar>& eps, double alpha_bar);

template <typename Scalar>
Var<Scalar> perturb(const Var<Scalar>& x0, Index t, const Var<Scalar>& eps, const NoiseSchedule& schedule);

/// Standard normal tensor.
template <typename Scalar>
Var<Scalar> gaussian(const Shape& shape, std::mt19937_64& rng);

template <typename Scalar>
struct LatentState {
  Var<Scalar> latent;
  Index timestep = 0;
};

/// Predicted noise for a latent at a timestep.
template <typename Scalar>
using NoisePredictor = std::function<Var<Scalar>(const Var<Scalar>& x_t, Index t)>;

/// Bounds of clean data; the sampler clamps its clean-sample prediction to them.
struct SampleRange {
  double lo = 0;
  double hi = 1;
};

/// One deterministic DDIM update from timestep t to t_prev.
template <typename Scalar>
Var<Scalar> ddim_step(const Var<Scalar>& x_t, const Var<Scalar>& eps, double alpha_t, double alpha_prev,
                      const std::optional<SampleRange>& clip = std::nullopt);

/// Runs the eta = 0 sampler from initial.timestep (which must be on the
/// `steps`-point grid) down to 0. Throws NumericError on non-finite latents.
template <typename Scalar>
Var<Scalar> ddim_sample(const NoisePredictor<Scalar>& predict, const NoiseSchedule& schedule,
                        const LatentState<Scalar>& initial, Index steps,
                        const std::optional<SampleRange>& clip = std::nullopt);

/// Image <-> latent mapping. factor 1 is the identity; otherwise average
/// pooling down and bilinear resampling back up.
struct LatentCodec {
  Index factor = 1;

  template <typename Scalar>
  Var<Scalar> encode(const Var<Scalar>& image) const;
  template <typename Scalar>
  Var<Scalar> decode(const Var<Scalar>& latent) const;
};

/// Frozen text encoder: mean of fixed pseudo-random embeddings of hashed
/// lower-case word tokens.
class TextEncoder {
 public:
  explicit TextEncoder(Index dim = 32, Index vocab = 512, std::uint64_t seed = 0x7e47);

  static std::vector<std::string> tokenize(const std::string& prompt);

  /// [1, dim]
  template <typename Scalar>
  Var<Scalar> encode(const std::string& prompt) const;

  Index dim() const { return table_.cols(); }

 private:
  Eigen::MatrixXd table_;
};

std::string default_prompt(const std::string& class_name);

enum class DenoiserBackend { toy, external };

template <typename Scalar>
struct DenoiserHandle {
  DenoiserBackend backend = DenoiserBackend::toy;
  std::string model_id = "toy";
  UNet<Scalar> unet;
  TextEncoder text{};
  LatentCodec codec{};
  Index latent_size = 32;
  /// Range of clean latents, when bounded (pixel-space toy backend: [0, 1]).
  std::optional<SampleRange> data_range;
  bool frozen = false;

  ParamList<Scalar> params();
  std::string fingerprint() const;
  void freeze();

  Var<Scalar> predict(const Var<Scalar>& x_t, Index t, const Var<Scalar>& text_embedding,
                      const GuidanceSignals<Scalar>* guidance = nullptr, Scalar lambda = Scalar(1)) const {
    return unet(x_t, t, text_embedding, guidance, lambda);
  }
};

template <typename Scalar>
DenoiserHandle<Scalar> make_toy_denoiser(const UNetConfig& config, Index latent_size, std::uint64_t seed);

struct DenoiserTrainConfig {
  Index steps = 2000;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
};

/// Trains the handle's U-Net with the noise-prediction objective on the given
/// images and prompts, then freezes it. Returns the per-step losses.
template <typename Scalar>
std::vector<double> toy_denoiser_train(DenoiserHandle<Scalar>& handle, const std::vector<Var<Scalar>>& images,
                                       const std::vector<std::string>& prompts, const NoiseSchedule& schedule,
                                       const DenoiserTrainConfig& config);

}  // namespace nvs
