#pragma once

// Novel view inference: coarse color estimate -> latent -> noise
// perturbation -> guided DDIM denoising -> decoded image.

#include <nvs/diffusion.hpp>
#include <nvs/guidance.hpp>
#include <nvs/ray_aggregation.hpp>

namespace nvs {

struct InferenceOptions {
  Index steps = 20;
  /// Number of sampler steps run after perturbing the estimate; steps = full strength, 0 = none.
  Index perturb_steps = 20;
  double lambda = 2.0;
  /// Start from pure noise instead of the perturbed estimate.
  bool random_start = false;
  /// Clamp the sampler's clean-sample prediction to the denoiser's data range.
  bool clip_denoised = true;
  std::uint64_t seed = 0;
};

template <typename Scalar>
struct InferenceResult {
  Var<Scalar> estimate;     // [3, H, W]
  Var<Scalar> image;        // [3, H, W], unclamped
  Var<Scalar> feature_map;  // [width, S, S]
};

/// Noise predictor with the adapter's signals injected at weight lambda.
/// A null adapter gives the unguided predictor.
template <typename Scalar>
NoisePredictor<Scalar> guided_predictor(const DenoiserHandle<Scalar>& denoiser, const GuidanceAdapter<Scalar>* adapter,
                                        const Var<Scalar>& features, const Var<Scalar>& text, Scalar lambda);

template <typename Scalar>
InferenceResult<Scalar> nvs_inference(const GeometryModel<Scalar>& geometry, const GuidanceAdapter<Scalar>* adapter,
                                      const DenoiserHandle<Scalar>& denoiser,
                                      const std::vector<ContextView<Scalar>>& contexts,
                                      const CameraPose<double>& target, DepthRange<double> range,
                                      const std::string& prompt, const InferenceOptions& options,
                                      const NoiseSchedule& schedule);

}  // namespace nvs
