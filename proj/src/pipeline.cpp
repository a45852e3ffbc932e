#include <nvs/errors.hpp>
#include <nvs/pipeline.hpp>

namespace nvs {

template <typename S>
NoisePredictor<S> guided_predictor(const DenoiserHandle<S>& denoiser, const GuidanceAdapter<S>* adapter,
                                   const Var<S>& features, const Var<S>& text, S lambda) {
  return [&denoiser, adapter, features, text, lambda](const Var<S>& x, Index t) {
    if (!adapter) return denoiser.predict(x, t, text);
    const GuidanceSignals<S> signals = (*adapter)(features, x, t, text);
    return denoiser.predict(x, t, text, &signals, lambda);
  };
}

template <typename S>
InferenceResult<S> nvs_inference(const GeometryModel<S>& geometry, const GuidanceAdapter<S>* adapter,
                                 const DenoiserHandle<S>& denoiser, const std::vector<ContextView<S>>& contexts,
                                 const CameraPose<double>& target, DepthRange<double> range, const std::string& prompt,
                                 const InferenceOptions& options, const NoiseSchedule& schedule) {
  if (options.perturb_steps < 0 || options.perturb_steps > options.steps) {
    throw ArgumentError("perturb steps must be in [0, " + std::to_string(options.steps) + "]");
  }
  const Index latent = denoiser.latent_size;
  if (target.height != latent * denoiser.codec.factor || target.width != latent * denoiser.codec.factor) {
    throw ArgumentError("target image size does not match the denoiser latent size");
  }
  if (geometry.config().feature_grid != latent) throw ConfigError("feature grid must equal the latent size");
  NoGradGuard no_grad;
  auto rendering = geometry.render(contexts, target, range, target.height, target.width);
  InferenceResult<S> out;
  out.estimate = rendering.color.image;
  out.feature_map = rendering.feature_map.features;
  const Var<S> x0 = denoiser.codec.encode(out.estimate);
  if (options.perturb_steps == 0) {
    out.image = denoiser.codec.decode(x0);
    return out;
  }
  const auto grid = ddim_timesteps(schedule.num_steps(), options.steps);
  const Index t_start = grid[static_cast<std::size_t>(options.perturb_steps)];
  std::mt19937_64 rng(options.seed);
  const Var<S> eps = gaussian<S>(x0.shape(), rng);
  LatentState<S> start{options.random_start ? eps : perturb(x0, t_start, eps, schedule), t_start};
  const Var<S> text = denoiser.text.template encode<S>(prompt);
  const auto predict = guided_predictor(denoiser, adapter, out.feature_map, text, static_cast<S>(options.lambda));
  out.image = denoiser.codec.decode(ddim_sample(predict, schedule, start, options.steps,
                                                         options.clip_denoised ? denoiser.data_range : std::nullopt));
  if (!out.image.value().allFinite()) throw NumericError("nvs_inference: non-finite output image");
  return out;
}

#define NVS_INSTANTIATE_PIPELINE(S)                                                                                   \
  template NoisePredictor<S> guided_predictor<S>(const DenoiserHandle<S>&, const GuidanceAdapter<S>*, const Var<S>&,  \
                                                 const Var<S>&, S);                                                   \
  template InferenceResult<S> nvs_inference<S>(const GeometryModel<S>&, const GuidanceAdapter<S>*,                    \
                                               const DenoiserHandle<S>&, const std::vector<ContextView<S>>&,          \
                                               const CameraPose<double>&, DepthRange<double>, const std::string&,     \
                                               const InferenceOptions&, const NoiseSchedule&);

NVS_INSTANTIATE_PIPELINE(float)
NVS_INSTANTIATE_PIPELINE(double)

}  // namespace nvs
