#include <nvs/diffusion.hpp>
#include <nvs/errors.hpp>

#include <cctype>
#include <cmath>

namespace nvs {

NoiseSchedule NoiseSchedule::linear(Index steps, double beta_start, double beta_end) {
  if (steps < 1) throw ConfigError("noise schedule needs at least one step");
  if (!(beta_start > 0 && beta_start <= beta_end && beta_end < 1)) throw ConfigError("noise schedule: invalid betas");
  NoiseSchedule s;
  s.alpha_bar.resize(static_cast<std::size_t>(steps + 1));
  s.alpha_bar[0] = 1.0;
  for (Index t = 1; t <= steps; ++t) {
    const double beta =
        steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * static_cast<double>(t - 1) / static_cast<double>(steps - 1);
    s.alpha_bar[static_cast<std::size_t>(t)] = s.alpha_bar[static_cast<std::size_t>(t - 1)] * (1 - beta);
  }
  return s;
}

double NoiseSchedule::at(Index t) const {
  if (t < 0 || t > num_steps()) {
    throw BoundsError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(num_steps()) + "]");
  }
  return alpha_bar[static_cast<std::size_t>(t)];
}

std::vector<Index> ddim_timesteps(Index num_train_steps, Index steps) {
  if (steps < 1 || steps > num_train_steps) throw ArgumentError("sampler steps must be in [1, T]");
  std::vector<Index> out;
  for (Index i = 0; i <= steps; ++i) {
    out.push_back(static_cast<Index>(std::llround(static_cast<double>(i) * static_cast<double>(num_train_steps) /
                                                  static_cast<double>(steps))));
  }
  return out;
}

template <typename S>
Var<S> perturb(const Var<S>& x0, const Var<S>& eps, double alpha_bar) {
  if (x0.shape() != eps.shape()) {
    throw ArgumentError("perturb: latent " + shape_string(x0.shape()) + " vs noise " + shape_string(eps.shape()));
  }
  if (!(alpha_bar >= 0 && alpha_bar <= 1)) throw BoundsError("perturb: alpha_bar outside [0, 1]");
  if (alpha_bar == 1) return x0;
  if (alpha_bar == 0) return eps;
  return add(scale(x0, static_cast<S>(std::sqrt(alpha_bar))), scale(eps, static_cast<S>(std::sqrt(1 - alpha_bar))));
}

template <typename S>
Var<S> perturb(const Var<S>& x0, Index t, const Var<S>& eps, const NoiseSchedule& schedule) {
  return perturb(x0, eps, schedule.at(t));
}

template <typename S>
Var<S> gaussian(const Shape& shape, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0, 1);
  ArrayX<S> v(numel(shape));
  for (auto& x : v) x = static_cast<S>(n(rng));
  return Var<S>::constant(std::move(v), shape);
}

template <typename S>
Var<S> ddim_step(const Var<S>& x_t, const Var<S>& eps, double alpha_t, double alpha_prev,
                 const std::optional<SampleRange>& clip) {
  if (x_t.shape() != eps.shape()) throw ArgumentError("ddim_step: prediction shape mismatch");
  const ArrayX<double> x = x_t.value().template cast<double>(), e = eps.value().template cast<double>();
  ArrayX<double> x0 = (x - std::sqrt(1 - alpha_t) * e) / std::sqrt(alpha_t);
  if (clip) x0 = x0.cwiseMax(clip->lo).cwiseMin(clip->hi);
  ArrayX<double> next = std::sqrt(alpha_prev) * x0;
  if (alpha_prev < 1) next += std::sqrt(1 - alpha_prev) * e;
  return Var<S>::constant(next.template cast<S>(), x_t.shape());
}

template <typename S>
Var<S> ddim_sample(const NoisePredictor<S>& predict, const NoiseSchedule& schedule, const LatentState<S>& initial,
                   Index steps, const std::optional<SampleRange>& clip) {
  const auto grid = ddim_timesteps(schedule.num_steps(), steps);
  Index k = -1;
  for (Index i = 0; i < static_cast<Index>(grid.size()); ++i)
    if (grid[static_cast<std::size_t>(i)] == initial.timestep) k = i;
  if (k < 0) throw ArgumentError("ddim_sample: timestep " + std::to_string(initial.timestep) + " is not on the sampler grid");
  NoGradGuard no_grad;
  Var<S> x = initial.latent;
  for (; k > 0; --k) {
    const Index t = grid[static_cast<std::size_t>(k)], t_prev = grid[static_cast<std::size_t>(k - 1)];
    Var<S> eps = predict(x, t);
    x = ddim_step(x, eps, schedule.at(t), schedule.at(t_prev), clip);
    if (!x.value().allFinite()) {
      throw NumericError("ddim_sample: non-finite latent after step t=" + std::to_string(t) + " (prediction max |eps| = " +
                         std::to_string(static_cast<double>(eps.value().abs().maxCoeff())) + ")");
    }
  }
  return x;
}

template <typename S>
Var<S> LatentCodec::encode(const Var<S>& image) const {
  return factor == 1 ? image : avg_pool(image, factor);
}

template <typename S>
Var<S> LatentCodec::decode(const Var<S>& latent) const {
  return factor == 1 ? latent : resize_bilinear(latent, latent.dim(1) * factor, latent.dim(2) * factor);
}

TextEncoder::TextEncoder(Index dim, Index vocab, std::uint64_t seed) : table_(vocab, dim) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0, 1);
  for (Index i = 0; i < vocab; ++i)
    for (Index j = 0; j < dim; ++j) table_(i, j) = n(rng);
}

std::vector<std::string> TextEncoder::tokenize(const std::string& prompt) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : prompt) {
    if (std::isalnum(static_cast<unsigned char>(ch))) {
      cur += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

template <typename S>
Var<S> TextEncoder::encode(const std::string& prompt) const {
  const auto tokens = tokenize(prompt);
  Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(table_.cols());
  for (const auto& tok : tokens) {
    std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
    for (unsigned char c : tok) h = (h ^ c) * 1099511628211ULL;
    acc += table_.row(static_cast<Index>(h % static_cast<std::uint64_t>(table_.rows())));
  }
  if (!tokens.empty()) acc /= static_cast<double>(tokens.size());
  return Var<S>::constant(acc.transpose().array().template cast<S>(), {1, table_.cols()});
}

std::string default_prompt(const std::string& class_name) { return "a picture of " + class_name; }

template <typename S>
ParamList<S> DenoiserHandle<S>::params() {
  ParamList<S> out;
  unet.register_params(out, "unet.");
  return out;
}

template <typename S>
std::string DenoiserHandle<S>::fingerprint() const {
  UNet<S> view = unet;  // shares parameter storage
  ParamList<S> list;
  view.register_params(list, "unet.");
  return nvs::fingerprint(list);
}

template <typename S>
void DenoiserHandle<S>::freeze() {
  set_trainable(params(), false);
  frozen = true;
}

template <typename S>
DenoiserHandle<S> make_toy_denoiser(const UNetConfig& config, Index latent_size, std::uint64_t seed) {
  Initializer init(seed);
  DenoiserHandle<S> handle;
  handle.unet = UNet<S>(config, init);
  handle.text = TextEncoder(config.text_dim);
  handle.latent_size = latent_size;
  handle.data_range = SampleRange{0.0, 1.0};
  return handle;
}

template <typename S>
std::vector<double> toy_denoiser_train(DenoiserHandle<S>& handle, const std::vector<Var<S>>& images,
                                       const std::vector<std::string>& prompts, const NoiseSchedule& schedule,
                                       const DenoiserTrainConfig& config) {
  if (images.empty()) throw ArgumentError("toy_denoiser_train: no images");
  if (prompts.size() != images.size()) throw ArgumentError("toy_denoiser_train: one prompt per image");
  if (handle.frozen) throw ConfigError("toy_denoiser_train: denoiser is frozen");
  auto params = handle.params();
  set_trainable(params, true);
  Adam<S> adam(params, {config.learning_rate});
  std::mt19937_64 rng(config.seed);
  std::uniform_int_distribution<std::size_t> pick(0, images.size() - 1);
  std::uniform_int_distribution<Index> pick_t(1, schedule.num_steps());
  std::vector<Var<S>> latents, texts;
  for (std::size_t i = 0; i < images.size(); ++i) {
    latents.push_back(handle.codec.encode(images[i]));
    texts.push_back(handle.text.template encode<S>(prompts[i]));
  }
  std::vector<double> losses;
  for (Index step = 0; step < config.steps; ++step) {
    const std::size_t i = pick(rng);
    const Index t = pick_t(rng);
    Var<S> eps = gaussian<S>(latents[i].shape(), rng);
    Var<S> x_t = perturb(latents[i], t, eps, schedule);
    adam.zero_grad();
    Var<S> loss = mse(handle.unet(x_t, t, texts[i]), eps);
    const double value = static_cast<double>(loss.item());
    if (!std::isfinite(value)) throw NumericError("toy_denoiser_train: non-finite loss at step " + std::to_string(step));
    loss.backward();
    adam.step();
    losses.push_back(value);
  }
  handle.freeze();
  return losses;
}

#define NVS_INSTANTIATE_DIFFUSION(S)                                                                              \
  template Var<S> perturb<S>(const Var<S>&, const Var<S>&, double);                                               \
  template Var<S> perturb<S>(const Var<S>&, Index, const Var<S>&, const NoiseSchedule&);                          \
  template Var<S> gaussian<S>(const Shape&, std::mt19937_64&);                                                    \
  template Var<S> ddim_step<S>(const Var<S>&, const Var<S>&, double, double, const std::optional<SampleRange>&);  \
  template Var<S> ddim_sample<S>(const NoisePredictor<S>&, const NoiseSchedule&, const LatentState<S>&, Index,    \
                                 const std::optional<SampleRange>&);                                               \
  template Var<S> LatentCodec::encode<S>(const Var<S>&) const;                                                    \
  template Var<S> LatentCodec::decode<S>(const Var<S>&) const;                                                    \
  template Var<S> TextEncoder::encode<S>(const std::string&) const;                                               \
  template struct DenoiserHandle<S>;                                                                              \
  template DenoiserHandle<S> make_toy_denoiser<S>(const UNetConfig&, Index, std::uint64_t);                       \
  template std::vector<double> toy_denoiser_train<S>(DenoiserHandle<S>&, const std::vector<Var<S>>&,              \
                                                     const std::vector<std::string>&, const NoiseSchedule&,        \
                                                     const DenoiserTrainConfig&);

NVS_INSTANTIATE_DIFFUSION(float)
NVS_INSTANTIATE_DIFFUSION(double)

}  // namespace nvs
