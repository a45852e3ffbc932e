#include <nvs/errors.hpp>
#include <nvs/unet.hpp>

#include <cmath>

namespace nvs {

void UNetConfig::validate() const {
  if (latent_channels < 1) throw ConfigError("denoiser.latent_channels must be >= 1");
  if (channels.empty()) throw ConfigError("denoiser.channels must not be empty");
  for (Index c : channels)
    if (c < 1) throw ConfigError("denoiser.channels must be positive");
  if (time_dim < 2 || time_dim % 2 != 0) throw ConfigError("denoiser.time_dim must be even");
  if (text_dim < 1) throw ConfigError("denoiser.text_dim must be >= 1");
}

template <typename S>
ResBlock<S>::ResBlock(Index in, Index out, Index emb_dim, Initializer& init)
    : norm1_(in, group_count(in), init),
      norm2_(out, group_count(out), init),
      conv1_(in, out, 3, 1, 1, init),
      conv2_(out, out, 3, 1, 1, init),
      emb_proj_(emb_dim, out, init),
      has_skip_(in != out) {
  if (has_skip_) skip_ = Conv2d<S>(in, out, 1, 1, 0, init);
}

template <typename S>
Var<S> ResBlock<S>::operator()(const Var<S>& x, const Var<S>& emb) const {
  Var<S> h = conv1_(silu(norm1_(x)));
  const Index out = h.dim(0);
  h = add_channel_bias(h, reshape(emb_proj_(silu(emb)), {out}));
  h = conv2_(silu(norm2_(h)));
  return add(has_skip_ ? skip_(x) : x, h);
}

template <typename S>
void ResBlock<S>::register_params(ParamList<S>& out, const std::string& prefix) {
  norm1_.register_params(out, prefix + "norm1.");
  conv1_.register_params(out, prefix + "conv1.");
  emb_proj_.register_params(out, prefix + "emb_proj.");
  norm2_.register_params(out, prefix + "norm2.");
  conv2_.register_params(out, prefix + "conv2.");
  if (has_skip_) skip_.register_params(out, prefix + "skip.");
}

template <typename S>
Var<S> timestep_features(Index t, Index dim) {
  const Index half = dim / 2;
  ArrayX<S> v(dim);
  for (Index k = 0; k < half; ++k) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
    v[k] = static_cast<S>(std::sin(static_cast<double>(t) * freq));
    v[half + k] = static_cast<S>(std::cos(static_cast<double>(t) * freq));
  }
  return Var<S>::constant(std::move(v), {1, dim});
}

template <typename S>
UNetEncoder<S>::UNetEncoder(const UNetConfig& config, Initializer& init) : config_(config) {
  config_.validate();
  const auto& ch = config.channels;
  const Index levels = static_cast<Index>(ch.size());
  time1_ = Linear<S>(config.time_dim, config.time_dim, init);
  time2_ = Linear<S>(config.time_dim, config.time_dim, init);
  text_proj_ = Linear<S>(config.text_dim, config.time_dim, init);
  conv_in_ = Conv2d<S>(config.latent_channels, ch[0], 3, 1, 1, init);
  for (Index l = 0; l < levels; ++l) {
    res_.emplace_back(l == 0 ? ch[0] : ch[l - 1], ch[l], config.time_dim, init);
    if (l + 1 < levels) down_.emplace_back(ch[l], ch[l], 3, 2, 1, init);
  }
  mid_ = ResBlock<S>(ch.back(), ch.back(), config.time_dim, init);
}

template <typename S>
EncoderActivations<S> UNetEncoder<S>::operator()(const Var<S>& x, Index t, const Var<S>& text) const {
  if (x.rank() != 3 || x.dim(0) != config_.latent_channels) {
    throw ArgumentError("denoiser: latent shape " + shape_string(x.shape()) + " has the wrong channel count");
  }
  const Index factor = Index{1} << (config_.channels.size() - 1);
  if (x.dim(1) % factor != 0 || x.dim(2) % factor != 0) {
    throw ArgumentError("denoiser: latent size must be divisible by " + std::to_string(factor));
  }
  if (text.size() != config_.text_dim) throw ArgumentError("denoiser: text embedding has the wrong size");
  EncoderActivations<S> out;
  out.embedding = add(time2_(silu(time1_(timestep_features<S>(t, config_.time_dim)))),
                      text_proj_(reshape(text, {1, config_.text_dim})));
  Var<S> h = conv_in_(x);
  for (std::size_t l = 0; l < res_.size(); ++l) {
    h = res_[l](h, out.embedding);
    out.skips.push_back(h);
    if (l < down_.size()) h = down_[l](h);
  }
  out.mid = mid_(h, out.embedding);
  return out;
}

template <typename S>
void UNetEncoder<S>::register_params(ParamList<S>& out, const std::string& prefix) {
  time1_.register_params(out, prefix + "time1.");
  time2_.register_params(out, prefix + "time2.");
  text_proj_.register_params(out, prefix + "text_proj.");
  conv_in_.register_params(out, prefix + "conv_in.");
  for (std::size_t l = 0; l < res_.size(); ++l) res_[l].register_params(out, prefix + "res" + std::to_string(l) + ".");
  for (std::size_t l = 0; l < down_.size(); ++l) down_[l].register_params(out, prefix + "down" + std::to_string(l) + ".");
  mid_.register_params(out, prefix + "mid.");
}

template <typename S>
Var<S> inject(const Var<S>& residual, const Var<S>& signal, S lambda) {
  if (residual.shape() != signal.shape()) {
    throw ArgumentError("inject: residual " + shape_string(residual.shape()) + " vs signal " +
                        shape_string(signal.shape()));
  }
  return add(residual, scale(signal, lambda));
}

template <typename S>
UNet<S>::UNet(const UNetConfig& config, Initializer& init) : encoder_(config, init) {
  const auto& ch = config.channels;
  const Index levels = static_cast<Index>(ch.size());
  dec_.resize(static_cast<std::size_t>(levels));
  for (Index l = levels - 1; l >= 0; --l) {
    const Index incoming = l == levels - 1 ? ch.back() : ch[l + 1];
    dec_[static_cast<std::size_t>(l)] = ResBlock<S>(incoming + ch[l], ch[l], config.time_dim, init);
  }
  for (Index l = 1; l < levels; ++l) up_.emplace_back(ch[l], ch[l], 3, 1, 1, init);
  out_norm_ = GroupNorm<S>(ch[0], group_count(ch[0]), init);
  out_conv_ = Conv2d<S>(ch[0], config.latent_channels, 3, 1, 1, init);
}

template <typename S>
Var<S> UNet<S>::operator()(const Var<S>& x, Index t, const Var<S>& text, const GuidanceSignals<S>* guidance,
                           S lambda) const {
  EncoderActivations<S> act = encoder_(x, t, text);
  const std::size_t levels = dec_.size();
  if (guidance) {
    if (guidance->per_block.size() != levels + 1) throw ArgumentError("guidance: wrong number of signals");
    for (std::size_t l = 0; l < levels; ++l) act.skips[l] = inject(act.skips[l], guidance->per_block[l], lambda);
    act.mid = inject(act.mid, guidance->per_block[levels], lambda);
  }
  Var<S> h = act.mid;
  for (std::size_t l = levels; l-- > 0;) {
    h = dec_[l](concat<S>({h, act.skips[l]}), act.embedding);
    if (l > 0) h = up_[l - 1](upsample_nearest2x(h));
  }
  return out_conv_(silu(out_norm_(h)));
}

template <typename S>
std::vector<Shape> UNet<S>::tap_shapes(Index latent_size) const {
  std::vector<Shape> out;
  const auto& ch = config().channels;
  Index size = latent_size;
  for (std::size_t l = 0; l < ch.size(); ++l) {
    out.push_back({ch[l], size, size});
    if (l + 1 < ch.size()) size /= 2;
  }
  out.push_back({ch.back(), size, size});
  return out;
}

template <typename S>
void UNet<S>::zero_output() {
  out_conv_.weight.value_mutable().setZero();
  out_conv_.bias.value_mutable().setZero();
}

template <typename S>
void UNet<S>::register_params(ParamList<S>& out, const std::string& prefix) {
  encoder_.register_params(out, prefix + "encoder.");
  for (std::size_t l = 0; l < dec_.size(); ++l) dec_[l].register_params(out, prefix + "dec" + std::to_string(l) + ".");
  for (std::size_t l = 0; l < up_.size(); ++l) up_[l].register_params(out, prefix + "up" + std::to_string(l + 1) + ".");
  out_norm_.register_params(out, prefix + "out_norm.");
  out_conv_.register_params(out, prefix + "out_conv.");
}

#define NVS_INSTANTIATE_UNET(S)                                  \
  template class ResBlock<S>;                                    \
  template class UNetEncoder<S>;                                 \
  template class UNet<S>;                                        \
  template Var<S> timestep_features<S>(Index, Index);            \
  template Var<S> inject<S>(const Var<S>&, const Var<S>&, S);

NVS_INSTANTIATE_UNET(float)
NVS_INSTANTIATE_UNET(double)

}  // namespace nvs
