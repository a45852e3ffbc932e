#include <nvs/errors.hpp>
#include <nvs/guidance.hpp>

namespace nvs {

template <typename S>
GuidanceAdapter<S>::GuidanceAdapter(const UNet<S>& denoiser, Index feature_width, Initializer& init)
    : encoder_(deep_copy<S>(denoiser.encoder())) {
  const UNetConfig& cfg = denoiser.config();
  cfg.validate();
  if (feature_width < 1) throw ConfigError("guidance adapter: feature width must be positive");
  ParamList<S> copied;
  encoder_.register_params(copied, "");
  set_trainable(copied, true);
  input_ = Conv2d<S>(feature_width, cfg.latent_channels, 1, 1, 0, init);
  tap_channels_ = cfg.channels;
  tap_channels_.push_back(cfg.channels.back());
  for (Index c : tap_channels_) zero_.emplace_back(c, c, 1, 1, 0, init, true, true);
}

template <typename S>
GuidanceSignals<S> GuidanceAdapter<S>::operator()(const Var<S>& features, const Var<S>& x_t, Index t,
                                                  const Var<S>& text) const {
  if (features.rank() != 3 || x_t.rank() != 3 || features.dim(1) != x_t.dim(1) || features.dim(2) != x_t.dim(2)) {
    throw ArgumentError("guidance: feature map " + shape_string(features.shape()) + " does not match latent " +
                        shape_string(x_t.shape()));
  }
  if (features.dim(0) != input_.in_channels()) throw ArgumentError("guidance: feature map has the wrong width");
  EncoderActivations<S> act = encoder_(add(x_t, input_(features)), t, text);
  GuidanceSignals<S> out;
  for (std::size_t l = 0; l < act.skips.size(); ++l) out.per_block.push_back(zero_[l](act.skips[l]));
  out.per_block.push_back(zero_.back()(act.mid));
  for (std::size_t l = 0; l < out.per_block.size(); ++l) {
    if (out.per_block[l].dim(0) != tap_channels_[l]) throw ArgumentError("guidance: tap shape mismatch");
  }
  return out;
}

template <typename S>
void GuidanceAdapter<S>::register_params(ParamList<S>& out, const std::string& prefix) {
  encoder_.register_params(out, prefix + "encoder.");
  input_.register_params(out, prefix + "input.");
  for (std::size_t l = 0; l < zero_.size(); ++l) zero_[l].register_params(out, prefix + "zero" + std::to_string(l) + ".");
}

template class GuidanceAdapter<float>;
template class GuidanceAdapter<double>;

}  // namespace nvs
