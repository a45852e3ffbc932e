#pragma once

// Spatial guidance adapter: a trainable copy of the denoiser encoder fed with
// the noisy latent plus a 1x1 projection of the aggregate feature map. Each
// encoder skip and the middle output pass through a zero-initialized 1x1
// convolution, so a fresh adapter emits exactly zero signals.

#include <nvs/unet.hpp>

namespace nvs {

template <typename Scalar>
class GuidanceAdapter {
 public:
  GuidanceAdapter() = default;

  /// Copies the denoiser encoder; feature_width is the channel count of the feature map.
  GuidanceAdapter(const UNet<Scalar>& denoiser, Index feature_width, Initializer& init);

  /// features [feature_width, S, S] and x_t [latent_channels, S, S] -> one signal per decoder tap.
  GuidanceSignals<Scalar> operator()(const Var<Scalar>& features, const Var<Scalar>& x_t, Index t,
                                     const Var<Scalar>& text) const;

  Index tap_count() const { return static_cast<Index>(zero_.size()); }
  Conv2d<Scalar>& zero_projection(Index tap) { return zero_.at(static_cast<std::size_t>(tap)); }
  const UNetEncoder<Scalar>& encoder() const { return encoder_; }
  void register_params(ParamList<Scalar>& out, const std::string& prefix);

 private:
  UNetEncoder<Scalar> encoder_;
  Conv2d<Scalar> input_;
  std::vector<Conv2d<Scalar>> zero_;
  std::vector<Index> tap_channels_;
};

}  // namespace nvs
