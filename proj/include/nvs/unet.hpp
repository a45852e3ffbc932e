#pragma once

// Small latent U-Net noise predictor with timestep and text conditioning.
//
//   conv_in -> [res_k (-> down_k)] per level -> mid -> decoder
//
// The decoder consumes one skip tensor per level plus the middle output.
// These are the residual inputs that guidance signals are added to.

#include <nvs/nn.hpp>

#include <string>
#include <vector>

namespace nvs {

struct UNetConfig {
  Index latent_channels = 3;
  std::vector<Index> channels{32, 64, 64};
  Index time_dim = 64;
  Index text_dim = 32;

  void validate() const;
};

/// GroupNorm -> SiLU -> conv -> (+ embedding bias) -> GroupNorm -> SiLU -> conv, plus a skip path.
template <typename Scalar>
class ResBlock {
 public:
  ResBlock() = default;
  ResBlock(Index in, Index out, Index emb_dim, Initializer& init);

  Var<Scalar> operator()(const Var<Scalar>& x, const Var<Scalar>& emb) const;
  void register_params(ParamList<Scalar>& out, const std::string& prefix);

 private:
  GroupNorm<Scalar> norm1_, norm2_;
  Conv2d<Scalar> conv1_, conv2_, skip_;
  Linear<Scalar> emb_proj_;
  bool has_skip_ = false;
};

/// Sinusoidal timestep features [1, dim].
template <typename Scalar>
Var<Scalar> timestep_features(Index t, Index dim);

template <typename Scalar>
struct EncoderActivations {
  std::vector<Var<Scalar>> skips;  // one per level, finest first
  Var<Scalar> mid;
  Var<Scalar> embedding;  // [1, time_dim]
};

/// Input convolution, per-level residual blocks with downsampling, middle block,
/// and the timestep/text embedding. The guidance adapter owns a copy of it.
template <typename Scalar>
class UNetEncoder {
 public:
  UNetEncoder() = default;
  UNetEncoder(const UNetConfig& config, Initializer& init);

  /// x [latent_channels, S, S]; text [1, text_dim].
  EncoderActivations<Scalar> operator()(const Var<Scalar>& x, Index t, const Var<Scalar>& text) const;

  const UNetConfig& config() const { return config_; }
  void register_params(ParamList<Scalar>& out, const std::string& prefix);

 private:
  UNetConfig config_{};
  Linear<Scalar> time1_, time2_, text_proj_;
  Conv2d<Scalar> conv_in_;
  std::vector<ResBlock<Scalar>> res_;
  std::vector<Conv2d<Scalar>> down_;
  ResBlock<Scalar> mid_;
};

/// Residual signals added to the decoder inputs: one per skip plus the middle output.
template <typename Scalar>
struct GuidanceSignals {
  std::vector<Var<Scalar>> per_block;  // skips (finest first), then middle
};

/// residual + lambda * signal.
template <typename Scalar>
Var<Scalar> inject(const Var<Scalar>& residual, const Var<Scalar>& signal, Scalar lambda);

template <typename Scalar>
class UNet {
 public:
  UNet() = default;
  UNet(const UNetConfig& config, Initializer& init);

  /// Predicted noise for x_t at timestep t; guidance (optional) is injected with weight lambda.
  Var<Scalar> operator()(const Var<Scalar>& x, Index t, const Var<Scalar>& text,
                         const GuidanceSignals<Scalar>* guidance = nullptr, Scalar lambda = Scalar(1)) const;

  /// Shapes of the decoder residual inputs for a latent of the given size.
  std::vector<Shape> tap_shapes(Index latent_size) const;

  const UNetConfig& config() const { return encoder_.config(); }
  const UNetEncoder<Scalar>& encoder() const { return encoder_; }
  /// Zeroes the output convolution, making the prediction identically zero.
  void zero_output();
  void register_params(ParamList<Scalar>& out, const std::string& prefix);

 private:
  UNetEncoder<Scalar> encoder_;
  std::vector<ResBlock<Scalar>> dec_;
  std::vector<Conv2d<Scalar>> up_;
  GroupNorm<Scalar> out_norm_;
  Conv2d<Scalar> out_conv_;
};

}  // namespace nvs
