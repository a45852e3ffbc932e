#pragma once

// Trainable layers and parameter bookkeeping shared by every model in the
// pipeline. Layers own their parameters as leaf Vars and expose them through
// register_params(), which hands out (name, pointer) pairs used for
// optimization, cloning, freezing, fingerprints and checkpoints.

#include <nvs/ops.hpp>

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace nvs {

template <typename Scalar>
using ParamList = std::vector<std::pair<std::string, Var<Scalar>*>>;

/// Deterministic parameter initializer. Values are drawn in double so float
/// and double models built from the same seed agree up to rounding.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  template <typename Scalar>
  Var<Scalar> uniform(Shape shape, double bound) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    ArrayX<Scalar> v(numel(shape));
    for (auto& x : v) x = static_cast<Scalar>(dist(rng_));
    return Var<Scalar>::parameter(std::move(v), std::move(shape));
  }

  template <typename Scalar>
  Var<Scalar> constant(Shape shape, double value) {
    const Index n = numel(shape);
    return Var<Scalar>::parameter(ArrayX<Scalar>::Constant(n, static_cast<Scalar>(value)), std::move(shape));
  }

  std::mt19937_64& rng() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

template <typename Scalar>
class Linear {
 public:
  Linear() = default;
  Linear(Index in, Index out, Initializer& init, bool with_bias = true, bool zero_init = false);

  Var<Scalar> operator()(const Var<Scalar>& x) const { return linear(x, weight, bias); }
  Index in_features() const { return weight.dim(0); }
  Index out_features() const { return weight.dim(1); }
  void register_params(ParamList<Scalar>& out, const std::string& prefix);

  Var<Scalar> weight;  // [in, out]
  Var<Scalar> bias;    // [out], may be undefined
};

template <typename Scalar>
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(Index width, Initializer& init);

  Var<Scalar> operator()(const Var<Scalar>& x) const { return layer_norm(x, gain, shift); }
  void register_params(ParamList<Scalar>& out, const std::string& prefix);

  Var<Scalar> gain, shift;
};

/// Pre-norm transformer block with self-attention restricted to groups of
/// consecutive rows (one group = one ray's points, or one ray's views).
template <typename Scalar>
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(Index width, Index heads, Index mlp_ratio, Initializer& init);

  Var<Scalar> operator()(const Var<Scalar>& x, Index group, const Mask& key_valid) const;
  void register_params(ParamList<Scalar>& out, const std::string& prefix);

 private:
  Index heads_ = 1;
  LayerNorm<Scalar> norm1_, norm2_;
  Linear<Scalar> qkv_, proj_, fc1_, fc2_;
};

template <typename Scalar>
class TransformerEncoder {
 public:
  TransformerEncoder() = default;
  TransformerEncoder(Index width, Index layers, Index heads, Initializer& init);

  Var<Scalar> operator()(const Var<Scalar>& x, Index group, const Mask& key_valid = {}) const;
  void register_params(ParamList<Scalar>& out, const std::string& prefix);

 private:
  std::vector<TransformerBlock<Scalar>> blocks_;
  LayerNorm<Scalar> final_norm_;
};

template <typename Scalar>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(Index in, Index out, Index kernel, Index stride, Index padding, Initializer& init, bool with_bias = true,
         bool zero_init = false);

  Var<Scalar> operator()(const Var<Scalar>& x) const { return conv2d(x, weight, bias, stride_, padding_); }
  Index in_channels() const { return weight.dim(1); }
  Index out_channels() const { return weight.dim(0); }
  void register_params(ParamList<Scalar>& out, const std::string& prefix);

  Var<Scalar> weight;  // [out, in, k, k]
  Var<Scalar> bias;

 private:
  Index stride_ = 1, padding_ = 0;
};

template <typename Scalar>
class GroupNorm {
 public:
  GroupNorm() = default;
  GroupNorm(Index channels, Index groups, Initializer& init);

  Var<Scalar> operator()(const Var<Scalar>& x) const { return group_norm(x, groups_, gain, shift); }
  void register_params(ParamList<Scalar>& out, const std::string& prefix);

  Var<Scalar> gain, shift;

 private:
  Index groups_ = 1;
};

/// Largest group count <= preferred that divides channels.
Index group_count(Index channels, Index preferred = 8);

// Parameter-list utilities.

template <typename Scalar>
Index parameter_count(const ParamList<Scalar>& params);

template <typename Scalar>
void set_trainable(const ParamList<Scalar>& params, bool trainable);

template <typename Scalar>
void zero_grads(const ParamList<Scalar>& params);

/// Replaces every registered Var by an independent deep copy, so a module
/// copied by value stops sharing storage with its source.
template <typename Scalar>
void detach_storage(const ParamList<Scalar>& params);

/// Copies values by matching names; throws ConfigError on any mismatch.
template <typename Scalar>
void copy_values(const ParamList<Scalar>& from, const ParamList<Scalar>& to);

/// SHA-256 over parameter names, shapes and values (hex string).
template <typename Scalar>
std::string fingerprint(const ParamList<Scalar>& params);

/// Copy of a module whose parameters no longer share storage with the source.
template <typename Scalar, typename Module>
Module deep_copy(const Module& module) {
  Module copy = module;
  ParamList<Scalar> params;
  copy.register_params(params, "");
  detach_storage(params);
  return copy;
}

}  // namespace nvs
