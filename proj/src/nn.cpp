#include <nvs/errors.hpp>
#include <nvs/nn.hpp>

#include <openssl/evp.h>

#include <cmath>
#include <cstdio>
#include <map>
#include <memory>

namespace nvs {

namespace {

template <typename S>
void add_param(ParamList<S>& out, const std::string& prefix, const char* name, Var<S>& v) {
  if (v.defined()) out.emplace_back(prefix + name, &v);
}

}  // namespace

template <typename S>
Linear<S>::Linear(Index in, Index out, Initializer& init, bool with_bias, bool zero_init) {
  const double bound = zero_init ? 0.0 : 1.0 / std::sqrt(static_cast<double>(in));
  weight = zero_init ? init.constant<S>({in, out}, 0.0) : init.uniform<S>({in, out}, bound);
  if (with_bias) bias = zero_init ? init.constant<S>({out}, 0.0) : init.uniform<S>({out}, bound);
}

template <typename S>
void Linear<S>::register_params(ParamList<S>& out, const std::string& prefix) {
  add_param(out, prefix, "weight", weight);
  add_param(out, prefix, "bias", bias);
}

template <typename S>
LayerNorm<S>::LayerNorm(Index width, Initializer& init)
    : gain(init.constant<S>({width}, 1.0)), shift(init.constant<S>({width}, 0.0)) {}

template <typename S>
void LayerNorm<S>::register_params(ParamList<S>& out, const std::string& prefix) {
  add_param(out, prefix, "gain", gain);
  add_param(out, prefix, "shift", shift);
}

template <typename S>
TransformerBlock<S>::TransformerBlock(Index width, Index heads, Index mlp_ratio, Initializer& init)
    : heads_(heads),
      norm1_(width, init),
      norm2_(width, init),
      qkv_(width, 3 * width, init),
      proj_(width, width, init),
      fc1_(width, mlp_ratio * width, init),
      fc2_(mlp_ratio * width, width, init) {
  if (width % heads != 0) throw ConfigError("transformer width must be divisible by the head count");
}

template <typename S>
Var<S> TransformerBlock<S>::operator()(const Var<S>& x, Index group, const Mask& key_valid) const {
  Var<S> h = add(x, proj_(grouped_attention(qkv_(norm1_(x)), group, heads_, key_valid)));
  return add(h, fc2_(gelu(fc1_(norm2_(h)))));
}

template <typename S>
void TransformerBlock<S>::register_params(ParamList<S>& out, const std::string& prefix) {
  norm1_.register_params(out, prefix + "norm1.");
  qkv_.register_params(out, prefix + "qkv.");
  proj_.register_params(out, prefix + "proj.");
  norm2_.register_params(out, prefix + "norm2.");
  fc1_.register_params(out, prefix + "fc1.");
  fc2_.register_params(out, prefix + "fc2.");
}

template <typename S>
TransformerEncoder<S>::TransformerEncoder(Index width, Index layers, Index heads, Initializer& init)
    : final_norm_(width, init) {
  if (layers < 1) throw ConfigError("transformer needs at least one layer");
  for (Index i = 0; i < layers; ++i) blocks_.emplace_back(width, heads, 2, init);
}

template <typename S>
Var<S> TransformerEncoder<S>::operator()(const Var<S>& x, Index group, const Mask& key_valid) const {
  Var<S> h = x;
  for (const auto& block : blocks_) h = block(h, group, key_valid);
  return final_norm_(h);
}

template <typename S>
void TransformerEncoder<S>::register_params(ParamList<S>& out, const std::string& prefix) {
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].register_params(out, prefix + "block" + std::to_string(i) + ".");
  final_norm_.register_params(out, prefix + "final_norm.");
}

template <typename S>
Conv2d<S>::Conv2d(Index in, Index out, Index kernel, Index stride, Index padding, Initializer& init, bool with_bias,
                  bool zero_init)
    : stride_(stride), padding_(padding) {
  const double bound = zero_init ? 0.0 : 1.0 / std::sqrt(static_cast<double>(in * kernel * kernel));
  weight = zero_init ? init.constant<S>({out, in, kernel, kernel}, 0.0)
                     : init.uniform<S>({out, in, kernel, kernel}, bound);
  if (with_bias) bias = zero_init ? init.constant<S>({out}, 0.0) : init.uniform<S>({out}, bound);
}

template <typename S>
void Conv2d<S>::register_params(ParamList<S>& out, const std::string& prefix) {
  add_param(out, prefix, "weight", weight);
  add_param(out, prefix, "bias", bias);
}

template <typename S>
GroupNorm<S>::GroupNorm(Index channels, Index groups, Initializer& init)
    : gain(init.constant<S>({channels}, 1.0)), shift(init.constant<S>({channels}, 0.0)), groups_(groups) {
  if (channels % groups != 0) throw ConfigError("group norm: channels not divisible by groups");
}

template <typename S>
void GroupNorm<S>::register_params(ParamList<S>& out, const std::string& prefix) {
  add_param(out, prefix, "gain", gain);
  add_param(out, prefix, "shift", shift);
}

Index group_count(Index channels, Index preferred) {
  for (Index g = std::min(preferred, channels); g > 1; --g)
    if (channels % g == 0) return g;
  return 1;
}

template <typename S>
Index parameter_count(const ParamList<S>& params) {
  Index n = 0;
  for (const auto& [name, v] : params) n += v->size();
  return n;
}

template <typename S>
void set_trainable(const ParamList<S>& params, bool trainable) {
  for (const auto& [name, v] : params) {
    v->set_requires_grad(trainable);
    v->zero_grad();
  }
}

template <typename S>
void zero_grads(const ParamList<S>& params) {
  for (const auto& [name, v] : params) v->zero_grad();
}

template <typename S>
void detach_storage(const ParamList<S>& params) {
  for (const auto& [name, v] : params) *v = v->clone();
}

template <typename S>
void copy_values(const ParamList<S>& from, const ParamList<S>& to) {
  std::map<std::string, const Var<S>*> source;
  for (const auto& [name, v] : from) source[name] = v;
  if (source.size() != to.size()) throw ConfigError("parameter sets differ in size");
  for (const auto& [name, v] : to) {
    auto it = source.find(name);
    if (it == source.end()) throw ConfigError("missing parameter '" + name + "'");
    if (it->second->shape() != v->shape()) {
      throw ConfigError("parameter '" + name + "' has shape " + shape_string(it->second->shape()) + ", expected " +
                        shape_string(v->shape()));
    }
    v->value_mutable() = it->second->value();
  }
}

template <typename S>
std::string fingerprint(const ParamList<S>& params) {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw std::runtime_error("sha256 init failed");
  for (const auto& [name, v] : params) {
    EVP_DigestUpdate(ctx.get(), name.data(), name.size() + 1);
    for (Index d : v->shape()) {
      const std::int64_t d64 = d;
      EVP_DigestUpdate(ctx.get(), &d64, sizeof d64);
    }
    EVP_DigestUpdate(ctx.get(), v->value().data(), sizeof(S) * static_cast<std::size_t>(v->size()));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), digest, &len);
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", digest[i]);
    hex += buf;
  }
  return hex;
}

#define NVS_INSTANTIATE_NN(S)                                                   \
  template class Linear<S>;                                                     \
  template class LayerNorm<S>;                                                  \
  template class TransformerBlock<S>;                                           \
  template class TransformerEncoder<S>;                                         \
  template class Conv2d<S>;                                                     \
  template class GroupNorm<S>;                                                  \
  template Index parameter_count<S>(const ParamList<S>&);                       \
  template void set_trainable<S>(const ParamList<S>&, bool);                    \
  template void zero_grads<S>(const ParamList<S>&);                             \
  template void detach_storage<S>(const ParamList<S>&);                         \
  template void copy_values<S>(const ParamList<S>&, const ParamList<S>&);       \
  template std::string fingerprint<S>(const ParamList<S>&);

NVS_INSTANTIATE_NN(float)
NVS_INSTANTIATE_NN(double)

}  // namespace nvs
