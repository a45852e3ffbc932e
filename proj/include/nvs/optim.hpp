#pragma once

#include <nvs/nn.hpp>

#include <map>
#include <string>

namespace nvs {

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adaptive-moment optimizer over a parameter list. Parameters that received
/// no gradient in a step are left untouched.
template <typename Scalar>
class Adam {
 public:
  Adam() = default;
  Adam(ParamList<Scalar> params, AdamConfig config);

  void step();
  void zero_grad() { zero_grads(params_); }

  Index step_count() const { return step_; }
  const AdamConfig& config() const { return config_; }
  void set_learning_rate(double rate) { config_.learning_rate = rate; }
  const ParamList<Scalar>& params() const { return params_; }

  /// Moments keyed by "<param>.m" / "<param>.v" plus the step counter.
  std::map<std::string, ArrayX<double>> state() const;
  void load_state(const std::map<std::string, ArrayX<double>>& state);

 private:
  ParamList<Scalar> params_;
  AdamConfig config_{};
  Index step_ = 0;
  std::vector<ArrayX<double>> m_, v_;
};

}  // namespace nvs
