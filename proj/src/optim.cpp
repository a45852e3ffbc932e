#include <nvs/errors.hpp>
#include <nvs/optim.hpp>

#include <cmath>

namespace nvs {

template <typename S>
Adam<S>::Adam(ParamList<S> params, AdamConfig config) : params_(std::move(params)), config_(config) {
  if (!(config.learning_rate > 0)) throw ConfigError("learning rate must be positive");
  for (const auto& [name, v] : params_) {
    m_.push_back(ArrayX<double>::Zero(v->size()));
    v_.push_back(ArrayX<double>::Zero(v->size()));
  }
}

template <typename S>
void Adam<S>::step() {
  ++step_;
  const double c1 = 1 - std::pow(config_.beta1, static_cast<double>(step_));
  const double c2 = 1 - std::pow(config_.beta2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Var<S>& p = *params_[i].second;
    if (!p.requires_grad() || !p.has_grad()) continue;
    const ArrayX<double> g = p.grad().template cast<double>();
    m_[i] = config_.beta1 * m_[i] + (1 - config_.beta1) * g;
    v_[i] = config_.beta2 * v_[i] + (1 - config_.beta2) * g.square();
    const ArrayX<double> update = config_.learning_rate * (m_[i] / c1) / ((v_[i] / c2).sqrt() + config_.epsilon);
    p.value_mutable() -= update.template cast<S>();
  }
}

template <typename S>
std::map<std::string, ArrayX<double>> Adam<S>::state() const {
  std::map<std::string, ArrayX<double>> out;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    out[params_[i].first + ".m"] = m_[i];
    out[params_[i].first + ".v"] = v_[i];
  }
  out["step"] = ArrayX<double>::Constant(1, static_cast<double>(step_));
  return out;
}

template <typename S>
void Adam<S>::load_state(const std::map<std::string, ArrayX<double>>& state) {
  auto fetch = [&](const std::string& key, Index size) -> const ArrayX<double>& {
    auto it = state.find(key);
    if (it == state.end()) throw ConfigError("optimizer state is missing '" + key + "'");
    if (it->second.size() != size) throw ConfigError("optimizer state '" + key + "' has the wrong size");
    return it->second;
  };
  for (std::size_t i = 0; i < params_.size(); ++i) {
    m_[i] = fetch(params_[i].first + ".m", params_[i].second->size());
    v_[i] = fetch(params_[i].first + ".v", params_[i].second->size());
  }
  step_ = static_cast<Index>(fetch("step", 1)[0]);
}

template class Adam<float>;
template class Adam<double>;

}  // namespace nvs
