#include "selfroll/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace selfroll {

Optimizer::Optimizer(OptimizerConfig cfg, const ParameterStore& params) : cfg_(cfg) {
  for (const auto& [name, t] : params) {
    m_.emplace_back(name, Tensor::zeros(t.shape()));
    v_.emplace_back(name, Tensor::zeros(t.shape()));
  }
}

void Optimizer::step(ParameterStore& params) {
  if (m_.size() != params.count()) {
    throw std::invalid_argument("Optimizer::step: parameter count changed");
  }
  ++iterations_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(iterations_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(iterations_));

  std::size_t i = 0;
  for (auto& [name, t] : params) {
    if (m_[i].first != name) {
      throw std::invalid_argument("Optimizer::step: parameter order changed");
    }
    auto value = t.mutable_value();
    auto& node = *t.node();
    if (node.grad.size() != value.size()) node.grad.assign(value.size(), 0.0);
    auto mv = m_[i].second.mutable_value();
    auto vv = v_[i].second.mutable_value();
    for (std::size_t j = 0; j < value.size(); ++j) {
      const double g = node.grad[j];
      mv[j] = cfg_.beta1 * mv[j] + (1.0 - cfg_.beta1) * g;
      vv[j] = cfg_.beta2 * vv[j] + (1.0 - cfg_.beta2) * g * g;
      const double mhat = mv[j] / bc1;
      const double vhat = vv[j] / bc2;
      value[j] -= cfg_.learning_rate * (mhat / (std::sqrt(vhat) + cfg_.epsilon) +
                                        cfg_.weight_decay * value[j]);
    }
    ++i;
  }
}

}  // namespace selfroll
