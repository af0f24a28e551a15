#pragma once

#include "selfroll/tensor.hpp"

namespace selfroll {

struct OptimizerConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.0;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;  // decoupled
};

// Moment-based adaptive gradient descent with decoupled weight decay. Moments
// are exposed as named tensors so checkpoints can restore training bit-exactly.
class Optimizer {
 public:
  Optimizer() = default;
  Optimizer(OptimizerConfig cfg, const ParameterStore& params);

  void step(ParameterStore& params);
  std::size_t iterations() const { return iterations_; }

  // Serialization access: moment buffers aligned with the parameter order.
  std::vector<std::pair<std::string, Tensor>>& first_moments() { return m_; }
  std::vector<std::pair<std::string, Tensor>>& second_moments() { return v_; }
  const std::vector<std::pair<std::string, Tensor>>& first_moments() const { return m_; }
  const std::vector<std::pair<std::string, Tensor>>& second_moments() const { return v_; }
  void set_iterations(std::size_t n) { iterations_ = n; }
  const OptimizerConfig& config() const { return cfg_; }

 private:
  OptimizerConfig cfg_;
  std::vector<std::pair<std::string, Tensor>> m_;
  std::vector<std::pair<std::string, Tensor>> v_;
  std::size_t iterations_ = 0;
};

}  // namespace selfroll
