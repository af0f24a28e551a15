#include "selfroll/schedule.hpp"

#include <cmath>
#include <stdexcept>

namespace selfroll {

double NoiseSchedule::step_t(std::size_t j) const {
  if (j < 1 || j > raw_steps.size()) {
    throw std::invalid_argument("NoiseSchedule::step_t: step index " + std::to_string(j) +
                                " outside [1, " + std::to_string(raw_steps.size()) + "]");
  }
  return raw_steps[raw_steps.size() - j];
}

double NoiseSchedule::step_below(std::size_t j) const {
  return j <= 1 ? 0.0 : step_t(j - 1);
}

void NoiseSchedule::validate() const {
  if (raw_steps.empty()) throw std::invalid_argument("NoiseSchedule: no steps");
  if (shift_factor < 1.0) throw std::invalid_argument("NoiseSchedule: shift factor must be >= 1");
  for (std::size_t i = 0; i < raw_steps.size(); ++i) {
    if (raw_steps[i] < 0.0 || raw_steps[i] > 1000.0) {
      throw std::invalid_argument("NoiseSchedule: timestep outside [0, 1000]");
    }
    if (i > 0 && raw_steps[i] >= raw_steps[i - 1]) {
      throw std::invalid_argument("NoiseSchedule: timesteps must be strictly descending");
    }
  }
}

double timestep_shift(double k, double t) {
  if (t < 0.0 || t > 1000.0) {
    throw std::invalid_argument("timestep_shift: t = " + std::to_string(t) +
                                " outside [0, 1000]");
  }
  if (k < 1.0) throw std::invalid_argument("timestep_shift: k must be >= 1");
  const double tau = t / 1000.0;
  return (k * tau) / (1.0 + (k - 1.0) * tau) * 1000.0;
}

ForwardCoefficients forward_coefficients(const NoiseSchedule& schedule, double t) {
  const double shifted = timestep_shift(schedule.shift_factor, t);
  ForwardCoefficients c;
  c.t = t;
  c.sigma = shifted / 1000.0;
  c.alpha = 1.0 - c.sigma;
  return c;
}

NoisySample forward_perturb(Tape& tape, const Tensor& clean, const Tensor& epsilon, double t,
                            const NoiseSchedule& schedule) {
  if (clean.shape() != epsilon.shape()) {
    throw std::invalid_argument("forward_perturb: clean is " + shape_str(clean.shape()) +
                                ", epsilon is " + shape_str(epsilon.shape()));
  }
  const auto c = forward_coefficients(schedule, t);
  NoisySample out;
  out.t = t;
  out.epsilon = epsilon;
  if (t == 0.0) {
    // Exact at the clean endpoint regardless of rounding in the coefficients.
    out.frame = scale(tape, clean, 1.0);
  } else if (t == 1000.0) {
    out.frame = scale(tape, epsilon, 1.0);
  } else {
    out.frame = add(tape, scale(tape, clean, c.alpha), scale(tape, epsilon, c.sigma));
  }
  return out;
}

Tensor data_prediction(Tape& tape, const Tensor& v_hat, const NoisySample& noisy,
                       const NoiseSchedule& schedule, const Preconditioning& pc) {
  if (v_hat.shape() != noisy.frame.shape()) {
    throw std::invalid_argument("data_prediction: v_hat is " + shape_str(v_hat.shape()) +
                                ", frame is " + shape_str(noisy.frame.shape()));
  }
  const auto c = forward_coefficients(schedule, noisy.t);
  if (noisy.t == 0.0) {
    return scale(tape, noisy.frame, pc.c_skip);
  }
  return sub(tape, scale(tape, noisy.frame, pc.c_skip), scale(tape, v_hat, pc.c_out * c.sigma));
}

Tensor v_target(const Tensor& clean, const Tensor& epsilon) {
  if (clean.shape() != epsilon.shape()) {
    throw std::invalid_argument("v_target: shape mismatch");
  }
  std::vector<double> v(clean.size());
  auto cv = clean.value(), ev = epsilon.value();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = ev[i] - cv[i];
  return Tensor::from_data(clean.shape(), std::move(v));
}

}  // namespace selfroll
