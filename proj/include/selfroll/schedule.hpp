#pragma once

#include <vector>

#include "selfroll/tensor.hpp"

namespace selfroll {

// Time convention: t = 1000 is pure noise, t = 0 is clean data, and the
// corruption is x_t = (1 - t'/1000) x + (t'/1000) eps with t' the shifted
// timestep. The network predicts v = eps - x.
struct NoiseSchedule {
  std::vector<double> raw_steps = {1000.0, 750.0, 500.0, 250.0};  // descending t_T..t_1
  double shift_factor = 5.0;

  std::size_t step_count() const { return raw_steps.size(); }
  // 1-based step index j (1 = least noisy); raw_steps.front() is t_T.
  double step_t(std::size_t j) const;
  // t_{j-1} with t_0 = 0.
  double step_below(std::size_t j) const;

  void validate() const;
};

struct ForwardCoefficients {
  double t = 0.0;
  double alpha = 1.0;  // clean-signal coefficient
  double sigma = 0.0;  // noise coefficient; alpha + sigma == 1
};

struct Preconditioning {
  double c_skip = 1.0;
  double c_in = 1.0;
  double c_out = 1.0;
  // c_noise is the identity on the shifted timestep.
};

struct NoisySample {
  Tensor frame;
  double t = 0.0;
  Tensor epsilon;  // the Gaussian draw used, kept for loss targets
};

// Monotone bijection of [0, 1000] onto itself; fixed points at 0 and 1000.
double timestep_shift(double k, double t);

ForwardCoefficients forward_coefficients(const NoiseSchedule& schedule, double t);

// x_t = alpha * clean + sigma * epsilon, deterministic given epsilon.
NoisySample forward_perturb(Tape& tape, const Tensor& clean, const Tensor& epsilon, double t,
                            const NoiseSchedule& schedule);

// Recover the predicted clean frame from the v-prediction network output:
// x0_hat = x_t - sigma * v_hat. At t = 0 this returns the frame unchanged.
Tensor data_prediction(Tape& tape, const Tensor& v_hat, const NoisySample& noisy,
                       const NoiseSchedule& schedule, const Preconditioning& pc = {});

// v-prediction target eps - x for a sample produced by forward_perturb.
Tensor v_target(const Tensor& clean, const Tensor& epsilon);

}  // namespace selfroll
