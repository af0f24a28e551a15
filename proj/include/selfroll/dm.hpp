#pragma once

#include <functional>
#include <span>
#include <vector>

#include "selfroll/rollout.hpp"

namespace selfroll {

struct DMDConfig {
  double cfg_weight = 3.0;      // real-score guidance
  std::size_t update_ratio = 5; // critic updates per generator update
  double t_grid_step = 25.0;    // noise-injection grid: multiples inside (0, 1000)
  bool restrict_t_to_truncation = false;
  bool per_frame_t = false;     // default: one shared t per sequence
};

struct SiDConfig {
  double alpha = 1.0;  // 0.5 is the exact Fisher-divergence gradient case
};

struct GANConfig {
  double lambda_reg = 30.0;
  double sigma_perturb = 0.05;
};

struct EMAState {
  double decay = 0.99;
  std::vector<std::pair<std::string, Tensor>> shadow;

  static EMAState init_from(const ParameterStore& params, double decay);
};

// shadow <- decay * shadow + (1 - decay) * current
void ema_update(EMAState& ema, const ParameterStore& current);
ParameterStore ema_snapshot(const EMAState& ema);

// Temporarily clears requires_grad so a store acts as a fixed function.
class ParamFreeze {
 public:
  explicit ParamFreeze(ParameterStore& ps);
  ~ParamFreeze();
  ParamFreeze(const ParamFreeze&) = delete;
  ParamFreeze& operator=(const ParamFreeze&) = delete;

 private:
  ParameterStore& ps_;
  std::vector<bool> saved_;
};

// A denoiser over whole sequences: noisy [N x frame_dim] -> predicted clean.
using SeqDenoiser = std::function<Tensor(Tape&, const Tensor&)>;

// Per-frame forward coefficients rendered as [n x d] constants.
Tensor alpha_matrix(const NoiseSchedule& schedule, std::span<const double> t_per_frame,
                    std::size_t frame_dim);
Tensor sigma_matrix(const NoiseSchedule& schedule, std::span<const double> t_per_frame,
                    std::size_t frame_dim);

// x_t = alpha .* x + sigma .* eps with per-frame coefficients; differentiable
// through x.
Tensor perturb_sequence(Tape& tape, const Tensor& seq, const Tensor& eps,
                        std::span<const double> t_per_frame, const NoiseSchedule& schedule);

// Runs the whole noisy sequence through the network in chunk-causal parallel
// mode and reconstructs the predicted clean sequence.
Tensor denoise_sequence(Tape& tape, const ParameterStore& params, const ModelConfig& cfg,
                        const NoiseSchedule& schedule, const Tensor& noisy_seq,
                        std::span<const double> t_per_frame, std::size_t condition);

// f_uncond + w * (f_cond - f_uncond); exact passthrough at w = 0 and w = 1.
Tensor real_score_with_cfg(Tape& tape, const ParameterStore& phi, const ModelConfig& cfg,
                           const NoiseSchedule& schedule, const Tensor& noisy_seq,
                           std::span<const double> t_per_frame, std::size_t condition,
                           double w_cfg);

// Noise-injection timestep. DMD/SiD default to the grid; the truncation
// restriction samples uniformly from [t_{s-1}, t_s].
double draw_dm_timestep(Rng& rng, const DMDConfig& dm, const NoiseSchedule& schedule,
                        std::size_t s);

// L = 1/2 || x_hat - sg[x_hat - (f_fake - f_real)] ||^2, mean over batch of 1.
// score_diff holds the value of f_fake(x_t) - f_real(x_t); only x_hat carries
// gradient.
Tensor dmd_loss_from_diff(Tape& tape, const Tensor& x_hat, const Tensor& score_diff);

// Transformer-backed DMD generator loss: injects noise at t, evaluates critic
// and CFG-guided real score under no_grad, and routes the difference through
// the stop-gradient identity.
Tensor dmd_generator_loss(Tape& tape, const Tensor& x_hat, ParameterStore& phi,
                          ParameterStore& psi, const ModelConfig& cfg,
                          const NoiseSchedule& schedule, std::span<const double> t_per_frame,
                          std::size_t condition, const DMDConfig& dm, Rng& rng);

// SiD loss with explicit denoiser evaluators (used both by the transformer
// wrapper and the analytic oracles); gradients flow through x_hat and through
// the evaluators' inputs.
Tensor sid_loss_from_denoisers(Tape& tape, const Tensor& x_hat, const Tensor& eps,
                               std::span<const double> t_per_frame,
                               const NoiseSchedule& schedule, const SeqDenoiser& f_real,
                               const SeqDenoiser& f_fake, double alpha);

Tensor sid_generator_loss(Tape& tape, const Tensor& x_hat, ParameterStore& phi,
                          ParameterStore& psi, const ModelConfig& cfg,
                          const NoiseSchedule& schedule, std::span<const double> t_per_frame,
                          std::size_t condition, const SiDConfig& sid, const DMDConfig& dm,
                          Rng& rng);

// v-prediction MSE on detached generator samples; trains the fake score.
Tensor critic_denoising_loss(Tape& tape, ParameterStore& psi, const Tensor& x_hat_detached,
                             const ModelConfig& cfg, const NoiseSchedule& schedule,
                             std::span<const double> t_per_frame, std::size_t condition,
                             Rng& rng);

struct GanLossResult {
  Tensor d_loss;  // includes lambda * reg
  Tensor g_loss;
  Tensor reg;
};

// Relativistic pairing over matched batch indices with finite-difference R1+R2
// regularization. The caller controls which side carries gradients by passing
// detached or taped batches and freezing parameter stores.
GanLossResult gan_losses(Tape& tape, std::span<const Tensor> real_batch,
                         std::span<const Tensor> fake_batch,
                         const std::function<Tensor(Tape&, const Tensor&)>& discriminator,
                         std::span<const double> t_per_frame, const NoiseSchedule& schedule,
                         const GANConfig& gan, Rng& rng);

// Discriminator evaluator for the transformer critic: backbone hidden states
// at timestep t, mean-pooled through the readout head.
std::function<Tensor(Tape&, const Tensor&)> make_discriminator(
    ParameterStore& psi_disc, const ModelConfig& cfg, const NoiseSchedule& schedule,
    std::span<const double> t_per_frame, std::size_t condition);

}  // namespace selfroll
