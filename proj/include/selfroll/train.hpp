#pragma once

#include "selfroll/checkpoint.hpp"
#include "selfroll/config.hpp"

namespace selfroll {

struct IterationMetrics {
  std::uint64_t iteration = 0;
  double gen_loss = 0.0;
  double critic_loss = 0.0;  // NaN when the objective has no critic
  double wall_ms = 0.0;
};

// Whole state of a run. RNG streams are derived per iteration from the seed,
// so a resumed run replays the exact draw sequence of a straight run.
struct TrainState {
  RunConfig cfg;
  ParameterStore generator;
  ParameterStore critic;      // psi; empty for the denoise objective
  ParameterStore real_score;  // phi, frozen after pretraining; empty for denoise
  EMAState ema;
  Optimizer opt_g;
  Optimizer opt_c;
  std::uint64_t iteration = 0;
};

ParameterStore copy_params(const ParameterStore& src, bool requires_grad = true);

// Builds generator/critic/real-score stores; for distribution-matching
// objectives this pretrains the base denoiser on world data (with condition
// dropout for CFG) and freezes it as the real score.
TrainState init_training(const RunConfig& cfg);

IterationMetrics train_iteration(TrainState& state);

Checkpoint make_checkpoint(const TrainState& state);
TrainState restore_training(const Checkpoint& ckpt);

// Shared-timestep sequence denoising loss on ground-truth data; the
// pretraining objective for the real score and the evaluation-consistent
// counterpart of the critic loss.
Tensor sequence_denoising_loss(Tape& tape, ParameterStore& params, const ModelConfig& cfg,
                               const NoiseSchedule& schedule, const Tensor& data,
                               std::span<const double> t_per_frame, std::size_t condition,
                               Rng& rng);

}  // namespace selfroll
