#pragma once

#include <optional>
#include <span>

#include "selfroll/transformer.hpp"

namespace selfroll {

// Denoising step the gradient attaches to, uniform over [1, T] per sequence.
struct TruncationDraw {
  std::size_t s = 1;
};

TruncationDraw draw_truncation(Rng& rng, const NoiseSchedule& schedule);

struct RolloutOptions {
  std::size_t condition = 0;
  std::size_t pos_offset = 0;
  // Forbid the final chunk from attending to the first chunk, mirroring the
  // local-attention training restriction for long generation.
  bool local_window = false;
  std::optional<std::size_t> cache_capacity;  // default: max_frames
};

struct RolloutResult {
  Tensor sequence;  // [max_frames x frame_dim]; step-s outputs, gradient-carrying
  KVCache cache;
  std::vector<Tensor> chunk_epsilons;  // the initial Gaussian draw per chunk
  TruncationDraw truncation;
};

// Autoregressive self-rollout with KV caching: per chunk, denoise from pure
// noise down to step s, record the step-s clean estimate with gradients
// enabled, cache its K/V detached, and re-noise gradient-free between steps.
RolloutResult self_forcing_rollout(Tape& tape, const ParameterStore& params,
                                   const ModelConfig& cfg, const NoiseSchedule& schedule,
                                   Rng& rng, TruncationDraw truncation,
                                   const RolloutOptions& opt = {});

// Full T-step sampler, gradient-free; the distribution this produces is the
// one training matches.
Tensor inference_rollout(const ParameterStore& params, const ModelConfig& cfg,
                         const NoiseSchedule& schedule, Rng& rng, const RolloutOptions& opt = {});

// Weighted mean over frames and dimensions of the squared v-prediction error.
Tensor frame_denoising_loss(Tape& tape, const Tensor& v_hat, const Tensor& target,
                            std::span<const double> frame_weights = {});

// Parallel TF training loss: every frame denoised at one shared timestep with
// clean ground-truth context.
Tensor teacher_forcing_step(Tape& tape, const ParameterStore& params, const ModelConfig& cfg,
                            const NoiseSchedule& schedule, const Tensor& data,
                            std::size_t condition, double shared_t, Rng& rng,
                            std::span<const double> frame_weights = {},
                            std::size_t pos_offset = 0);

// Parallel DF training loss: independently drawn timestep per frame, noisy
// context.
Tensor diffusion_forcing_step(Tape& tape, const ParameterStore& params, const ModelConfig& cfg,
                              const NoiseSchedule& schedule, const Tensor& data,
                              std::size_t condition, std::span<const double> t_per_frame,
                              Rng& rng, std::span<const double> frame_weights = {},
                              std::size_t pos_offset = 0);

}  // namespace selfroll
