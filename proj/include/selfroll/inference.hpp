#pragma once

#include <cstdint>
#include <utility>

#include "selfroll/rollout.hpp"
#include "selfroll/world.hpp"

namespace selfroll {

enum class CacheKind { no_cache, recompute_window, rolling };

struct CacheStrategy {
  CacheKind kind = CacheKind::rolling;
  std::size_t window = 16;  // L, in frames
  std::size_t stride = 1;   // frames dropped per shift (recompute-window only)
};

struct GenerationTrace {
  std::vector<double> frame_wall_ms;
  std::vector<std::uint64_t> frame_attn_flops;
  std::vector<double> cumulative_ms;
  double first_frame_latency_ms = 0.0;
};

struct GenerateOptions {
  std::size_t condition = 0;
  std::size_t pos_offset = 0;
};

// Rolling KV cache: FIFO eviction at capacity, K/V never recomputed; per-frame
// cost is flat once the cache is full.
std::pair<Tensor, GenerationTrace> generate_rolling(const ParameterStore& params,
                                                    const ModelConfig& cfg,
                                                    const NoiseSchedule& schedule,
                                                    std::size_t m_frames, std::size_t window,
                                                    Rng& rng, const GenerateOptions& opt = {});

// Sliding window that rebuilds K/V for the overlap from stored clean frames on
// every shift.
std::pair<Tensor, GenerationTrace> generate_recompute_window(
    const ParameterStore& params, const ModelConfig& cfg, const NoiseSchedule& schedule,
    std::size_t m_frames, std::size_t window, std::size_t stride, Rng& rng,
    const GenerateOptions& opt = {});

// No cache at all: full window attention rebuilt at every denoising step.
std::pair<Tensor, GenerationTrace> generate_no_cache(const ParameterStore& params,
                                                     const ModelConfig& cfg,
                                                     const NoiseSchedule& schedule,
                                                     std::size_t m_frames, std::size_t window,
                                                     Rng& rng, const GenerateOptions& opt = {});

std::pair<Tensor, GenerationTrace> generate(const CacheStrategy& strategy,
                                            const ParameterStore& params, const ModelConfig& cfg,
                                            const NoiseSchedule& schedule, std::size_t m_frames,
                                            Rng& rng, const GenerateOptions& opt = {});

// Rolling-cache generations grouped per frame index: element i is
// [n_samples x frame_dim] of frame i across sequences.
std::vector<Tensor> sample_frames_by_index(const ParameterStore& params, const ModelConfig& cfg,
                                           const NoiseSchedule& schedule, std::size_t m_frames,
                                           std::size_t window, std::size_t n_samples,
                                           std::size_t condition, Rng& rng);

struct ExtrapolationReport {
  DriftReport with_fix;     // trained with the local attention window
  DriftReport without_fix;  // naive training
  std::size_t horizon = 0;  // training frame count
  std::size_t beyond_count = 0;
  double beyond_mean_with = 0.0;
  double beyond_mean_without = 0.0;
};

// Per-frame-index drift against fresh ground truth for two checkpoints that
// differ only in the local-window training flag. Configs must match.
ExtrapolationReport extrapolation_quality(const ParameterStore& with_fix,
                                          const ModelConfig& cfg_with,
                                          const ParameterStore& without_fix,
                                          const ModelConfig& cfg_without,
                                          const NoiseSchedule& schedule, const WorldConfig& world,
                                          std::size_t m_frames, std::size_t n_samples,
                                          std::size_t condition, Rng& rng);

}  // namespace selfroll
