#pragma once

#include <cstddef>
#include <deque>
#include <optional>
#include <span>
#include <vector>

#include "selfroll/schedule.hpp"
#include "selfroll/tensor.hpp"

namespace selfroll {

enum class Paradigm { teacher_forcing, diffusion_forcing, self_forcing_full };

struct ModelConfig {
  std::size_t frame_dim = 2;
  std::size_t tokens_per_frame = 2;  // p
  std::size_t model_dim = 16;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t chunk_size = 1;   // frames denoised jointly
  std::size_t max_frames = 16;  // training horizon N
  std::size_t condition_vocab = 2;
  std::size_t mlp_mult = 4;
  std::size_t position_table = 0;  // 0 means 4 * max_frames

  std::size_t pos_slots() const { return position_table ? position_table : 4 * max_frames; }
  std::size_t null_condition() const { return condition_vocab; }
  std::size_t chunk_count() const { return max_frames / chunk_size; }
  void validate() const;
};

// One frame's worth of tokens in a parallel forward: where it sits in the
// sequence and the timestep its tokens are conditioned on (0 for clean).
struct Slot {
  std::size_t abs_frame = 0;
  double t = 0.0;
};

struct AttentionMaskSpec {
  Paradigm paradigm = Paradigm::diffusion_forcing;
  std::size_t n_frames = 0;
  std::size_t tokens_per_frame = 0;
  BoolMatrix tokens;
};

// Token-level mask for the paradigm layouts. TF interleaves a clean and a
// noisy stream per chunk; DF/SF are chunk-causal over a single stream. When
// local_window is set (self-forcing only), the final chunk's rows may attend
// only to the most recent local_window frames.
AttentionMaskSpec build_mask(Paradigm paradigm, std::size_t n_frames,
                             std::size_t tokens_per_frame, std::size_t chunk_size,
                             std::optional<std::size_t> local_window = {});

// Fixed-capacity FIFO of per-frame K/V blocks, one queue per layer. Entries
// are plain values: gradients never flow into or out of the cache.
class KVCache {
 public:
  KVCache() = default;
  KVCache(std::size_t layers, std::size_t capacity_frames, std::size_t tokens_per_frame);

  std::size_t capacity() const { return capacity_; }
  std::size_t layer_count() const { return keys_.size(); }
  std::size_t size_frames() const { return abs_frames_.size(); }
  std::size_t token_count() const { return size_frames() * tokens_per_frame_; }
  const std::deque<std::size_t>& abs_frames() const { return abs_frames_; }

  // Splits the chunk tensors into per-frame blocks and appends them, evicting
  // the oldest frame first whenever the cache is full.
  void append_chunk(std::span<const Tensor> layer_keys, std::span<const Tensor> layer_values,
                    std::span<const std::size_t> chunk_abs_frames);

  // Concatenated [token_count x model_dim] constants, oldest frame first.
  Tensor keys(std::size_t layer) const;
  Tensor values(std::size_t layer) const;

 private:
  std::size_t capacity_ = 0;
  std::size_t tokens_per_frame_ = 0;
  std::vector<std::deque<Tensor>> keys_;    // per layer, per frame [p x model_dim]
  std::vector<std::deque<Tensor>> values_;  // same layout
  std::deque<std::size_t> abs_frames_;
};

struct ForwardResult {
  Tensor v_hat;   // [n_frames x frame_dim]
  Tensor hidden;  // [n_tokens x model_dim], after the final norm
  std::vector<Tensor> chunk_keys;    // per layer, this call's tokens
  std::vector<Tensor> chunk_values;  // per layer
};

ParameterStore init_generator_params(const ModelConfig& cfg, Rng& rng);

// Extra readout for the GAN critic: mean-pooled hidden -> scalar.
void add_discriminator_head(ParameterStore& params, const ModelConfig& cfg, Rng& rng);
Tensor discriminator_score(Tape& tape, const ParameterStore& params, const Tensor& hidden);

// Parallel forward over an explicit layout. frames is [slots x frame_dim];
// slot i's tokens carry its timestep embedding and position.
ForwardResult forward_masked(Tape& tape, const ParameterStore& params, const ModelConfig& cfg,
                             const NoiseSchedule& schedule, const Tensor& frames,
                             std::span<const Slot> slots, std::size_t condition,
                             const AttentionMaskSpec& mask, std::size_t pos_offset = 0);

// Current chunk attends over [cached tokens || chunk tokens] with full
// attention; the cache is not mutated. exclude_frames_below drops cached
// frames with abs_frame < the bound from the key set (the local-attention
// training restriction).
ForwardResult forward_cached(Tape& tape, const ParameterStore& params, const ModelConfig& cfg,
                             const NoiseSchedule& schedule, const Tensor& chunk_frames,
                             std::span<const Slot> slots, std::size_t condition,
                             const KVCache& cache, std::size_t pos_offset = 0,
                             std::optional<std::size_t> exclude_frames_below = {});

// Clean-chunk K/V at timestep 0 appended to the cache (evicting FIFO). The
// appended blocks are stop-gradient by construction.
void append_kv(Tape& tape, const ParameterStore& params, const ModelConfig& cfg,
               const NoiseSchedule& schedule, const Tensor& clean_chunk,
               std::span<const Slot> slots, std::size_t condition, KVCache& cache,
               std::size_t pos_offset = 0);

}  // namespace selfroll
