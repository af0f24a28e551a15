#include "selfroll/rollout.hpp"

#include <stdexcept>

namespace selfroll {

namespace {

std::vector<Slot> chunk_slots(const ModelConfig& cfg, std::size_t chunk_index, double t) {
  std::vector<Slot> slots(cfg.chunk_size);
  for (std::size_t f = 0; f < cfg.chunk_size; ++f) {
    slots[f] = Slot{chunk_index * cfg.chunk_size + f, t};
  }
  return slots;
}

}  // namespace

TruncationDraw draw_truncation(Rng& rng, const NoiseSchedule& schedule) {
  return TruncationDraw{1 + static_cast<std::size_t>(rng.uniform_int(schedule.step_count()))};
}

RolloutResult self_forcing_rollout(Tape& tape, const ParameterStore& params,
                                   const ModelConfig& cfg, const NoiseSchedule& schedule,
                                   Rng& rng, TruncationDraw truncation,
                                   const RolloutOptions& opt) {
  cfg.validate();
  schedule.validate();
  const std::size_t T = schedule.step_count();
  if (truncation.s < 1 || truncation.s > T) {
    throw std::invalid_argument("self_forcing_rollout: s must lie in [1, " + std::to_string(T) +
                                "]");
  }
  const std::size_t capacity = opt.cache_capacity.value_or(cfg.max_frames);
  if (capacity < cfg.max_frames) {
    throw std::invalid_argument(
        "self_forcing_rollout: cache must hold every frame generated during training");
  }

  RolloutResult result;
  result.truncation = truncation;
  result.cache = KVCache(cfg.layers, capacity, cfg.tokens_per_frame);

  const std::size_t n_chunks = cfg.chunk_count();
  const std::size_t c = cfg.chunk_size;
  std::vector<Tensor> outputs;
  outputs.reserve(n_chunks);

  for (std::size_t i = 0; i < n_chunks; ++i) {
    std::optional<std::size_t> exclude;
    if (opt.local_window && n_chunks > 1 && i == n_chunks - 1) {
      exclude = c;  // the final chunk cannot attend to the first chunk
    }

    Tensor x;  // current noisy chunk, plain value
    if (!tape.replaying()) {
      Tensor eps0 = Tensor::randn(rng, {c, cfg.frame_dim});
      result.chunk_epsilons.push_back(eps0);
      x = eps0;  // x_{t_T} is the draw itself
    }

    for (std::size_t j = T; j >= truncation.s; --j) {
      const double t_j = schedule.step_t(j);
      if (j == truncation.s) {
        Tensor x_in = tape.stop_gradient(x);
        auto slots = chunk_slots(cfg, i, t_j);
        ForwardResult fwd = forward_cached(tape, params, cfg, schedule, x_in, slots,
                                           opt.condition, result.cache, opt.pos_offset, exclude);
        NoisySample noisy;
        noisy.frame = x_in;
        noisy.t = t_j;
        Tensor x0 = data_prediction(tape, fwd.v_hat, noisy, schedule);
        outputs.push_back(x0);
        auto clean_slots = chunk_slots(cfg, i, 0.0);
        append_kv(tape, params, cfg, schedule, x0, clean_slots, opt.condition, result.cache,
                  opt.pos_offset);
      } else if (!tape.replaying()) {
        auto ng = tape.no_grad();
        auto slots = chunk_slots(cfg, i, t_j);
        ForwardResult fwd = forward_cached(tape, params, cfg, schedule, x, slots, opt.condition,
                                           result.cache, opt.pos_offset, exclude);
        NoisySample noisy;
        noisy.frame = x;
        noisy.t = t_j;
        Tensor x0 = data_prediction(tape, fwd.v_hat, noisy, schedule);
        Tensor eps = Tensor::randn(rng, {c, cfg.frame_dim});
        x = forward_perturb(tape, x0, eps, schedule.step_below(j), schedule).frame;
      }
    }
  }
  result.sequence = concat_rows(tape, outputs);
  return result;
}

Tensor inference_rollout(const ParameterStore& params, const ModelConfig& cfg,
                         const NoiseSchedule& schedule, Rng& rng, const RolloutOptions& opt) {
  Tape tape;
  auto ng = tape.no_grad();
  RolloutResult r = self_forcing_rollout(tape, params, cfg, schedule, rng, TruncationDraw{1}, opt);
  return r.sequence.detached_copy();
}

Tensor frame_denoising_loss(Tape& tape, const Tensor& v_hat, const Tensor& target,
                            std::span<const double> frame_weights) {
  if (v_hat.rows() == 0) {
    throw std::invalid_argument("frame_denoising_loss: empty sequence");
  }
  if (v_hat.shape() != target.shape()) {
    throw std::invalid_argument("frame_denoising_loss: prediction is " +
                                shape_str(v_hat.shape()) + ", target is " +
                                shape_str(target.shape()));
  }
  Tensor diff = sub(tape, v_hat, target);
  Tensor sq = mul(tape, diff, diff);
  if (!frame_weights.empty()) {
    if (frame_weights.size() != v_hat.rows()) {
      throw std::invalid_argument("frame_denoising_loss: one weight per frame required");
    }
    const std::size_t d = v_hat.cols();
    std::vector<double> w(v_hat.size());
    for (std::size_t i = 0; i < frame_weights.size(); ++i) {
      for (std::size_t j = 0; j < d; ++j) w[i * d + j] = frame_weights[i];
    }
    sq = mul(tape, sq, Tensor::from_data(v_hat.shape(), std::move(w)));
  }
  return mean_all(tape, sq);
}

namespace {

struct ParallelBatch {
  Tensor frames;                 // [slots x frame_dim]
  std::vector<Slot> slots;
  Tensor target;                 // [n_frames x frame_dim] v-target, plain values
  std::vector<std::size_t> noisy_slot_index;  // slot index holding frame i's noisy tokens
};

// Assembles the parallel layout for TF (two streams) or DF (one stream).
ParallelBatch make_batch(Tape& tape, const ModelConfig& cfg, const NoiseSchedule& schedule,
                         const Tensor& data, std::span<const double> t_per_frame, bool teacher,
                         Rng& rng) {
  const std::size_t n = cfg.max_frames;
  const std::size_t fd = cfg.frame_dim;
  if (data.rows() != n || data.cols() != fd) {
    throw std::invalid_argument("training step: data is " + shape_str(data.shape()) +
                                ", expected [" + std::to_string(n) + "x" + std::to_string(fd) +
                                "]");
  }
  ParallelBatch b;
  std::vector<double> noisy(n * fd), target(n * fd);
  auto dv = data.value();
  for (std::size_t i = 0; i < n; ++i) {
    const auto coeff = forward_coefficients(schedule, t_per_frame[i]);
    for (std::size_t j = 0; j < fd; ++j) {
      const double eps = rng.normal();
      const double x = dv[i * fd + j];
      noisy[i * fd + j] = coeff.alpha * x + coeff.sigma * eps;
      target[i * fd + j] = eps - x;
    }
  }
  b.target = Tensor::from_data({n, fd}, std::move(target));

  if (!teacher) {
    b.frames = Tensor::from_data({n, fd}, std::move(noisy));
    b.slots.resize(n);
    b.noisy_slot_index.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      b.slots[i] = Slot{i, t_per_frame[i]};
      b.noisy_slot_index[i] = i;
    }
    return b;
  }

  // Interleaved [clean chunk, noisy chunk] slot layout.
  const std::size_t c = cfg.chunk_size;
  const std::size_t n_chunks = n / c;
  std::vector<double> rows(2 * n * fd);
  b.slots.resize(2 * n);
  b.noisy_slot_index.resize(n);
  for (std::size_t ch = 0; ch < n_chunks; ++ch) {
    for (std::size_t f = 0; f < c; ++f) {
      const std::size_t frame = ch * c + f;
      const std::size_t clean_slot = 2 * ch * c + f;
      const std::size_t noisy_slot = (2 * ch + 1) * c + f;
      for (std::size_t j = 0; j < fd; ++j) {
        rows[clean_slot * fd + j] = dv[frame * fd + j];
        rows[noisy_slot * fd + j] = noisy[frame * fd + j];
      }
      b.slots[clean_slot] = Slot{frame, 0.0};
      b.slots[noisy_slot] = Slot{frame, t_per_frame[frame]};
      b.noisy_slot_index[frame] = noisy_slot;
    }
  }
  b.frames = Tensor::from_data({2 * n, fd}, std::move(rows));
  (void)tape;
  return b;
}

Tensor gather_noisy_predictions(Tape& tape, const ModelConfig& cfg, const Tensor& v_hat,
                                const ParallelBatch& b) {
  const std::size_t n = cfg.max_frames;
  if (b.noisy_slot_index.size() == v_hat.rows()) {
    return v_hat;  // single stream, rows already per frame
  }
  // Two streams: pull out the noisy chunks, which are contiguous slot runs.
  const std::size_t c = cfg.chunk_size;
  std::vector<Tensor> parts;
  parts.reserve(n / c);
  for (std::size_t ch = 0; ch < n / c; ++ch) {
    parts.push_back(slice_rows(tape, v_hat, (2 * ch + 1) * c, c));
  }
  return concat_rows(tape, parts);
}

}  // namespace

Tensor teacher_forcing_step(Tape& tape, const ParameterStore& params, const ModelConfig& cfg,
                            const NoiseSchedule& schedule, const Tensor& data,
                            std::size_t condition, double shared_t, Rng& rng,
                            std::span<const double> frame_weights, std::size_t pos_offset) {
  std::vector<double> ts(cfg.max_frames, shared_t);
  ParallelBatch b = make_batch(tape, cfg, schedule, data, ts, /*teacher=*/true, rng);
  auto mask = build_mask(Paradigm::teacher_forcing, cfg.max_frames, cfg.tokens_per_frame,
                         cfg.chunk_size);
  ForwardResult fwd =
      forward_masked(tape, params, cfg, schedule, b.frames, b.slots, condition, mask, pos_offset);
  Tensor v_noisy = gather_noisy_predictions(tape, cfg, fwd.v_hat, b);
  return frame_denoising_loss(tape, v_noisy, b.target, frame_weights);
}

Tensor diffusion_forcing_step(Tape& tape, const ParameterStore& params, const ModelConfig& cfg,
                              const NoiseSchedule& schedule, const Tensor& data,
                              std::size_t condition, std::span<const double> t_per_frame,
                              Rng& rng, std::span<const double> frame_weights,
                              std::size_t pos_offset) {
  if (t_per_frame.size() != cfg.max_frames) {
    throw std::invalid_argument("diffusion_forcing_step: one timestep per frame required");
  }
  ParallelBatch b = make_batch(tape, cfg, schedule, data, t_per_frame, /*teacher=*/false, rng);
  auto mask = build_mask(Paradigm::diffusion_forcing, cfg.max_frames, cfg.tokens_per_frame,
                         cfg.chunk_size);
  ForwardResult fwd =
      forward_masked(tape, params, cfg, schedule, b.frames, b.slots, condition, mask, pos_offset);
  Tensor v_noisy = gather_noisy_predictions(tape, cfg, fwd.v_hat, b);
  return frame_denoising_loss(tape, v_noisy, b.target, frame_weights);
}

}  // namespace selfroll
