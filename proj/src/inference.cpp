#include "selfroll/inference.hpp"

#include <chrono>
#include <deque>
#include <stdexcept>

namespace selfroll {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

std::vector<Slot> slots_for(std::size_t first_abs_frame, std::size_t count, double t) {
  std::vector<Slot> s(count);
  for (std::size_t f = 0; f < count; ++f) s[f] = Slot{first_abs_frame + f, t};
  return s;
}

void check_generate_args(const ModelConfig& cfg, std::size_t m_frames, std::size_t window) {
  cfg.validate();
  if (m_frames == 0 || window == 0) {
    throw std::invalid_argument("generate: M and L must be at least 1");
  }
  if (m_frames % cfg.chunk_size != 0 || window % cfg.chunk_size != 0) {
    throw std::invalid_argument("generate: M and L must be chunk multiples");
  }
}

struct TraceScope {
  GenerationTrace& trace;
  Clock::time_point run_start;

  void record_chunk(std::size_t chunk_frames, double chunk_ms, std::uint64_t chunk_flops,
                    bool first_chunk, double latency_ms) {
    for (std::size_t f = 0; f < chunk_frames; ++f) {
      trace.frame_wall_ms.push_back(chunk_ms / static_cast<double>(chunk_frames));
      trace.frame_attn_flops.push_back(chunk_flops / chunk_frames);
      trace.cumulative_ms.push_back(ms_since(run_start));
    }
    if (first_chunk) trace.first_frame_latency_ms = latency_ms;
  }
};

}  // namespace

std::pair<Tensor, GenerationTrace> generate_rolling(const ParameterStore& params,
                                                    const ModelConfig& cfg,
                                                    const NoiseSchedule& schedule,
                                                    std::size_t m_frames, std::size_t window,
                                                    Rng& rng, const GenerateOptions& opt) {
  check_generate_args(cfg, m_frames, window);
  schedule.validate();
  const std::size_t c = cfg.chunk_size;
  const std::size_t T = schedule.step_count();

  Tape tape;
  auto ng = tape.no_grad();
  KVCache cache(cfg.layers, window, cfg.tokens_per_frame);
  GenerationTrace trace;
  TraceScope scope{trace, Clock::now()};
  std::vector<Tensor> outputs;

  for (std::size_t chunk = 0; chunk * c < m_frames; ++chunk) {
    const auto chunk_start = Clock::now();
    const std::uint64_t flops0 = tape.attn_flops();
    Tensor x = Tensor::randn(rng, {c, cfg.frame_dim});
    double latency_ms = 0.0;
    for (std::size_t j = T; j >= 1; --j) {
      const double t_j = schedule.step_t(j);
      ForwardResult fwd = forward_cached(tape, params, cfg, schedule, x,
                                         slots_for(chunk * c, c, t_j), opt.condition, cache,
                                         opt.pos_offset);
      NoisySample noisy;
      noisy.frame = x;
      noisy.t = t_j;
      Tensor x0 = data_prediction(tape, fwd.v_hat, noisy, schedule);
      if (j == 1) {
        latency_ms = ms_since(scope.run_start);
        outputs.push_back(x0);
        append_kv(tape, params, cfg, schedule, x0, slots_for(chunk * c, c, 0.0), opt.condition,
                  cache, opt.pos_offset);
      } else {
        Tensor eps = Tensor::randn(rng, {c, cfg.frame_dim});
        x = forward_perturb(tape, x0, eps, schedule.step_below(j), schedule).frame;
      }
    }
    scope.record_chunk(c, std::chrono::duration<double, std::milli>(Clock::now() - chunk_start)
                              .count(),
                       tape.attn_flops() - flops0, chunk == 0, latency_ms);
  }
  return {concat_rows(tape, outputs).detached_copy(), trace};
}

std::pair<Tensor, GenerationTrace> generate_recompute_window(
    const ParameterStore& params, const ModelConfig& cfg, const NoiseSchedule& schedule,
    std::size_t m_frames, std::size_t window, std::size_t stride, Rng& rng,
    const GenerateOptions& opt) {
  check_generate_args(cfg, m_frames, window);
  schedule.validate();
  if (stride == 0 || stride > window || stride % cfg.chunk_size != 0) {
    throw std::invalid_argument(
        "generate_recompute_window: stride must be a chunk multiple in [chunk, L]");
  }
  const std::size_t c = cfg.chunk_size;
  const std::size_t T = schedule.step_count();

  Tape tape;
  auto ng = tape.no_grad();
  KVCache cache(cfg.layers, window, cfg.tokens_per_frame);
  GenerationTrace trace;
  TraceScope scope{trace, Clock::now()};
  std::vector<Tensor> outputs;
  // Clean frames retained for K/V recomputation: (abs_frame, [c x d] chunk).
  std::deque<std::pair<std::size_t, Tensor>> stored;

  for (std::size_t chunk = 0; chunk * c < m_frames; ++chunk) {
    const auto chunk_start = Clock::now();
    const std::uint64_t flops0 = tape.attn_flops();

    if (cache.size_frames() + c > window) {
      // Shift: drop at least `stride` frames, then rebuild overlap K/V from
      // the stored clean chunks.
      std::size_t drop = std::max(stride, cache.size_frames() + c - window);
      while (drop > 0 && !stored.empty()) {
        stored.pop_front();
        drop -= c;
      }
      cache = KVCache(cfg.layers, window, cfg.tokens_per_frame);
      for (const auto& [abs0, frames] : stored) {
        append_kv(tape, params, cfg, schedule, frames, slots_for(abs0, c, 0.0), opt.condition,
                  cache, opt.pos_offset);
      }
    }

    Tensor x = Tensor::randn(rng, {c, cfg.frame_dim});
    double latency_ms = 0.0;
    for (std::size_t j = T; j >= 1; --j) {
      const double t_j = schedule.step_t(j);
      ForwardResult fwd = forward_cached(tape, params, cfg, schedule, x,
                                         slots_for(chunk * c, c, t_j), opt.condition, cache,
                                         opt.pos_offset);
      NoisySample noisy;
      noisy.frame = x;
      noisy.t = t_j;
      Tensor x0 = data_prediction(tape, fwd.v_hat, noisy, schedule);
      if (j == 1) {
        latency_ms = ms_since(scope.run_start);
        outputs.push_back(x0);
        append_kv(tape, params, cfg, schedule, x0, slots_for(chunk * c, c, 0.0), opt.condition,
                  cache, opt.pos_offset);
        stored.emplace_back(chunk * c, x0.detached_copy());
        while (stored.size() * c > window) stored.pop_front();
      } else {
        Tensor eps = Tensor::randn(rng, {c, cfg.frame_dim});
        x = forward_perturb(tape, x0, eps, schedule.step_below(j), schedule).frame;
      }
    }
    scope.record_chunk(c, std::chrono::duration<double, std::milli>(Clock::now() - chunk_start)
                              .count(),
                       tape.attn_flops() - flops0, chunk == 0, latency_ms);
  }
  return {concat_rows(tape, outputs).detached_copy(), trace};
}

std::pair<Tensor, GenerationTrace> generate_no_cache(const ParameterStore& params,
                                                     const ModelConfig& cfg,
                                                     const NoiseSchedule& schedule,
                                                     std::size_t m_frames, std::size_t window,
                                                     Rng& rng, const GenerateOptions& opt) {
  check_generate_args(cfg, m_frames, window);
  schedule.validate();
  const std::size_t c = cfg.chunk_size;
  const std::size_t T = schedule.step_count();

  Tape tape;
  auto ng = tape.no_grad();
  GenerationTrace trace;
  TraceScope scope{trace, Clock::now()};
  std::vector<Tensor> outputs;
  std::deque<std::pair<std::size_t, Tensor>> stored;  // clean context chunks

  for (std::size_t chunk = 0; chunk * c < m_frames; ++chunk) {
    const auto chunk_start = Clock::now();
    const std::uint64_t flops0 = tape.attn_flops();
    // Context: the most recent window-c frames at most, so the attended span
    // never exceeds L frames.
    while (stored.size() * c > window - c) stored.pop_front();

    Tensor x = Tensor::randn(rng, {c, cfg.frame_dim});
    double latency_ms = 0.0;
    Tensor x0;
    for (std::size_t j = T; j >= 1; --j) {
      const double t_j = schedule.step_t(j);
      // Rebuild the whole window every step.
      std::vector<Slot> slots;
      std::vector<Tensor> rows;
      for (const auto& [abs0, frames] : stored) {
        auto s = slots_for(abs0, c, 0.0);
        slots.insert(slots.end(), s.begin(), s.end());
        rows.push_back(frames);
      }
      auto cur = slots_for(chunk * c, c, t_j);
      slots.insert(slots.end(), cur.begin(), cur.end());
      rows.push_back(x);
      Tensor frames_mat = concat_rows(tape, rows);
      auto mask = build_mask(Paradigm::self_forcing_full, slots.size(), cfg.tokens_per_frame,
                             cfg.chunk_size);
      ForwardResult fwd = forward_masked(tape, params, cfg, schedule, frames_mat, slots,
                                         opt.condition, mask, opt.pos_offset);
      Tensor v_cur = slice_rows(tape, fwd.v_hat, slots.size() - c, c);
      NoisySample noisy;
      noisy.frame = x;
      noisy.t = t_j;
      x0 = data_prediction(tape, v_cur, noisy, schedule);
      if (j == 1) {
        latency_ms = ms_since(scope.run_start);
        outputs.push_back(x0);
        stored.emplace_back(chunk * c, x0.detached_copy());
      } else {
        Tensor eps = Tensor::randn(rng, {c, cfg.frame_dim});
        x = forward_perturb(tape, x0, eps, schedule.step_below(j), schedule).frame;
      }
    }
    scope.record_chunk(c, std::chrono::duration<double, std::milli>(Clock::now() - chunk_start)
                              .count(),
                       tape.attn_flops() - flops0, chunk == 0, latency_ms);
  }
  return {concat_rows(tape, outputs).detached_copy(), trace};
}

std::pair<Tensor, GenerationTrace> generate(const CacheStrategy& strategy,
                                            const ParameterStore& params, const ModelConfig& cfg,
                                            const NoiseSchedule& schedule, std::size_t m_frames,
                                            Rng& rng, const GenerateOptions& opt) {
  switch (strategy.kind) {
    case CacheKind::rolling:
      return generate_rolling(params, cfg, schedule, m_frames, strategy.window, rng, opt);
    case CacheKind::recompute_window:
      return generate_recompute_window(params, cfg, schedule, m_frames, strategy.window,
                                       strategy.stride, rng, opt);
    case CacheKind::no_cache:
      return generate_no_cache(params, cfg, schedule, m_frames, strategy.window, rng, opt);
  }
  throw std::logic_error("generate: unknown strategy");
}

std::vector<Tensor> sample_frames_by_index(const ParameterStore& params, const ModelConfig& cfg,
                                           const NoiseSchedule& schedule, std::size_t m_frames,
                                           std::size_t window, std::size_t n_samples,
                                           std::size_t condition, Rng& rng) {
  std::vector<std::vector<double>> by_index(m_frames);
  for (auto& v : by_index) v.reserve(n_samples * cfg.frame_dim);
  GenerateOptions opt;
  opt.condition = condition;
  for (std::size_t s = 0; s < n_samples; ++s) {
    Rng seq_rng = rng.split(s);
    auto [seq, trace] = generate_rolling(params, cfg, schedule, m_frames, window, seq_rng, opt);
    auto v = seq.value();
    for (std::size_t i = 0; i < m_frames; ++i) {
      for (std::size_t d = 0; d < cfg.frame_dim; ++d) {
        by_index[i].push_back(v[i * cfg.frame_dim + d]);
      }
    }
  }
  std::vector<Tensor> out;
  out.reserve(m_frames);
  for (auto& v : by_index) {
    out.push_back(Tensor::from_data({n_samples, cfg.frame_dim}, std::move(v)));
  }
  return out;
}

ExtrapolationReport extrapolation_quality(const ParameterStore& with_fix,
                                          const ModelConfig& cfg_with,
                                          const ParameterStore& without_fix,
                                          const ModelConfig& cfg_without,
                                          const NoiseSchedule& schedule, const WorldConfig& world,
                                          std::size_t m_frames, std::size_t n_samples,
                                          std::size_t condition, Rng& rng) {
  auto same = [&]() {
    return cfg_with.frame_dim == cfg_without.frame_dim &&
           cfg_with.tokens_per_frame == cfg_without.tokens_per_frame &&
           cfg_with.model_dim == cfg_without.model_dim && cfg_with.layers == cfg_without.layers &&
           cfg_with.heads == cfg_without.heads && cfg_with.chunk_size == cfg_without.chunk_size &&
           cfg_with.max_frames == cfg_without.max_frames &&
           cfg_with.condition_vocab == cfg_without.condition_vocab;
  };
  if (!same()) {
    throw std::invalid_argument("extrapolation_quality: checkpoints have mismatched configs");
  }
  if (m_frames < cfg_with.max_frames) {
    throw std::invalid_argument("extrapolation_quality: M must reach the training horizon");
  }

  Rng truth_rng = rng.split(0xdead);
  std::vector<std::vector<double>> truth_rows(m_frames);
  for (std::size_t s = 0; s < n_samples; ++s) {
    Rng r = truth_rng.split(s);
    Tensor seq = sample_ground_truth(world, m_frames, condition, r);
    auto v = seq.value();
    for (std::size_t i = 0; i < m_frames; ++i) {
      for (std::size_t d = 0; d < world.frame_dim; ++d) {
        truth_rows[i].push_back(v[i * world.frame_dim + d]);
      }
    }
  }
  std::vector<Tensor> truth;
  truth.reserve(m_frames);
  for (auto& v : truth_rows) {
    truth.push_back(Tensor::from_data({n_samples, world.frame_dim}, std::move(v)));
  }

  Rng on_rng = rng.split(1);
  Rng off_rng = rng.split(2);
  const std::size_t window = cfg_with.max_frames;
  auto on = sample_frames_by_index(with_fix, cfg_with, schedule, m_frames, window, n_samples,
                                   condition, on_rng);
  auto off = sample_frames_by_index(without_fix, cfg_without, schedule, m_frames, window,
                                    n_samples, condition, off_rng);

  Rng bw_rng = rng.split(3);
  const double bandwidth = median_heuristic_bandwidth(truth.front(), truth.back(), bw_rng);

  ExtrapolationReport rep;
  rep.horizon = cfg_with.max_frames;
  rep.with_fix = drift_report(on, truth, bandwidth);
  rep.without_fix = drift_report(off, truth, bandwidth);
  for (std::size_t i = rep.horizon; i < m_frames; ++i) {
    rep.beyond_mean_with += rep.with_fix.mmd2[i];
    rep.beyond_mean_without += rep.without_fix.mmd2[i];
    ++rep.beyond_count;
  }
  if (rep.beyond_count > 0) {
    rep.beyond_mean_with /= static_cast<double>(rep.beyond_count);
    rep.beyond_mean_without /= static_cast<double>(rep.beyond_count);
  }
  return rep;
}

}  // namespace selfroll
