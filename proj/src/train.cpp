#include "selfroll/train.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace selfroll {

namespace {

using Clock = std::chrono::steady_clock;

// Stream tags; every draw in a run derives from (seed, iteration, tag).
enum : std::uint64_t {
  kStreamInit = 1,
  kStreamPretrain = 2,
  kStreamIter = 3,
};

Rng iter_rng(const RunConfig& cfg, std::uint64_t iteration) {
  return Rng(cfg.seed).split(kStreamIter).split(iteration);
}

std::size_t draw_pos_offset(const RunConfig& cfg, Rng& rng) {
  if (!cfg.pos_offset_augment) return 0;
  const std::size_t slack = cfg.model.pos_slots() - cfg.model.max_frames;
  return slack == 0 ? 0 : rng.uniform_int(slack + 1);
}

std::vector<double> shared_t(std::size_t n, double t) { return std::vector<double>(n, t); }

std::vector<double> draw_dm_t_per_frame(const RunConfig& cfg, Rng& rng, std::size_t s) {
  const std::size_t n = cfg.model.max_frames;
  if (!cfg.dm.per_frame_t) {
    return shared_t(n, draw_dm_timestep(rng, cfg.dm, cfg.schedule, s));
  }
  std::vector<double> ts(n);
  for (auto& t : ts) t = draw_dm_timestep(rng, cfg.dm, cfg.schedule, s);
  return ts;
}

WorldConfig world_of(const RunConfig& cfg) {
  WorldConfig w = cfg.world;
  w.frame_dim = cfg.model.frame_dim;
  return w;
}

}  // namespace

ParameterStore copy_params(const ParameterStore& src, bool requires_grad) {
  ParameterStore dst;
  for (const auto& [name, t] : src) {
    Tensor c = t.detached_copy();
    c.set_requires_grad(requires_grad);
    dst.add(name, std::move(c));
  }
  return dst;
}

Tensor sequence_denoising_loss(Tape& tape, ParameterStore& params, const ModelConfig& cfg,
                               const NoiseSchedule& schedule, const Tensor& data,
                               std::span<const double> t_per_frame, std::size_t condition,
                               Rng& rng) {
  Tensor eps = Tensor::randn(rng, data.shape());
  Tensor x_t = perturb_sequence(tape, data, eps, t_per_frame, schedule);
  std::vector<Slot> slots(data.rows());
  for (std::size_t i = 0; i < slots.size(); ++i) slots[i] = Slot{i, t_per_frame[i]};
  auto mask = build_mask(Paradigm::self_forcing_full, slots.size(), cfg.tokens_per_frame,
                         cfg.chunk_size);
  ForwardResult fwd = forward_masked(tape, params, cfg, schedule, x_t, slots, condition, mask);
  return frame_denoising_loss(tape, fwd.v_hat, v_target(data, eps));
}

namespace {

void pretrain_real_score(ParameterStore& params, const RunConfig& cfg) {
  Optimizer opt(cfg.opt_critic, params);
  Rng base = Rng(cfg.seed).split(kStreamPretrain);
  const WorldConfig world = world_of(cfg);
  for (std::size_t i = 0; i < cfg.pretrain_iters; ++i) {
    Rng r = base.split(i);
    Rng data_rng = r.split(0);
    Rng noise_rng = r.split(1);
    const std::size_t cond_data = data_rng.uniform_int(cfg.model.condition_vocab);
    // Dropped labels still train on real data, which is what enables CFG.
    const std::size_t cond_label = data_rng.uniform() < cfg.condition_dropout
                                       ? cfg.model.null_condition()
                                       : cond_data;
    Tensor data = sample_ground_truth(world, cfg.model.max_frames, cond_data, data_rng);
    const double t = draw_dm_timestep(noise_rng, cfg.dm, cfg.schedule, 1);
    auto ts = shared_t(cfg.model.max_frames, t);
    Tape tape;
    Tensor loss = sequence_denoising_loss(tape, params, cfg.model, cfg.schedule, data, ts,
                                          cond_label, noise_rng);
    params.zero_grad();
    tape.backward(loss);
    opt.step(params);
  }
}

double denoise_iteration(TrainState& st, Rng r) {
  const RunConfig& cfg = st.cfg;
  Rng data_rng = r.split(0);
  Rng noise_rng = r.split(1);
  const WorldConfig world = world_of(cfg);
  const std::size_t n = cfg.model.max_frames;
  const std::size_t T = cfg.schedule.step_count();

  double total = 0.0;
  Tape tape;
  std::vector<Tensor> losses;
  for (std::size_t b = 0; b < cfg.batch_size; ++b) {
    Rng db = data_rng.split(b);
    Rng nb = noise_rng.split(b);
    const std::size_t cond = db.uniform_int(cfg.model.condition_vocab);
    Tensor data = sample_ground_truth(world, n, cond, db);
    const std::size_t offset = draw_pos_offset(cfg, nb);
    if (cfg.paradigm == "tf") {
      const double t = cfg.schedule.step_t(1 + nb.uniform_int(T));
      losses.push_back(teacher_forcing_step(tape, st.generator, cfg.model, cfg.schedule, data,
                                            cond, t, nb, {}, offset));
    } else {
      std::vector<double> ts(n);
      for (auto& t : ts) {
        const std::size_t pick = nb.uniform_int(T + 1);
        t = pick == 0 ? 0.0 : cfg.schedule.step_t(pick);
      }
      losses.push_back(diffusion_forcing_step(tape, st.generator, cfg.model, cfg.schedule, data,
                                              cond, ts, nb, {}, offset));
    }
  }
  Tensor loss = scale(tape, sum_all(tape, concat_rows(tape, losses)),
                      1.0 / static_cast<double>(losses.size()));
  total = loss.scalar_value();
  st.generator.zero_grad();
  tape.backward(loss);
  st.opt_g.step(st.generator);
  ema_update(st.ema, st.generator);
  return total;
}

struct RolloutSample {
  Tensor sequence;  // taped or detached
  std::size_t condition = 0;
  TruncationDraw truncation;
};

RolloutSample roll_once(Tape& tape, TrainState& st, Rng& rng, bool detached) {
  const RunConfig& cfg = st.cfg;
  RolloutSample out;
  out.condition = rng.uniform_int(cfg.model.condition_vocab);
  out.truncation = draw_truncation(rng, cfg.schedule);
  RolloutOptions opt;
  opt.condition = out.condition;
  opt.pos_offset = draw_pos_offset(cfg, rng);
  opt.local_window = cfg.local_window;
  if (detached) {
    auto ng = tape.no_grad();
    RolloutResult r =
        self_forcing_rollout(tape, st.generator, cfg.model, cfg.schedule, rng, out.truncation, opt);
    out.sequence = r.sequence.detached_copy();
  } else {
    RolloutResult r =
        self_forcing_rollout(tape, st.generator, cfg.model, cfg.schedule, rng, out.truncation, opt);
    out.sequence = r.sequence;
  }
  return out;
}

double critic_update(TrainState& st, Rng r) {
  const RunConfig& cfg = st.cfg;
  Tape tape;
  std::vector<Tensor> losses;
  for (std::size_t b = 0; b < cfg.batch_size; ++b) {
    Rng rb = r.split(b);
    RolloutSample fake = roll_once(tape, st, rb, /*detached=*/true);
    auto ts = draw_dm_t_per_frame(cfg, rb, fake.truncation.s);
    losses.push_back(critic_denoising_loss(tape, st.critic, fake.sequence, cfg.model,
                                           cfg.schedule, ts, fake.condition, rb));
  }
  Tensor loss = scale(tape, sum_all(tape, concat_rows(tape, losses)),
                      1.0 / static_cast<double>(losses.size()));
  const double value = loss.scalar_value();
  st.critic.zero_grad();
  tape.backward(loss);
  st.opt_c.step(st.critic);
  return value;
}

double dm_generator_update(TrainState& st, Rng r) {
  const RunConfig& cfg = st.cfg;
  Tape tape;
  std::vector<Tensor> losses;
  for (std::size_t b = 0; b < cfg.batch_size; ++b) {
    Rng rb = r.split(b);
    RolloutSample fake = roll_once(tape, st, rb, /*detached=*/false);
    auto ts = draw_dm_t_per_frame(cfg, rb, fake.truncation.s);
    if (cfg.objective == "dmd") {
      losses.push_back(dmd_generator_loss(tape, fake.sequence, st.real_score, st.critic,
                                          cfg.model, cfg.schedule, ts, fake.condition, cfg.dm,
                                          rb));
    } else {
      losses.push_back(sid_generator_loss(tape, fake.sequence, st.real_score, st.critic,
                                          cfg.model, cfg.schedule, ts, fake.condition, cfg.sid,
                                          cfg.dm, rb));
    }
  }
  Tensor loss = scale(tape, sum_all(tape, concat_rows(tape, losses)),
                      1.0 / static_cast<double>(losses.size()));
  const double value = loss.scalar_value();
  st.generator.zero_grad();
  tape.backward(loss);
  st.opt_g.step(st.generator);
  ema_update(st.ema, st.generator);
  return value;
}

std::pair<double, double> gan_iteration(TrainState& st, Rng r) {
  const RunConfig& cfg = st.cfg;
  const WorldConfig world = world_of(cfg);
  const std::size_t n = cfg.model.max_frames;

  auto batch_losses = [&](Rng side_rng, bool generator_side, Tape& tape) {
    std::vector<Tensor> terms;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      Rng rb = side_rng.split(b);
      RolloutSample fake = roll_once(tape, st, rb, /*detached=*/!generator_side);
      Tensor real = sample_ground_truth(world, n, fake.condition, rb);
      const double lo = cfg.schedule.step_below(fake.truncation.s);
      const double hi = cfg.schedule.step_t(fake.truncation.s);
      auto ts = shared_t(n, rb.uniform_in(lo, hi));
      auto disc = make_discriminator(st.critic, cfg.model, cfg.schedule, ts, fake.condition);
      const Tensor reals[] = {real};
      const Tensor fakes[] = {fake.sequence};
      GanLossResult res =
          gan_losses(tape, reals, fakes, disc, ts, cfg.schedule, cfg.gan, rb);
      terms.push_back(generator_side ? res.g_loss : res.d_loss);
    }
    return scale(tape, sum_all(tape, concat_rows(tape, terms)),
                 1.0 / static_cast<double>(terms.size()));
  };

  Tape d_tape;
  Tensor d_loss = batch_losses(r.split(0), /*generator_side=*/false, d_tape);
  const double d_value = d_loss.scalar_value();
  st.critic.zero_grad();
  d_tape.backward(d_loss);
  st.opt_c.step(st.critic);

  Tape g_tape;
  Tensor g_loss;
  {
    ParamFreeze freeze(st.critic);
    g_loss = batch_losses(r.split(1), /*generator_side=*/true, g_tape);
  }
  const double g_value = g_loss.scalar_value();
  st.generator.zero_grad();
  g_tape.backward(g_loss);
  st.opt_g.step(st.generator);
  ema_update(st.ema, st.generator);
  return {g_value, d_value};
}

}  // namespace

TrainState init_training(const RunConfig& cfg) {
  cfg.validate();
  TrainState st;
  st.cfg = cfg;
  Rng init = Rng(cfg.seed).split(kStreamInit);
  Rng gen_rng = init.split(0);
  st.generator = init_generator_params(cfg.model, gen_rng);

  if (cfg.objective != "denoise") {
    Rng base_rng = init.split(1);
    ParameterStore base = init_generator_params(cfg.model, base_rng);
    pretrain_real_score(base, cfg);
    st.real_score = copy_params(base, /*requires_grad=*/false);
    st.critic = copy_params(base, /*requires_grad=*/true);
    if (cfg.objective == "gan") {
      Rng head_rng = init.split(2);
      add_discriminator_head(st.critic, cfg.model, head_rng);
    }
    st.opt_c = Optimizer(cfg.opt_critic, st.critic);
  }
  st.ema = EMAState::init_from(st.generator, cfg.ema_decay);
  st.opt_g = Optimizer(cfg.opt_generator, st.generator);
  return st;
}

IterationMetrics train_iteration(TrainState& st) {
  const auto start = Clock::now();
  IterationMetrics m;
  m.iteration = st.iteration + 1;
  m.critic_loss = std::numeric_limits<double>::quiet_NaN();

  Rng r = iter_rng(st.cfg, st.iteration);
  if (st.cfg.objective == "denoise") {
    m.gen_loss = denoise_iteration(st, r.split(0));
  } else if (st.cfg.objective == "gan") {
    auto [g, d] = gan_iteration(st, r);
    m.gen_loss = g;
    m.critic_loss = d;
  } else {
    m.gen_loss = dm_generator_update(st, r.split(0));
    double critic_total = 0.0;
    for (std::size_t k = 0; k < st.cfg.dm.update_ratio; ++k) {
      critic_total += critic_update(st, r.split(1 + k));
    }
    m.critic_loss = st.cfg.dm.update_ratio > 0
                        ? critic_total / static_cast<double>(st.cfg.dm.update_ratio)
                        : std::numeric_limits<double>::quiet_NaN();
  }
  ++st.iteration;
  m.wall_ms = std::chrono::duration<double, std::milli>(Clock::now() - start).count();
  return m;
}

Checkpoint make_checkpoint(const TrainState& st) {
  Checkpoint ck;
  ck.config_text = st.cfg.serialize();
  ck.iteration = st.iteration;
  ck.rng_key = Rng(st.cfg.seed).key();
  ck.rng_counter = st.iteration;
  ck.opt_g_steps = st.opt_g.iterations();
  ck.opt_c_steps = st.opt_c.iterations();
  auto dump = [&](const std::string& prefix, const ParameterStore& ps) {
    for (const auto& [name, t] : ps) ck.add(prefix + name, t);
  };
  dump("gen.", st.generator);
  if (st.critic.count() > 0) dump("critic.", st.critic);
  if (st.real_score.count() > 0) dump("real.", st.real_score);
  for (const auto& [name, t] : st.ema.shadow) ck.add("ema." + name, t);
  for (const auto& [name, t] : st.opt_g.first_moments()) ck.add("optg.m." + name, t);
  for (const auto& [name, t] : st.opt_g.second_moments()) ck.add("optg.v." + name, t);
  if (st.critic.count() > 0) {
    for (const auto& [name, t] : st.opt_c.first_moments()) ck.add("optc.m." + name, t);
    for (const auto& [name, t] : st.opt_c.second_moments()) ck.add("optc.v." + name, t);
  }
  return ck;
}

namespace {

ParameterStore store_from(const std::vector<std::pair<std::string, Tensor>>& entries,
                          bool requires_grad) {
  ParameterStore ps;
  for (const auto& [name, t] : entries) {
    Tensor c = t.detached_copy();
    c.set_requires_grad(requires_grad);
    ps.add(name, std::move(c));
  }
  return ps;
}

void load_moments(Optimizer& opt, const Checkpoint& ck, const std::string& m_prefix,
                  const std::string& v_prefix) {
  for (auto& [name, t] : opt.first_moments()) {
    const Tensor* src = ck.find(m_prefix + name);
    if (src == nullptr) throw std::runtime_error("checkpoint: missing " + m_prefix + name);
    t = src->detached_copy();
  }
  for (auto& [name, t] : opt.second_moments()) {
    const Tensor* src = ck.find(v_prefix + name);
    if (src == nullptr) throw std::runtime_error("checkpoint: missing " + v_prefix + name);
    t = src->detached_copy();
  }
}

}  // namespace

TrainState restore_training(const Checkpoint& ck) {
  TrainState st;
  st.cfg = RunConfig::parse(ck.config_text);
  st.cfg.validate();
  st.iteration = ck.iteration;

  st.generator = store_from(ck.with_prefix("gen."), true);
  auto critic = ck.with_prefix("critic.");
  if (!critic.empty()) st.critic = store_from(critic, true);
  auto real = ck.with_prefix("real.");
  if (!real.empty()) st.real_score = store_from(real, false);

  st.ema.decay = st.cfg.ema_decay;
  for (const auto& [name, t] : ck.with_prefix("ema.")) {
    st.ema.shadow.emplace_back(name, t.detached_copy());
  }

  st.opt_g = Optimizer(st.cfg.opt_generator, st.generator);
  st.opt_g.set_iterations(ck.opt_g_steps);
  load_moments(st.opt_g, ck, "optg.m.", "optg.v.");
  if (st.critic.count() > 0) {
    st.opt_c = Optimizer(st.cfg.opt_critic, st.critic);
    st.opt_c.set_iterations(ck.opt_c_steps);
    load_moments(st.opt_c, ck, "optc.m.", "optc.v.");
  }
  return st;
}

}  // namespace selfroll
