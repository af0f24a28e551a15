#include "selfroll/dm.hpp"

#include <cmath>
#include <stdexcept>

namespace selfroll {

EMAState EMAState::init_from(const ParameterStore& params, double decay) {
  EMAState ema;
  ema.decay = decay;
  for (const auto& [name, t] : params) {
    ema.shadow.emplace_back(name, t.detached_copy());
  }
  return ema;
}

void ema_update(EMAState& ema, const ParameterStore& current) {
  std::size_t i = 0;
  for (const auto& [name, t] : current) {
    if (i >= ema.shadow.size() || ema.shadow[i].first != name ||
        ema.shadow[i].second.size() != t.size()) {
      throw std::invalid_argument("ema_update: shadow does not mirror the parameter store");
    }
    auto sv = ema.shadow[i].second.mutable_value();
    auto cv = t.value();
    for (std::size_t j = 0; j < sv.size(); ++j) {
      sv[j] = ema.decay * sv[j] + (1.0 - ema.decay) * cv[j];
    }
    ++i;
  }
}

ParameterStore ema_snapshot(const EMAState& ema) {
  ParameterStore ps;
  for (const auto& [name, t] : ema.shadow) {
    ps.add(name, t.detached_copy());
  }
  return ps;
}

ParamFreeze::ParamFreeze(ParameterStore& ps) : ps_(ps) {
  for (auto& [name, t] : ps_) {
    saved_.push_back(t.requires_grad());
    t.set_requires_grad(false);
  }
}

ParamFreeze::~ParamFreeze() {
  std::size_t i = 0;
  for (auto& [name, t] : ps_) t.set_requires_grad(saved_[i++]);
}

// ---- sequence-level noising -----------------------------------------------------

namespace {

std::vector<double> coeff_rows(const NoiseSchedule& schedule, std::span<const double> ts,
                               std::size_t d, bool sigma) {
  std::vector<double> out(ts.size() * d);
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const auto c = forward_coefficients(schedule, ts[i]);
    const double v = sigma ? c.sigma : c.alpha;
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = v;
  }
  return out;
}

}  // namespace

Tensor alpha_matrix(const NoiseSchedule& schedule, std::span<const double> t_per_frame,
                    std::size_t frame_dim) {
  return Tensor::from_data({t_per_frame.size(), frame_dim},
                           coeff_rows(schedule, t_per_frame, frame_dim, false));
}

Tensor sigma_matrix(const NoiseSchedule& schedule, std::span<const double> t_per_frame,
                    std::size_t frame_dim) {
  return Tensor::from_data({t_per_frame.size(), frame_dim},
                           coeff_rows(schedule, t_per_frame, frame_dim, true));
}

Tensor perturb_sequence(Tape& tape, const Tensor& seq, const Tensor& eps,
                        std::span<const double> t_per_frame, const NoiseSchedule& schedule) {
  if (seq.shape() != eps.shape() || seq.rows() != t_per_frame.size()) {
    throw std::invalid_argument("perturb_sequence: sequence/noise/timestep mismatch");
  }
  Tensor a = alpha_matrix(schedule, t_per_frame, seq.cols());
  Tensor s = sigma_matrix(schedule, t_per_frame, seq.cols());
  return add(tape, mul(tape, seq, a), mul(tape, eps, s));
}

Tensor denoise_sequence(Tape& tape, const ParameterStore& params, const ModelConfig& cfg,
                        const NoiseSchedule& schedule, const Tensor& noisy_seq,
                        std::span<const double> t_per_frame, std::size_t condition) {
  if (noisy_seq.rows() != t_per_frame.size()) {
    throw std::invalid_argument("denoise_sequence: one timestep per frame required");
  }
  std::vector<Slot> slots(noisy_seq.rows());
  for (std::size_t i = 0; i < slots.size(); ++i) slots[i] = Slot{i, t_per_frame[i]};
  auto mask = build_mask(Paradigm::self_forcing_full, noisy_seq.rows(), cfg.tokens_per_frame,
                         cfg.chunk_size);
  ForwardResult fwd =
      forward_masked(tape, params, cfg, schedule, noisy_seq, slots, condition, mask);
  Tensor s = sigma_matrix(schedule, t_per_frame, cfg.frame_dim);
  return sub(tape, noisy_seq, mul(tape, fwd.v_hat, s));
}

Tensor real_score_with_cfg(Tape& tape, const ParameterStore& phi, const ModelConfig& cfg,
                           const NoiseSchedule& schedule, const Tensor& noisy_seq,
                           std::span<const double> t_per_frame, std::size_t condition,
                           double w_cfg) {
  if (w_cfg == 1.0) {
    return denoise_sequence(tape, phi, cfg, schedule, noisy_seq, t_per_frame, condition);
  }
  Tensor f_uncond = denoise_sequence(tape, phi, cfg, schedule, noisy_seq, t_per_frame,
                                     cfg.null_condition());
  if (w_cfg == 0.0) return f_uncond;
  Tensor f_cond = denoise_sequence(tape, phi, cfg, schedule, noisy_seq, t_per_frame, condition);
  return add(tape, f_uncond, scale(tape, sub(tape, f_cond, f_uncond), w_cfg));
}

double draw_dm_timestep(Rng& rng, const DMDConfig& dm, const NoiseSchedule& schedule,
                        std::size_t s) {
  if (dm.restrict_t_to_truncation) {
    const double hi = schedule.step_t(s);
    const double lo = schedule.step_below(s);
    return rng.uniform_in(lo, hi);
  }
  const auto n = static_cast<std::size_t>(std::floor(999.0 / dm.t_grid_step));
  return dm.t_grid_step * static_cast<double>(1 + rng.uniform_int(n));
}

// ---- DMD ------------------------------------------------------------------------

Tensor dmd_loss_from_diff(Tape& tape, const Tensor& x_hat, const Tensor& score_diff) {
  if (x_hat.shape() != score_diff.shape()) {
    throw std::invalid_argument("dmd_loss_from_diff: shape mismatch");
  }
  // target = sg[x_hat - (f_fake - f_real)]
  std::vector<double> target(x_hat.size());
  auto xv = x_hat.value(), dv = score_diff.value();
  for (std::size_t i = 0; i < target.size(); ++i) target[i] = xv[i] - dv[i];
  Tensor sg = tape.stop_gradient(Tensor::from_data(x_hat.shape(), std::move(target)));
  Tensor diff = sub(tape, x_hat, sg);
  return scale(tape, sum_all(tape, mul(tape, diff, diff)), 0.5);
}

Tensor dmd_generator_loss(Tape& tape, const Tensor& x_hat, ParameterStore& phi,
                          ParameterStore& psi, const ModelConfig& cfg,
                          const NoiseSchedule& schedule, std::span<const double> t_per_frame,
                          std::size_t condition, const DMDConfig& dm, Rng& rng) {
  for (double t : t_per_frame) {
    if (t < 0.0 || t > 1000.0) {
      throw std::invalid_argument("dmd_generator_loss: timestep outside [0, 1000]");
    }
  }
  // Everything except the bare x_hat sits inside the stop gradient, so the
  // whole bracket is evaluated without taping and replayed as a constant.
  Tensor diff_value;
  if (!tape.replaying()) {
    auto ng = tape.no_grad();
    Tensor eps = Tensor::randn(rng, x_hat.shape());
    Tensor x_t = perturb_sequence(tape, x_hat, eps, t_per_frame, schedule);
    Tensor f_fake = denoise_sequence(tape, psi, cfg, schedule, x_t, t_per_frame, condition);
    Tensor f_real = real_score_with_cfg(tape, phi, cfg, schedule, x_t, t_per_frame, condition,
                                        dm.cfg_weight);
    diff_value = sub(tape, f_fake, f_real);
  } else {
    // Placeholder; the boundary log supplies the recorded target in replay.
    diff_value = Tensor::zeros(x_hat.shape());
  }
  return dmd_loss_from_diff(tape, x_hat, diff_value);
}

// ---- SiD ------------------------------------------------------------------------

Tensor sid_loss_from_denoisers(Tape& tape, const Tensor& x_hat, const Tensor& eps,
                               std::span<const double> t_per_frame,
                               const NoiseSchedule& schedule, const SeqDenoiser& f_real,
                               const SeqDenoiser& f_fake, double alpha) {
  Tensor x_t = perturb_sequence(tape, x_hat, eps, t_per_frame, schedule);
  Tensor real = f_real(tape, x_t);
  Tensor fake = f_fake(tape, x_t);
  Tensor gap = sub(tape, real, fake);                      // f_phi - f_psi
  Tensor resid = sub(tape, fake, x_hat);                   // f_psi - x_hat
  Tensor loss = sum_all(tape, mul(tape, gap, resid));
  if (alpha != 1.0) {
    loss = add(tape, loss, scale(tape, sum_all(tape, mul(tape, gap, gap)), 1.0 - alpha));
  }
  return loss;
}

Tensor sid_generator_loss(Tape& tape, const Tensor& x_hat, ParameterStore& phi,
                          ParameterStore& psi, const ModelConfig& cfg,
                          const NoiseSchedule& schedule, std::span<const double> t_per_frame,
                          std::size_t condition, const SiDConfig& sid, const DMDConfig& dm,
                          Rng& rng) {
  ParamFreeze freeze_phi(phi);
  ParamFreeze freeze_psi(psi);
  Tensor eps = Tensor::randn(rng, x_hat.shape());
  auto f_real = [&](Tape& tp, const Tensor& x_t) {
    return real_score_with_cfg(tp, phi, cfg, schedule, x_t, t_per_frame, condition,
                               dm.cfg_weight);
  };
  auto f_fake = [&](Tape& tp, const Tensor& x_t) {
    return denoise_sequence(tp, psi, cfg, schedule, x_t, t_per_frame, condition);
  };
  return sid_loss_from_denoisers(tape, x_hat, eps, t_per_frame, schedule, f_real, f_fake,
                                 sid.alpha);
}

// ---- critic -----------------------------------------------------------------------

Tensor critic_denoising_loss(Tape& tape, ParameterStore& psi, const Tensor& x_hat_detached,
                             const ModelConfig& cfg, const NoiseSchedule& schedule,
                             std::span<const double> t_per_frame, std::size_t condition,
                             Rng& rng) {
  if (x_hat_detached.requires_grad()) {
    throw std::invalid_argument("critic_denoising_loss: generator samples must be detached");
  }
  Tensor eps = Tensor::randn(rng, x_hat_detached.shape());
  Tensor x_t = perturb_sequence(tape, x_hat_detached, eps, t_per_frame, schedule);
  std::vector<Slot> slots(x_hat_detached.rows());
  for (std::size_t i = 0; i < slots.size(); ++i) slots[i] = Slot{i, t_per_frame[i]};
  auto mask = build_mask(Paradigm::self_forcing_full, slots.size(), cfg.tokens_per_frame,
                         cfg.chunk_size);
  ForwardResult fwd = forward_masked(tape, psi, cfg, schedule, x_t, slots, condition, mask);
  Tensor target = v_target(x_hat_detached, eps);
  return frame_denoising_loss(tape, fwd.v_hat, target);
}

// ---- GAN ------------------------------------------------------------------------

GanLossResult gan_losses(Tape& tape, std::span<const Tensor> real_batch,
                         std::span<const Tensor> fake_batch,
                         const std::function<Tensor(Tape&, const Tensor&)>& discriminator,
                         std::span<const double> t_per_frame, const NoiseSchedule& schedule,
                         const GANConfig& gan, Rng& rng) {
  if (real_batch.size() != fake_batch.size() || real_batch.empty()) {
    throw std::invalid_argument("gan_losses: real/fake batch sizes must match");
  }
  if (gan.lambda_reg < 0.0 || !(gan.sigma_perturb > 0.0)) {
    throw std::invalid_argument("gan_losses: invalid regularization constants");
  }
  const std::size_t b = real_batch.size();
  std::vector<Tensor> d_terms, g_terms, reg_terms;
  for (std::size_t i = 0; i < b; ++i) {
    Tensor eps_real = Tensor::randn(rng, real_batch[i].shape());
    Tensor eps_fake = Tensor::randn(rng, fake_batch[i].shape());
    Tensor x_t = perturb_sequence(tape, real_batch[i], eps_real, t_per_frame, schedule);
    Tensor xh_t = perturb_sequence(tape, fake_batch[i], eps_fake, t_per_frame, schedule);
    Tensor d_real = discriminator(tape, x_t);
    Tensor d_fake = discriminator(tape, xh_t);

    Tensor margin = sub(tape, d_real, d_fake);
    d_terms.push_back(softplus(tape, scale(tape, margin, -1.0)));  // -log sigmoid(margin)
    g_terms.push_back(softplus(tape, margin));                     // -log sigmoid(-margin)

    Tensor jitter_real = Tensor::randn(rng, real_batch[i].shape(), gan.sigma_perturb);
    Tensor jitter_fake = Tensor::randn(rng, fake_batch[i].shape(), gan.sigma_perturb);
    Tensor d_real_j = discriminator(tape, add(tape, x_t, jitter_real));
    Tensor d_fake_j = discriminator(tape, add(tape, xh_t, jitter_fake));
    Tensor dr = sub(tape, d_real, d_real_j);
    Tensor df = sub(tape, d_fake, d_fake_j);
    reg_terms.push_back(
        scale(tape, add(tape, mul(tape, dr, dr), mul(tape, df, df)), 0.5));
  }
  auto mean_of = [&](std::vector<Tensor>& terms) {
    Tensor s = concat_rows(tape, terms);
    return mean_all(tape, s);
  };
  GanLossResult out;
  out.reg = mean_of(reg_terms);
  out.g_loss = mean_of(g_terms);
  out.d_loss = add(tape, mean_of(d_terms), scale(tape, out.reg, gan.lambda_reg));
  return out;
}

std::function<Tensor(Tape&, const Tensor&)> make_discriminator(
    ParameterStore& psi_disc, const ModelConfig& cfg, const NoiseSchedule& schedule,
    std::span<const double> t_per_frame, std::size_t condition) {
  std::vector<double> ts(t_per_frame.begin(), t_per_frame.end());
  return [&psi_disc, cfg, schedule, ts = std::move(ts), condition](Tape& tape,
                                                                   const Tensor& x_t) {
    std::vector<Slot> slots(x_t.rows());
    for (std::size_t i = 0; i < slots.size(); ++i) slots[i] = Slot{i, ts[i]};
    auto mask = build_mask(Paradigm::self_forcing_full, slots.size(), cfg.tokens_per_frame,
                           cfg.chunk_size);
    ForwardResult fwd = forward_masked(tape, psi_disc, cfg, schedule, x_t, slots, condition, mask);
    return discriminator_score(tape, psi_disc, fwd.hidden);
  };
}

}  // namespace selfroll
