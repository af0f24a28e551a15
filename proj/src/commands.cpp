#include "selfroll/commands.hpp"

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <json.hpp>

namespace selfroll {

namespace {

namespace fs = std::filesystem;

std::string join_path(const std::string& dir, const std::string& name) {
  return (fs::path(dir) / name).string();
}

void ensure_dir(const std::string& dir) {
  if (!dir.empty()) fs::create_directories(dir);
}

std::string metrics_row(const IterationMetrics& m) {
  std::string row = std::to_string(m.iteration);
  row += ",";
  row += format_double(m.gen_loss);
  row += ",";
  row += std::isnan(m.critic_loss) ? std::string("") : format_double(m.critic_loss);
  row += ",";
  row += format_double(m.wall_ms);
  row += "\n";
  return row;
}

}  // namespace

std::size_t thread_cap() {
  const char* env = std::getenv("SELFROLL_THREADS");
  if (env == nullptr) return 1;
  const long v = std::strtol(env, nullptr, 10);
  return v < 1 ? 1 : static_cast<std::size_t>(v);
}

ParameterStore eval_params(const Checkpoint& ckpt) {
  auto ema = ckpt.with_prefix("ema.");
  if (ema.empty()) throw std::runtime_error("checkpoint has no EMA parameters");
  ParameterStore ps;
  for (auto& [name, t] : ema) ps.add(name, t.detached_copy());
  return ps;
}

TrainOutputs cmd_train(const std::string& config_path, const std::string& out_dir,
                       const std::string& resume_checkpoint,
                       std::optional<std::uint64_t> seed_override) {
  ensure_dir(out_dir);
  TrainState state;
  if (!resume_checkpoint.empty()) {
    state = restore_training(load_checkpoint(resume_checkpoint));
    if (!config_path.empty()) {
      // The config still decides the iteration budget of this invocation.
      RunConfig fresh = RunConfig::load(config_path);
      state.cfg.iterations = fresh.iterations;
      state.cfg.checkpoint_every = fresh.checkpoint_every;
    }
  } else {
    RunConfig cfg = RunConfig::load(config_path);
    if (seed_override) cfg.seed = *seed_override;
    cfg.validate();
    state = init_training(cfg);
  }

  TrainOutputs out;
  out.metrics_path = join_path(out_dir, "metrics.csv");
  out.checkpoint_path = join_path(out_dir, "checkpoint.ckpt");

  std::string csv = "iteration,gen_loss,critic_loss,wall_ms\n";
  const std::uint64_t target = state.iteration + state.cfg.iterations;
  while (state.iteration < target) {
    IterationMetrics m = train_iteration(state);
    csv += metrics_row(m);
    if (state.cfg.checkpoint_every > 0 && state.iteration % state.cfg.checkpoint_every == 0 &&
        state.iteration < target) {
      save_checkpoint(join_path(out_dir, "checkpoint_" + std::to_string(state.iteration) + ".ckpt"),
                      make_checkpoint(state));
    }
  }
  atomic_write_file(out.metrics_path, csv);
  save_checkpoint(out.checkpoint_path, make_checkpoint(state));
  out.final_iteration = state.iteration;
  return out;
}

GenerateOutputs cmd_generate(const std::string& checkpoint_path, std::size_t m_frames,
                             const std::string& strategy_name, std::uint64_t seed,
                             const std::string& out_dir, std::optional<std::size_t> window,
                             std::optional<std::size_t> stride, std::size_t condition) {
  ensure_dir(out_dir);
  Checkpoint ckpt = load_checkpoint(checkpoint_path);
  RunConfig cfg = RunConfig::parse(ckpt.config_text);
  ParameterStore params = eval_params(ckpt);

  CacheStrategy strategy;
  strategy.kind = cache_kind_from(strategy_name);
  strategy.window = window.value_or(cfg.model.max_frames);
  strategy.stride = stride.value_or(cfg.model.chunk_size);

  Rng rng(seed);
  GenerateOptions opt;
  opt.condition = condition;
  auto [seq, trace] = generate(strategy, params, cfg.model, cfg.schedule, m_frames, rng, opt);

  std::string seq_csv = "frame_index";
  for (std::size_t d = 0; d < cfg.model.frame_dim; ++d) seq_csv += ",dim_" + std::to_string(d);
  seq_csv += "\n";
  for (std::size_t i = 0; i < m_frames; ++i) {
    seq_csv += std::to_string(i);
    for (std::size_t d = 0; d < cfg.model.frame_dim; ++d) {
      seq_csv += "," + format_double(seq.at(i, d));
    }
    seq_csv += "\n";
  }

  std::string trace_csv = "frame_index,wall_ms,attn_flops,cumulative_ms\n";
  for (std::size_t i = 0; i < trace.frame_wall_ms.size(); ++i) {
    trace_csv += std::to_string(i) + "," + format_double(trace.frame_wall_ms[i]) + "," +
                 std::to_string(trace.frame_attn_flops[i]) + "," +
                 format_double(trace.cumulative_ms[i]) + "\n";
  }

  GenerateOutputs out;
  out.sequence_path = join_path(out_dir, "sequence.csv");
  out.trace_path = join_path(out_dir, "trace.csv");
  atomic_write_file(out.sequence_path, seq_csv);
  atomic_write_file(out.trace_path, trace_csv);
  return out;
}

namespace {

// Per-frame-index samples from the training-horizon sampler, parallelized over
// sequences when SELFROLL_THREADS allows; per-sequence streams keep the result
// identical for any thread count.
std::vector<Tensor> eval_model_samples(const ParameterStore& params, const RunConfig& cfg,
                                       std::size_t n_samples, std::size_t condition, Rng base) {
  const std::size_t n = cfg.model.max_frames;
  const std::size_t fd = cfg.model.frame_dim;
  std::vector<std::vector<double>> rows(n_samples);
  const std::size_t workers = std::min(thread_cap(), n_samples);

  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t s = begin; s < end; ++s) {
      Rng r = base.split(s);
      RolloutOptions opt;
      opt.condition = condition;
      Tensor seq = inference_rollout(params, cfg.model, cfg.schedule, r, opt);
      rows[s].assign(seq.value().begin(), seq.value().end());
    }
  };
  if (workers <= 1) {
    work(0, n_samples);
  } else {
    std::vector<std::thread> threads;
    const std::size_t per = (n_samples + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
      const std::size_t b = w * per;
      const std::size_t e = std::min(n_samples, b + per);
      if (b < e) threads.emplace_back(work, b, e);
    }
    for (auto& t : threads) t.join();
  }

  std::vector<Tensor> by_index;
  by_index.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> v;
    v.reserve(n_samples * fd);
    for (std::size_t s = 0; s < n_samples; ++s) {
      for (std::size_t d = 0; d < fd; ++d) v.push_back(rows[s][i * fd + d]);
    }
    by_index.push_back(Tensor::from_data({n_samples, fd}, std::move(v)));
  }
  return by_index;
}

std::vector<Tensor> truth_samples(const RunConfig& cfg, std::size_t n_samples,
                                  std::size_t condition, Rng base) {
  WorldConfig world = cfg.world;
  world.frame_dim = cfg.model.frame_dim;
  const std::size_t n = cfg.model.max_frames;
  std::vector<std::vector<double>> by_index(n);
  for (std::size_t s = 0; s < n_samples; ++s) {
    Rng r = base.split(s);
    Tensor seq = sample_ground_truth(world, n, condition, r);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t d = 0; d < world.frame_dim; ++d) {
        by_index[i].push_back(seq.at(i, d));
      }
    }
  }
  std::vector<Tensor> out;
  out.reserve(n);
  for (auto& v : by_index) {
    out.push_back(Tensor::from_data({n_samples, world.frame_dim}, std::move(v)));
  }
  return out;
}

}  // namespace

DriftOutputs cmd_eval_drift(const std::string& checkpoint_path, std::size_t n_samples,
                            const std::vector<std::size_t>& conditions, std::uint64_t seed,
                            const std::string& out_dir) {
  if (n_samples < 100) {
    throw std::invalid_argument("eval-drift: need at least 100 samples per frame index");
  }
  ensure_dir(out_dir);
  Checkpoint ckpt = load_checkpoint(checkpoint_path);
  RunConfig cfg = RunConfig::parse(ckpt.config_text);
  ParameterStore params = eval_params(ckpt);

  DriftOutputs out;
  nlohmann::json summary = nlohmann::json::array();
  Rng root(seed);
  for (std::size_t condition : conditions) {
    if (condition >= cfg.model.condition_vocab) {
      throw std::invalid_argument("eval-drift: condition label out of range");
    }
    Rng model_rng = root.split(2 * condition);
    Rng truth_rng = root.split(2 * condition + 1);
    auto model = eval_model_samples(params, cfg, n_samples, condition, model_rng);
    auto truth = truth_samples(cfg, n_samples, condition, truth_rng);
    Rng bw_rng = truth_rng.split(0xbead);
    const double bw = median_heuristic_bandwidth(truth.front(), truth.back(), bw_rng);
    DriftReport rep = drift_report(model, truth, bw);

    std::string csv = "frame_index,mmd2,n_samples\n";
    for (std::size_t i = 0; i < rep.mmd2.size(); ++i) {
      csv += std::to_string(i) + "," + format_double(rep.mmd2[i]) + "," +
             std::to_string(rep.samples[i]) + "\n";
    }
    const std::string path =
        join_path(out_dir, "drift_cond" + std::to_string(condition) + ".csv");
    atomic_write_file(path, csv);
    out.csv_paths.push_back(path);

    nlohmann::json entry;
    entry["condition"] = condition;
    entry["slope"] = rep.slope;
    entry["intercept"] = rep.intercept;
    entry["bandwidth"] = rep.bandwidth;
    entry["final_mmd2"] = rep.mmd2.back();
    summary.push_back(entry);
    out.reports.push_back(std::move(rep));
  }
  out.summary_path = join_path(out_dir, "drift_summary.json");
  atomic_write_file(out.summary_path, summary.dump(2) + "\n");
  return out;
}

std::string cmd_bench_cache(const std::string& checkpoint_path,
                            const std::vector<std::size_t>& m_values, std::size_t window,
                            const std::vector<std::size_t>& strides, std::uint64_t seed,
                            const std::string& out_dir) {
  ensure_dir(out_dir);
  Checkpoint ckpt = load_checkpoint(checkpoint_path);
  RunConfig cfg = RunConfig::parse(ckpt.config_text);
  ParameterStore params = eval_params(ckpt);

  std::string csv = "strategy,stride,M,frame_index,attn_flops,wall_ms\n";
  auto run_one = [&](const std::string& label, const CacheStrategy& strategy, std::size_t m) {
    Rng rng(seed);
    auto [seq, trace] = generate(strategy, params, cfg.model, cfg.schedule, m, rng);
    for (std::size_t i = 0; i < trace.frame_wall_ms.size(); ++i) {
      csv += label + "," + std::to_string(strategy.stride) + "," + std::to_string(m) + "," +
             std::to_string(i) + "," + std::to_string(trace.frame_attn_flops[i]) + "," +
             format_double(trace.frame_wall_ms[i]) + "\n";
    }
  };

  for (std::size_t m : m_values) {
    CacheStrategy rolling{CacheKind::rolling, window, cfg.model.chunk_size};
    run_one("rolling", rolling, m);
    CacheStrategy nocache{CacheKind::no_cache, window, cfg.model.chunk_size};
    run_one("nocache", nocache, m);
    for (std::size_t stride : strides) {
      CacheStrategy recompute{CacheKind::recompute_window, window, stride};
      run_one("recompute", recompute, m);
    }
  }
  const std::string path = join_path(out_dir, "bench.csv");
  atomic_write_file(path, csv);
  return path;
}

// ---- grad-check -------------------------------------------------------------------

namespace {

struct GradPath {
  std::string name;
  double error = 0.0;
};

}  // namespace

GradCheckReport cmd_grad_check(const std::string& config_path,
                               std::size_t probe_limit_per_tensor) {
  RunConfig cfg = RunConfig::load(config_path);
  cfg.validate();
  const ModelConfig& mc = cfg.model;
  const NoiseSchedule& sched = cfg.schedule;
  WorldConfig world = cfg.world;
  world.frame_dim = mc.frame_dim;

  GradCheckOptions opt;
  opt.probe_limit_per_tensor = probe_limit_per_tensor;
  const double step = 1e-5;

  Rng init(cfg.seed);
  Rng gen_rng = init.split(1);
  Rng critic_rng = init.split(2);
  Rng phi_rng = init.split(3);
  Rng head_rng = init.split(4);
  ParameterStore theta = init_generator_params(mc, gen_rng);
  ParameterStore psi = init_generator_params(mc, critic_rng);
  ParameterStore phi = init_generator_params(mc, phi_rng);
  ParameterStore disc = init_generator_params(mc, critic_rng);
  add_discriminator_head(disc, mc, head_rng);
  for (auto& [name, t] : phi) t.set_requires_grad(false);

  Rng data_rng = init.split(5);
  Tensor data = sample_ground_truth(world, mc.max_frames, 0, data_rng);
  const TruncationDraw s{std::min<std::size_t>(2, sched.step_count())};
  const std::vector<double> dm_ts(mc.max_frames, 400.0);

  auto rollout_seq = [&](Tape& tape) {
    Rng r(777);
    RolloutOptions ro;
    ro.condition = 0;
    return self_forcing_rollout(tape, theta, mc, sched, r, s, ro).sequence;
  };

  GradCheckReport report;
  auto run = [&](const std::string& name, ParameterStore& params,
                 const std::function<Tensor(Tape&)>& f) {
    const double err = grad_check(params, f, step, opt);
    report.path_errors.emplace_back(name, err);
    report.worst = std::max(report.worst, err);
  };

  run("tf-denoise", theta, [&](Tape& tape) {
    Rng r(101);
    return teacher_forcing_step(tape, theta, mc, sched, data, 0, sched.step_t(sched.step_count()),
                                r);
  });
  run("df-denoise", theta, [&](Tape& tape) {
    Rng r(102);
    std::vector<double> ts(mc.max_frames);
    for (std::size_t i = 0; i < ts.size(); ++i) {
      ts[i] = sched.step_t(1 + i % sched.step_count());
    }
    return diffusion_forcing_step(tape, theta, mc, sched, data, 0, ts, r);
  });
  run("sf-step-s", theta, [&](Tape& tape) {
    Tensor seq = rollout_seq(tape);
    return mean_all(tape, mul(tape, seq, seq));
  });
  run("dmd", theta, [&](Tape& tape) {
    Tensor seq = rollout_seq(tape);
    Rng r(103);
    return dmd_generator_loss(tape, seq, phi, psi, mc, sched, dm_ts, 0, cfg.dm, r);
  });
  run("sid", theta, [&](Tape& tape) {
    Tensor seq = rollout_seq(tape);
    Rng r(104);
    return sid_generator_loss(tape, seq, phi, psi, mc, sched, dm_ts, 0, cfg.sid, cfg.dm, r);
  });

  // Fixed fake batch for the discriminator side.
  Tensor fake_fixed;
  {
    Tape tape;
    auto ng = tape.no_grad();
    fake_fixed = rollout_seq(tape).detached_copy();
  }
  run("gan-d", disc, [&](Tape& tape) {
    Rng r(105);
    auto d = make_discriminator(disc, mc, sched, dm_ts, 0);
    const Tensor reals[] = {data};
    const Tensor fakes[] = {fake_fixed};
    return gan_losses(tape, reals, fakes, d, dm_ts, sched, cfg.gan, r).d_loss;
  });
  run("gan-g", theta, [&](Tape& tape) {
    Tensor seq = rollout_seq(tape);
    Rng r(106);
    ParamFreeze freeze(disc);
    auto d = make_discriminator(disc, mc, sched, dm_ts, 0);
    const Tensor reals[] = {data};
    const Tensor fakes[] = {seq};
    return gan_losses(tape, reals, fakes, d, dm_ts, sched, cfg.gan, r).g_loss;
  });

  report.passed = report.worst < 1e-5;
  return report;
}

}  // namespace selfroll
