#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "selfroll/commands.hpp"

namespace {

int run(int argc, char** argv) {
  CLI::App app{"selfroll: autoregressive diffusion sequence models on synthetic worlds"};
  app.require_subcommand(1);

  std::string config_path, checkpoint_path, out_dir = ".", strategy = "rolling";
  std::uint64_t seed = 1;
  std::size_t m_frames = 16, n_samples = 200, window = 0, stride = 0, probe = 24;
  std::vector<std::size_t> conditions, m_values, strides;
  std::size_t condition = 0;
  std::string resume;

  auto* train = app.add_subcommand("train", "train per the run config");
  train->add_option("--config", config_path, "run config path");
  train->add_option("--checkpoint", resume, "resume from this checkpoint");
  train->add_option("--seed", seed, "seed override");
  train->add_option("--out-dir", out_dir, "output directory");
  bool seed_given = false;
  train->callback([&] { seed_given = train->count("--seed") > 0; });

  auto* gen = app.add_subcommand("generate", "sample a sequence from a checkpoint");
  gen->add_option("--checkpoint", checkpoint_path, "checkpoint path")->required();
  gen->add_option("--frames", m_frames, "frames to generate");
  gen->add_option("--strategy", strategy, "rolling | recompute | nocache");
  gen->add_option("--window", window, "cache window L in frames (default: training horizon)");
  gen->add_option("--stride", stride, "recompute-window stride in frames");
  gen->add_option("--condition", condition, "condition label");
  gen->add_option("--seed", seed, "generation seed");
  gen->add_option("--out-dir", out_dir, "output directory");

  auto* drift = app.add_subcommand("eval-drift", "per-frame-index drift against ground truth");
  drift->add_option("--checkpoint", checkpoint_path, "checkpoint path")->required();
  drift->add_option("--samples", n_samples, "sequences per condition (>= 100)");
  drift->add_option("--conditions", conditions, "condition labels (default: all)");
  drift->add_option("--seed", seed, "evaluation seed");
  drift->add_option("--out-dir", out_dir, "output directory");

  auto* bench = app.add_subcommand("bench-cache", "complexity comparison of cache strategies");
  bench->add_option("--checkpoint", checkpoint_path, "checkpoint path")->required();
  bench->add_option("--frames", m_values, "M values")->required();
  bench->add_option("--window", window, "cache window L in frames")->required();
  bench->add_option("--strides", strides, "recompute strides");
  bench->add_option("--seed", seed, "generation seed");
  bench->add_option("--out-dir", out_dir, "output directory");

  auto* gc = app.add_subcommand("grad-check", "finite-difference check of every loss path");
  gc->add_option("--config", config_path, "run config path")->required();
  gc->add_option("--probe", probe, "max probed coordinates per tensor");

  CLI11_PARSE(app, argc, argv);

  if (train->parsed()) {
    if (config_path.empty() && resume.empty()) {
      std::fprintf(stderr, "train: need --config or --checkpoint\n");
      return 1;
    }
    auto out = selfroll::cmd_train(config_path, out_dir, resume,
                                   seed_given ? std::optional<std::uint64_t>(seed) : std::nullopt);
    std::printf("trained to iteration %llu\ncheckpoint: %s\nmetrics: %s\n",
                static_cast<unsigned long long>(out.final_iteration), out.checkpoint_path.c_str(),
                out.metrics_path.c_str());
  } else if (gen->parsed()) {
    auto out = selfroll::cmd_generate(
        checkpoint_path, m_frames, strategy, seed, out_dir,
        window ? std::optional<std::size_t>(window) : std::nullopt,
        stride ? std::optional<std::size_t>(stride) : std::nullopt, condition);
    std::printf("sequence: %s\ntrace: %s\n", out.sequence_path.c_str(), out.trace_path.c_str());
  } else if (drift->parsed()) {
    if (conditions.empty()) {
      auto ckpt = selfroll::load_checkpoint(checkpoint_path);
      auto cfg = selfroll::RunConfig::parse(ckpt.config_text);
      for (std::size_t c = 0; c < cfg.model.condition_vocab; ++c) conditions.push_back(c);
    }
    auto out = selfroll::cmd_eval_drift(checkpoint_path, n_samples, conditions, seed, out_dir);
    for (std::size_t i = 0; i < conditions.size(); ++i) {
      std::printf("condition %zu: slope %.6g, final mmd2 %.6g (%s)\n", conditions[i],
                  out.reports[i].slope, out.reports[i].mmd2.back(), out.csv_paths[i].c_str());
    }
    std::printf("summary: %s\n", out.summary_path.c_str());
  } else if (bench->parsed()) {
    if (strides.empty()) strides.push_back(window);
    auto path = selfroll::cmd_bench_cache(checkpoint_path, m_values, window, strides, seed,
                                          out_dir);
    std::printf("bench: %s\n", path.c_str());
  } else if (gc->parsed()) {
    auto report = selfroll::cmd_grad_check(config_path, probe);
    for (const auto& [name, err] : report.path_errors) {
      std::printf("%-12s max relative error %.3e\n", name.c_str(), err);
    }
    std::printf("worst: %.3e (%s)\n", report.worst, report.passed ? "pass" : "FAIL");
    return report.passed ? 0 : 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
