#pragma once

#include <optional>
#include <string>
#include <vector>

#include "selfroll/inference.hpp"
#include "selfroll/train.hpp"

namespace selfroll {

// Library-level command implementations; the CLI binary is a thin argument
// parser over these, and tests drive them directly. All contract violations
// throw; the binary maps exceptions to a nonzero exit code.

struct TrainOutputs {
  std::string checkpoint_path;
  std::string metrics_path;
  std::uint64_t final_iteration = 0;
};

TrainOutputs cmd_train(const std::string& config_path, const std::string& out_dir,
                       const std::string& resume_checkpoint = "",
                       std::optional<std::uint64_t> seed_override = {});

struct GenerateOutputs {
  std::string sequence_path;
  std::string trace_path;
};

GenerateOutputs cmd_generate(const std::string& checkpoint_path, std::size_t m_frames,
                             const std::string& strategy_name, std::uint64_t seed,
                             const std::string& out_dir,
                             std::optional<std::size_t> window = {},
                             std::optional<std::size_t> stride = {}, std::size_t condition = 0);

struct DriftOutputs {
  std::vector<std::string> csv_paths;  // one per condition
  std::string summary_path;            // JSON with per-condition slope/intercept
  std::vector<DriftReport> reports;
};

DriftOutputs cmd_eval_drift(const std::string& checkpoint_path, std::size_t n_samples,
                            const std::vector<std::size_t>& conditions, std::uint64_t seed,
                            const std::string& out_dir);

std::string cmd_bench_cache(const std::string& checkpoint_path,
                            const std::vector<std::size_t>& m_values, std::size_t window,
                            const std::vector<std::size_t>& strides, std::uint64_t seed,
                            const std::string& out_dir);

struct GradCheckReport {
  std::vector<std::pair<std::string, double>> path_errors;
  double worst = 0.0;
  bool passed = false;  // every path under 1e-5
};

GradCheckReport cmd_grad_check(const std::string& config_path,
                               std::size_t probe_limit_per_tensor = 24);

// Evaluation parameters: the EMA shadow stored in the checkpoint.
ParameterStore eval_params(const Checkpoint& ckpt);

// Thread cap from SELFROLL_THREADS (default 1).
std::size_t thread_cap();

}  // namespace selfroll
