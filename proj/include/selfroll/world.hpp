#pragma once

#include <cstddef>
#include <vector>

#include "selfroll/rng.hpp"
#include "selfroll/tensor.hpp"

namespace selfroll {

// Damped 2-D rotation with process noise:
//   x^{i+1} = rho R(theta_c) x^i + anchor_gain x^1 + sigma_w xi,  x^1 ~ N(0, I).
// The condition label selects the rotation angle. With rho < 1 and zero anchor
// gain the per-index variance relaxes from 1 toward sigma_w^2 / (1 - rho^2),
// so the frame index is visible in the marginals. A positive anchor gain makes
// the first frame a persistent drift source that later transitions depend on,
// the way a distinguished initial frame anchors longer sequences.
struct WorldConfig {
  std::size_t frame_dim = 2;
  double rho = 0.95;
  double sigma_w = 0.25;
  double anchor_gain = 0.0;
  std::vector<double> angles_deg = {30.0, -50.0};  // one per condition label

  std::size_t condition_count() const { return angles_deg.size(); }
  void validate() const;
};

struct DriftReport {
  std::vector<double> mmd2;  // per frame index
  std::vector<std::size_t> samples;
  double slope = 0.0;  // least squares of mmd2 vs frame index
  double intercept = 0.0;
  double bandwidth = 0.0;
};

// Exact draw from the Markov process.
Tensor sample_ground_truth(const WorldConfig& config, std::size_t n_frames,
                           std::size_t condition, Rng& rng);

// Analytic per-index marginal variance (isotropic; x^1 ~ N(0, I)). With a
// nonzero anchor gain the cross terms make it condition-dependent.
double ground_truth_variance(const WorldConfig& config, std::size_t frame_index,
                             std::size_t condition = 0);

// Biased V-statistic MMD^2 with an RBF kernel, symmetric in the two sets.
// Points are rows of [n x d] matrices.
double mmd_squared(const Tensor& set_a, const Tensor& set_b, double bandwidth);

// Median pairwise distance over the pooled rows (capped subsample for cost).
double median_heuristic_bandwidth(const Tensor& set_a, const Tensor& set_b, Rng& rng,
                                  std::size_t max_points = 512);

// d_i = MMD^2 between model and ground-truth samples at frame index i, with a
// least-squares drift line. model[i] and truth[i] are [n_samples x d].
DriftReport drift_report(const std::vector<Tensor>& model_by_index,
                         const std::vector<Tensor>& truth_by_index, double bandwidth);

// Permutation p-value for the null "A and B share a distribution", using MMD^2
// as the statistic.
double mmd_permutation_pvalue(const Tensor& set_a, const Tensor& set_b, double bandwidth,
                              std::size_t permutations, Rng& rng);

}  // namespace selfroll
