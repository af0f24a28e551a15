#include "selfroll/world.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace selfroll {

namespace {

constexpr double kPi = 3.14159265358979323846;

}  // namespace

void WorldConfig::validate() const {
  if (frame_dim != 2) {
    throw std::invalid_argument("WorldConfig: dynamics are defined for frame_dim 2");
  }
  if (rho <= 0.0 || rho > 1.0) {
    throw std::invalid_argument("WorldConfig: rho must lie in (0, 1]");
  }
  if (sigma_w < 0.0) throw std::invalid_argument("WorldConfig: sigma_w must be >= 0");
  if (angles_deg.empty()) throw std::invalid_argument("WorldConfig: no condition angles");
}

Tensor sample_ground_truth(const WorldConfig& config, std::size_t n_frames,
                           std::size_t condition, Rng& rng) {
  config.validate();
  if (n_frames == 0) throw std::invalid_argument("sample_ground_truth: need at least one frame");
  if (condition >= config.angles_deg.size()) {
    throw std::invalid_argument("sample_ground_truth: condition label out of range");
  }
  const double theta = config.angles_deg[condition] * kPi / 180.0;
  const double c = std::cos(theta), s = std::sin(theta);

  std::vector<double> out(n_frames * 2);
  const double a0 = rng.normal();
  const double a1 = rng.normal();
  double x0 = a0, x1 = a1;
  out[0] = x0;
  out[1] = x1;
  for (std::size_t i = 1; i < n_frames; ++i) {
    const double r0 = config.rho * (c * x0 - s * x1) + config.anchor_gain * a0 +
                      config.sigma_w * rng.normal();
    const double r1 = config.rho * (s * x0 + c * x1) + config.anchor_gain * a1 +
                      config.sigma_w * rng.normal();
    x0 = r0;
    x1 = r1;
    out[i * 2] = x0;
    out[i * 2 + 1] = x1;
  }
  return Tensor::from_data({n_frames, 2}, std::move(out));
}

double ground_truth_variance(const WorldConfig& config, std::size_t frame_index,
                             std::size_t condition) {
  // Exact second-moment recursion (per condition the rotation angle drops out
  // of the per-coordinate variance). With M_i = E[x^i (x^1)^T] and
  // V_i = E[x^i (x^i)^T] averaged per coordinate:
  //   tr M_{i+1} = rho cos(theta) tr M_i + 2 g
  //   tr V_{i+1} = rho^2 tr V_i + 2 g^2 + 2 q + 2 rho g cos(theta) tr M_i
  // except the rotation couples M's off-diagonal part; run the full 2x2
  // recursion to stay exact for every angle.
  const double q = config.sigma_w * config.sigma_w;
  const double g = config.anchor_gain;
  if (g == 0.0) {
    double v = 1.0;
    for (std::size_t i = 0; i < frame_index; ++i) v = config.rho * config.rho * v + q;
    return v;
  }
  const double theta = condition < config.angles_deg.size()
                           ? config.angles_deg[condition] * kPi / 180.0
                           : 0.0;
  const double c = std::cos(theta), s = std::sin(theta);
  auto rot = [&](const double m[4], double out[4]) {
    // out = rho R m
    out[0] = config.rho * (c * m[0] - s * m[2]);
    out[1] = config.rho * (c * m[1] - s * m[3]);
    out[2] = config.rho * (s * m[0] + c * m[2]);
    out[3] = config.rho * (s * m[1] + c * m[3]);
  };
  double M[4] = {1, 0, 0, 1};         // E[x^i (x^1)^T]
  double V[4] = {1, 0, 0, 1};         // E[x^i (x^i)^T]
  for (std::size_t i = 0; i < frame_index; ++i) {
    double RM[4], RV[4], RVR[4];
    rot(M, RM);
    rot(V, RV);
    // rho^2 R V R^T
    RVR[0] = config.rho * (c * RV[0] - s * RV[1]);
    RVR[1] = config.rho * (s * RV[0] + c * RV[1]);
    RVR[2] = config.rho * (c * RV[2] - s * RV[3]);
    RVR[3] = config.rho * (s * RV[2] + c * RV[3]);
    double Vn[4], Mn[4];
    // V' = rho^2 RVR^T + g (RM + (RM)^T) ... cross terms use M at step i
    Vn[0] = RVR[0] + g * (RM[0] + RM[0]) + g * g + q;
    Vn[1] = RVR[1] + g * (RM[1] + RM[2]);
    Vn[2] = RVR[2] + g * (RM[2] + RM[1]);
    Vn[3] = RVR[3] + g * (RM[3] + RM[3]) + g * g + q;
    Mn[0] = RM[0] + g;
    Mn[1] = RM[1];
    Mn[2] = RM[2];
    Mn[3] = RM[3] + g;
    std::copy(Vn, Vn + 4, V);
    std::copy(Mn, Mn + 4, M);
  }
  return 0.5 * (V[0] + V[3]);
}

namespace {

double sq_dist(std::span<const double> a, std::span<const double> b, std::size_t i,
               std::size_t j, std::size_t d) {
  double s = 0.0;
  for (std::size_t k = 0; k < d; ++k) {
    const double diff = a[i * d + k] - b[j * d + k];
    s += diff * diff;
  }
  return s;
}

double mean_kernel(const Tensor& a, const Tensor& b, double gamma) {
  const std::size_t na = a.rows(), nb = b.rows(), d = a.cols();
  auto av = a.value(), bv = b.value();
  double s = 0.0;
  for (std::size_t i = 0; i < na; ++i) {
    for (std::size_t j = 0; j < nb; ++j) {
      s += std::exp(-gamma * sq_dist(av, bv, i, j, d));
    }
  }
  return s / (static_cast<double>(na) * static_cast<double>(nb));
}

}  // namespace

double mmd_squared(const Tensor& set_a, const Tensor& set_b, double bandwidth) {
  if (!(bandwidth > 0.0)) throw std::invalid_argument("mmd_squared: bandwidth must be positive");
  if (set_a.rows() == 0 || set_b.rows() == 0) {
    throw std::invalid_argument("mmd_squared: empty sample set");
  }
  if (set_a.cols() != set_b.cols()) {
    throw std::invalid_argument("mmd_squared: dimension mismatch");
  }
  const double gamma = 1.0 / (2.0 * bandwidth * bandwidth);
  return mean_kernel(set_a, set_a, gamma) + mean_kernel(set_b, set_b, gamma) -
         2.0 * mean_kernel(set_a, set_b, gamma);
}

double median_heuristic_bandwidth(const Tensor& set_a, const Tensor& set_b, Rng& rng,
                                  std::size_t max_points) {
  (void)rng;
  const std::size_t d = set_a.cols();
  std::vector<double> pool;
  auto push_rows = [&](const Tensor& t) {
    const std::size_t take = std::min(t.rows(), max_points / 2);
    for (std::size_t i = 0; i < take; ++i) {
      for (std::size_t k = 0; k < d; ++k) pool.push_back(t.at(i, k));
    }
  };
  push_rows(set_a);
  push_rows(set_b);
  const std::size_t n = pool.size() / d;
  if (n < 2) return 1.0;
  std::vector<double> dist;
  dist.reserve(n * (n - 1) / 2);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      dist.push_back(std::sqrt(sq_dist(pool, pool, i, j, d)));
    }
  }
  std::nth_element(dist.begin(), dist.begin() + dist.size() / 2, dist.end());
  const double med = dist[dist.size() / 2];
  return med > 0.0 ? med : 1.0;
}

DriftReport drift_report(const std::vector<Tensor>& model_by_index,
                         const std::vector<Tensor>& truth_by_index, double bandwidth) {
  if (model_by_index.size() != truth_by_index.size() || model_by_index.empty()) {
    throw std::invalid_argument("drift_report: per-index sample lists must align");
  }
  for (std::size_t i = 0; i < model_by_index.size(); ++i) {
    if (model_by_index[i].rows() < 100 || truth_by_index[i].rows() < 100) {
      throw std::invalid_argument("drift_report: need at least 100 samples per frame index");
    }
  }
  DriftReport rep;
  rep.bandwidth = bandwidth;
  const std::size_t n = model_by_index.size();
  for (std::size_t i = 0; i < n; ++i) {
    rep.mmd2.push_back(mmd_squared(model_by_index[i], truth_by_index[i], bandwidth));
    rep.samples.push_back(model_by_index[i].rows());
  }
  // Least squares of d_i against the frame index.
  double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = static_cast<double>(i);
    sx += x;
    sy += rep.mmd2[i];
    sxx += x * x;
    sxy += x * rep.mmd2[i];
  }
  const double nn = static_cast<double>(n);
  const double denom = nn * sxx - sx * sx;
  rep.slope = denom != 0.0 ? (nn * sxy - sx * sy) / denom : 0.0;
  rep.intercept = (sy - rep.slope * sx) / nn;
  return rep;
}

double mmd_permutation_pvalue(const Tensor& set_a, const Tensor& set_b, double bandwidth,
                              std::size_t permutations, Rng& rng) {
  const std::size_t na = set_a.rows(), nb = set_b.rows(), d = set_a.cols();
  const double observed = mmd_squared(set_a, set_b, bandwidth);
  std::vector<double> pool((na + nb) * d);
  std::copy(set_a.value().begin(), set_a.value().end(), pool.begin());
  std::copy(set_b.value().begin(), set_b.value().end(), pool.begin() + na * d);

  std::size_t at_least = 1;  // the observed split counts
  std::vector<std::size_t> idx(na + nb);
  for (std::size_t p = 0; p < permutations; ++p) {
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    for (std::size_t i = idx.size(); i > 1; --i) {
      std::swap(idx[i - 1], idx[rng.uniform_int(i)]);
    }
    std::vector<double> pa(na * d), pb(nb * d);
    for (std::size_t i = 0; i < na; ++i) {
      std::copy_n(pool.begin() + idx[i] * d, d, pa.begin() + i * d);
    }
    for (std::size_t i = 0; i < nb; ++i) {
      std::copy_n(pool.begin() + idx[na + i] * d, d, pb.begin() + i * d);
    }
    const double stat = mmd_squared(Tensor::from_data({na, d}, std::move(pa)),
                                    Tensor::from_data({nb, d}, std::move(pb)), bandwidth);
    if (stat >= observed) ++at_least;
  }
  return static_cast<double>(at_least) / static_cast<double>(permutations + 1);
}

}  // namespace selfroll
