#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "selfroll/world.hpp"

using namespace selfroll;

TEST_CASE("frozen dynamics give a constant sequence") {
  WorldConfig w;
  w.rho = 1.0;
  w.sigma_w = 0.0;
  w.angles_deg = {0.0};
  Rng rng(1);
  Tensor seq = sample_ground_truth(w, 6, 0, rng);
  for (std::size_t i = 1; i < 6; ++i) {
    CHECK(seq.at(i, 0) == doctest::Approx(seq.at(0, 0)).epsilon(1e-15));
    CHECK(seq.at(i, 1) == doctest::Approx(seq.at(0, 1)).epsilon(1e-15));
  }
}

TEST_CASE("quarter-turn rotation without noise orbits in four steps") {
  WorldConfig w;
  w.rho = 1.0;
  w.sigma_w = 0.0;
  w.angles_deg = {90.0};
  Rng rng(2);
  Tensor seq = sample_ground_truth(w, 5, 0, rng);
  const double x0 = seq.at(0, 0), x1 = seq.at(0, 1);
  CHECK(seq.at(1, 0) == doctest::Approx(-x1).epsilon(1e-12));
  CHECK(seq.at(1, 1) == doctest::Approx(x0).epsilon(1e-12));
  CHECK(seq.at(2, 0) == doctest::Approx(-x0).epsilon(1e-12));
  CHECK(seq.at(2, 1) == doctest::Approx(-x1).epsilon(1e-12));
  CHECK(seq.at(4, 0) == doctest::Approx(x0).epsilon(1e-12));
  CHECK(seq.at(4, 1) == doctest::Approx(x1).epsilon(1e-12));
}

TEST_CASE("lag-1 autocorrelation approaches rho cos theta at stationarity") {
  WorldConfig w;
  w.rho = 0.9;
  w.sigma_w = std::sqrt(1.0 - 0.9 * 0.9);  // stationary from the first frame
  w.angles_deg = {35.0};
  Rng rng(3);
  const std::size_t seqs = 8000, len = 26;
  double num = 0.0, den = 0.0;
  std::size_t pairs = 0;
  for (std::size_t s = 0; s < seqs; ++s) {
    Rng r = rng.split(s);
    Tensor seq = sample_ground_truth(w, len, 0, r);
    for (std::size_t i = 0; i + 1 < len; ++i) {
      for (std::size_t d = 0; d < 2; ++d) {
        num += seq.at(i + 1, d) * seq.at(i, d);
        den += seq.at(i, d) * seq.at(i, d);
        ++pairs;
      }
    }
  }
  const double corr = num / den;
  const double expected = 0.9 * std::cos(35.0 * 3.14159265358979323846 / 180.0);
  CHECK(std::abs(corr - expected) < 0.02);
  CHECK(pairs > 100000);
}

TEST_CASE("empirical moments match the analytic per-index marginals within 3 sigma") {
  WorldConfig w;  // defaults: rho 0.95, sigma_w 0.25 (non-stationary variance decay)
  Rng rng(4);
  const std::size_t n_samples = 100000, len = 8;
  std::vector<double> sum(len, 0.0), sum_sq(len, 0.0);
  for (std::size_t s = 0; s < n_samples; ++s) {
    Rng r = rng.split(s);
    Tensor seq = sample_ground_truth(w, len, 0, r);
    for (std::size_t i = 0; i < len; ++i) {
      sum[i] += seq.at(i, 0);
      sum_sq[i] += seq.at(i, 0) * seq.at(i, 0);
    }
  }
  for (std::size_t i = 0; i < len; ++i) {
    const double v = ground_truth_variance(w, i);
    const double mean = sum[i] / n_samples;
    const double var = sum_sq[i] / n_samples - mean * mean;
    const double mean_sigma = std::sqrt(v / n_samples);
    const double var_sigma = v * std::sqrt(2.0 / (n_samples - 1));
    CHECK(std::abs(mean - 0.0) < 3.0 * mean_sigma);
    CHECK(std::abs(var - v) < 3.0 * var_sigma);
  }
  // variance relaxes toward sigma_w^2 / (1 - rho^2)
  const double v_inf = w.sigma_w * w.sigma_w / (1.0 - w.rho * w.rho);
  CHECK(ground_truth_variance(w, 0) == 1.0);
  CHECK(std::abs(ground_truth_variance(w, 40) - v_inf) < 0.02);
}

TEST_CASE("anchored dynamics keep the analytic moment recursion exact") {
  WorldConfig w;
  w.rho = 0.6;
  w.sigma_w = 0.25;
  w.anchor_gain = 0.5;
  w.angles_deg = {33.0};
  Rng rng(40);
  const std::size_t n_samples = 200000, len = 8;
  std::vector<double> sum_sq(len, 0.0);
  for (std::size_t s = 0; s < n_samples; ++s) {
    Rng r = rng.split(s);
    Tensor seq = sample_ground_truth(w, len, 0, r);
    for (std::size_t i = 0; i < len; ++i) {
      sum_sq[i] += 0.5 * (seq.at(i, 0) * seq.at(i, 0) + seq.at(i, 1) * seq.at(i, 1));
    }
  }
  for (std::size_t i = 0; i < len; ++i) {
    const double v = ground_truth_variance(w, i, 0);
    const double got = sum_sq[i] / n_samples;
    // chi-square-ish sampling band
    CHECK(std::abs(got - v) < 4.0 * v / std::sqrt(static_cast<double>(n_samples)));
  }
}

TEST_CASE("mmd is zero on identical multisets and detects separated Gaussians") {
  Rng rng(5);
  Tensor a = Tensor::randn(rng, {200, 2});
  CHECK(mmd_squared(a, a, 1.0) == 0.0);

  Tensor s1 = Tensor::from_data({1, 2}, {0.0, 0.0});
  CHECK(mmd_squared(s1, s1, 1.0) == 0.0);

  std::vector<double> shifted(1000 * 1);
  std::vector<double> centered(1000 * 1);
  for (std::size_t i = 0; i < 1000; ++i) {
    centered[i] = rng.normal();
    shifted[i] = 3.0 + rng.normal();
  }
  const double d = mmd_squared(Tensor::from_data({1000, 1}, centered),
                               Tensor::from_data({1000, 1}, shifted), 1.0);
  CHECK(d > 0.5);

  CHECK_THROWS_AS(mmd_squared(a, a, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(mmd_squared(a, a, -1.0), std::invalid_argument);
}

TEST_CASE("mmd is symmetric and invariant under simultaneous permutation") {
  Rng rng(6);
  Tensor a = Tensor::randn(rng, {64, 2});
  std::vector<double> b_shift(64 * 2);
  for (std::size_t i = 0; i < b_shift.size(); ++i) b_shift[i] = 0.5 + rng.normal();
  Tensor b = Tensor::from_data({64, 2}, b_shift);
  const double ab = mmd_squared(a, b, 0.8);
  const double ba = mmd_squared(b, a, 0.8);
  CHECK(ab == doctest::Approx(ba).epsilon(1e-12));

  // permute both sets with the same reindexing
  auto permute = [&](const Tensor& t, std::size_t offset) {
    std::vector<double> out(t.size());
    const std::size_t n = t.rows();
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t j = (i * 17 + offset) % n;
      out[i * 2] = t.at(j, 0);
      out[i * 2 + 1] = t.at(j, 1);
    }
    return Tensor::from_data({n, 2}, std::move(out));
  };
  const double permuted = mmd_squared(permute(a, 5), permute(b, 5), 0.8);
  CHECK(permuted == doctest::Approx(ab).epsilon(1e-12));
}

TEST_CASE("drift report on matched distributions sits inside the bootstrap null band") {
  WorldConfig w;
  Rng rng(7);
  const std::size_t n = 200, len = 6;

  auto draw_by_index = [&](Rng& r) {
    std::vector<std::vector<double>> rows(len);
    for (std::size_t s = 0; s < n; ++s) {
      Rng rs = r.split(s);
      Tensor seq = sample_ground_truth(w, len, 0, rs);
      for (std::size_t i = 0; i < len; ++i) {
        rows[i].push_back(seq.at(i, 0));
        rows[i].push_back(seq.at(i, 1));
      }
    }
    std::vector<Tensor> out;
    for (auto& v : rows) out.push_back(Tensor::from_data({n, 2}, std::move(v)));
    return out;
  };

  Rng ra = rng.split(1), rb = rng.split(2);
  auto model = draw_by_index(ra);
  auto truth = draw_by_index(rb);
  DriftReport rep = drift_report(model, truth, 1.0);

  // null band from fresh truth-vs-truth slopes
  std::vector<double> null_slopes;
  for (std::size_t trial = 0; trial < 40; ++trial) {
    Rng r1 = rng.split(100 + 2 * trial), r2 = rng.split(101 + 2 * trial);
    auto m = draw_by_index(r1);
    auto t = draw_by_index(r2);
    null_slopes.push_back(std::abs(drift_report(m, t, 1.0).slope));
  }
  const double band = *std::max_element(null_slopes.begin(), null_slopes.end());
  CHECK(std::abs(rep.slope) <= band);
  for (double d : rep.mmd2) CHECK(d >= -1e-12);
}

TEST_CASE("constructed per-step bias produces monotone drift") {
  WorldConfig w;
  Rng rng(8);
  const std::size_t n = 600, len = 6;
  std::vector<std::vector<double>> model_rows(len), truth_rows(len);
  for (std::size_t s = 0; s < n; ++s) {
    Rng rm = rng.split(s), rt = rng.split(700000 + s);
    Tensor a = sample_ground_truth(w, len, 0, rm);
    Tensor b = sample_ground_truth(w, len, 0, rt);
    for (std::size_t i = 0; i < len; ++i) {
      const double beta = 0.35 * static_cast<double>(i + 1);
      model_rows[i].push_back(a.at(i, 0) + beta);
      model_rows[i].push_back(a.at(i, 1));
      truth_rows[i].push_back(b.at(i, 0));
      truth_rows[i].push_back(b.at(i, 1));
    }
  }
  std::vector<Tensor> model, truth;
  for (auto& v : model_rows) model.push_back(Tensor::from_data({n, 2}, std::move(v)));
  for (auto& v : truth_rows) truth.push_back(Tensor::from_data({n, 2}, std::move(v)));
  DriftReport rep = drift_report(model, truth, 1.0);
  CHECK(rep.slope > 0.0);
  CHECK(rep.mmd2.back() > rep.mmd2.front());
  for (std::size_t i = 1; i < len; ++i) CHECK(rep.mmd2[i] > rep.mmd2[i - 1]);
}

TEST_CASE("drift report rejects undersized samples") {
  WorldConfig w;
  Rng rng(9);
  std::vector<Tensor> a = {Tensor::randn(rng, {50, 2})};
  std::vector<Tensor> b = {Tensor::randn(rng, {50, 2})};
  CHECK_THROWS_AS(drift_report(a, b, 1.0), std::invalid_argument);
}

TEST_CASE("permutation p-values separate matched from shifted samples") {
  Rng rng(10);
  Tensor a = Tensor::randn(rng, {80, 1});
  Tensor b = Tensor::randn(rng, {80, 1});
  std::vector<double> sh(80);
  for (auto& v : sh) v = 2.0 + rng.normal();
  Tensor c = Tensor::from_data({80, 1}, sh);
  Rng pr(11);
  const double p_same = mmd_permutation_pvalue(a, b, 1.0, 100, pr);
  const double p_diff = mmd_permutation_pvalue(a, c, 1.0, 100, pr);
  CHECK(p_same > 0.01);
  CHECK(p_diff < 0.05);
}

TEST_CASE("world config validation") {
  WorldConfig w;
  w.rho = 1.2;
  CHECK_THROWS_AS(w.validate(), std::invalid_argument);
  w.rho = 0.9;
  w.angles_deg.clear();
  CHECK_THROWS_AS(w.validate(), std::invalid_argument);
  WorldConfig w3;
  w3.frame_dim = 3;
  CHECK_THROWS_AS(w3.validate(), std::invalid_argument);
  Rng rng(12);
  WorldConfig ok;
  CHECK_THROWS_AS(sample_ground_truth(ok, 0, 0, rng), std::invalid_argument);
  CHECK_THROWS_AS(sample_ground_truth(ok, 3, 9, rng), std::invalid_argument);
}
