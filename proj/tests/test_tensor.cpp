#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "selfroll/schedule.hpp"
#include "selfroll/tensor.hpp"
#include "selfroll/transformer.hpp"

using namespace selfroll;

namespace {

Tensor t2(std::vector<double> v, std::size_t r, std::size_t c, bool grad = false) {
  return Tensor::from_data({r, c}, std::move(v), grad);
}

}  // namespace

TEST_CASE("matmul values") {
  Tape tape;
  // identity case
  Tensor eye = t2({1, 0, 0, 1}, 2, 2);
  Tensor v = t2({3, 4}, 2, 1);
  Tensor out = matmul(tape, eye, v);
  CHECK(out.at(0, 0) == 3.0);
  CHECK(out.at(1, 0) == 4.0);
  // hand arithmetic 1*3 + 2*4
  Tensor a = t2({1, 2}, 1, 2);
  Tensor b = t2({3, 4}, 2, 1);
  CHECK(matmul(tape, a, b).scalar_value() == 11.0);
  // shape mismatch carries a descriptive error
  CHECK_THROWS_WITH_AS(matmul(tape, t2({1, 2}, 1, 2), t2({1, 2, 3}, 1, 3)),
                       doctest::Contains("inner extents differ"), std::invalid_argument);
}

TEST_CASE("matmul gradient equals row-broadcast of b row sums and matches FD") {
  Rng rng(7);
  Tensor a = Tensor::randn(rng, {3, 4}, 1.0, true);
  Tensor b = Tensor::randn(rng, {4, 2});
  Tape tape;
  Tensor loss = sum_all(tape, matmul(tape, a, b));
  tape.backward(loss);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      double row_sum = 0.0;
      for (std::size_t k = 0; k < 2; ++k) row_sum += b.at(j, k);
      CHECK(a.grad()[i * 4 + j] == doctest::Approx(row_sum).epsilon(1e-12));
    }
  }
  // central finite differences, step 1e-6
  const double h = 1e-6;
  for (std::size_t idx : {0UL, 5UL, 11UL}) {
    auto eval = [&](double delta) {
      auto av = a.mutable_value();
      const double saved = av[idx];
      av[idx] = saved + delta;
      Tape t;
      const double out = sum_all(t, matmul(t, a, b)).scalar_value();
      av[idx] = saved;
      return out;
    };
    const double numeric = (eval(h) - eval(-h)) / (2 * h);
    CHECK(a.grad()[idx] == doctest::Approx(numeric).epsilon(1e-6));
  }
}

TEST_CASE("softmax rows") {
  Tape tape;
  Tensor s1 = softmax_rows(tape, t2({0, 0}, 1, 2));
  CHECK(s1.at(0, 0) == 0.5);
  CHECK(s1.at(0, 1) == 0.5);
  Tensor s2 = softmax_rows(tape, t2({1000, 1000}, 1, 2));
  CHECK(s2.at(0, 0) == 0.5);
  CHECK(s2.at(0, 1) == 0.5);
  Tensor s3 = softmax_rows(tape, t2({0, std::log(3.0)}, 1, 2));
  CHECK(s3.at(0, 0) == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(s3.at(0, 1) == doctest::Approx(0.75).epsilon(1e-12));
  CHECK_THROWS_AS(softmax_rows(tape, t2({std::nan(""), 0}, 1, 2)), std::invalid_argument);
}

TEST_CASE("masked attention basics") {
  Tape tape;
  // single token, mask [[true]] -> output equals the v row
  {
    Tensor q = t2({0.3, -0.2}, 1, 2), k = t2({1.0, 2.0}, 1, 2), v = t2({5.0, -7.0}, 1, 2);
    BoolMatrix m = BoolMatrix::all_true(1, 1);
    Tensor out = masked_attention(tape, q, k, v, &m);
    CHECK(out.at(0, 0) == 5.0);
    CHECK(out.at(0, 1) == -7.0);
  }
  // diagonal-only mask: every token attends to itself only
  {
    Rng rng(3);
    Tensor q = Tensor::randn(rng, {4, 2}), k = Tensor::randn(rng, {4, 2});
    Tensor v = Tensor::randn(rng, {4, 2});
    BoolMatrix m{4, 4, std::vector<std::uint8_t>(16, 0)};
    for (std::size_t i = 0; i < 4; ++i) m.set(i, i, true);
    Tensor out = masked_attention(tape, q, k, v, &m);
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(out.at(i, 0) == v.at(i, 0));
      CHECK(out.at(i, 1) == v.at(i, 1));
    }
  }
  // orthogonal q, k with a full mask: logits are zero, so the mixture is even
  {
    Tensor q = t2({1, 0, 1, 0}, 2, 2);
    Tensor k = t2({0, 1, 0, 1}, 2, 2);
    Tensor v = t2({2, 0, 0, 4}, 2, 2);
    Tensor out = masked_attention(tape, q, k, v, nullptr);
    CHECK(out.at(0, 0) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(out.at(0, 1) == doctest::Approx(2.0).epsilon(1e-15));
  }
  // an all-masked row would softmax to NaN, so it is rejected
  {
    BoolMatrix m{1, 2, {0, 0}};
    Tensor q = t2({1, 1}, 1, 2), kv = t2({1, 1, 2, 2}, 2, 2);
    CHECK_THROWS_WITH_AS(masked_attention(tape, q, kv, kv, &m),
                         doctest::Contains("fully masked"), std::invalid_argument);
  }
}

TEST_CASE("attention with a fully-true mask is bitwise equal to unmasked attention") {
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor q = Tensor::randn(rng, {5, 3}), k = Tensor::randn(rng, {5, 3});
    Tensor v = Tensor::randn(rng, {5, 3});
    Tape tape;
    BoolMatrix m = BoolMatrix::all_true(5, 5);
    Tensor masked = masked_attention(tape, q, k, v, &m);
    Tensor open = masked_attention(tape, q, k, v, nullptr);
    for (std::size_t i = 0; i < masked.size(); ++i) {
      CHECK(masked.value()[i] == open.value()[i]);
    }
  }
}

TEST_CASE("backward basics") {
  // loss = sum(x) -> unit gradient
  {
    Tensor x = t2({1, 2, 3}, 1, 3, true);
    Tape tape;
    tape.backward(sum_all(tape, x));
    for (double g : x.grad()) CHECK(g == 1.0);
  }
  // loss = sum(x^2) at [1, 2] -> [2, 4]
  {
    Tensor x = t2({1, 2}, 1, 2, true);
    Tape tape;
    tape.backward(sum_all(tape, mul(tape, x, x)));
    CHECK(x.grad()[0] == 2.0);
    CHECK(x.grad()[1] == 4.0);
  }
  // stop-gradient blocks the upstream path and keeps forward values identical
  {
    Tensor x = t2({1.5, -2.5}, 1, 2, true);
    Tape tape;
    Tensor stopped = tape.stop_gradient(x);
    CHECK(stopped.value()[0] == x.value()[0]);
    CHECK(stopped.value()[1] == x.value()[1]);
    x.zero_grad();
    tape.backward(sum_all(tape, mul(tape, stopped, stopped)));
    CHECK(x.grad()[0] == 0.0);
    CHECK(x.grad()[1] == 0.0);
  }
  // non-scalar loss rejected
  {
    Tensor x = t2({1, 2}, 1, 2, true);
    Tape tape;
    Tensor y = mul(tape, x, x);
    CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);
  }
  // repeated calls accumulate
  {
    Tensor x = t2({3}, 1, 1, true);
    Tape tape;
    Tensor loss = sum_all(tape, mul(tape, x, x));
    tape.backward(loss);
    tape.backward(loss);
    CHECK(x.grad()[0] == 12.0);  // 2 * (2 * 3)
  }
}

TEST_CASE("backward is linear in the loss") {
  Rng rng(23);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = Tensor::randn(rng, {2, 3}, 1.0, true);
    // dyadic coefficients scale exactly in binary floating point
    const double a = std::ldexp(1.0, static_cast<int>(rng.uniform_int(5)) - 2);
    const double b = -std::ldexp(1.0, static_cast<int>(rng.uniform_int(5)) - 2);

    auto grads_of = [&](const std::function<Tensor(Tape&)>& f) {
      x.zero_grad();
      Tape tape;
      tape.backward(f(tape));
      return std::vector<double>(x.grad().begin(), x.grad().end());
    };
    auto l1 = [&](Tape& t) { return sum_all(t, mul(t, x, x)); };
    auto l2 = [&](Tape& t) { return sum_all(t, gelu(t, x)); };
    auto combined = grads_of([&](Tape& t) {
      return add(t, scale(t, l1(t), a), scale(t, l2(t), b));
    });
    auto g1 = grads_of(l1);
    auto g2 = grads_of(l2);
    for (std::size_t i = 0; i < combined.size(); ++i) {
      CHECK(combined[i] == doctest::Approx(a * g1[i] + b * g2[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("finite differences validate every primitive at random points") {
  Rng rng(42);
  ParameterStore ps;
  ps.add("x", Tensor::randn(rng, {3, 4}, 0.6));
  ps.add("y", Tensor::randn(rng, {3, 4}, 0.6));
  ps.add("w", Tensor::randn(rng, {4, 3}, 0.6));
  ps.add("bias", Tensor::randn(rng, {1, 4}, 0.6));
  ps.add("gain", Tensor::randn(rng, {1, 4}, 0.2));
  ps.add("table", Tensor::randn(rng, {5, 4}, 0.6));

  auto loss_fn = [&](Tape& tape) -> Tensor {
    Tensor x = ps.at("x"), y = ps.at("y"), w = ps.at("w");
    Tensor h = add(tape, mul(tape, x, y), scale(tape, sub(tape, x, y), 0.7));
    h = row_bias_add(tape, h, ps.at("bias"));
    h = layer_norm(tape, h, ps.at("gain"), ps.at("bias"));
    Tensor mm = matmul(tape, h, w);                      // [3,3]
    Tensor nt = matmul_nt(tape, h, ps.at("table"));      // [3,5]
    Tensor sm = softmax_rows(tape, scale(tape, nt, 0.5));
    std::size_t idx[] = {0, 2, 4};
    Tensor emb = embedding_rows(tape, ps.at("table"), idx);  // [3,4]
    Tensor cat = concat_cols(tape, std::vector<Tensor>{mm, sm, emb});
    Tensor rep = repeat_rows(tape, slice_rows(tape, cat, 0, 2), 2);
    Tensor gl = gelu(tape, slice_cols(tape, rep, 1, 6));
    Tensor sp = softplus(tape, reshape(tape, gl, {6, 4}));
    return add(tape, mean_all(tape, sp), scale(tape, mean_all(tape, mul(tape, sm, sm)), 0.25));
  };
  const double err = grad_check(ps, loss_fn, 1e-5);
  CHECK(err < 1e-5);
}

TEST_CASE("grad_check on a quadratic is exact to roundoff") {
  ParameterStore ps;
  ps.add("x", Tensor::from_data({1, 3}, {0.5, -1.25, 2.0}));
  auto f = [&](Tape& tape) { return sum_all(tape, mul(tape, ps.at("x"), ps.at("x"))); };
  CHECK(grad_check(ps, f, 1e-4) < 1e-9);
}

TEST_CASE("grad_check rejects bad steps and non-finite losses") {
  ParameterStore ps;
  ps.add("x", Tensor::from_data({1, 1}, {1.0}));
  auto f = [&](Tape& tape) { return sum_all(tape, ps.at("x")); };
  CHECK_THROWS_AS(grad_check(ps, f, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(grad_check(ps, f, 1e-2), std::invalid_argument);
  auto bad = [&](Tape& tape) {
    Tensor x = ps.at("x");
    return scale(tape, sum_all(tape, x), std::numeric_limits<double>::infinity());
  };
  CHECK_THROWS_AS(grad_check(ps, bad, 1e-5), std::runtime_error);
}

TEST_CASE("grad_check on a 2-layer transformer block loss stays under 1e-5") {
  ModelConfig cfg;
  cfg.frame_dim = 2;
  cfg.model_dim = 8;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.max_frames = 4;
  cfg.condition_vocab = 2;
  NoiseSchedule sched;
  Rng rng(5);
  ParameterStore ps = init_generator_params(cfg, rng);
  Tensor frames = Tensor::randn(rng, {4, 2});
  std::vector<Slot> slots;
  for (std::size_t i = 0; i < 4; ++i) slots.push_back({i, 500.0});
  auto mask = build_mask(Paradigm::diffusion_forcing, 4, cfg.tokens_per_frame, 1);

  auto f = [&](Tape& tape) {
    ForwardResult r = forward_masked(tape, ps, cfg, sched, frames, slots, 0, mask);
    return mean_all(tape, mul(tape, r.v_hat, r.v_hat));
  };
  CHECK(grad_check(ps, f, 1e-5) < 1e-5);
}

TEST_CASE("grad_check replays stop-gradient branches as constants") {
  ParameterStore ps;
  ps.add("x", Tensor::from_data({1, 2}, {0.8, -0.4}));
  // loss = sum(x * sg[x]): the analytic gradient on the stopped graph is sg[x],
  // not 2x, and FD on the replayed graph agrees.
  auto f = [&](Tape& tape) {
    Tensor x = ps.at("x");
    Tensor frozen;
    if (!tape.replaying()) {
      auto ng = tape.no_grad();
      frozen = mul(tape, x, Tensor::from_data({1, 2}, {1.0, 1.0}));
    }
    frozen = tape.stop_gradient(frozen);
    return sum_all(tape, mul(tape, x, frozen));
  };
  CHECK(grad_check(ps, f, 1e-5) < 1e-9);

  Tape tape;
  Tensor x = ps.at("x");
  x.zero_grad();
  Tensor loss = sum_all(tape, mul(tape, x, tape.stop_gradient(x)));
  tape.backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(0.8));
  CHECK(x.grad()[1] == doctest::Approx(-0.4));
}

TEST_CASE("tape visits nodes once in reverse order and shared subgraphs accumulate") {
  Tensor x = t2({2.0}, 1, 1, true);
  Tape tape;
  Tensor y = mul(tape, x, x);       // y = x^2
  Tensor z = add(tape, y, y);       // z = 2 x^2 -> dz/dx = 4x = 8
  tape.backward(z);
  CHECK(x.grad()[0] == 8.0);
  CHECK(tape.node_count() == 2);
}
