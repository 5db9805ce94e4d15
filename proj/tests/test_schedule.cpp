#include "schedule.hpp"

#include <cmath>

#include "doctest.h"
#include "errors.hpp"
#include "test_util.hpp"

using namespace mvb;

TEST_CASE("make_schedule: default table satisfies the coefficient invariants") {
  const DiffusionSchedule s = make_schedule(1000, 0.00085, 0.012);
  REQUIRE(s.horizon == 1000);

  // Independent recomputation of the running product.
  long double prod = 1.0L;
  for (int t = 0; t < 1000; ++t) {
    CHECK(s.beta[t] > 0.0);
    CHECK(s.beta[t] < 1.0);
    if (t > 0) {
      CHECK(s.beta[t] >= s.beta[t - 1]);
      CHECK(s.alpha_bar[t] < s.alpha_bar[t - 1]);
    }
    prod *= 1.0L - static_cast<long double>(s.beta[t]);
    CHECK(test::rel_err(s.alpha_bar[t], static_cast<double>(prod)) < 1e-12);
  }
  CHECK(s.alpha_bar[0] > 0.99);
  CHECK(s.alpha_bar[999] < 0.01);
}

TEST_CASE("make_schedule: two-step hand product") {
  const DiffusionSchedule s = make_schedule(2, 0.1, 0.2);
  CHECK(s.alpha_bar[0] == doctest::Approx(0.9).epsilon(1e-14));
  CHECK(s.alpha_bar[1] == doctest::Approx(0.72).epsilon(1e-14));
}

TEST_CASE("make_schedule: rejects bad coefficients") {
  CHECK_THROWS_AS(make_schedule(1000, 0.2, 0.1), InvalidArgument);
  CHECK_THROWS_AS(make_schedule(1000, 0.1, 0.1), InvalidArgument);
  CHECK_THROWS_AS(make_schedule(1, 0.1, 0.2), InvalidArgument);
  CHECK_THROWS_AS(make_schedule(1000, 0.0, 0.2), InvalidArgument);
}

TEST_CASE("forward_diffuse: zero-noise and endpoint behaviour") {
  const DiffusionSchedule s = default_schedule();
  Rng rng(7);
  const Tensor x0 = test::random_tensor({3, 4, 4}, rng, 0.0, 1.0);
  const Tensor zero({3, 4, 4});

  const Tensor y = forward_diffuse(x0, 500, zero, s);
  for (int64_t i = 0; i < x0.size(); ++i) CHECK(y[i] == doctest::Approx(s.sqrt_alpha_bar(500) * x0[i]));

  const Tensor eps = test::random_tensor({3, 4, 4}, rng);
  const Tensor near = forward_diffuse(x0, 0, eps, s);
  CHECK(max_abs_diff(near, x0) < 1e-1);
  for (int64_t i = 0; i < x0.size(); ++i) CHECK(std::abs(near[i] - x0[i]) < 1e-2 + 0.03 * std::abs(eps[i]));
}

TEST_CASE("forward_diffuse: shape mismatch rejected") {
  const DiffusionSchedule s = default_schedule();
  CHECK_THROWS_AS(forward_diffuse(Tensor({3, 4, 4}), 10, Tensor({3, 4, 5}), s), InvalidArgument);
  CHECK_THROWS_AS(forward_diffuse(Tensor({3, 4, 4}), 1000, Tensor({3, 4, 4}), s), InvalidArgument);
}

TEST_CASE("predict_x0: algebraic inverse of forward_diffuse") {
  const DiffusionSchedule s = default_schedule();
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor x0 = test::random_tensor({3, 8, 8}, rng, 0.0, 1.0);
    const Tensor eps = [&] {
      Tensor e({3, 8, 8});
      for (int64_t i = 0; i < e.size(); ++i) e[i] = rng.normal();
      return e;
    }();
    const int t = static_cast<int>(rng.uniform_int(s.horizon));
    const Tensor x_t = forward_diffuse(x0, t, eps, s);
    const Tensor rec = predict_x0(x_t, eps, t, s);
    for (int64_t i = 0; i < x0.size(); ++i) CHECK(test::rel_err(rec[i], x0[i]) < 1e-6);
  }
}

TEST_CASE("predict_x0: constant image fixed point") {
  const DiffusionSchedule s = default_schedule();
  const int t = 300;
  Tensor x_t = Tensor::full({3, 4, 4}, s.sqrt_alpha_bar(t) * 0.25);
  const Tensor zero({3, 4, 4});
  const Tensor rec = predict_x0(x_t, zero, t, s);
  for (int64_t i = 0; i < rec.size(); ++i) CHECK(rec[i] == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("forward_diffuse: variance contract") {
  const DiffusionSchedule s = default_schedule();
  const int t = 400;
  const Tensor x0 = Tensor::full({100}, 0.5);
  Rng rng(123);
  const int draws = 1000;  // 100 elements x 1000 draws = 1e5 samples
  const double mean_expected = s.sqrt_alpha_bar(t) * 0.5;
  double acc = 0.0, acc2 = 0.0;
  for (int d = 0; d < draws; ++d) {
    Tensor eps({100});
    for (int64_t i = 0; i < 100; ++i) eps[i] = rng.normal();
    const Tensor y = forward_diffuse(x0, t, eps, s);
    for (int64_t i = 0; i < 100; ++i) {
      const double c = y[i] - mean_expected;
      acc += c;
      acc2 += c * c;
    }
  }
  const double n = 100.0 * draws;
  const double var = acc2 / n - (acc / n) * (acc / n);
  CHECK(test::rel_err(var, 1.0 - s.alpha_bar[t]) < 0.05);
}

TEST_CASE("multi_step_denoise: oracle score contracts to x0") {
  const DiffusionSchedule s = default_schedule();
  Rng rng(5);
  const Tensor x0 = test::random_tensor({3, 8, 8}, rng, 0.05, 0.95);
  Tensor eps({3, 8, 8});
  for (int64_t i = 0; i < eps.size(); ++i) eps[i] = rng.normal();

  const ScoreFn oracle = [&](const Tensor&, int) { return eps; };

  for (int n_steps : {1, 2, 5, 10}) {
    const int t_start = 700;
    const Tensor x_t = forward_diffuse(x0, t_start, eps, s);
    const Tensor out = multi_step_denoise(oracle, x_t, t_start, n_steps, s);
    CHECK(max_abs_diff(out, x0) < 1e-5);
  }
}

TEST_CASE("multi_step_denoise: one step equals single-shot predict_x0 + clamp") {
  const DiffusionSchedule s = default_schedule();
  Rng rng(9);
  const Tensor x_t = test::random_tensor({3, 4, 4}, rng, -2.0, 2.0);
  const Tensor fake_eps = test::random_tensor({3, 4, 4}, rng);
  const ScoreFn model = [&](const Tensor&, int) { return fake_eps; };

  const Tensor got = multi_step_denoise(model, x_t, 450, 1, s);
  Tensor want = predict_x0(x_t, fake_eps, 450, s);
  want.clamp_(0.0, 1.0);
  CHECK(max_abs_diff(got, want) == 0.0);
}

TEST_CASE("multi_step_denoise: model failure reports the substep") {
  const DiffusionSchedule s = default_schedule();
  const ScoreFn broken = [](const Tensor&, int) -> Tensor {
    throw std::runtime_error("boom");
  };
  try {
    multi_step_denoise(broken, Tensor({3, 4, 4}), 100, 3, s);
    FAIL("expected InternalError");
  } catch (const InternalError& e) {
    CHECK(std::string(e.what()).find("substep 0") != std::string::npos);
  }
}
