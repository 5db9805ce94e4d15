#include "schedule.hpp"

#include <cmath>

#include "errors.hpp"

namespace mvb {

DiffusionSchedule make_schedule(int horizon, double beta_start, double beta_end) {
  check_arg(horizon >= 2, "make_schedule: horizon must be >= 2");
  check_arg(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0,
            "make_schedule: need 0 < beta_start < beta_end < 1");

  DiffusionSchedule s;
  s.horizon = horizon;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  s.beta.resize(static_cast<size_t>(horizon));
  s.alpha.resize(static_cast<size_t>(horizon));
  s.alpha_bar.resize(static_cast<size_t>(horizon));

  const double r0 = std::sqrt(beta_start);
  const double r1 = std::sqrt(beta_end);
  double prod = 1.0;
  for (int t = 0; t < horizon; ++t) {
    const double r = r0 + (r1 - r0) * static_cast<double>(t) / (horizon - 1);
    s.beta[static_cast<size_t>(t)] = r * r;
    s.alpha[static_cast<size_t>(t)] = 1.0 - r * r;
    prod *= s.alpha[static_cast<size_t>(t)];
    s.alpha_bar[static_cast<size_t>(t)] = prod;
  }
  return s;
}

Tensor forward_diffuse(const Tensor& x0, int t, const Tensor& eps,
                       const DiffusionSchedule& sched) {
  check_arg(t >= 0 && t < sched.horizon, "forward_diffuse: t outside schedule");
  check_arg(x0.same_shape(eps), "forward_diffuse: eps shape mismatch");
  const double a = sched.sqrt_alpha_bar(t);
  const double b = sched.sqrt_one_minus_alpha_bar(t);
  Tensor out(x0.shape());
  for (int64_t i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + b * eps[i];
  return out;
}

Tensor predict_x0(const Tensor& x_t, const Tensor& eps_hat, int t,
                  const DiffusionSchedule& sched) {
  check_arg(t >= 0 && t < sched.horizon, "predict_x0: t outside schedule");
  check_arg(x_t.same_shape(eps_hat), "predict_x0: eps shape mismatch");
  const double inv_a = 1.0 / sched.sqrt_alpha_bar(t);
  const double b = sched.sqrt_one_minus_alpha_bar(t);
  Tensor out(x_t.shape());
  for (int64_t i = 0; i < x_t.size(); ++i) {
    double v = (x_t[i] - b * eps_hat[i]) * inv_a;
    out[i] = std::clamp(v, -0.1, 1.1);
  }
  return out;
}

Tensor multi_step_denoise(const ScoreFn& model, const Tensor& x_start, int t_start, int n_steps,
                          const DiffusionSchedule& sched) {
  check_arg(t_start >= 0 && t_start < sched.horizon, "multi_step_denoise: t_start outside schedule");
  check_arg(n_steps >= 1, "multi_step_denoise: n_steps must be >= 1");

  Tensor x = x_start;
  Tensor x0_hat;
  for (int i = 0; i < n_steps; ++i) {
    const int t_i =
        n_steps == 1
            ? t_start
            : static_cast<int>(std::lround(static_cast<double>(t_start) * (n_steps - 1 - i) /
                                           (n_steps - 1)));
    Tensor eps_hat;
    try {
      eps_hat = model(x, t_i);
    } catch (const std::exception& e) {
      throw InternalError("multi_step_denoise: model failed at substep " + std::to_string(i) +
                          " (t=" + std::to_string(t_i) + "): " + e.what());
    }
    x0_hat = predict_x0(x, eps_hat, t_i, sched);
    if (i + 1 < n_steps) {
      const int t_next = static_cast<int>(std::lround(
          static_cast<double>(t_start) * (n_steps - 2 - i) / (n_steps - 1)));
      const double a = sched.sqrt_alpha_bar(t_next);
      const double b = sched.sqrt_one_minus_alpha_bar(t_next);
      for (int64_t j = 0; j < x.size(); ++j) x[j] = a * x0_hat[j] + b * eps_hat[j];
    }
  }
  x0_hat.clamp_(0.0, 1.0);
  return x0_hat;
}

}  // namespace mvb
