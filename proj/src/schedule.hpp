#pragma once

#include <functional>
#include <vector>

#include "tensor.hpp"

namespace mvb {

// Discrete DDPM coefficient table with the scaled-linear beta ramp
// (linear in sqrt(beta)). epsilon-parameterized throughout.
struct DiffusionSchedule {
  int horizon = 0;  // T
  double beta_start = 0.0, beta_end = 0.0;
  std::vector<double> beta;       // [T]
  std::vector<double> alpha;      // 1 - beta
  std::vector<double> alpha_bar;  // running product of alpha

  double sqrt_alpha_bar(int t) const { return std::sqrt(alpha_bar[static_cast<size_t>(t)]); }
  double sqrt_one_minus_alpha_bar(int t) const {
    return std::sqrt(1.0 - alpha_bar[static_cast<size_t>(t)]);
  }
};

DiffusionSchedule make_schedule(int horizon, double beta_start, double beta_end);

inline DiffusionSchedule default_schedule() { return make_schedule(1000, 0.00085, 0.012); }

// x_t = sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps
Tensor forward_diffuse(const Tensor& x0, int t, const Tensor& eps, const DiffusionSchedule& sched);

// Inverts the forward process given a noise estimate; clamped to [-0.1, 1.1]
// before downstream image use.
Tensor predict_x0(const Tensor& x_t, const Tensor& eps_hat, int t,
                  const DiffusionSchedule& sched);

// Noise-prediction interface accepted by the deterministic denoiser; the
// score network and the test oracles both provide it.
using ScoreFn = std::function<Tensor(const Tensor& x_t, int t)>;

// Deterministic DDIM trajectory (eta = 0) over n_steps evenly spaced substeps
// from t_start down to 0; the result is the final predicted x0 clamped to
// [0,1].
Tensor multi_step_denoise(const ScoreFn& model, const Tensor& x_start, int t_start, int n_steps,
                          const DiffusionSchedule& sched);

}  // namespace mvb
