#include "layers.hpp"

#include <cmath>

#include "errors.hpp"
#include "kernels.hpp"

namespace mvb {

void kaiming_init(Tensor& w, int fan_in, Rng& rng) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (int64_t i = 0; i < w.size(); ++i) w[i] = rng.normal() * scale;
}

void Linear::init(const std::string& name, int in_dim, int out_dim, Rng& rng, bool zero) {
  in = in_dim;
  out = out_dim;
  w.init_shape(name + ".w", {out, in});
  b.init_shape(name + ".b", {out});
  if (!zero) kaiming_init(w.value, in, rng);
}

Tensor Linear::forward(const Tensor& x) const {
  Tensor y({out});
  for (int o = 0; o < out; ++o) {
    double acc = b.value[o];
    const double* wr = w.value.data() + static_cast<size_t>(o) * in;
    for (int i = 0; i < in; ++i) acc += wr[i] * x[i];
    y[o] = acc;
  }
  return y;
}

Tensor Linear::backward(const Tensor& x, const Tensor& dy) {
  Tensor dx({in});
  for (int o = 0; o < out; ++o) {
    const double g = dy[o];
    b.grad[o] += g;
    double* wg = w.grad.data() + static_cast<size_t>(o) * in;
    const double* wr = w.value.data() + static_cast<size_t>(o) * in;
    for (int i = 0; i < in; ++i) {
      wg[i] += g * x[i];
      dx[i] += g * wr[i];
    }
  }
  return dx;
}

void Linear::collect(ParamRefs& refs) {
  refs.push_back(&w);
  refs.push_back(&b);
}

void Mlp2::init(const std::string& name, int in_dim, int hidden, int out_dim, Rng& rng,
                bool zero_last) {
  fc1.init(name + ".fc1", in_dim, hidden, rng);
  fc2.init(name + ".fc2", hidden, out_dim, rng, zero_last);
}

Tensor Mlp2::forward(const Tensor& x, Tape* tape) const {
  Tensor pre = fc1.forward(x);
  Tensor act = silu(pre);
  Tensor y = fc2.forward(act);
  if (tape) {
    tape->x = x;
    tape->pre = std::move(pre);
    tape->act = std::move(act);
  }
  return y;
}

Tensor Mlp2::backward(const Tape& tape, const Tensor& dy) {
  Tensor dact = fc2.backward(tape.act, dy);
  Tensor dpre = silu_backward(tape.pre, dact);
  return fc1.backward(tape.x, dpre);
}

void Mlp2::collect(ParamRefs& refs) {
  fc1.collect(refs);
  fc2.collect(refs);
}

void Conv2d::init(const std::string& name, int cin_, int cout_, int k_, int stride_, int pad_,
                  Rng& rng, bool zero) {
  cin = cin_;
  cout = cout_;
  k = k_;
  stride = stride_;
  pad = pad_;
  w.init_shape(name + ".w", {cout, cin, k, k});
  b.init_shape(name + ".b", {cout});
  if (!zero) kaiming_init(w.value, cin * k * k, rng);
}

Tensor Conv2d::forward(const Tensor& x) const {
  check_internal(x.dim(0) == cin, "Conv2d " + w.name + ": channel mismatch");
  const int h = x.dim(1), wd = x.dim(2);
  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (wd + 2 * pad - k) / stride + 1;
  Tensor y({cout, ho, wo});
  kernels::conv2d_forward(x.data(), cin, h, wd, w.value.data(), cout, k, b.value.data(), stride,
                          pad, y.data());
  return y;
}

void Conv2d::backward(const Tensor& x, const Tensor& dy, Tensor* dx) {
  const int h = x.dim(1), wd = x.dim(2);
  const int ho = dy.dim(1), wo = dy.dim(2);
  kernels::conv2d_backward_params(x.data(), cin, h, wd, dy.data(), cout, ho, wo, k, stride, pad,
                                  w.grad.data(), b.grad.data());
  if (dx) {
    *dx = Tensor({cin, h, wd});
    kernels::conv2d_backward_input(dy.data(), cout, ho, wo, w.value.data(), cin, h, wd, k, stride,
                                   pad, dx->data());
  }
}

void Conv2d::collect(ParamRefs& refs) {
  refs.push_back(&w);
  refs.push_back(&b);
}

void GroupNorm::init(const std::string& name, int channels_, Rng&) {
  channels = channels_;
  // At least two channels per group, so per-channel shifts (bias, embedding
  // residuals) are not normalized away at small widths.
  groups = std::min(8, std::max(1, channels / 2));
  while (channels % groups != 0) --groups;
  gamma.init_shape(name + ".gamma", {channels});
  beta.init_shape(name + ".beta", {channels});
  gamma.value.fill(1.0);
}

Tensor GroupNorm::forward(const Tensor& x, Cache* cache) const {
  const int h = x.dim(1), w = x.dim(2);
  const int cpg = channels / groups;
  const int64_t gsize = static_cast<int64_t>(cpg) * h * w;
  Tensor y(x.shape());
  std::vector<double> means(static_cast<size_t>(groups)), invstds(static_cast<size_t>(groups));
  for (int g = 0; g < groups; ++g) {
    const double* xs = x.data() + static_cast<size_t>(g) * gsize;
    double mean = 0.0;
    for (int64_t i = 0; i < gsize; ++i) mean += xs[i];
    mean /= static_cast<double>(gsize);
    double var = 0.0;
    for (int64_t i = 0; i < gsize; ++i) {
      const double c = xs[i] - mean;
      var += c * c;
    }
    var /= static_cast<double>(gsize);
    const double invstd = 1.0 / std::sqrt(var + kEps);
    means[static_cast<size_t>(g)] = mean;
    invstds[static_cast<size_t>(g)] = invstd;
    for (int c = 0; c < cpg; ++c) {
      const int ch = g * cpg + c;
      const double ga = gamma.value[ch], be = beta.value[ch];
      const double* xc = x.data() + static_cast<size_t>(ch) * h * w;
      double* yc = y.data() + static_cast<size_t>(ch) * h * w;
      for (int64_t i = 0; i < static_cast<int64_t>(h) * w; ++i) {
        yc[i] = (xc[i] - mean) * invstd * ga + be;
      }
    }
  }
  if (cache) {
    cache->x = x;
    cache->mean = std::move(means);
    cache->invstd = std::move(invstds);
  }
  return y;
}

Tensor GroupNorm::backward(const Cache& cache, const Tensor& dy) {
  const Tensor& x = cache.x;
  const int h = x.dim(1), w = x.dim(2);
  const int cpg = channels / groups;
  const int64_t plane = static_cast<int64_t>(h) * w;
  const int64_t gsize = static_cast<int64_t>(cpg) * plane;
  Tensor dx(x.shape());

  for (int g = 0; g < groups; ++g) {
    const double mean = cache.mean[static_cast<size_t>(g)];
    const double invstd = cache.invstd[static_cast<size_t>(g)];
    // Accumulate the two reduction terms over the group.
    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
    for (int c = 0; c < cpg; ++c) {
      const int ch = g * cpg + c;
      const double ga = gamma.value[ch];
      const double* xc = x.data() + static_cast<size_t>(ch) * plane;
      const double* dyc = dy.data() + static_cast<size_t>(ch) * plane;
      double dga = 0.0, dbe = 0.0;
      for (int64_t i = 0; i < plane; ++i) {
        const double xhat = (xc[i] - mean) * invstd;
        const double dxhat = dyc[i] * ga;
        sum_dxhat += dxhat;
        sum_dxhat_xhat += dxhat * xhat;
        dga += dyc[i] * xhat;
        dbe += dyc[i];
      }
      gamma.grad[ch] += dga;
      beta.grad[ch] += dbe;
    }
    const double inv_n = 1.0 / static_cast<double>(gsize);
    for (int c = 0; c < cpg; ++c) {
      const int ch = g * cpg + c;
      const double ga = gamma.value[ch];
      const double* xc = x.data() + static_cast<size_t>(ch) * plane;
      const double* dyc = dy.data() + static_cast<size_t>(ch) * plane;
      double* dxc = dx.data() + static_cast<size_t>(ch) * plane;
      for (int64_t i = 0; i < plane; ++i) {
        const double xhat = (xc[i] - mean) * invstd;
        const double dxhat = dyc[i] * ga;
        dxc[i] = invstd * (dxhat - inv_n * (sum_dxhat + xhat * sum_dxhat_xhat));
      }
    }
  }
  return dx;
}

void GroupNorm::collect(ParamRefs& refs) {
  refs.push_back(&gamma);
  refs.push_back(&beta);
}

Tensor silu(const Tensor& x) {
  Tensor y(x.shape());
  for (int64_t i = 0; i < x.size(); ++i) {
    const double s = 1.0 / (1.0 + std::exp(-x[i]));
    y[i] = x[i] * s;
  }
  return y;
}

Tensor silu_backward(const Tensor& x, const Tensor& dy) {
  Tensor dx(x.shape());
  for (int64_t i = 0; i < x.size(); ++i) {
    const double s = 1.0 / (1.0 + std::exp(-x[i]));
    dx[i] = dy[i] * (s + x[i] * s * (1.0 - s));
  }
  return dx;
}

Tensor to_tokens(const Tensor& x) {
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int n = h * w;
  Tensor t({n, c});
  for (int ch = 0; ch < c; ++ch) {
    const double* xp = x.data() + static_cast<size_t>(ch) * n;
    for (int i = 0; i < n; ++i) t[static_cast<int64_t>(i) * c + ch] = xp[i];
  }
  return t;
}

Tensor from_tokens(const Tensor& t, int h, int w) {
  const int n = t.dim(0), c = t.dim(1);
  check_internal(n == h * w, "from_tokens: token count mismatch");
  Tensor x({c, h, w});
  for (int ch = 0; ch < c; ++ch) {
    double* xp = x.data() + static_cast<size_t>(ch) * n;
    for (int i = 0; i < n; ++i) xp[i] = t[static_cast<int64_t>(i) * c + ch];
  }
  return x;
}

Tensor upsample_nearest2x(const Tensor& x) {
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor y({c, h * 2, w * 2});
  for (int ch = 0; ch < c; ++ch) {
    for (int yy = 0; yy < h * 2; ++yy) {
      const double* row = x.data() + (static_cast<size_t>(ch) * h + yy / 2) * w;
      double* out = y.data() + (static_cast<size_t>(ch) * h * 2 + yy) * w * 2;
      for (int xx = 0; xx < w * 2; ++xx) out[xx] = row[xx / 2];
    }
  }
  return y;
}

Tensor upsample_nearest2x_backward(const Tensor& dy) {
  const int c = dy.dim(0), h2 = dy.dim(1), w2 = dy.dim(2);
  const int h = h2 / 2, w = w2 / 2;
  Tensor dx({c, h, w});
  for (int ch = 0; ch < c; ++ch) {
    for (int yy = 0; yy < h2; ++yy) {
      const double* row = dy.data() + (static_cast<size_t>(ch) * h2 + yy) * w2;
      double* out = dx.data() + (static_cast<size_t>(ch) * h + yy / 2) * w;
      for (int xx = 0; xx < w2; ++xx) out[xx / 2] += row[xx];
    }
  }
  return dx;
}

Adam::Adam(ParamRefs params, double lr, double beta1, double beta2, double eps,
           double pose_lr_mult)
    : params_(std::move(params)),
      lr_(lr),
      beta1_(beta1),
      beta2_(beta2),
      eps_(eps),
      pose_lr_mult_(pose_lr_mult) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const Param* p : params_) {
    m_.emplace_back(p->value.shape());
    v_.emplace_back(p->value.shape());
  }
}

void Adam::zero_grad() {
  for (Param* p : params_) p->grad.zero();
}

void Adam::step() {
  ++step_count_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_count_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_count_));
  for (size_t pi = 0; pi < params_.size(); ++pi) {
    Param& p = *params_[pi];
    const double step_lr = lr_for(p);
    Tensor& m = m_[pi];
    Tensor& v = v_[pi];
    for (int64_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p.value[i] -= step_lr * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

}  // namespace mvb
