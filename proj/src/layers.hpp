#pragma once

#include <string>
#include <vector>

#include "rng.hpp"
#include "tensor.hpp"

namespace mvb {

// A learnable tensor plus its gradient accumulator. pose_group marks the
// camera-encoder parameters that train at 10x the base learning rate.
struct Param {
  std::string name;
  Tensor value;
  Tensor grad;
  bool pose_group = false;

  void init_shape(std::string n, std::vector<int> shape) {
    name = std::move(n);
    value = Tensor(shape);
    grad = Tensor(std::move(shape));
  }
};

using ParamRefs = std::vector<Param*>;

void kaiming_init(Tensor& w, int fan_in, Rng& rng);

struct Linear {
  int in = 0, out = 0;
  Param w, b;  // w [out,in]

  void init(const std::string& name, int in_dim, int out_dim, Rng& rng, bool zero = false);
  Tensor forward(const Tensor& x) const;                 // [in] -> [out]
  Tensor backward(const Tensor& x, const Tensor& dy);    // accumulates grads, returns dx
  void collect(ParamRefs& refs);
};

// Two-layer MLP with SiLU in between (the pose / label / time embedders).
struct Mlp2 {
  Linear fc1, fc2;

  struct Tape {
    Tensor x, pre, act;
  };

  void init(const std::string& name, int in_dim, int hidden, int out_dim, Rng& rng,
            bool zero_last = false);
  Tensor forward(const Tensor& x, Tape* tape = nullptr) const;
  Tensor backward(const Tape& tape, const Tensor& dy);
  void collect(ParamRefs& refs);
};

struct Conv2d {
  int cin = 0, cout = 0, k = 3, stride = 1, pad = 1;
  Param w, b;

  void init(const std::string& name, int cin_, int cout_, int k_, int stride_, int pad_, Rng& rng,
            bool zero = false);
  Tensor forward(const Tensor& x) const;
  // Accumulates weight/bias grads; fills dx unless dx == nullptr.
  void backward(const Tensor& x, const Tensor& dy, Tensor* dx);
  void collect(ParamRefs& refs);
};

struct GroupNorm {
  int channels = 0, groups = 1;
  Param gamma, beta;
  static constexpr double kEps = 1e-5;

  struct Cache {
    Tensor x;
    std::vector<double> mean, invstd;
  };

  void init(const std::string& name, int channels_, Rng& rng);
  Tensor forward(const Tensor& x, Cache* cache = nullptr) const;
  Tensor backward(const Cache& cache, const Tensor& dy);
  void collect(ParamRefs& refs);
};

Tensor silu(const Tensor& x);
// dy through silu given the forward input.
Tensor silu_backward(const Tensor& x, const Tensor& dy);

// [C,H,W] <-> [H*W,C] token views used around the attention kernels.
Tensor to_tokens(const Tensor& x);
Tensor from_tokens(const Tensor& t, int h, int w);

Tensor upsample_nearest2x(const Tensor& x);
Tensor upsample_nearest2x_backward(const Tensor& dy);

// Adam with a base group and a pose-encoder group at lr * pose_lr_mult.
class Adam {
 public:
  Adam(ParamRefs params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
       double pose_lr_mult = 10.0);

  void zero_grad();
  void step();

  double lr() const { return lr_; }
  double lr_for(const Param& p) const { return p.pose_group ? lr_ * pose_lr_mult_ : lr_; }
  int64_t step_count() const { return step_count_; }

  // Serializable optimizer state (m then v per param, in registration order).
  std::vector<Tensor>& moments1() { return m_; }
  std::vector<Tensor>& moments2() { return v_; }
  void set_step_count(int64_t n) { step_count_ = n; }

 private:
  ParamRefs params_;
  double lr_, beta1_, beta2_, eps_, pose_lr_mult_;
  int64_t step_count_ = 0;
  std::vector<Tensor> m_, v_;
};

}  // namespace mvb
