#include "kernels.hpp"

#include <vector>

#include "doctest.h"
#include "rng.hpp"
#include "test_util.hpp"

using namespace mvb;
using namespace mvb::kernels;

namespace {

Tensor rand_t(std::vector<int> shape, uint64_t seed) {
  Rng rng(seed);
  return test::random_tensor(std::move(shape), rng);
}

}  // namespace

TEST_CASE("conv2d: parallel matches serial bit-exactly") {
  for (auto [stride, pad] : std::vector<std::pair<int, int>>{{1, 1}, {2, 1}, {1, 0}}) {
    const int cin = 5, cout = 7, h = 12, w = 12, k = 3;
    const Tensor in = rand_t({cin, h, w}, 1);
    const Tensor wt = rand_t({cout, cin, k, k}, 2);
    const Tensor b = rand_t({cout}, 3);
    const int ho = (h + 2 * pad - k) / stride + 1, wo = (w + 2 * pad - k) / stride + 1;

    Tensor out_p({cout, ho, wo}), out_s({cout, ho, wo});
    conv2d_forward(in.data(), cin, h, w, wt.data(), cout, k, b.data(), stride, pad, out_p.data());
    conv2d_forward_serial(in.data(), cin, h, w, wt.data(), cout, k, b.data(), stride, pad,
                          out_s.data());
    CHECK(max_abs_diff(out_p, out_s) == 0.0);

    const Tensor dout = rand_t({cout, ho, wo}, 4);
    Tensor din_p({cin, h, w}), din_s({cin, h, w});
    conv2d_backward_input(dout.data(), cout, ho, wo, wt.data(), cin, h, w, k, stride, pad,
                          din_p.data());
    conv2d_backward_input_serial(dout.data(), cout, ho, wo, wt.data(), cin, h, w, k, stride, pad,
                                 din_s.data());
    CHECK(max_abs_diff(din_p, din_s) == 0.0);

    Tensor dw_p({cout, cin, k, k}), dw_s({cout, cin, k, k}), db_p({cout}), db_s({cout});
    conv2d_backward_params(in.data(), cin, h, w, dout.data(), cout, ho, wo, k, stride, pad,
                           dw_p.data(), db_p.data());
    conv2d_backward_params_serial(in.data(), cin, h, w, dout.data(), cout, ho, wo, k, stride, pad,
                                  dw_s.data(), db_s.data());
    CHECK(max_abs_diff(dw_p, dw_s) == 0.0);
    CHECK(max_abs_diff(db_p, db_s) == 0.0);
  }
}

TEST_CASE("conv2d: gradients match central finite differences") {
  const int cin = 2, cout = 3, h = 6, w = 6, k = 3, stride = 1, pad = 1;
  Tensor in = rand_t({cin, h, w}, 10);
  Tensor wt = rand_t({cout, cin, k, k}, 11);
  Tensor b = rand_t({cout}, 12);
  const Tensor proj = rand_t({cout, h, w}, 13);  // fixed projection makes the loss scalar

  auto loss = [&]() {
    Tensor out({cout, h, w});
    conv2d_forward_serial(in.data(), cin, h, w, wt.data(), cout, k, b.data(), stride, pad,
                          out.data());
    double s = 0.0;
    for (int64_t i = 0; i < out.size(); ++i) s += out[i] * proj[i];
    return s;
  };

  // Analytic: dL/dout = proj.
  Tensor din({cin, h, w}), dw({cout, cin, k, k}), db({cout});
  conv2d_backward_input(proj.data(), cout, h, w, wt.data(), cin, h, w, k, stride, pad, din.data());
  conv2d_backward_params(in.data(), cin, h, w, proj.data(), cout, h, w, k, stride, pad, dw.data(),
                         db.data());

  Rng pick(99);
  for (int trial = 0; trial < 12; ++trial) {
    const int64_t i = pick.uniform_int(in.size());
    const double fd = test::central_diff(loss, &in[i]);
    CHECK(test::rel_err(din[i], fd) < 1e-7);
  }
  for (int trial = 0; trial < 12; ++trial) {
    const int64_t i = pick.uniform_int(wt.size());
    const double fd = test::central_diff(loss, &wt[i]);
    CHECK(test::rel_err(dw[i], fd) < 1e-7);
  }
  for (int trial = 0; trial < 3; ++trial) {
    const int64_t i = pick.uniform_int(b.size());
    const double fd = test::central_diff(loss, &b[i]);
    CHECK(test::rel_err(db[i], fd) < 1e-7);
  }
}

TEST_CASE("attention: parallel matches serial bit-exactly") {
  const int nq = 20, nk = 33, d = 8;
  const Tensor q = rand_t({nq, d}, 21), k = rand_t({nk, d}, 22), v = rand_t({nk, d}, 23);
  Tensor out_p({nq, d}), out_s({nq, d}), attn_p({nq, nk}), attn_s({nq, nk});
  attention_forward(q.data(), nq, k.data(), v.data(), nk, d, out_p.data(), attn_p.data());
  attention_forward_serial(q.data(), nq, k.data(), v.data(), nk, d, out_s.data(), attn_s.data());
  CHECK(max_abs_diff(out_p, out_s) == 0.0);
  CHECK(max_abs_diff(attn_p, attn_s) == 0.0);

  const Tensor dout = rand_t({nq, d}, 24);
  Tensor dq_p({nq, d}), dk_p({nk, d}), dv_p({nk, d});
  Tensor dq_s({nq, d}), dk_s({nk, d}), dv_s({nk, d});
  attention_backward(q.data(), nq, k.data(), v.data(), nk, d, attn_p.data(), dout.data(),
                     dq_p.data(), dk_p.data(), dv_p.data());
  attention_backward_serial(q.data(), nq, k.data(), v.data(), nk, d, attn_s.data(), dout.data(),
                            dq_s.data(), dk_s.data(), dv_s.data());
  CHECK(max_abs_diff(dq_p, dq_s) == 0.0);
  CHECK(max_abs_diff(dk_p, dk_s) == 0.0);
  CHECK(max_abs_diff(dv_p, dv_s) == 0.0);
}

TEST_CASE("attention: softmax rows sum to one") {
  const int nq = 9, nk = 17, d = 4;
  const Tensor q = rand_t({nq, d}, 31), k = rand_t({nk, d}, 32), v = rand_t({nk, d}, 33);
  Tensor out({nq, d}), attn({nq, nk});
  attention_forward(q.data(), nq, k.data(), v.data(), nk, d, out.data(), attn.data());
  for (int i = 0; i < nq; ++i) {
    double s = 0.0;
    for (int j = 0; j < nk; ++j) {
      CHECK(attn[static_cast<int64_t>(i) * nk + j] >= 0.0);
      s += attn[static_cast<int64_t>(i) * nk + j];
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("attention: gradients match central finite differences") {
  const int nq = 5, nk = 7, d = 4;
  Tensor q = rand_t({nq, d}, 41), k = rand_t({nk, d}, 42), v = rand_t({nk, d}, 43);
  const Tensor proj = rand_t({nq, d}, 44);

  auto loss = [&]() {
    Tensor out({nq, d});
    attention_forward_serial(q.data(), nq, k.data(), v.data(), nk, d, out.data(), nullptr);
    double s = 0.0;
    for (int64_t i = 0; i < out.size(); ++i) s += out[i] * proj[i];
    return s;
  };

  Tensor out({nq, d}), attn({nq, nk});
  attention_forward_serial(q.data(), nq, k.data(), v.data(), nk, d, out.data(), attn.data());
  Tensor dq({nq, d}), dk({nk, d}), dv({nk, d});
  attention_backward_serial(q.data(), nq, k.data(), v.data(), nk, d, attn.data(), proj.data(),
                            dq.data(), dk.data(), dv.data());

  Rng pick(77);
  for (int trial = 0; trial < 10; ++trial) {
    const int64_t i = pick.uniform_int(q.size());
    CHECK(test::rel_err(dq[i], test::central_diff(loss, &q[i])) < 1e-6);
  }
  for (int trial = 0; trial < 10; ++trial) {
    const int64_t i = pick.uniform_int(k.size());
    CHECK(test::rel_err(dk[i], test::central_diff(loss, &k[i])) < 1e-6);
  }
  for (int trial = 0; trial < 10; ++trial) {
    const int64_t i = pick.uniform_int(v.size());
    CHECK(test::rel_err(dv[i], test::central_diff(loss, &v[i])) < 1e-6);
  }
}

TEST_CASE("resize_bilinear: parallel matches serial, constants invariant") {
  const Tensor in = rand_t({3, 16, 16}, 51);
  Tensor a({3, 8, 8}), b({3, 8, 8});
  resize_bilinear(in.data(), 3, 16, 16, 8, 8, a.data());
  resize_bilinear_serial(in.data(), 3, 16, 16, 8, 8, b.data());
  CHECK(max_abs_diff(a, b) == 0.0);

  const Tensor c = Tensor::full({1, 12, 12}, 0.37);
  Tensor down({1, 3, 3}), up({1, 12, 12});
  resize_bilinear(c.data(), 1, 12, 12, 3, 3, down.data());
  resize_bilinear(down.data(), 1, 3, 3, 12, 12, up.data());
  for (int64_t i = 0; i < up.size(); ++i) CHECK(up[i] == doctest::Approx(0.37).epsilon(1e-12));
}
