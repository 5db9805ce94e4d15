#include "kernels.hpp"

#include <cmath>
#include <cstring>
#include <vector>

namespace mvb::kernels {

namespace {

inline void conv2d_one_output_channel(const double* in, int cin, int h, int w,
                                      const double* weight, int k, double bias_v, int stride,
                                      int pad, int ho, int wo, double* out_plane) {
  for (int oy = 0; oy < ho; ++oy) {
    for (int ox = 0; ox < wo; ++ox) out_plane[oy * wo + ox] = bias_v;
  }
  for (int ci = 0; ci < cin; ++ci) {
    const double* in_plane = in + static_cast<size_t>(ci) * h * w;
    const double* w_plane = weight + static_cast<size_t>(ci) * k * k;
    for (int oy = 0; oy < ho; ++oy) {
      double* out_row = out_plane + static_cast<size_t>(oy) * wo;
      for (int ky = 0; ky < k; ++ky) {
        const int iy = oy * stride + ky - pad;
        if (iy < 0 || iy >= h) continue;
        const double* in_row = in_plane + static_cast<size_t>(iy) * w;
        for (int kx = 0; kx < k; ++kx) {
          const double wv = w_plane[ky * k + kx];
          const int off = kx - pad;
          // valid ox range given ix = ox*stride + off in [0, w)
          int ox0 = 0;
          while (ox0 < wo && ox0 * stride + off < 0) ++ox0;
          int ox1 = wo;
          while (ox1 > ox0 && (ox1 - 1) * stride + off >= w) --ox1;
          const double* src = in_row + off;
          if (stride == 1) {
            for (int ox = ox0; ox < ox1; ++ox) out_row[ox] += wv * src[ox];
          } else {
            for (int ox = ox0; ox < ox1; ++ox) out_row[ox] += wv * src[ox * stride];
          }
        }
      }
    }
  }
}

inline void conv2d_back_input_one_channel(const double* d_out, int cout, int ho, int wo,
                                          const double* weight, int cin, int k, int stride,
                                          int pad, int h, int w, int ci, double* d_in_plane) {
  std::memset(d_in_plane, 0, static_cast<size_t>(h) * w * sizeof(double));
  for (int co = 0; co < cout; ++co) {
    const double* dout_plane = d_out + static_cast<size_t>(co) * ho * wo;
    const double* w_plane = weight + (static_cast<size_t>(co) * cin + ci) * k * k;
    for (int oy = 0; oy < ho; ++oy) {
      const double* dout_row = dout_plane + static_cast<size_t>(oy) * wo;
      for (int ky = 0; ky < k; ++ky) {
        const int iy = oy * stride + ky - pad;
        if (iy < 0 || iy >= h) continue;
        double* din_row = d_in_plane + static_cast<size_t>(iy) * w;
        for (int kx = 0; kx < k; ++kx) {
          const double wv = w_plane[ky * k + kx];
          const int off = kx - pad;
          int ox0 = 0;
          while (ox0 < wo && ox0 * stride + off < 0) ++ox0;
          int ox1 = wo;
          while (ox1 > ox0 && (ox1 - 1) * stride + off >= w) --ox1;
          for (int ox = ox0; ox < ox1; ++ox) din_row[ox * stride + off] += wv * dout_row[ox];
        }
      }
    }
  }
}

// Accumulates the weight gradient for one (co,ci) kernel plane.
inline void conv2d_back_weight_plane(const double* in_plane, int h, int w,
                                     const double* dout_plane, int ho, int wo, int k, int stride,
                                     int pad, double* d_w_plane) {
  for (int ky = 0; ky < k; ++ky) {
    for (int kx = 0; kx < k; ++kx) {
      double acc = 0.0;
      for (int oy = 0; oy < ho; ++oy) {
        const int iy = oy * stride + ky - pad;
        if (iy < 0 || iy >= h) continue;
        const double* dout_row = dout_plane + static_cast<size_t>(oy) * wo;
        const double* in_row = in_plane + static_cast<size_t>(iy) * w;
        const int off = kx - pad;
        int ox0 = 0;
        while (ox0 < wo && ox0 * stride + off < 0) ++ox0;
        int ox1 = wo;
        while (ox1 > ox0 && (ox1 - 1) * stride + off >= w) --ox1;
        for (int ox = ox0; ox < ox1; ++ox) acc += dout_row[ox] * in_row[ox * stride + off];
      }
      d_w_plane[ky * k + kx] += acc;
    }
  }
}

inline int out_extent(int n, int k, int stride, int pad) {
  return (n + 2 * pad - k) / stride + 1;
}

}  // namespace

void conv2d_forward(const double* in, int cin, int h, int w, const double* weight, int cout,
                    int k, const double* bias, int stride, int pad, double* out) {
  const int ho = out_extent(h, k, stride, pad), wo = out_extent(w, k, stride, pad);
#pragma omp parallel for schedule(static)
  for (int co = 0; co < cout; ++co) {
    conv2d_one_output_channel(in, cin, h, w, weight + static_cast<size_t>(co) * cin * k * k, k,
                              bias ? bias[co] : 0.0, stride, pad, ho, wo,
                              out + static_cast<size_t>(co) * ho * wo);
  }
}

void conv2d_forward_serial(const double* in, int cin, int h, int w, const double* weight,
                           int cout, int k, const double* bias, int stride, int pad, double* out) {
  const int ho = out_extent(h, k, stride, pad), wo = out_extent(w, k, stride, pad);
  for (int co = 0; co < cout; ++co) {
    conv2d_one_output_channel(in, cin, h, w, weight + static_cast<size_t>(co) * cin * k * k, k,
                              bias ? bias[co] : 0.0, stride, pad, ho, wo,
                              out + static_cast<size_t>(co) * ho * wo);
  }
}

void conv2d_backward_input(const double* d_out, int cout, int ho, int wo, const double* weight,
                           int cin, int h, int w, int k, int stride, int pad, double* d_in) {
#pragma omp parallel for schedule(static)
  for (int ci = 0; ci < cin; ++ci) {
    conv2d_back_input_one_channel(d_out, cout, ho, wo, weight, cin, k, stride, pad, h, w, ci,
                                  d_in + static_cast<size_t>(ci) * h * w);
  }
}

void conv2d_backward_input_serial(const double* d_out, int cout, int ho, int wo,
                                  const double* weight, int cin, int h, int w, int k, int stride,
                                  int pad, double* d_in) {
  for (int ci = 0; ci < cin; ++ci) {
    conv2d_back_input_one_channel(d_out, cout, ho, wo, weight, cin, k, stride, pad, h, w, ci,
                                  d_in + static_cast<size_t>(ci) * h * w);
  }
}

void conv2d_backward_params(const double* in, int cin, int h, int w, const double* d_out, int cout,
                            int ho, int wo, int k, int stride, int pad, double* d_weight,
                            double* d_bias) {
#pragma omp parallel for schedule(static) collapse(2)
  for (int co = 0; co < cout; ++co) {
    for (int ci = 0; ci < cin; ++ci) {
      conv2d_back_weight_plane(in + static_cast<size_t>(ci) * h * w, h, w,
                               d_out + static_cast<size_t>(co) * ho * wo, ho, wo, k, stride, pad,
                               d_weight + (static_cast<size_t>(co) * cin + ci) * k * k);
    }
  }
  if (d_bias) {
#pragma omp parallel for schedule(static)
    for (int co = 0; co < cout; ++co) {
      const double* dout_plane = d_out + static_cast<size_t>(co) * ho * wo;
      double acc = 0.0;
      for (int i = 0; i < ho * wo; ++i) acc += dout_plane[i];
      d_bias[co] += acc;
    }
  }
}

void conv2d_backward_params_serial(const double* in, int cin, int h, int w, const double* d_out,
                                   int cout, int ho, int wo, int k, int stride, int pad,
                                   double* d_weight, double* d_bias) {
  for (int co = 0; co < cout; ++co) {
    for (int ci = 0; ci < cin; ++ci) {
      conv2d_back_weight_plane(in + static_cast<size_t>(ci) * h * w, h, w,
                               d_out + static_cast<size_t>(co) * ho * wo, ho, wo, k, stride, pad,
                               d_weight + (static_cast<size_t>(co) * cin + ci) * k * k);
    }
  }
  if (d_bias) {
    for (int co = 0; co < cout; ++co) {
      const double* dout_plane = d_out + static_cast<size_t>(co) * ho * wo;
      double acc = 0.0;
      for (int i = 0; i < ho * wo; ++i) acc += dout_plane[i];
      d_bias[co] += acc;
    }
  }
}

namespace {

inline void attention_one_query(const double* qi, const double* k, const double* v, int nk, int d,
                                double inv_sqrt_d, double* out_i, double* attn_i,
                                double* scores_tmp) {
  double m = -1e300;
  for (int j = 0; j < nk; ++j) {
    const double* kj = k + static_cast<size_t>(j) * d;
    double s = 0.0;
    for (int e = 0; e < d; ++e) s += qi[e] * kj[e];
    s *= inv_sqrt_d;
    scores_tmp[j] = s;
    if (s > m) m = s;
  }
  double z = 0.0;
  for (int j = 0; j < nk; ++j) {
    scores_tmp[j] = std::exp(scores_tmp[j] - m);
    z += scores_tmp[j];
  }
  const double inv_z = 1.0 / z;
  for (int e = 0; e < d; ++e) out_i[e] = 0.0;
  for (int j = 0; j < nk; ++j) {
    const double a = scores_tmp[j] * inv_z;
    if (attn_i) attn_i[j] = a;
    const double* vj = v + static_cast<size_t>(j) * d;
    for (int e = 0; e < d; ++e) out_i[e] += a * vj[e];
  }
}

}  // namespace

void attention_forward(const double* q, int nq, const double* k, const double* v, int nk, int d,
                       double* out, double* attn) {
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
#pragma omp parallel
  {
    std::vector<double> scores(static_cast<size_t>(nk));
#pragma omp for schedule(static)
    for (int i = 0; i < nq; ++i) {
      attention_one_query(q + static_cast<size_t>(i) * d, k, v, nk, d, inv_sqrt_d,
                          out + static_cast<size_t>(i) * d,
                          attn ? attn + static_cast<size_t>(i) * nk : nullptr, scores.data());
    }
  }
}

void attention_forward_serial(const double* q, int nq, const double* k, const double* v, int nk,
                              int d, double* out, double* attn) {
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<double> scores(static_cast<size_t>(nk));
  for (int i = 0; i < nq; ++i) {
    attention_one_query(q + static_cast<size_t>(i) * d, k, v, nk, d, inv_sqrt_d,
                        out + static_cast<size_t>(i) * d,
                        attn ? attn + static_cast<size_t>(i) * nk : nullptr, scores.data());
  }
}

namespace {

// Row terms r_i = sum_j attn_ij * (d_out_i . v_j), shared by dq/dk halves.
inline void attention_row_terms(const double* v, int nk, int d, const double* attn,
                                const double* d_out, int nq, double* dp, double* row) {
  for (int i = 0; i < nq; ++i) {
    const double* doi = d_out + static_cast<size_t>(i) * d;
    double r = 0.0;
    for (int j = 0; j < nk; ++j) {
      const double* vj = v + static_cast<size_t>(j) * d;
      double s = 0.0;
      for (int e = 0; e < d; ++e) s += doi[e] * vj[e];
      dp[static_cast<size_t>(i) * nk + j] = s;
      r += attn[static_cast<size_t>(i) * nk + j] * s;
    }
    row[i] = r;
  }
}

inline void attention_row_terms_parallel(const double* v, int nk, int d, const double* attn,
                                         const double* d_out, int nq, double* dp, double* row) {
#pragma omp parallel for schedule(static)
  for (int i = 0; i < nq; ++i) {
    const double* doi = d_out + static_cast<size_t>(i) * d;
    double r = 0.0;
    for (int j = 0; j < nk; ++j) {
      const double* vj = v + static_cast<size_t>(j) * d;
      double s = 0.0;
      for (int e = 0; e < d; ++e) s += doi[e] * vj[e];
      dp[static_cast<size_t>(i) * nk + j] = s;
      r += attn[static_cast<size_t>(i) * nk + j] * s;
    }
    row[i] = r;
  }
}

}  // namespace

void attention_backward(const double* q, int nq, const double* k, const double* v, int nk, int d,
                        const double* attn, const double* d_out, double* d_q, double* d_k,
                        double* d_v) {
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<double> dp(static_cast<size_t>(nq) * nk);
  std::vector<double> row(static_cast<size_t>(nq));
  attention_row_terms_parallel(v, nk, d, attn, d_out, nq, dp.data(), row.data());

#pragma omp parallel for schedule(static)
  for (int i = 0; i < nq; ++i) {
    double* dqi = d_q + static_cast<size_t>(i) * d;
    for (int j = 0; j < nk; ++j) {
      const double a = attn[static_cast<size_t>(i) * nk + j];
      const double ds = a * (dp[static_cast<size_t>(i) * nk + j] - row[i]) * inv_sqrt_d;
      const double* kj = k + static_cast<size_t>(j) * d;
      for (int e = 0; e < d; ++e) dqi[e] += ds * kj[e];
    }
  }

#pragma omp parallel for schedule(static)
  for (int j = 0; j < nk; ++j) {
    double* dkj = d_k + static_cast<size_t>(j) * d;
    double* dvj = d_v + static_cast<size_t>(j) * d;
    for (int i = 0; i < nq; ++i) {
      const double a = attn[static_cast<size_t>(i) * nk + j];
      const double ds = a * (dp[static_cast<size_t>(i) * nk + j] - row[i]) * inv_sqrt_d;
      const double* qi = q + static_cast<size_t>(i) * d;
      const double* doi = d_out + static_cast<size_t>(i) * d;
      for (int e = 0; e < d; ++e) {
        dkj[e] += ds * qi[e];
        dvj[e] += a * doi[e];
      }
    }
  }
}

void attention_backward_serial(const double* q, int nq, const double* k, const double* v, int nk,
                               int d, const double* attn, const double* d_out, double* d_q,
                               double* d_k, double* d_v) {
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<double> dp(static_cast<size_t>(nq) * nk);
  std::vector<double> row(static_cast<size_t>(nq));
  attention_row_terms(v, nk, d, attn, d_out, nq, dp.data(), row.data());

  for (int i = 0; i < nq; ++i) {
    double* dqi = d_q + static_cast<size_t>(i) * d;
    for (int j = 0; j < nk; ++j) {
      const double a = attn[static_cast<size_t>(i) * nk + j];
      const double ds = a * (dp[static_cast<size_t>(i) * nk + j] - row[i]) * inv_sqrt_d;
      const double* kj = k + static_cast<size_t>(j) * d;
      for (int e = 0; e < d; ++e) dqi[e] += ds * kj[e];
    }
  }
  for (int j = 0; j < nk; ++j) {
    double* dkj = d_k + static_cast<size_t>(j) * d;
    double* dvj = d_v + static_cast<size_t>(j) * d;
    for (int i = 0; i < nq; ++i) {
      const double a = attn[static_cast<size_t>(i) * nk + j];
      const double ds = a * (dp[static_cast<size_t>(i) * nk + j] - row[i]) * inv_sqrt_d;
      const double* qi = q + static_cast<size_t>(i) * d;
      const double* doi = d_out + static_cast<size_t>(i) * d;
      for (int e = 0; e < d; ++e) {
        dkj[e] += ds * qi[e];
        dvj[e] += a * doi[e];
      }
    }
  }
}

namespace {

inline void resize_bilinear_one_channel(const double* in_plane, int h, int w, int ho, int wo,
                                        double* out_plane) {
  const double sy = static_cast<double>(h) / ho;
  const double sx = static_cast<double>(w) / wo;
  for (int oy = 0; oy < ho; ++oy) {
    const double fy = (oy + 0.5) * sy - 0.5;
    int y0 = static_cast<int>(std::floor(fy));
    const double wy = fy - y0;
    int y1 = y0 + 1;
    y0 = y0 < 0 ? 0 : (y0 >= h ? h - 1 : y0);
    y1 = y1 < 0 ? 0 : (y1 >= h ? h - 1 : y1);
    for (int ox = 0; ox < wo; ++ox) {
      const double fx = (ox + 0.5) * sx - 0.5;
      int x0 = static_cast<int>(std::floor(fx));
      const double wx = fx - x0;
      int x1 = x0 + 1;
      x0 = x0 < 0 ? 0 : (x0 >= w ? w - 1 : x0);
      x1 = x1 < 0 ? 0 : (x1 >= w ? w - 1 : x1);
      const double a = in_plane[y0 * w + x0] * (1 - wx) + in_plane[y0 * w + x1] * wx;
      const double b = in_plane[y1 * w + x0] * (1 - wx) + in_plane[y1 * w + x1] * wx;
      out_plane[oy * wo + ox] = a * (1 - wy) + b * wy;
    }
  }
}

}  // namespace

void resize_bilinear(const double* in, int c, int h, int w, int ho, int wo, double* out) {
#pragma omp parallel for schedule(static)
  for (int ch = 0; ch < c; ++ch) {
    resize_bilinear_one_channel(in + static_cast<size_t>(ch) * h * w, h, w, ho, wo,
                                out + static_cast<size_t>(ch) * ho * wo);
  }
}

void resize_bilinear_serial(const double* in, int c, int h, int w, int ho, int wo, double* out) {
  for (int ch = 0; ch < c; ++ch) {
    resize_bilinear_one_channel(in + static_cast<size_t>(ch) * h * w, h, w, ho, wo,
                                out + static_cast<size_t>(ch) * ho * wo);
  }
}

}  // namespace mvb::kernels
