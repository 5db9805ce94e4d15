#pragma once

#include "tensor.hpp"

// Hot inner loops, each in two variants: an OpenMP-parallel version used by
// the pipeline and a plain serial reference kept for the equivalence tests
// and the benchmark target. Parallel loops only ever write disjoint outputs
// and keep the serial accumulation order inside each iteration, so the two
// variants produce bit-identical results.

namespace mvb::kernels {

// 2D convolution, NCHW single image. in [cin,h,w], weight [cout,cin,k,k],
// bias [cout] (nullable), out [cout,ho,wo] with ho = (h+2*pad-k)/stride + 1.
void conv2d_forward(const double* in, int cin, int h, int w, const double* weight, int cout,
                    int k, const double* bias, int stride, int pad, double* out);
void conv2d_forward_serial(const double* in, int cin, int h, int w, const double* weight,
                           int cout, int k, const double* bias, int stride, int pad, double* out);

// Gradient w.r.t. the input. d_in [cin,h,w] is overwritten.
void conv2d_backward_input(const double* d_out, int cout, int ho, int wo, const double* weight,
                           int cin, int h, int w, int k, int stride, int pad, double* d_in);
void conv2d_backward_input_serial(const double* d_out, int cout, int ho, int wo,
                                  const double* weight, int cin, int h, int w, int k, int stride,
                                  int pad, double* d_in);

// Gradients w.r.t. weight/bias, accumulated into d_weight / d_bias.
void conv2d_backward_params(const double* in, int cin, int h, int w, const double* d_out, int cout,
                            int ho, int wo, int k, int stride, int pad, double* d_weight,
                            double* d_bias);
void conv2d_backward_params_serial(const double* in, int cin, int h, int w, const double* d_out,
                                   int cout, int ho, int wo, int k, int stride, int pad,
                                   double* d_weight, double* d_bias);

// Scaled dot-product attention over row-major token matrices.
// q [nq,d], k/v [nk,d], out [nq,d]; attn (nullable) receives the softmax
// weights [nq,nk] for the backward pass.
void attention_forward(const double* q, int nq, const double* k, const double* v, int nk, int d,
                       double* out, double* attn);
void attention_forward_serial(const double* q, int nq, const double* k, const double* v, int nk,
                              int d, double* out, double* attn);

// Backward of attention_forward. d_q/d_k/d_v are accumulated into.
void attention_backward(const double* q, int nq, const double* k, const double* v, int nk, int d,
                        const double* attn, const double* d_out, double* d_q, double* d_k,
                        double* d_v);
void attention_backward_serial(const double* q, int nq, const double* k, const double* v, int nk,
                               int d, const double* attn, const double* d_out, double* d_q,
                               double* d_k, double* d_v);

// Bilinear resize of a [c,h,w] image to [c,ho,wo], align_corners=false
// convention. Forward-only (augmentation-side, no gradients needed).
void resize_bilinear(const double* in, int c, int h, int w, int ho, int wo, double* out);
void resize_bilinear_serial(const double* in, int c, int h, int w, int ho, int wo, double* out);

}  // namespace mvb::kernels
