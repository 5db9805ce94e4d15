#pragma once

#include "tensor.hpp"

namespace mvb {

// 10*log10(1/MSE) for images in [0,1]; identical images cap at 99 dB.
double psnr(const Tensor& a, const Tensor& b);

// Structural similarity, 11x11 Gaussian window (sigma 1.5), standard
// constants K1=0.01 / K2=0.03 at data range 1, computed per channel over
// valid window positions and averaged.
double ssim(const Tensor& a, const Tensor& b);

// Mean (max channel - min channel) over mask>0.5 pixels; the over-saturation
// probe used by the anchor-update ablation. Returns 0 for empty masks.
double foreground_saturation(const Tensor& rgb, const Tensor& mask);

}  // namespace mvb
