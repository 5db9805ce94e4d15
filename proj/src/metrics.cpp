#include "metrics.hpp"

#include <cmath>
#include <vector>

#include "errors.hpp"

namespace mvb {

double psnr(const Tensor& a, const Tensor& b) {
  check_arg(a.same_shape(b), "psnr: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  double mse = 0.0;
  for (int64_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    mse += d * d;
  }
  mse /= static_cast<double>(a.size());
  if (mse <= 0.0) return 99.0;
  return std::min(99.0, 10.0 * std::log10(1.0 / mse));
}

namespace {

constexpr int kWin = 11;
constexpr double kSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

const std::vector<double>& gaussian_window() {
  static const std::vector<double> win = [] {
    std::vector<double> w(kWin * kWin);
    double sum = 0.0;
    for (int y = 0; y < kWin; ++y) {
      for (int x = 0; x < kWin; ++x) {
        const double dy = y - (kWin - 1) / 2.0;
        const double dx = x - (kWin - 1) / 2.0;
        w[y * kWin + x] = std::exp(-(dx * dx + dy * dy) / (2.0 * kSigma * kSigma));
        sum += w[y * kWin + x];
      }
    }
    for (double& v : w) v /= sum;
    return w;
  }();
  return win;
}

double ssim_channel(const double* a, const double* b, int h, int w) {
  const std::vector<double>& win = gaussian_window();
  double total = 0.0;
  int count = 0;
  for (int y0 = 0; y0 + kWin <= h; ++y0) {
    for (int x0 = 0; x0 + kWin <= w; ++x0) {
      double ma = 0.0, mb = 0.0, saa = 0.0, sbb = 0.0, sab = 0.0;
      for (int wy = 0; wy < kWin; ++wy) {
        const double* ra = a + static_cast<size_t>(y0 + wy) * w + x0;
        const double* rb = b + static_cast<size_t>(y0 + wy) * w + x0;
        const double* rw = win.data() + wy * kWin;
        for (int wx = 0; wx < kWin; ++wx) {
          ma += rw[wx] * ra[wx];
          mb += rw[wx] * rb[wx];
          saa += rw[wx] * ra[wx] * ra[wx];
          sbb += rw[wx] * rb[wx] * rb[wx];
          sab += rw[wx] * ra[wx] * rb[wx];
        }
      }
      const double va = saa - ma * ma;
      const double vb = sbb - mb * mb;
      const double cab = sab - ma * mb;
      const double num = (2.0 * ma * mb + kC1) * (2.0 * cab + kC2);
      const double den = (ma * ma + mb * mb + kC1) * (va + vb + kC2);
      total += num / den;
      ++count;
    }
  }
  return total / count;
}

}  // namespace

double ssim(const Tensor& a, const Tensor& b) {
  check_arg(a.same_shape(b), "ssim: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  check_arg(a.ndim() == 3 && a.dim(0) == 3, "ssim: expected [3,H,W] images");
  const int h = a.dim(1), w = a.dim(2);
  check_arg(h >= kWin && w >= kWin,
            "ssim: image smaller than the " + std::to_string(kWin) + "x" + std::to_string(kWin) +
                " window");
  double total = 0.0;
  for (int c = 0; c < 3; ++c) {
    total += ssim_channel(a.data() + static_cast<size_t>(c) * h * w,
                          b.data() + static_cast<size_t>(c) * h * w, h, w);
  }
  return total / 3.0;
}

double foreground_saturation(const Tensor& rgb, const Tensor& mask) {
  const int h = rgb.dim(1), w = rgb.dim(2);
  check_arg(mask.dim(0) == h && mask.dim(1) == w, "foreground_saturation: mask shape mismatch");
  double total = 0.0;
  int count = 0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (mask.at(y, x) <= 0.5) continue;
      const double r = rgb.at(0, y, x), g = rgb.at(1, y, x), bl = rgb.at(2, y, x);
      total += std::max({r, g, bl}) - std::min({r, g, bl});
      ++count;
    }
  }
  return count == 0 ? 0.0 : total / count;
}

}  // namespace mvb
