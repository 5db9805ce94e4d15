#!/usr/bin/env python3
"""Generates frozen PSNR/SSIM reference values for the C++ metric tests.

Writes tests/data/metric_cases.bin: int32 header (n, h, w), then per case
image A [3*h*w], image B [3*h*w], psnr, ssim as little-endian float64.

The SSIM reference below is a direct sliding-window evaluation of the
standard formula (11x11 Gaussian, sigma 1.5, K1=0.01, K2=0.03, valid
positions only, per channel averaged). When scikit-image is available the
values are cross-checked against it before freezing.
"""
import struct
import sys
from pathlib import Path

import numpy as np


def gaussian_window(win=11, sigma=1.5):
    ax = np.arange(win) - (win - 1) / 2.0
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * sigma**2))
    return g / g.sum()


def ssim_ref(a, b):
    """a, b: [3,h,w] in [0,1]."""
    win = gaussian_window()
    k = win.shape[0]
    c1, c2 = 0.01**2, 0.03**2
    vals = []
    for ch in range(3):
        x, y = a[ch], b[ch]
        h, w = x.shape
        ssim_map = []
        for y0 in range(h - k + 1):
            for x0 in range(w - k + 1):
                px = x[y0:y0 + k, x0:x0 + k]
                py = y[y0:y0 + k, x0:x0 + k]
                mx = (win * px).sum()
                my = (win * py).sum()
                vx = (win * px * px).sum() - mx * mx
                vy = (win * py * py).sum() - my * my
                cxy = (win * px * py).sum() - mx * my
                num = (2 * mx * my + c1) * (2 * cxy + c2)
                den = (mx * mx + my * my + c1) * (vx + vy + c2)
                ssim_map.append(num / den)
        vals.append(np.mean(ssim_map))
    return float(np.mean(vals))


def psnr_ref(a, b):
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0:
        return 99.0
    return min(99.0, 10 * np.log10(1.0 / mse))


def main():
    out_path = Path(__file__).resolve().parent.parent / "data" / "metric_cases.bin"
    rs = np.random.RandomState(20240601)
    n, h, w = 20, 24, 24

    try:
        from skimage.metrics import peak_signal_noise_ratio, structural_similarity
        have_skimage = True
    except ImportError:
        have_skimage = False

    cases = []
    for i in range(n):
        base = rs.rand(3, h, w)
        # Mix of perturbation styles so the SSIM values spread over a range.
        kind = i % 4
        if kind == 0:
            other = np.clip(base + rs.randn(3, h, w) * 0.05, 0, 1)
        elif kind == 1:
            other = np.clip(base * rs.uniform(0.5, 1.0) + rs.uniform(0, 0.3), 0, 1)
        elif kind == 2:
            other = rs.rand(3, h, w)
        else:
            sm = base.copy()
            sm[:, ::2, :] = sm[:, 1::2, :]
            other = np.clip(sm + rs.randn(3, h, w) * 0.02, 0, 1)

        p = psnr_ref(base, other)
        s = ssim_ref(base, other)

        if have_skimage:
            p_sk = peak_signal_noise_ratio(base, other, data_range=1.0)
            s_sk = structural_similarity(
                np.moveaxis(base, 0, -1), np.moveaxis(other, 0, -1),
                channel_axis=-1, gaussian_weights=True, sigma=1.5,
                use_sample_covariance=False, data_range=1.0)
            assert abs(p - p_sk) < 1e-9, (p, p_sk)
            assert abs(s - s_sk) < 1e-9, (s, s_sk)
        cases.append((base, other, p, s))

    with open(out_path, "wb") as f:
        f.write(struct.pack("<iii", n, h, w))
        for base, other, p, s in cases:
            f.write(base.astype("<f8").tobytes())
            f.write(other.astype("<f8").tobytes())
            f.write(struct.pack("<dd", p, s))
    print(f"wrote {out_path} ({out_path.stat().st_size} bytes), skimage cross-check: {have_skimage}")


if __name__ == "__main__":
    sys.exit(main())
