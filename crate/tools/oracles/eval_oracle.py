"""Reference values for the PSNR and SSIM regression tests.

SSIM follows the original windowed definition: luminance planes, an 11x11
Gaussian window with sigma 1.5 applied by scipy's correlate over the valid
region only, and K1 = 0.01, K2 = 0.03 for a unit dynamic range.
Run with `python3 eval_oracle.py`.
"""

import numpy as np
from scipy import signal

LUMA = np.array([0.299, 0.587, 0.114])


def pattern_a(h, w):
    y, x, c = np.meshgrid(np.arange(h), np.arange(w), np.arange(3), indexing="ij")
    return ((y * 7 + x * 13 + c * 5) % 17) / 16.0


def pattern_b(h, w):
    y, x, c = np.meshgrid(np.arange(h), np.arange(w), np.arange(3), indexing="ij")
    return ((y * 3 + x * 11 + c * 2) % 19) / 18.0


def window():
    r = np.arange(-5, 6)
    g = np.exp(-(r ** 2) / (2 * 1.5 ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b):
    la, lb = a @ LUMA, b @ LUMA
    w = window()
    f = lambda z: signal.correlate2d(z, w, mode="valid")
    ma, mb = f(la), f(lb)
    va = f(la * la) - ma ** 2
    vb = f(lb * lb) - mb ** 2
    cov = f(la * lb) - ma * mb
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    s = ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2))
    return s.mean()


def psnr(a, b):
    return 10 * np.log10(1.0 / np.mean((a - b) ** 2))


if __name__ == "__main__":
    a, b = pattern_a(16, 16), pattern_b(16, 16)
    print(f"ssim_patterns_16 = {ssim(a, b)!r}")
    print(f"psnr_patterns_16 = {psnr(a, b)!r}")
    print(f"ssim_patterns_13x20 = {ssim(pattern_a(13, 20), pattern_b(13, 20))!r}")
    c1 = 0.01 ** 2
    print(f"ssim_black_white = {c1 / (1 + c1)!r}")
    print(f"ssim_black_white_numeric = {ssim(np.zeros((12, 12, 3)), np.ones((12, 12, 3)))!r}")
