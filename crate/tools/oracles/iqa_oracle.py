"""Straight-line reference values for the UIQM and UCIQE regression tests.

Written independently of the Rust code from the published metric definitions;
uses scipy's Sobel filter and numpy reductions. Run with `python3 iqa_oracle.py`.
"""

import numpy as np
from scipy import ndimage
from skimage import color


def uiqm_image():
    img = np.zeros((8, 8, 3))
    for y in range(8):
        for x in range(8):
            for c in range(3):
                img[y, x, c] = (1 + (x * 7 + y * 13 + c * 29) % 17) / 20.0
    return img


def two_tone():
    img = np.zeros((8, 8, 3))
    img[:, :4] = [0.8, 0.4, 0.2]
    img[:, 4:] = [0.1, 0.5, 0.7]
    return img


def trimmed(v, alpha=0.1):
    v = np.sort(v.ravel())
    k = v.size
    lo = int(np.ceil(alpha * k))
    hi = int(np.floor(alpha * k))
    mu = v[lo:k - hi].mean()
    return mu, np.mean((v - mu) ** 2)


def uicm(img):
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    mrg, vrg = trimmed(r - g)
    myb, vyb = trimmed((r + g) / 2 - b)
    return -0.0268 * np.sqrt(mrg**2 + myb**2) + 0.1586 * np.sqrt(vrg + vyb)


def eme(ch, block):
    k2, k1 = ch.shape[0] // block, ch.shape[1] // block
    total = 0.0
    for by in range(k2):
        for bx in range(k1):
            blk = ch[by * block:(by + 1) * block, bx * block:(bx + 1) * block]
            mx, mn = blk.max(), blk.min()
            if mx > 0 and mn > 0:
                total += np.log(mx / mn)
    return 2.0 / (k1 * k2) * total


def uism(img, block=8):
    weights = [0.299, 0.587, 0.114]
    out = 0.0
    for c in range(3):
        ch = img[..., c]
        mag = np.hypot(ndimage.sobel(ch, 0, mode="reflect"), ndimage.sobel(ch, 1, mode="reflect"))
        if mag.max() > 0:
            mag = mag * (255.0 / mag.max())
        else:
            mag = mag * 0.0
        out += weights[c] * eme(mag * ch, block)
    return out


def uiconm(img, block=8):
    k2, k1 = img.shape[0] // block, img.shape[1] // block
    total = 0.0
    for by in range(k2):
        for bx in range(k1):
            blk = img[by * block:(by + 1) * block, bx * block:(bx + 1) * block, :]
            top, bot = blk.max() - blk.min(), blk.max() + blk.min()
            if top > 0 and bot > 0:
                total += (top / bot) * np.log(top / bot)
    return -total / (k1 * k2)


def uiqm(img01):
    img = img01 * 255.0
    a, b, c = uicm(img), uism(img), uiconm(img)
    return a, b, c, 0.0282 * a + 0.2953 * b + 3.5753 * c


M = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])


def lab(img):
    lin = np.where(img <= 0.04045, img / 12.92, ((img + 0.055) / 1.055) ** 2.4)
    xyz = lin @ M.T
    white = M.sum(axis=1)
    t = xyz / white
    d = 6.0 / 29.0
    f = np.where(t > d**3, np.cbrt(t), t / (3 * d * d) + 4.0 / 29.0)
    L = 116 * f[..., 1] - 16
    a = 500 * (f[..., 0] - f[..., 1])
    b = 200 * (f[..., 1] - f[..., 2])
    return L, a, b


def uciqe(img):
    L, a, b = lab(img)
    L = L / 100.0
    chroma = np.sqrt(a**2 + b**2) / 100.0
    sc = chroma.std()
    n = L.size
    tail = max(1, int(round(0.01 * n)))
    s = np.sort(L.ravel())
    con = s[-tail:].mean() - s[:tail].mean()
    sat = np.where(L > 0, chroma / np.where(L > 0, L, 1), 0.0).mean()
    return sc, con, sat, 0.4680 * sc + 0.2745 * con + 0.2576 * sat


if __name__ == "__main__":
    for name, v in zip(["uicm", "uism", "uiconm", "uiqm"], uiqm(uiqm_image())):
        print(f"{name} {float(v)!r}")
    for name, v in zip(["chroma_std", "contrast", "saturation", "uciqe"], uciqe(two_tone())):
        print(f"{name} {float(v)!r}")
    # Loose sanity check of the Lab conversion against scikit-image.
    L, a, b = lab(two_tone())
    ref = color.rgb2lab(two_tone())
    print("max |lab - skimage|", float(np.max(np.abs(np.stack([L, a, b], -1) - ref))))
