"""Regenerates the frozen SSIM / MS-SSIM reference values in metrics_reference.rs.

Image pairs are produced by the same integer hash as the Rust test, so only the
scores need to be copied over. Requires tensorflow.
"""
import math

import numpy as np
import tensorflow as tf

SIZE = 64
PAIRS = 20
MASK = (1 << 64) - 1
WEIGHTS = [0.0448, 0.2856, 0.3001]


def splitmix(x):
    z = (x + 0x9E3779B97F4A7C15) & MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
    return z ^ (z >> 31)


def unit(p, k, c, y, x):
    idx = (((p * 2 + k) * 3 + c) * SIZE + y) * SIZE + x
    return (splitmix(idx) >> 11) / float(1 << 53)


def pair(p):
    a = np.zeros((SIZE, SIZE, 3))
    b = np.zeros((SIZE, SIZE, 3))
    spread = 0.05 + 0.05 * p
    for c in range(3):
        for y in range(SIZE):
            for x in range(SIZE):
                v = 0.5 + 0.25 * math.sin(0.1 * (p + 1) * x + 0.07 * y + c) + 0.25 * (unit(p, 0, c, y, x) - 0.5)
                a[y, x, c] = v
                b[y, x, c] = min(1.0, max(0.0, v + spread * (unit(p, 1, c, y, x) - 0.5)))
    return a, b


def main():
    total = sum(WEIGHTS)
    power = [w / total for w in WEIGHTS]
    for p in range(PAIRS):
        a, b = pair(p)
        ta = tf.constant(a[None], dtype=tf.float64)
        tb = tf.constant(b[None], dtype=tf.float64)
        s = tf.image.ssim(ta, tb, max_val=1.0, filter_size=11, filter_sigma=1.5, k1=0.01, k2=0.03)
        m = tf.image.ssim_multiscale(ta, tb, max_val=1.0, power_factors=power, filter_size=11, filter_sigma=1.5, k1=0.01, k2=0.03)
        print(f"    ({float(s.numpy()[0]):.12}, {float(m.numpy()[0]):.12}),")


if __name__ == "__main__":
    main()
