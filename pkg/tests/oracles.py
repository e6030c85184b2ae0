"""Independent reference implementations used as test oracles.

These deliberately avoid the library's code paths: the Philox generator is
re-implemented from its published round constants, and the network oracles
compute losses with plain Python loops.
"""

from __future__ import annotations

import math

import numpy as np

_PHILOX_M0 = 0xD2E7470EE14C6C93
_PHILOX_M1 = 0xCA5A826395121157
_WEYL_0 = 0x9E3779B97F4A7C15
_WEYL_1 = 0xBB67AE8584CAA73B
_MASK64 = (1 << 64) - 1


def _mulhilo(a: int, b: int) -> tuple[int, int]:
    product = a * b
    return (product >> 64) & _MASK64, product & _MASK64


def philox4x64_block(counter: list[int], key: tuple[int, int], rounds: int = 10) -> list[int]:
    c = list(counter)
    k = list(key)
    for _ in range(rounds):
        hi0, lo0 = _mulhilo(_PHILOX_M0, c[0])
        hi1, lo1 = _mulhilo(_PHILOX_M1, c[2])
        c = [hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0]
        k = [(k[0] + _WEYL_0) & _MASK64, (k[1] + _WEYL_1) & _MASK64]
    return c


def philox_raw(seed: int, stream_id: int, n: int, block: int = 0) -> list[int]:
    """First n raw 64-bit outputs for key (seed, stream) and counter block.

    The counter's low word is incremented (with carry) before each block is
    produced, matching the numpy Philox wrapper.
    """
    counter = [0, 0, block & _MASK64, 0]
    out: list[int] = []
    while len(out) < n:
        counter[0] = (counter[0] + 1) & _MASK64
        i = 0
        while counter[i] == 0 and i < 3:
            i += 1
            counter[i] = (counter[i] + 1) & _MASK64
        out.extend(philox4x64_block(counter, (seed & _MASK64, stream_id & _MASK64)))
    return out[:n]


def philox_uniform(seed: int, stream_id: int, n: int, low: float, high: float) -> list[float]:
    """uniform(low, high) sequence: 53-bit mantissa doubles scaled into range."""
    return [
        low + (high - low) * ((raw >> 11) * (2.0 ** -53))
        for raw in philox_raw(seed, stream_id, n)
    ]


def brute_dense_forward_loss(
    weights: list[np.ndarray],
    biases: list[np.ndarray],
    x: np.ndarray,
    labels: np.ndarray,
    relu_after: list[bool],
) -> float:
    """Mean softmax cross-entropy of a dense stack, plain Python loops."""
    total = 0.0
    for row, label in zip(x, labels):
        act = [float(v) for v in row]
        for w, b, relu in zip(weights, biases, relu_after):
            nxt = []
            for j in range(w.shape[1]):
                s = float(b[j])
                for i in range(w.shape[0]):
                    s += act[i] * float(w[i, j])
                nxt.append(max(s, 0.0) if relu else s)
            act = nxt
        m = max(act)
        exps = [math.exp(v - m) for v in act]
        z = sum(exps)
        total += -math.log(exps[int(label)] / z)
    return total / len(labels)


def brute_conv3x3_same(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Direct 3x3 stride-1 same-padding convolution with loops."""
    n, c, h, w = x.shape
    out_ch = weight.shape[0]
    y = np.zeros((n, out_ch, h, w))
    for s in range(n):
        for o in range(out_ch):
            for i in range(h):
                for j in range(w):
                    acc = float(bias[o])
                    for ci in range(c):
                        for di in range(3):
                            for dj in range(3):
                                ii, jj = i + di - 1, j + dj - 1
                                if 0 <= ii < h and 0 <= jj < w:
                                    acc += float(x[s, ci, ii, jj]) * float(weight[o, ci, di, dj])
                    y[s, o, i, j] = acc
    return y
