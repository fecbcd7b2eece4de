"""Pure-numpy implementations of the convolution gather/scatter kernels.

Layout contract (shared with the compiled extension):
  im2col:  (N, C, H, W) -> (C*k*k, N*H*W), row index ordered (c, i, j),
           column index ordered (n, h, w).
  col2im:  the exact adjoint, scattering back into (N, C, H, W).

Only odd square kernels with same-padding are supported; pad mode is
"zero" or "cyclic".
"""

import numpy as np

IS_NATIVE = False


def _pad(x: np.ndarray, p: int, mode: str) -> np.ndarray:
    if p == 0:
        return x
    if mode == "zero":
        return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    if mode == "cyclic":
        return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), mode="wrap")
    raise ValueError(f"unknown pad mode: {mode!r}")


def im2col(x: np.ndarray, k: int, mode: str) -> np.ndarray:
    n, c, h, w = x.shape
    p = k // 2
    xp = _pad(x, p, mode)
    cols = np.empty((c, k, k, n, h, w), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i : i + h, j : j + w].transpose(1, 0, 2, 3)
    return cols.reshape(c * k * k, n * h * w)


def col2im(cols: np.ndarray, n: int, c: int, h: int, w: int, k: int, mode: str) -> np.ndarray:
    p = k // 2
    hp, wp = h + 2 * p, w + 2 * p
    acc = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    cols6 = cols.reshape(c, k, k, n, h, w)
    for i in range(k):
        for j in range(k):
            acc[:, :, i : i + h, j : j + w] += cols6[:, i, j].transpose(1, 0, 2, 3)
    if p == 0:
        return acc
    if mode == "cyclic":
        # fold the pad margins back with wraparound, rows first then cols
        acc[:, :, p : 2 * p, :] += acc[:, :, h + p :, :]
        acc[:, :, h : h + p, :] += acc[:, :, :p, :]
        acc[:, :, :, p : 2 * p] += acc[:, :, :, w + p :]
        acc[:, :, :, w : w + p] += acc[:, :, :, :p]
    return acc[:, :, p : p + h, p : p + w].copy()
