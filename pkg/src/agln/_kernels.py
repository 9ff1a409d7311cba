"""Hot loops behind the convolution and metric primitives.

Each kernel has a numba ``@njit`` body and a pure-numpy twin with the same
accumulation order, so both paths give bitwise-identical results. The numba
path is used when numba imports and ``AGLN_DISABLE_NUMBA`` is unset or "0".
"""
from __future__ import annotations

import os

import numpy as np

_FLAG = os.environ.get("AGLN_DISABLE_NUMBA", "0").strip().lower()

try:
    if _FLAG not in ("", "0", "false", "no"):
        raise ImportError("numba disabled by AGLN_DISABLE_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False


def backend() -> str:
    return "numba" if HAVE_NUMBA else "numpy"


# --- numpy reference paths ---------------------------------------------------


def im2col_numpy(xp: np.ndarray, stride: int, ho: int, wo: int) -> np.ndarray:
    """Gather 3x3 patches of a padded (B, C, Hp, Wp) array into (B, C, 9, ho, wo)."""
    b, c = xp.shape[:2]
    cols = np.empty((b, c, 9, ho, wo), dtype=xp.dtype)
    for ky in range(3):
        for kx in range(3):
            cols[:, :, ky * 3 + kx] = xp[
                :, :, ky : ky + stride * (ho - 1) + 1 : stride, kx : kx + stride * (wo - 1) + 1 : stride
            ]
    return cols


def col2im_numpy(cols: np.ndarray, stride: int, hp: int, wp: int) -> np.ndarray:
    """Scatter-add (B, C, 9, ho, wo) patch gradients back onto a padded grid."""
    b, c, _, ho, wo = cols.shape
    out = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    for ky in range(3):
        for kx in range(3):
            out[
                :, :, ky : ky + stride * (ho - 1) + 1 : stride, kx : kx + stride * (wo - 1) + 1 : stride
            ] += cols[:, :, ky * 3 + kx]
    return out


def confusion_numpy(matrix: np.ndarray, gt: np.ndarray, pred: np.ndarray, ignore: int) -> None:
    k = matrix.shape[0]
    keep = gt != ignore
    idx = gt[keep].astype(np.int64) * k + pred[keep].astype(np.int64)
    matrix += np.bincount(idx, minlength=k * k).reshape(k, k).astype(matrix.dtype)


# --- numba paths -------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _im2col_jit(xp, stride, ho, wo):
        b, c = xp.shape[0], xp.shape[1]
        cols = np.empty((b, c, 9, ho, wo), dtype=xp.dtype)
        for n in range(b):
            for ch in range(c):
                for ky in range(3):
                    for kx in range(3):
                        k = ky * 3 + kx
                        for i in range(ho):
                            row = ky + stride * i
                            for j in range(wo):
                                cols[n, ch, k, i, j] = xp[n, ch, row, kx + stride * j]
        return cols

    @njit(cache=True)
    def _col2im_jit(cols, stride, hp, wp):
        b, c, _, ho, wo = cols.shape
        out = np.zeros((b, c, hp, wp), dtype=cols.dtype)
        # (ky, kx) outermost per channel keeps the numpy path's summation order
        for n in range(b):
            for ch in range(c):
                for ky in range(3):
                    for kx in range(3):
                        k = ky * 3 + kx
                        for i in range(ho):
                            row = ky + stride * i
                            for j in range(wo):
                                out[n, ch, row, kx + stride * j] += cols[n, ch, k, i, j]
        return out

    @njit(cache=True)
    def _confusion_jit(matrix, gt, pred, ignore):
        for i in range(gt.shape[0]):
            g = gt[i]
            if g != ignore:
                matrix[g, pred[i]] += 1


def im2col(xp: np.ndarray, stride: int, ho: int, wo: int) -> np.ndarray:
    if HAVE_NUMBA:
        return _im2col_jit(np.ascontiguousarray(xp), stride, ho, wo)
    return im2col_numpy(xp, stride, ho, wo)


def col2im(cols: np.ndarray, stride: int, hp: int, wp: int) -> np.ndarray:
    if HAVE_NUMBA:
        return _col2im_jit(np.ascontiguousarray(cols), stride, hp, wp)
    return col2im_numpy(cols, stride, hp, wp)


def confusion_update(matrix: np.ndarray, gt: np.ndarray, pred: np.ndarray, ignore: int) -> None:
    """Add per-pixel (gt, pred) counts into ``matrix`` in place."""
    gt = np.ascontiguousarray(gt, dtype=np.int64).ravel()
    pred = np.ascontiguousarray(pred, dtype=np.int64).ravel()
    if HAVE_NUMBA:
        _confusion_jit(matrix, gt, pred, ignore)
    else:
        confusion_numpy(matrix, gt, pred, ignore)
