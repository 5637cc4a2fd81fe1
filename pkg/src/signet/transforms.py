"""Signal-to-matrix operators.

The trainable operator maps a length-N channel to ``M = S @ F @ S.T`` where
``S`` stacks the sliding windows of length ``k`` (stride ``h``) and ``F`` is a
learned ``k x k`` filter. With ``F = I`` it is the Gram matrix of the
windows. The fixed baselines (Gram, GAF, MTF, constellation density,
square reshape) live here too, both as plain functions and as scikit-learn
transformers over IQ batches of shape (n_samples, 2, N).
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils import check_random_state
from sklearn.utils.validation import check_is_fitted

from . import numerics
from .exceptions import DegenerateInputError, ShapeError
from .validation import check_iq_array, iq_channels

__all__ = [
    "num_windows",
    "slice_signal",
    "s2m_forward",
    "s2m_backward",
    "windows_to_signal",
    "s2m_sample",
    "s2m",
    "gram",
    "gaf",
    "mtf",
    "constellation_density",
    "reshape_square",
    "S2MTransformer",
    "GramTransformer",
    "GAFTransformer",
    "MTFTransformer",
    "ConstellationTransformer",
    "ReshapeTransformer",
    "make_transformer",
    "TRANSFORMS",
]


def num_windows(n: int, k: int, h: int = 1) -> int:
    """Number of full windows: ``(n - k) // h + 1``."""
    if k < 1 or h < 1:
        raise ShapeError(f"window k={k} and stride h={h} must be >= 1")
    if k > n:
        raise ShapeError(f"window k={k} longer than signal length {n}")
    return (n - k) // h + 1


def slice_signal(signal, k: int, h: int = 1) -> np.ndarray:
    """Stack the length-``k`` windows of ``signal`` taken every ``h`` samples.

    Works on the last axis, so batched input (..., N) gives (..., m, k).
    Samples past the last full window are dropped.
    """
    x = np.asarray(signal, dtype=np.float64)
    m = num_windows(x.shape[-1], k, h)
    return sliding_window_view(x, k, axis=-1)[..., : (m - 1) * h + 1 : h, :]


def s2m_forward(S, F) -> np.ndarray:
    S = np.asarray(S, dtype=np.float64)
    F = np.asarray(F, dtype=np.float64)
    k = S.shape[-1]
    if F.shape[-2:] != (k, k):
        raise ShapeError(f"filter shape {F.shape} does not match window size {k}")
    return S @ F @ np.swapaxes(S, -1, -2)


def windows_to_signal(dS, length: int, h: int = 1) -> np.ndarray:
    """Adjoint of :func:`slice_signal`: scatter-add window entries back onto the signal."""
    dS = np.asarray(dS, dtype=np.float64)
    m, k = dS.shape[-2:]
    out = np.zeros(dS.shape[:-2] + (length,))
    for j in range(k):
        out[..., j : j + h * (m - 1) + 1 : h] += dS[..., :, j]
    return out


def s2m_backward(S, F, dM, length: int, h: int = 1):
    """Gradients of ``M = S F S^T`` given upstream ``dM``.

    Returns ``(dF, dSignal)`` where ``dF = S^T dM S`` (summed over any
    leading batch axes) and ``dSignal`` scatters ``dS = dM S F^T + dM^T S F``
    back onto the windows' samples.
    """
    S = np.asarray(S, dtype=np.float64)
    F = np.asarray(F, dtype=np.float64)
    dM = np.asarray(dM, dtype=np.float64)
    m = S.shape[-2]
    if dM.shape[-2:] != (m, m):
        raise ShapeError(f"upstream gradient {dM.shape} does not match {m}x{m} output")
    St = np.swapaxes(S, -1, -2)
    dF = St @ dM @ S
    dS = dM @ S @ np.swapaxes(F, -1, -2) + np.swapaxes(dM, -1, -2) @ S @ F
    return dF, windows_to_signal(dS, length, h)


def s2m_sample(sample, F_I, F_Q, k: int = 3, h: int = 1) -> np.ndarray:
    """Two-channel image (2, m, m): I through ``F_I``, Q through ``F_Q``."""
    i, q = iq_channels(sample)
    return np.stack([s2m_forward(slice_signal(i, k, h), F_I), s2m_forward(slice_signal(q, k, h), F_Q)])


def s2m(x: numerics.Node, F: numerics.Node, h: int = 1) -> numerics.Node:
    """Tape op: per-channel S2M of ``x`` (B, C, N) with filters ``F`` (C, k, k) -> (B, C, m, m)."""
    xv, Fv = x.value, F.value
    if xv.ndim != 3 or Fv.ndim != 3 or Fv.shape[0] != xv.shape[1] or Fv.shape[1] != Fv.shape[2]:
        raise ShapeError(f"s2m expects x (B, C, N) and F (C, k, k), got {xv.shape} and {Fv.shape}")
    N = xv.shape[-1]
    S = slice_signal(xv, Fv.shape[-1], h)
    out = s2m_forward(S, Fv[None])

    def backward(g):
        dF, dx = s2m_backward(S, Fv[None], g, N, h)
        return dx, dF.sum(axis=0)

    return x.tape.record(out, "s2m", (x, F), backward)


def gram(signal, k: int = 3, h: int = 1) -> np.ndarray:
    """Gram matrix of the sliding windows (S2M with identity filter)."""
    S = slice_signal(signal, k, h)
    return S @ np.swapaxes(S, -1, -2)


def _rescale_unit(series):
    x = np.asarray(series, dtype=np.float64)
    lo, hi = x.min(axis=-1, keepdims=True), x.max(axis=-1, keepdims=True)
    if np.any(hi <= lo):
        raise DegenerateInputError("cannot rescale a constant series")
    return np.clip((x - lo) / (hi - lo) * 2 - 1, -1.0, 1.0)


def gaf(series, variant: str = "summation") -> np.ndarray:
    """Gramian angular field of a 1D series (last axis)."""
    x = _rescale_unit(series)
    s = np.sqrt(np.clip(1 - x * x, 0.0, None))
    if variant == "summation":
        return x[..., :, None] * x[..., None, :] - s[..., :, None] * s[..., None, :]
    if variant == "difference":
        return s[..., :, None] * x[..., None, :] - x[..., :, None] * s[..., None, :]
    raise ValueError(f"unknown GAF variant {variant!r}")


def _quantile_states(x, bins):
    # equal-count bins over the stable value order
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.int64)
    ranks[order] = np.arange(len(x))
    return ranks * bins // len(x)


def mtf(series, bins: int = 8, return_transitions: bool = False):
    """Markov transition field with quantile bins.

    ``W[p, q]`` is the fraction of steps leaving bin ``p`` that land in bin
    ``q``; rows with no outgoing step stay zero. ``MTF[i, j] = W[bin(i), bin(j)]``.
    """
    x = np.asarray(series, dtype=np.float64)
    if bins < 2:
        raise ValueError("mtf needs at least 2 bins")
    if x.ndim != 1 or len(x) < 2:
        raise ShapeError("mtf needs a 1D series of length >= 2")
    states = _quantile_states(x, bins)
    counts = np.zeros((bins, bins))
    np.add.at(counts, (states[:-1], states[1:]), 1.0)
    totals = counts.sum(axis=1, keepdims=True)
    W = np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)
    field = W[states[:, None], states[None, :]]
    if return_transitions:
        return field, W
    return field


def constellation_density(sample, grid: int = 32, radius: float = 1.0) -> np.ndarray:
    """2D histogram of (I, Q) pairs on a grid x grid partition of [-r, r]^2.

    Rows index I, columns index Q. Points on a cell boundary go to the
    lower-index cell; out-of-range points are clamped to the edge cells.
    Counts are divided by N so the total mass is 1.
    """
    if grid < 2 or radius <= 0:
        raise ValueError("grid must be >= 2 and radius > 0")
    i, q = iq_channels(sample)

    def cell(v):
        idx = np.ceil((v + radius) / (2 * radius) * grid).astype(np.int64) - 1
        return np.clip(idx, 0, grid - 1)

    out = np.zeros((grid, grid))
    np.add.at(out, (cell(i), cell(q)), 1.0)
    return out / len(i)


def reshape_square(sample) -> np.ndarray:
    """Concatenate I then Q and reshape row-major to a square matrix."""
    i, q = iq_channels(sample)
    total = 2 * len(i)
    side = math.isqrt(total)
    if side * side != total:
        raise ShapeError(f"2N = {total} is not a perfect square")
    return np.concatenate([i, q]).reshape(side, side)


# -- scikit-learn transformers over IQ batches -------------------------------


class S2MTransformer(TransformerMixin, BaseEstimator):
    """Fixed-filter S2M images. Filters are drawn from N(0, 1) at ``fit``
    unless given explicitly as a (2, k, k) array."""

    def __init__(self, k=3, stride=1, filters=None, random_state=None):
        self.k = k
        self.stride = stride
        self.filters = filters
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_iq_array(X, min_length=self.k)
        if self.filters is not None:
            F = np.asarray(self.filters, dtype=np.float64)
            if F.shape != (2, self.k, self.k):
                raise ShapeError(f"filters must have shape (2, {self.k}, {self.k}), got {F.shape}")
        else:
            F = check_random_state(self.random_state).standard_normal((2, self.k, self.k))
        self.filters_ = F
        self.n_features_in_ = X.shape[2]
        return self

    def transform(self, X):
        check_is_fitted(self, "filters_")
        X = check_iq_array(X, min_length=self.k)
        S = slice_signal(X, self.k, self.stride)
        return s2m_forward(S, self.filters_[None])


class GramTransformer(TransformerMixin, BaseEstimator):
    def __init__(self, k=3, stride=1):
        self.k = k
        self.stride = stride

    def fit(self, X, y=None):
        X = check_iq_array(X, min_length=self.k)
        self.n_features_in_ = X.shape[2]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        return gram(check_iq_array(X, min_length=self.k), self.k, self.stride)


class GAFTransformer(TransformerMixin, BaseEstimator):
    def __init__(self, variant="summation"):
        self.variant = variant

    def fit(self, X, y=None):
        self.n_features_in_ = check_iq_array(X).shape[2]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        return gaf(check_iq_array(X), self.variant)


class MTFTransformer(TransformerMixin, BaseEstimator):
    def __init__(self, bins=8):
        self.bins = bins

    def fit(self, X, y=None):
        self.n_features_in_ = check_iq_array(X, min_length=2).shape[2]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_iq_array(X, min_length=2)
        return np.stack([np.stack([mtf(ch, self.bins) for ch in s]) for s in X])


class ConstellationTransformer(TransformerMixin, BaseEstimator):
    def __init__(self, grid=32, radius=1.0):
        self.grid = grid
        self.radius = radius

    def fit(self, X, y=None):
        self.n_features_in_ = check_iq_array(X).shape[2]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_iq_array(X)
        return np.stack([constellation_density(s, self.grid, self.radius)[None] for s in X])


class ReshapeTransformer(TransformerMixin, BaseEstimator):
    def fit(self, X, y=None):
        self.n_features_in_ = check_iq_array(X).shape[2]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        return np.stack([reshape_square(s)[None] for s in check_iq_array(X)])


TRANSFORMS = {
    "s2m": S2MTransformer,
    "gram": GramTransformer,
    "gaf": GAFTransformer,
    "mtf": MTFTransformer,
    "constellation": ConstellationTransformer,
    "reshape": ReshapeTransformer,
}


def make_transformer(name: str, **params):
    try:
        cls = TRANSFORMS[name]
    except KeyError:
        raise ValueError(f"unknown transform {name!r}; choose from {sorted(TRANSFORMS)}") from None
    return cls(**params)
