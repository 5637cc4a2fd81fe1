"""Input validation helpers used by the estimators and transforms."""

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import ShapeError


def check_iq_array(X, min_length=1):
    """Coerce ``X`` to a float64 array of shape (n_samples, 2, N).

    Accepts a :class:`~signet.sigsynth.SignalDataset`, a sequence of
    samples with ``i``/``q`` attributes, or any array-like of that shape.
    """
    if hasattr(X, "X") and hasattr(X, "labels"):
        X = X.X
    elif isinstance(X, (list, tuple)) and X and hasattr(X[0], "i"):
        X = np.stack([np.stack([s.i, s.q]) for s in X])
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_2d=False)
    if X.ndim != 3 or X.shape[1] != 2:
        raise ShapeError(f"expected IQ batch of shape (n, 2, N), got {X.shape}")
    if X.shape[2] < min_length:
        raise ShapeError(f"signal length {X.shape[2]} shorter than required {min_length}")
    return X


def iq_channels(sample):
    """Return (i, q) float64 vectors from an IQSample or a (2, N) array."""
    if hasattr(sample, "i") and hasattr(sample, "q"):
        i, q = sample.i, sample.q
    else:
        arr = np.asarray(sample, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] != 2:
            raise ShapeError(f"expected a (2, N) IQ array, got {arr.shape}")
        i, q = arr
    i = np.asarray(i, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if i.shape != q.shape or i.ndim != 1:
        raise ShapeError(f"I and Q must be equal-length vectors, got {i.shape} and {q.shape}")
    return i, q
