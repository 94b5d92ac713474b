"""Dense linear algebra helpers and activations.

Matrices and vectors are plain float64 numpy arrays. Every function here also
accepts a leading batch axis on its vector argument, which is how the cells
process minibatches.
"""

import numpy as np

_ONE_BELOW = np.nextafter(1.0, 0.0)
_TINY = np.finfo(np.float64).tiny


def as_matrix(data, rows=None, cols=None):
    m = np.array(data, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-d matrix, got shape {m.shape}")
    if rows is not None and cols is not None and m.shape != (rows, cols):
        raise ValueError(f"expected shape ({rows}, {cols}), got {m.shape}")
    return m


def as_vector(data, dim=None):
    v = np.array(data, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected a 1-d vector, got shape {v.shape}")
    if dim is not None and v.shape[0] != dim:
        raise ValueError(f"expected dim {dim}, got {v.shape[0]}")
    return v


def matvec(m, v):
    """Return ``m @ v``; ``v`` may carry a leading batch axis ``(B, cols)``."""
    m = np.asarray(m, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if m.ndim != 2 or v.ndim not in (1, 2) or m.shape[1] != v.shape[-1]:
        raise ValueError(f"cannot multiply matrix of shape {m.shape} with vector of shape {v.shape}")
    return v @ m.T


def sigmoid(v):
    """Logistic function, evaluated without overflow and kept inside (0, 1).

    For |x| beyond ~37 the exact value rounds to 0 or 1 in double precision;
    results are clamped to the nearest representable interior point instead.
    """
    v = np.asarray(v, dtype=np.float64)
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ez = np.exp(v[~pos])
    out[~pos] = ez / (1.0 + ez)
    return np.clip(out, _TINY, _ONE_BELOW)


def tanh_act(v):
    v = np.asarray(v, dtype=np.float64)
    return np.clip(np.tanh(v), -_ONE_BELOW, _ONE_BELOW)
