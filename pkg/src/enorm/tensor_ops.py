"""Dense-array primitives: entrywise p-norms over rows/columns, diagonal
rescaling, and the axis-permutation reshapes that turn a 4D convolution
tensor into the two 2D matrices the balancer operates on.

Matrices are 2D numpy arrays (row-major), vectors are 1D, conv tensors are
4D with layout (out_channels, in_channels, kernel_h, kernel_w). Norm
arithmetic always runs in float64 regardless of storage dtype; scaling
preserves the input dtype.
"""

import numpy as np

from .errors import NumericError, ShapeError


def _check_finite(a, what):
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{what} contains non-finite entries")


def _check_p(p):
    if not p > 0:
        raise ValueError(f"norm order p must be > 0, got {p}")


def pnorm_cols(m, p):
    """Entrywise p-norm of each column of a 2D array, as a float64 vector."""
    m = np.asarray(m)
    _check_p(p)
    if m.ndim != 2 or m.size == 0:
        raise ShapeError(f"expected a nonempty 2D array, got shape {m.shape}")
    _check_finite(m, "matrix")
    a = np.abs(m, dtype=np.float64)
    if p == 2.0:
        return np.sqrt(np.einsum("ij,ij->j", a, a))
    return np.sum(a**p, axis=0) ** (1.0 / p)


def pnorm_rows(m, p):
    """Entrywise p-norm of each row of a 2D array, as a float64 vector."""
    m = np.asarray(m)
    _check_p(p)
    if m.ndim != 2 or m.size == 0:
        raise ShapeError(f"expected a nonempty 2D array, got shape {m.shape}")
    _check_finite(m, "matrix")
    a = np.abs(m, dtype=np.float64)
    if p == 2.0:
        return np.sqrt(np.einsum("ij,ij->i", a, a))
    return np.sum(a**p, axis=1) ** (1.0 / p)


def scale_cols(m, d):
    """Multiply column j of ``m`` by ``d[j]``. Returns a new array with the
    dtype of ``m``; the input is left untouched."""
    m = np.asarray(m)
    d = np.asarray(d, dtype=np.float64)
    if m.ndim != 2 or d.ndim != 1 or d.shape[0] != m.shape[1]:
        raise ShapeError(
            f"column scaling needs len(d) == cols, got {d.shape} vs {m.shape}"
        )
    return (m * d[None, :]).astype(m.dtype, copy=False)


def scale_rows(m, d):
    """Multiply row i of ``m`` by ``d[i]``. Returns a new array with the
    dtype of ``m``; the input is left untouched."""
    m = np.asarray(m)
    d = np.asarray(d, dtype=np.float64)
    if m.ndim != 2 or d.ndim != 1 or d.shape[0] != m.shape[0]:
        raise ShapeError(
            f"row scaling needs len(d) == rows, got {d.shape} vs {m.shape}"
        )
    return (m * d[:, None]).astype(m.dtype, copy=False)


def _check_tensor4(t):
    if t.ndim != 4:
        raise ShapeError(f"expected a 4D conv tensor, got shape {t.shape}")


def conv_to_left_matrix(t):
    """Reshape a conv tensor (out, in, kh, kw) into a matrix of shape
    (in*kh*kw, out) whose column j holds every coefficient of output
    filter j. Used when the conv layer sits on the left of a rescaled pair."""
    t = np.asarray(t)
    _check_tensor4(t)
    out_c = t.shape[0]
    return t.reshape(out_c, -1).T.copy()


def conv_from_left_matrix(m, shape):
    """Inverse of :func:`conv_to_left_matrix` for a given 4-tuple shape."""
    m = np.asarray(m)
    out_c, in_c, kh, kw = shape
    if m.shape != (in_c * kh * kw, out_c):
        raise ShapeError(f"matrix shape {m.shape} does not match conv shape {shape}")
    return m.T.reshape(shape).copy()


def conv_to_right_matrix(t):
    """Reshape a conv tensor (out, in, kh, kw) into a matrix of shape
    (in, out*kh*kw) whose row i holds every coefficient reading input
    channel i. Used when the conv layer sits on the right of a rescaled
    pair."""
    t = np.asarray(t)
    _check_tensor4(t)
    in_c = t.shape[1]
    return t.transpose(1, 0, 2, 3).reshape(in_c, -1).copy()


def conv_from_right_matrix(m, shape):
    """Inverse of :func:`conv_to_right_matrix` for a given 4-tuple shape."""
    m = np.asarray(m)
    out_c, in_c, kh, kw = shape
    if m.shape != (in_c, out_c * kh * kw):
        raise ShapeError(f"matrix shape {m.shape} does not match conv shape {shape}")
    return m.reshape(in_c, out_c, kh, kw).transpose(1, 0, 2, 3).copy()
