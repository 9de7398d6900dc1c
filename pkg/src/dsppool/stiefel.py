"""Geometry of the Stiefel manifold S(d, p): matrices with orthonormal columns.

Uses the embedded Euclidean metric <A, B> = trace(A^T B), QR retraction
with a positive-diagonal sign fix, and projection-based vector transport.
"""

import numpy as np

from .errors import DimensionError, NumericalError

ORTH_TOL = 1e-10


class StiefelPoint:
    """A d x p matrix with orthonormal columns."""

    __slots__ = ("matrix",)

    def __init__(self, matrix, check=True):
        matrix = np.asarray(matrix, dtype=float)
        if matrix.ndim != 2:
            raise DimensionError("expected a 2-D matrix, got ndim=%d" % matrix.ndim)
        d, p = matrix.shape
        if not (d >= p >= 1):
            raise DimensionError("need d >= p >= 1, got d=%d p=%d" % (d, p))
        if check:
            res = orthonormality_residual(matrix)
            if not np.isfinite(res) or res > ORTH_TOL:
                raise NumericalError(
                    "columns not orthonormal (residual %.3e)" % res
                )
        self.matrix = matrix

    @property
    def d(self):
        return self.matrix.shape[0]

    @property
    def p(self):
        return self.matrix.shape[1]

    @property
    def shape(self):
        return self.matrix.shape


class TangentVector:
    """A tangent direction attached to a base point; W^T H is skew-symmetric."""

    __slots__ = ("matrix", "base")

    def __init__(self, matrix, base):
        matrix = np.asarray(matrix, dtype=float)
        if matrix.shape != base.shape:
            raise DimensionError(
                "tangent shape %s != base shape %s" % (matrix.shape, base.shape)
            )
        self.matrix = matrix
        self.base = base


def orthonormality_residual(matrix):
    matrix = np.asarray(matrix, dtype=float)
    p = matrix.shape[1]
    return float(np.linalg.norm(matrix.T @ matrix - np.eye(p)))


def skew_residual(tv):
    """Frobenius norm of the symmetric part of W^T H (zero for true tangents)."""
    m = tv.base.matrix.T @ tv.matrix
    return float(np.linalg.norm(m + m.T) / 2.0)


def _as_matrix(x):
    return x.matrix if isinstance(x, (StiefelPoint, TangentVector)) else np.asarray(x, dtype=float)


def inner(a, b):
    """Euclidean (embedded) metric trace(A^T B)."""
    return float(np.sum(_as_matrix(a) * _as_matrix(b)))


def project_tangent(W, G):
    """Project an ambient d x p matrix onto the tangent space at W.

    Returns G - W sym(W^T G) with sym(M) = (M + M^T) / 2.
    """
    Wm = W.matrix
    G = _as_matrix(G)
    if G.shape != Wm.shape:
        raise DimensionError("gradient shape %s != point shape %s" % (G.shape, Wm.shape))
    M = Wm.T @ G
    return TangentVector(G - Wm @ ((M + M.T) / 2.0), W)


def retract(W, H, t=1.0):
    """QR retraction qf(W + t H), diagonal of R forced positive.

    The sign fix makes the result deterministic across LAPACK builds.
    """
    if not np.isfinite(t):
        raise NumericalError("non-finite step %r" % t)
    Hm = _as_matrix(H)
    Wm = W.matrix
    if Hm.shape != Wm.shape:
        raise DimensionError("direction shape %s != point shape %s" % (Hm.shape, Wm.shape))
    if t == 0.0:
        return W
    Q, R = np.linalg.qr(Wm + t * Hm)
    diag = np.diag(R)
    if np.any(np.abs(diag) < 1e-14):
        raise NumericalError("rank-deficient retraction argument")
    Q = Q * np.sign(diag)[np.newaxis, :]
    return StiefelPoint(Q, check=False)


def transport(W_from, W_to, H):
    """Projection-based transport of a tangent vector from W_from to W_to.

    Projection transport only looks at the destination; the source point is
    kept in the signature so a path-dependent transport could be swapped in.
    """
    Hm = _as_matrix(H)
    if Hm.shape != W_from.shape:
        raise DimensionError(
            "tangent shape %s != source shape %s" % (Hm.shape, W_from.shape)
        )
    return project_tangent(W_to, Hm)
