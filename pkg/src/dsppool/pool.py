"""Max-margin subspace pooling of a feature sequence.

A sequence X is summarized by an orthonormal d x p matrix W whose columns
separate X (positive bag) from a noise-shifted copy Z (negative bag),
while within short temporal segments the projected energy ||W^T x_i||^2
is pushed to increase with the frame index. W is found by Riemannian
conjugate gradient on the Stiefel manifold. A penalized unconstrained
variant (orthonormality as a Frobenius penalty, squared hinges) supports
differentiating the argmin with respect to the input frames.
"""

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize as scipy_minimize

from .errors import DimensionError, ParameterError
from .perturb import Perturbation
from .rcg import RcgParams
from .rcg import minimize as rcg_minimize
from .stiefel import StiefelPoint
from . import binio

# rough work counters (units ~ flops) for scaling probes
GRAD_COUNTER = {"member_work": 0, "pair_work": 0}


@dataclass
class SequenceBags:
    positive: np.ndarray  # n x d, label +1
    negative: np.ndarray  # n x d, label -1

    def __post_init__(self):
        self.positive = np.asarray(self.positive, dtype=float)
        self.negative = np.asarray(self.negative, dtype=float)
        if self.positive.shape != self.negative.shape:
            raise DimensionError(
                "bag shapes differ: %s vs %s"
                % (self.positive.shape, self.negative.shape)
            )

    @property
    def n(self):
        return self.positive.shape[0]

    @property
    def d(self):
        return self.positive.shape[1]


@dataclass
class TemporalSegments:
    delta: int
    ranges: list  # [(lo, hi)) half-open 0-based frame intervals


@dataclass
class DspParams:
    p: int = 6
    ordering_weight: float = 1.0
    hinge_variant: str = "hinge"  # or "squared-hinge"
    segment_policy: str = "per-sequence"  # or "dataset-mean" / "global"
    delta_override: int = None
    delta_min: int = 2
    consecutive_only: bool = False
    rcg: RcgParams = field(default_factory=RcgParams)

    def validate(self, d=None):
        if self.p < 1 or (d is not None and self.p > d):
            raise ParameterError("need 1 <= p <= d, got p=%d" % self.p)
        if self.ordering_weight < 0:
            raise ParameterError("ordering_weight must be >= 0")
        if self.hinge_variant not in ("hinge", "squared-hinge"):
            raise ParameterError("unknown hinge_variant %r" % self.hinge_variant)
        if self.segment_policy in ("dataset-mean", "global") and self.delta_override is None:
            raise ParameterError(
                "segment_policy %r needs delta_override" % self.segment_policy
            )

    def tag(self):
        key = "|".join(
            str(v) for v in (
                self.p, self.ordering_weight, self.hinge_variant,
                self.segment_policy, self.delta_override, self.delta_min,
                self.consecutive_only, self.rcg.max_iters, self.rcg.grad_tol,
                self.rcg.seed,
            )
        )
        return hashlib.md5(key.encode()).hexdigest()[:8]


class SubspaceDescriptor(StiefelPoint):
    """A pooled subspace with provenance metadata."""

    __slots__ = ("sequence_id", "params_tag", "trace")

    def __init__(self, matrix, sequence_id=None, params_tag=None, trace=None,
                 check=True):
        super().__init__(matrix, check=check)
        self.sequence_id = sequence_id
        self.params_tag = params_tag
        self.trace = trace


def build_bags(seq, noise):
    """Positive/negative bags from a sequence and a noise source.

    noise may be a Perturbation (negatives are X + epsilon row-wise) or an
    explicit n x d matrix of negative features.
    """
    X = np.asarray(seq, dtype=float)
    if isinstance(noise, Perturbation):
        if noise.d != X.shape[1]:
            raise DimensionError(
                "epsilon dimension %d != feature dimension %d" % (noise.d, X.shape[1])
            )
        Z = X + noise.epsilon[np.newaxis, :]
    else:
        Z = np.asarray(noise, dtype=float)
    return SequenceBags(X, Z)


def compute_delta(seq, delta_min=2):
    """Segment length from the closest pair of frames.

    Returns max(b - a, delta_min) for the pair (a, b), a < b, minimizing
    ||x_a - x_b||; ties go to the smallest a, then the smallest b.
    """
    X = np.asarray(seq, dtype=float)
    n = X.shape[0]
    if n < 2:
        raise ParameterError("need at least 2 frames, got %d" % n)
    sq = np.sum(X * X, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    # upper triangle in (a, b) lexicographic order
    ia, ib = np.triu_indices(n, k=1)
    best = int(np.argmin(d2[ia, ib]))
    return max(int(ib[best] - ia[best]), delta_min)


def build_segments(n, delta):
    """Contiguous blocks of length delta covering frames 0..n-1."""
    if n < 1 or delta < 1:
        raise ParameterError("need n >= 1 and delta >= 1")
    ranges = []
    for k in range(n // delta + 1):
        lo, hi = k * delta, min(n, (k + 1) * delta)
        if hi > lo:
            ranges.append((lo, hi))
    return TemporalSegments(delta=int(delta), ranges=ranges)


def _segment_pairs(segs, consecutive_only=False):
    """In-segment (i, j) index pairs with i < j."""
    out_i, out_j = [], []
    for lo, hi in segs.ranges:
        idx = np.arange(lo, hi)
        if consecutive_only:
            out_i.append(idx[:-1])
            out_j.append(idx[1:])
        else:
            a, b = np.triu_indices(len(idx), k=1)
            out_i.append(idx[a])
            out_j.append(idx[b])
    if not out_i:
        return np.array([], dtype=int), np.array([], dtype=int)
    return np.concatenate(out_i), np.concatenate(out_j)


def _as_matrix(W):
    return W.matrix if isinstance(W, StiefelPoint) else np.asarray(W, dtype=float)


def _margins(Wm, bags):
    """Per-member best signed score max(y * W^T theta) for both bags."""
    pos = (bags.positive @ Wm).max(axis=1)
    neg = (-(bags.negative @ Wm)).max(axis=1)
    return pos, neg


def dsp_cost(W, bags, segs, params):
    """Hinge classification term plus in-segment ordering term."""
    Wm = _as_matrix(W)
    n = bags.n
    sq = params.hinge_variant == "squared-hinge"

    pos, neg = _margins(Wm, bags)
    h = np.concatenate([np.maximum(0.0, 1.0 - pos), np.maximum(0.0, 1.0 - neg)])
    cost = float(np.sum(h * h) if sq else np.sum(h))

    if params.ordering_weight > 0.0 and n > 1:
        pi, pj = _segment_pairs(segs, params.consecutive_only)
        if pi.size:
            energy = np.sum((bags.positive @ Wm) ** 2, axis=1)
            g = np.maximum(0.0, 1.0 + energy[pi] - energy[pj])
            term = np.sum(g * g) if sq else np.sum(g)
            cost += params.ordering_weight / (n * (n - 1)) * float(term)
    return cost


def dsp_grad(W, bags, segs, params):
    """Euclidean (sub)gradient of dsp_cost with respect to W."""
    Wm = _as_matrix(W)
    n, d = bags.n, bags.d
    p = Wm.shape[1]
    sq = params.hinge_variant == "squared-hinge"
    grad = np.zeros_like(Wm)

    for theta, y in ((bags.positive, 1.0), (bags.negative, -1.0)):
        scores = y * (theta @ Wm)
        best = scores.max(axis=1)
        cols = scores.argmax(axis=1)  # ties resolve to the lowest column
        active = best < 1.0
        if np.any(active):
            factor = np.full(n, 1.0)
            if sq:
                factor = 2.0 * (1.0 - best)
            coef = -y * factor[active]
            np.add.at(grad.T, cols[active], coef[:, None] * theta[active])
    GRAD_COUNTER["member_work"] += 2 * n * d * p

    if params.ordering_weight > 0.0 and n > 1:
        pi, pj = _segment_pairs(segs, params.consecutive_only)
        if pi.size:
            proj = bags.positive @ Wm
            energy = np.sum(proj * proj, axis=1)
            arg = 1.0 + energy[pi] - energy[pj]
            active = arg > 0.0
            if np.any(active):
                w_pair = np.ones(int(active.sum()))
                if sq:
                    w_pair = 2.0 * arg[active]
                coef = np.zeros(n)
                np.add.at(coef, pi[active], w_pair)
                np.add.at(coef, pj[active], -w_pair)
                scale = params.ordering_weight / (n * (n - 1))
                grad += scale * 2.0 * (bags.positive.T @ (coef[:, None] * proj))
            GRAD_COUNTER["pair_work"] += int(active.sum()) * d * p
    return grad


def initial_point(bags, p):
    """Top-p right singular vectors of the stacked bags, sign-fixed."""
    M = np.vstack([bags.positive, bags.negative])
    _, _, Vt = np.linalg.svd(M, full_matrices=False)
    W0 = Vt[:p].T
    for q in range(p):
        k = np.argmax(np.abs(W0[:, q]))
        if W0[k, q] < 0:
            W0[:, q] = -W0[:, q]
    return StiefelPoint(W0, check=False)


def resolve_delta(seq, params):
    if params.segment_policy == "per-sequence":
        return compute_delta(seq, params.delta_min)
    return int(params.delta_override)


def pool_sequence(seq, noise, params, sequence_id=None):
    """Summarize one sequence as a SubspaceDescriptor.

    Deterministic for fixed inputs; the initializer is data-driven and the
    solver has no stochastic component.
    """
    X = np.asarray(seq, dtype=float)
    if X.shape[0] < 2:
        raise ParameterError("need at least 2 frames, got %d" % X.shape[0])
    params.validate(d=X.shape[1])

    bags = build_bags(X, noise)
    segs = build_segments(bags.n, resolve_delta(X, params))

    W0 = initial_point(bags, params.p)
    cost = lambda W: dsp_cost(W, bags, segs, params)
    grad = lambda W: dsp_grad(W, bags, segs, params)
    W_star, trace = rcg_minimize(cost, grad, W0, params.rcg)
    return SubspaceDescriptor(
        W_star.matrix, sequence_id=sequence_id, params_tag=params.tag(),
        trace=trace, check=False,
    )


# ---------------------------------------------------------------------------
# Penalized unconstrained form and argmin differentiation
# ---------------------------------------------------------------------------

def penalty_cost(Wm, bags):
    """||W^T W - I||_F^2 plus squared-hinge classification terms."""
    Wm = np.asarray(Wm, dtype=float)
    p = Wm.shape[1]
    S = Wm.T @ Wm - np.eye(p)
    pos, neg = _margins(Wm, bags)
    h = np.concatenate([np.maximum(0.0, 1.0 - pos), np.maximum(0.0, 1.0 - neg)])
    return float(np.sum(S * S) + np.sum(h * h))


def penalty_grad(Wm, bags):
    Wm = np.asarray(Wm, dtype=float)
    p = Wm.shape[1]
    grad = 4.0 * Wm @ (Wm.T @ Wm - np.eye(p))
    for theta, y in ((bags.positive, 1.0), (bags.negative, -1.0)):
        scores = y * (theta @ Wm)
        best = scores.max(axis=1)
        cols = scores.argmax(axis=1)
        active = best < 1.0
        if np.any(active):
            coef = -y * 2.0 * (1.0 - best[active])
            np.add.at(grad.T, cols[active], coef[:, None] * theta[active])
    return grad


def solve_penalty(bags, p, grad_tol=1e-9, max_iters=2000):
    """Minimize the penalized form to a tight gradient tolerance (L-BFGS)."""
    d = bags.d
    W0 = initial_point(bags, p).matrix

    def fun(w):
        Wm = w.reshape(d, p, order="F")
        return penalty_cost(Wm, bags), penalty_grad(Wm, bags).ravel(order="F")

    res = scipy_minimize(
        fun, W0.ravel(order="F"), jac=True, method="L-BFGS-B",
        options={"maxiter": max_iters, "gtol": grad_tol, "ftol": 0.0},
    )
    return res.x.reshape(d, p, order="F")


def _active_set(Wm, bags):
    """(bag, frame, column) of the active squared-hinge terms."""
    out = []
    for bag_id, (theta, y) in enumerate(((bags.positive, 1.0), (bags.negative, -1.0))):
        scores = y * (theta @ Wm)
        best = scores.max(axis=1)
        cols = scores.argmax(axis=1)
        for i in np.nonzero(best < 1.0)[0]:
            out.append((bag_id, int(i), int(cols[i]), float(1.0 - best[i])))
    return out


def _penalty_hessian(Wm, bags, active):
    """Hessian of penalty_cost wrt vec(W) (column stacking), fixed active set."""
    d, p = Wm.shape
    m = d * p
    S = Wm.T @ Wm - np.eye(p)
    H = np.zeros((m, m))
    # orthonormality penalty, via its action on basis matrices
    for q in range(p):
        for r in range(d):
            V = np.zeros((d, p))
            V[r, q] = 1.0
            HV = 4.0 * V @ S + 4.0 * Wm @ (V.T @ Wm + Wm.T @ V)
            H[:, q * d + r] = HV.ravel(order="F")
    for bag_id, i, j, _ in active:
        theta = (bags.positive if bag_id == 0 else bags.negative)[i]
        blk = slice(j * d, (j + 1) * d)
        H[blk, blk] += 2.0 * np.outer(theta, theta)
    return H


def grad_wrt_input(W_star, bags, segs, params, upstream, mode="exact",
                   damping=1e-8):
    """Gradient of a downstream loss through the pooled argmin.

    upstream is the d x p gradient of the loss with respect to the pooled
    matrix; the return value is the n x d gradient with respect to the
    positive-bag frames (negatives held fixed). Requires the squared-hinge
    penalized form. mode "exact" builds the dense Hessian (only for
    d*p <= 64); "diagonal" uses its diagonal approximation.
    """
    if params.hinge_variant != "squared-hinge":
        raise ParameterError("grad_wrt_input requires hinge_variant='squared-hinge'")
    Wm = _as_matrix(W_star)
    d, p = Wm.shape
    m = d * p
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != (d, p):
        raise DimensionError("upstream shape %s != (%d, %d)" % (upstream.shape, d, p))

    active = _active_set(Wm, bags)
    u = upstream.ravel(order="F")
    warn_singular = False

    if mode == "exact":
        if m > 64:
            raise ParameterError("exact mode limited to d*p <= 64, got %d" % m)
        H = _penalty_hessian(Wm, bags, active)
        try:
            v = np.linalg.solve(H, u)
        except np.linalg.LinAlgError:
            v = np.linalg.solve(H + damping * np.eye(m), u)
            warn_singular = True
    elif mode == "diagonal":
        S = Wm.T @ Wm - np.eye(p)
        diag = np.zeros((d, p))
        for q in range(p):
            # entry (r, q) of the penalty Hessian diagonal
            diag[:, q] = (
                4.0 * S[q, q]
                + 4.0 * Wm[:, q] ** 2
                + 4.0 * np.sum(Wm * Wm, axis=1)
            )
        for bag_id, i, j, _ in active:
            theta = (bags.positive if bag_id == 0 else bags.negative)[i]
            diag[:, j] += 2.0 * theta * theta
        diag = diag.ravel(order="F")
        small = np.abs(diag) < damping
        if np.any(small):
            warn_singular = True
            diag = np.where(small, damping, diag)
        v = u / diag
    else:
        raise ParameterError("unknown mode %r" % mode)

    # mixed second derivative contracted against v, positive frames only
    grads = np.zeros_like(bags.positive)
    for bag_id, i, j, ell in active:
        if bag_id != 0:
            continue
        x = bags.positive[i]
        vj = v[j * d:(j + 1) * d]
        # block j of d(dF/dW)/dx_i is 2 x w_j^T - 2 ell I
        grads[i] = -(2.0 * (vj @ x) * Wm[:, j] - 2.0 * ell * vj)
    return grads, warn_singular


# ---------------------------------------------------------------------------
# Descriptor persistence
# ---------------------------------------------------------------------------

def write_descriptor(desc, path):
    with open(path, "wb") as fh:
        binio.write_header(fh, "DSPW")
        binio.write_u32(fh, desc.d)
        binio.write_u32(fh, desc.p)
        binio.write_matrix(fh, desc.matrix)


def read_descriptor(path, sequence_id=None):
    with open(path, "rb") as fh:
        binio.read_header(fh, "DSPW")
        d = binio.read_u32(fh)
        p = binio.read_u32(fh)
        mat = binio.read_matrix(fh, d, p)
    return SubspaceDescriptor(mat, sequence_id=sequence_id, check=False)
