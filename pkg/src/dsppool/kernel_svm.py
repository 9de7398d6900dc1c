"""Subspace similarity and kernel SVM classification.

Subspace descriptors are compared with the exponential projection metric
kernel exp(beta * ||W1^T W2||_F^2), which depends only on the spanned
subspaces. Binary machines are trained by SMO on a precomputed Gram
matrix (so the same solver serves the RBF baselines) and combined
one-vs-rest for multi-class decisions.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import binio
from .errors import DimensionError, NumericalError, ParameterError

PSD_FLOOR = 1e-8
SMO_MAX_ITERS = 100_000


@dataclass
class KernelParams:
    beta: float

    def validate(self):
        if not (np.isfinite(self.beta) and self.beta > 0):
            raise ParameterError("beta must be finite and positive")


def proj_kernel(W1, W2, params):
    """exp(beta * ||W1^T W2||_F^2); equals exp(beta*p) when spans coincide."""
    params.validate()
    if W1.shape != W2.shape:
        raise DimensionError("descriptor shapes differ: %s vs %s" % (W1.shape, W2.shape))
    M = W1.matrix.T @ W2.matrix
    return float(np.exp(params.beta * np.sum(M * M)))


def gram(descriptors, params):
    """Symmetric Gram matrix of the projection metric kernel."""
    params.validate()
    if not descriptors:
        raise ParameterError("no descriptors")
    shape = descriptors[0].shape
    for w in descriptors:
        if w.shape != shape:
            raise DimensionError("mixed descriptor shapes")
    return cross_gram(descriptors, descriptors, params)


def cross_gram(rows, cols, params):
    """Kernel values between two descriptor lists (len(rows) x len(cols))."""
    d, p = rows[0].shape
    A = np.stack([w.matrix for w in rows])          # m x d x p
    B = np.stack([w.matrix for w in cols])          # n x d x p
    # ||Wi^T Wj||_F^2 for all pairs
    M = np.einsum("idp,jdq->ijpq", A, B)
    sq = np.einsum("ijpq,ijpq->ij", M, M)
    return np.exp(params.beta * sq)


def rbf_gram(X, Y, gamma):
    """RBF kernel matrix between row-vector datasets (for pooling baselines)."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    d2 = (
        np.sum(X * X, axis=1)[:, None]
        + np.sum(Y * Y, axis=1)[None, :]
        - 2.0 * X @ Y.T
    )
    return np.exp(-gamma * np.maximum(d2, 0.0))


@dataclass
class BinaryMachine:
    coef: np.ndarray  # y_i * alpha_i over training points
    bias: float

    def decision(self, kernel_rows):
        return kernel_rows @ self.coef + self.bias


@dataclass
class SvmModel:
    machines: list            # one BinaryMachine per class id
    classes: np.ndarray
    C: float
    train_ids: list = field(default_factory=list)

    def decision_values(self, kernel_rows):
        return np.column_stack([m.decision(kernel_rows) for m in self.machines])


def check_psd(K):
    eig = np.linalg.eigvalsh(K)
    if eig[0] < -PSD_FLOOR * max(eig[-1], 1e-300):
        raise NumericalError(
            "Gram matrix is not PSD (min eig %.3e, max eig %.3e)" % (eig[0], eig[-1])
        )


def smo_binary(K, y, C, tol=1e-3, max_iters=SMO_MAX_ITERS):
    """Two-variable SMO with maximal-violating-pair selection.

    Solves the soft-margin dual on a precomputed kernel matrix; returns
    (coef, bias) with coef_i = y_i * alpha_i.
    """
    y = np.asarray(y, dtype=float)
    n = len(y)
    beta = np.zeros(n)  # y_i * alpha_i
    ub = np.where(y > 0, C, 0.0)
    lb = np.where(y > 0, 0.0, -C)
    g = np.ones(n)  # y_i * gradient criterion, starts at y_i * y_i = 1

    crit = y * g
    for _ in range(max_iters):
        up = beta < ub - 1e-12
        low = beta > lb + 1e-12
        if not up.any() or not low.any():
            break
        i = np.flatnonzero(up)[np.argmax(crit[up])]
        j = np.flatnonzero(low)[np.argmin(crit[low])]
        gap = crit[i] - crit[j]
        if gap <= tol:
            break
        quad = max(K[i, i] + K[j, j] - 2.0 * K[i, j], 1e-12)
        lam = min(ub[i] - beta[i], beta[j] - lb[j], gap / quad)
        if lam <= 1e-14:
            break
        beta[i] += lam
        beta[j] -= lam
        g += lam * y * (K[j] - K[i])
        crit = y * g

    up = beta < ub - 1e-12
    low = beta > lb + 1e-12
    hi = crit[up].max() if up.any() else 0.0
    lo = crit[low].min() if low.any() else 0.0
    bias = (hi + lo) / 2.0
    return beta, float(bias)


def svm_train(K, labels, C=10.0, tol=1e-3, train_ids=None):
    """One-vs-rest kernel SVM from a precomputed Gram matrix."""
    K = np.asarray(K, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if K.shape[0] != K.shape[1] or K.shape[0] != len(labels):
        raise DimensionError("gram/label shapes inconsistent")
    classes = np.unique(labels)
    if classes.size < 2:
        raise ParameterError("need at least 2 classes")
    check_psd(K)
    machines = []
    for cls in classes:
        y = np.where(labels == cls, 1.0, -1.0)
        coef, bias = smo_binary(K, y, C, tol)
        machines.append(BinaryMachine(coef, bias))
    return SvmModel(machines, classes, C, train_ids=list(train_ids or []))


def svm_predict(model, kernel_rows):
    """Class ids for kernel rows against the training set; ties -> lowest id."""
    dec = model.decision_values(np.atleast_2d(kernel_rows))
    return model.classes[np.argmax(dec, axis=1)]


def select_beta(descriptors, labels, p, C=10.0, folds=5, seed=0,
                grid=(0.25, 0.5, 1.0, 2.0, 4.0)):
    """Pick beta from grid/p by stratified cross-validated accuracy."""
    labels = np.asarray(labels, dtype=int)
    n = len(labels)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    fold_of = np.empty(n, dtype=int)
    for cls in np.unique(labels):
        members = order[np.isin(order, np.flatnonzero(labels == cls))]
        fold_of[members] = np.arange(len(members)) % folds

    best_beta, best_acc = None, -1.0
    for mult in grid:
        params = KernelParams(beta=mult / p)
        K = gram(descriptors, params)
        accs = []
        for f in range(folds):
            tr = fold_of != f
            te = ~tr
            if len(np.unique(labels[tr])) < 2 or not te.any():
                continue
            model = svm_train(K[np.ix_(tr, tr)], labels[tr], C=C)
            pred = svm_predict(model, K[np.ix_(te, tr)])
            accs.append(np.mean(pred == labels[te]))
        acc = float(np.mean(accs)) if accs else 0.0
        if acc > best_acc:
            best_acc, best_beta = acc, params.beta
    return best_beta, best_acc


def write_gram(K, path):
    with open(path, "wb") as fh:
        binio.write_header(fh, "DSPG")
        binio.write_u32(fh, K.shape[0])
        binio.write_matrix(fh, K)


def read_gram(path):
    with open(path, "rb") as fh:
        binio.read_header(fh, "DSPG")
        n = binio.read_u32(fh)
        return binio.read_matrix(fh, n, n)


def write_model(model, path):
    with open(path, "wb") as fh:
        binio.write_header(fh, "DSPM")
        binio.write_u32(fh, len(model.machines))
        n = len(model.machines[0].coef)
        binio.write_u32(fh, n)
        binio.write_f64(fh, model.C)
        for cls in model.classes:
            binio.write_u32(fh, int(cls))
        for m in model.machines:
            binio.write_f64(fh, m.bias)
            binio.write_matrix(fh, m.coef.reshape(1, -1))
        ids_blob = "\n".join(model.train_ids).encode("utf-8")
        binio.write_u32(fh, len(ids_blob))
        fh.write(ids_blob)


def read_model(path):
    with open(path, "rb") as fh:
        binio.read_header(fh, "DSPM")
        n_cls = binio.read_u32(fh)
        n = binio.read_u32(fh)
        C = binio.read_f64(fh)
        classes = np.array([binio.read_u32(fh) for _ in range(n_cls)])
        machines = []
        for _ in range(n_cls):
            bias = binio.read_f64(fh)
            coef = binio.read_matrix(fh, 1, n).ravel()
            machines.append(BinaryMachine(coef, bias))
        blob_len = binio.read_u32(fh)
        blob = binio.read_exact(fh, blob_len).decode("utf-8")
        train_ids = blob.split("\n") if blob else []
    return SvmModel(machines, classes, C, train_ids=train_ids)
