"""Adversarial noise generation on feature vectors.

A linear softmax classifier trained on per-frame features serves as the
victim; a single universal noise vector is grown by projected gradient
ascent on the cross-entropy of the perturbed predictions until a target
fraction of frames flips label. Gaussian and dropout noise bags are
provided as baselines.
"""

from dataclasses import dataclass

import numpy as np

from . import binio
from .errors import NumericalError, ParameterError


@dataclass
class SoftmaxModel:
    weights: np.ndarray  # d x K
    bias: np.ndarray     # K
    train_accuracy: float = 0.0

    @property
    def n_classes(self):
        return self.weights.shape[1]

    def logits(self, X):
        return np.asarray(X, dtype=float) @ self.weights + self.bias

    def predict(self, X):
        return np.argmax(self.logits(X), axis=1)


@dataclass
class Perturbation:
    epsilon: np.ndarray
    rho: float
    psi: float
    achieved_fooling_rate: float
    converged: bool = True

    @property
    def d(self):
        return self.epsilon.shape[0]


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits, labels):
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return float(np.mean(lse - z[np.arange(len(labels)), labels]))


def train_softmax(features, labels, epochs=200, lr=0.1):
    """Full-batch gradient descent on the softmax cross-entropy."""
    X = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=int)
    if X.ndim != 2:
        raise ParameterError("features must be an n x d matrix")
    if not np.all(np.isfinite(X)):
        raise NumericalError("non-finite feature values")
    classes = np.unique(y)
    if classes.size < 2:
        raise ParameterError("need at least 2 classes, got %d" % classes.size)
    if classes.min() < 0 or classes.max() >= classes.size:
        raise ParameterError("labels must be contiguous class ids 0..K-1")
    n, d = X.shape
    K = classes.size
    # precondition: train in standardized coordinates, report raw-space weights
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd < 1e-12] = 1.0
    Z = (X - mu) / sd
    W = np.zeros((d, K))
    b = np.zeros(K)
    onehot = np.zeros((n, K))
    onehot[np.arange(n), y] = 1.0
    for _ in range(epochs):
        P = _softmax(Z @ W + b)
        G = (P - onehot) / n
        W -= lr * (Z.T @ G)
        b -= lr * G.sum(axis=0)
    model = SoftmaxModel(W / sd[:, None], b - (mu / sd) @ W)
    model.train_accuracy = float(np.mean(model.predict(X) == y))
    return model


def fooling_rate(model, features, epsilon):
    """Fraction of features whose predicted label flips under +epsilon."""
    X = np.asarray(features, dtype=float)
    epsilon = np.asarray(epsilon, dtype=float)
    if epsilon.shape != (X.shape[1],):
        raise ParameterError(
            "epsilon shape %s does not match d=%d" % (epsilon.shape, X.shape[1])
        )
    clean = model.predict(X)
    noisy = model.predict(X + epsilon)
    return float(np.mean(clean != noisy))


def project_l2_ball(v, radius):
    norm = np.linalg.norm(v)
    if norm > radius:
        return v * (radius / norm)
    return v


def default_rho(features, frac=0.1):
    """Noise budget as a fraction of the mean feature l2 norm."""
    X = np.asarray(features, dtype=float)
    return frac * float(np.mean(np.linalg.norm(X, axis=1)))


def compute_uap(model, features, psi=0.8, rho=1.0, inner_steps=10,
                inner_lr=0.1, max_epochs=200, pullback=0.1):
    """Universal noise vector by projected cross-entropy ascent.

    Repeats until the perturbed predictions agree with the clean ones on at
    most a 1-psi fraction of the frames: each epoch takes inner_steps of
    gradient ascent on mean cross-entropy against the clean labels with an
    l2 pull-back penalty, then projects epsilon back onto the rho-ball.
    """
    if not 0.0 <= psi < 1.0:
        raise ParameterError("psi must be in [0, 1)")
    if rho <= 0.0:
        raise ParameterError("rho must be positive")
    X = np.asarray(features, dtype=float)
    n, d = X.shape
    clean_labels = model.predict(X)
    eps = np.zeros(d)
    pressure = []  # mean clean-vs-perturbed cross-entropy per epoch
    norms = []     # ||epsilon|| after each projection

    def accuracy(e):
        return 1.0 - fooling_rate(model, X, e)

    converged = accuracy(eps) <= 1.0 - psi
    epoch = 0
    while not converged and epoch < max_epochs:
        r = np.zeros(d)
        for _ in range(inner_steps):
            logits = (X + eps + r) @ model.weights + model.bias
            P = _softmax(logits)
            resid = P.copy()
            resid[np.arange(n), clean_labels] -= 1.0
            # ascent on CE wrt the clean labels, l2 pull-back on r;
            # normalized steps keep progress independent of softmax saturation
            grad = (model.weights @ resid.mean(axis=0)) - 2.0 * pullback * r / rho
            gn = np.linalg.norm(grad)
            if gn < 1e-12:
                break
            r += inner_lr * rho * grad / gn
        eps = project_l2_ball(eps + r, rho)
        norms.append(float(np.linalg.norm(eps)))
        logits = (X + eps) @ model.weights + model.bias
        pressure.append(cross_entropy(logits, clean_labels))
        epoch += 1
        converged = accuracy(eps) <= 1.0 - psi

    achieved = fooling_rate(model, X, eps)
    pert = Perturbation(eps, rho=rho, psi=psi,
                        achieved_fooling_rate=achieved, converged=converged)
    pert.pressure_trace = pressure
    pert.norm_trace = norms
    return pert


def alt_noise(kind, features, param=None, seed=0):
    """Baseline noise bags: per-dimension Gaussian or coordinate dropout."""
    X = np.asarray(features, dtype=float)
    rng = np.random.default_rng(seed)
    if kind == "gaussian":
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        return rng.normal(mean, std, size=X.shape)
    if kind == "dropout":
        rate = float(param)
        if not 0.0 <= rate <= 1.0:
            raise ParameterError("dropout rate must be in [0, 1]")
        mask = rng.random(X.shape) >= rate
        return X * mask
    raise ParameterError("unknown noise kind %r" % kind)


def write_softmax(model, path):
    with open(path, "wb") as fh:
        binio.write_header(fh, "DSPB")
        binio.write_u32(fh, model.weights.shape[0])
        binio.write_u32(fh, model.weights.shape[1])
        binio.write_f64(fh, model.train_accuracy)
        binio.write_matrix(fh, model.weights)
        binio.write_matrix(fh, model.bias.reshape(1, -1))


def read_softmax(path):
    with open(path, "rb") as fh:
        binio.read_header(fh, "DSPB")
        d = binio.read_u32(fh)
        K = binio.read_u32(fh)
        acc = binio.read_f64(fh)
        W = binio.read_matrix(fh, d, K)
        b = binio.read_matrix(fh, 1, K).ravel()
    return SoftmaxModel(W, b, train_accuracy=acc)


def write_perturbation(pert, path):
    with open(path, "wb") as fh:
        binio.write_header(fh, "DSPE")
        binio.write_u32(fh, pert.d)
        binio.write_f64(fh, pert.rho)
        binio.write_f64(fh, pert.psi)
        binio.write_f64(fh, pert.achieved_fooling_rate)
        binio.write_matrix(fh, pert.epsilon.reshape(1, -1))


def read_perturbation(path):
    with open(path, "rb") as fh:
        binio.read_header(fh, "DSPE")
        d = binio.read_u32(fh)
        rho = binio.read_f64(fh)
        psi = binio.read_f64(fh)
        achieved = binio.read_f64(fh)
        eps = binio.read_matrix(fh, 1, d).ravel()
    return Perturbation(eps, rho=rho, psi=psi, achieved_fooling_rate=achieved)
