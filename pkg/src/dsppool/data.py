"""Synthetic labeled sequence generation and feature file I/O.

Sequences carry class identity in a small block of "signal" dimensions
driven by per-class stable linear dynamics, on top of a class-independent
random-walk background and additive Gaussian noise. The background makes
mean/max pooling unreliable while a linear per-frame classifier (which
can zero out the background weights) stays accurate.

The "dynamics" variant removes class-specific means and covariances
entirely: classes differ only in which signal dimensions ramp up versus
fade over the course of the sequence.
"""

import csv
import itertools
from dataclasses import dataclass, field

import numpy as np

from . import binio
from .errors import ParameterError


@dataclass
class FeatureSequence:
    matrix: np.ndarray  # n x d
    sequence_id: str
    label: int

    @property
    def n(self):
        return self.matrix.shape[0]

    @property
    def d(self):
        return self.matrix.shape[1]


@dataclass
class SynthSpec:
    classes: int = 5
    sequences_per_class: int = 100
    n_range: tuple = (30, 50)
    d: int = 64
    signal_dims: int = 16
    noise_std: float = 0.04
    seed: int = 0
    mode: str = "default"  # or "dynamics"
    chain_gap: float = 0.22   # class-mean spacing along the shared axis
    dyn_rank: int = 4         # dimension of the class-specific signal subspace
    dyn_ar: float = 0.3       # spectral radius of the class dynamics map
    dyn_noise: float = 0.65   # innovation std driving the dynamics
    dyn_anchor: float = 0.5   # scale of the class-specific start vector
    bg_start: float = 0.165   # std of the background walk's random start
    bg_step: float = 0.017    # background walk step std
    amp_low: float = 0.4      # ramp endpoints (dynamics mode)
    amp_high: float = 1.2

    def validate(self):
        if self.classes < 1:
            raise ParameterError("classes must be >= 1")
        if self.sequences_per_class < 1:
            raise ParameterError("sequences_per_class must be >= 1")
        if not 2 <= self.n_range[0] <= self.n_range[1]:
            raise ParameterError("need 2 <= n_min <= n_max")
        if not 0 < self.signal_dims < self.d:
            raise ParameterError("need 0 < signal_dims < d")
        if not 0 < self.dyn_ar <= 0.99:
            raise ParameterError("dynamics spectral radius must be in (0, 0.99]")
        if self.dyn_rank < 2 or self.dyn_rank % 2 != 0:
            raise ParameterError("dyn_rank must be even and >= 2")
        if self.dyn_rank // 2 > (self.signal_dims - 2) // 2:
            raise ParameterError("dyn_rank too large for signal_dims")
        if self.mode not in ("default", "dynamics"):
            raise ParameterError("unknown mode %r" % self.mode)


@dataclass
class Dataset:
    sequences: list
    split: dict  # sequence_id -> "train" | "test"
    spec: SynthSpec = None

    def subset(self, which):
        return [s for s in self.sequences if self.split[s.sequence_id] == which]

    @property
    def train(self):
        return self.subset("train")

    @property
    def test(self):
        return self.subset("test")


def _class_params(spec, rng):
    """Per-class generative parameters, drawn once from the dataset seed.

    Class means sit at c * chain_gap along a shared "chain" axis (signal
    dim 0), so one global shift confuses adjacent classes. The remaining
    signal dimensions carry zero-mean class-specific dynamics whose slow
    directions encode the class as a subspace.
    """
    s = spec.signal_dims
    params = []
    K = spec.classes
    # distinct frequency subsets per class so no two class subspaces coincide
    nfreq = (s - 2) // 2
    m = spec.dyn_rank // 2
    subsets = list(itertools.combinations(range(1, nfreq + 1), m))
    if K > len(subsets):
        raise ParameterError("too many classes for the frequency basis")
    chosen = rng.choice(len(subsets), size=K, replace=False)
    for cls in range(spec.classes):
        mu = np.zeros(s)
        mu[0] = (cls - 0.5 * (K - 1)) * spec.chain_gap
        # class subspace from sine/cosine quadrature pairs of a discrete
        # frequency basis: class-distinct spans with identical per-dimension
        # marginal variance, so pooled per-dim statistics carry no label
        sd = s - 1
        j = np.arange(sd)
        cols = []
        for f in subsets[chosen[cls]]:
            cols.append(np.cos(2.0 * np.pi * f * j / sd))
            cols.append(np.sin(2.0 * np.pi * f * j / sd))
        M = np.stack(cols, axis=1) * np.sqrt(2.0 / sd)
        w0 = rng.normal(size=spec.dyn_rank)
        w0 /= np.linalg.norm(w0)
        ramp = rng.permutation(s)[: s // 2]
        # chain-end classes get shorter sequences (actions differ in length)
        w = 4.0 * cls * (K - 1 - cls) / (K - 1) ** 2 if K > 1 else 0.0
        n_hi = spec.n_range[0] + int(round(w * (spec.n_range[1] - spec.n_range[0])))
        params.append({"mu": mu, "M": M, "w0": w0, "ramp": np.sort(ramp),
                       "n_range": (spec.n_range[0], n_hi)})
    return params


def _gen_sequence(spec, cls, params, rng):
    if spec.mode == "default":
        lo, hi = params["n_range"]
    else:
        lo, hi = spec.n_range
    n = int(rng.integers(lo, hi + 1))
    s = spec.signal_dims
    b_dims = spec.d - s

    if spec.mode == "default":
        M, mu = params["M"], params["mu"]
        k = spec.dyn_rank
        # latent state in the class subspace, random start near the class
        # anchor, fast-mixing so time averages carry little class signal
        u = spec.dyn_anchor * params["w0"] + spec.dyn_noise * rng.normal(size=k)
        sig = np.empty((n, s))
        for t in range(n):
            sig[t, 0] = mu[0]
            sig[t, 1:] = M @ u
            u = spec.dyn_ar * u + spec.dyn_noise * rng.normal(size=k)
    else:
        t_frac = np.arange(n) / max(n - 1, 1)
        amp = np.full((n, s), spec.amp_high) - (spec.amp_high - spec.amp_low) * t_frac[:, None]
        amp[:, params["ramp"]] = (
            spec.amp_low + (spec.amp_high - spec.amp_low) * t_frac[:, None]
        )
        sig = amp * rng.normal(size=(n, s))

    # class-independent random walk with a diffuse random start: a slowly
    # drifting per-sequence offset that averages poorly across frames
    b0 = spec.bg_start * rng.normal(size=b_dims)
    bg = b0 + np.cumsum(spec.bg_step * rng.normal(size=(n, b_dims)), axis=0)
    X = np.hstack([sig, bg]) + spec.noise_std * rng.normal(size=(n, spec.d))
    return X


def generate(spec):
    """Deterministic labeled dataset with an 80/20 stratified split."""
    spec.validate()
    master = np.random.default_rng(spec.seed)
    cls_params = _class_params(spec, master)

    sequences = []
    split = {}
    idx = 0
    for cls in range(spec.classes):
        n_test = max(1, round(0.2 * spec.sequences_per_class))
        if spec.sequences_per_class == 1:
            n_test = 0
        for j in range(spec.sequences_per_class):
            rng = np.random.default_rng([spec.seed, idx])
            X = _gen_sequence(spec, cls, cls_params[cls], rng)
            sid = "seq%05d" % idx
            sequences.append(FeatureSequence(X, sid, cls))
            split[sid] = "test" if j >= spec.sequences_per_class - n_test else "train"
            idx += 1
    return Dataset(sequences, split, spec)


def write_features(seq, path):
    with open(path, "wb") as fh:
        binio.write_header(fh, "DSPF")
        binio.write_u32(fh, seq.n)
        binio.write_u32(fh, seq.d)
        binio.write_matrix(fh, seq.matrix)


def read_features(path, sequence_id=None, label=-1):
    with open(path, "rb") as fh:
        binio.read_header(fh, "DSPF")
        n = binio.read_u32(fh)
        d = binio.read_u32(fh)
        mat = binio.read_matrix(fh, n, d)
    return FeatureSequence(mat, sequence_id or str(path), label)


def write_manifest(dataset, rows, path):
    """rows: list of (sequence_id, feature_path); labels/split from dataset."""
    label = {s.sequence_id: s.label for s in dataset.sequences}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sequence_id", "path", "label", "split"])
        for sid, fpath in rows:
            w.writerow([sid, fpath, label[sid], dataset.split[sid]])


def read_manifest(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return list(reader)
