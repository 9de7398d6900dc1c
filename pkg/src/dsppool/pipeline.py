"""End-to-end orchestration: victim training, noise, pooling, classification.

The CLI drives these functions from files; tests call them in memory.
"""

import zlib
from dataclasses import dataclass

import numpy as np

from .data import generate
from .kernel_svm import (
    KernelParams,
    cross_gram,
    gram,
    rbf_gram,
    svm_predict,
    svm_train,
)
from .perturb import Perturbation, alt_noise, compute_uap, default_rho, train_softmax
from .pool import DspParams, compute_delta, pool_sequence
from .rcg import RcgParams


@dataclass
class RunConfig:
    p: int = 6
    psi: float = 0.8
    rho_frac: float = 0.85
    ordering_weight: float = 1.0
    delta_policy: str = "dataset-mean"
    delta_override: int = None
    noise: str = "uap"        # uap | gaussian | dropout
    dropout_rate: float = 0.5
    beta: float = None        # None -> 1/p
    c_svm: float = 10.0
    softmax_epochs: int = 1000
    softmax_lr: float = 2.0
    uap_max_epochs: int = 200
    rcg_max_iters: int = 50
    rcg_grad_tol: float = 1e-5
    seed: int = 0


def frame_bank(sequences):
    """Stacked per-frame features with their sequence labels."""
    X = np.vstack([s.matrix for s in sequences])
    y = np.concatenate([np.full(s.n, s.label) for s in sequences])
    return X, y


def fit_victim(train_seqs, cfg):
    X, y = frame_bank(train_seqs)
    return train_softmax(X, y, epochs=cfg.softmax_epochs, lr=cfg.softmax_lr)


def fit_uap(model, train_seqs, cfg):
    X, _ = frame_bank(train_seqs)
    rho = default_rho(X, cfg.rho_frac)
    return compute_uap(model, X, psi=cfg.psi, rho=rho,
                       max_epochs=cfg.uap_max_epochs)


def dsp_params(cfg, dataset=None):
    params = DspParams(
        p=cfg.p,
        ordering_weight=cfg.ordering_weight,
        segment_policy=cfg.delta_policy,
        rcg=RcgParams(max_iters=cfg.rcg_max_iters, grad_tol=cfg.rcg_grad_tol,
                      seed=cfg.seed),
    )
    if cfg.delta_policy == "dataset-mean":
        if dataset is None:
            raise ValueError("dataset-mean policy needs the dataset")
        deltas = [compute_delta(s.matrix, params.delta_min) for s in dataset.train]
        params.delta_override = int(round(float(np.mean(deltas))))
    elif cfg.delta_policy == "global":
        params.delta_override = int(cfg.delta_override)
    return params


def sequence_noise(seq, pert, cfg, global_seed):
    """Noise source for one sequence: the shared UAP or a per-sequence bag."""
    if cfg.noise == "uap":
        return pert
    # stable per-sequence seed, independent of scheduling order
    seed = [global_seed, zlib.crc32(seq.sequence_id.encode())]
    param = cfg.dropout_rate if cfg.noise == "dropout" else None
    return alt_noise(cfg.noise, seq.matrix, param=param, seed=seed)


def pool_dataset(dataset, pert, cfg, params=None):
    params = params or dsp_params(cfg, dataset)
    descs, labels, splits = [], [], []
    for seq in dataset.sequences:
        noise = sequence_noise(seq, pert, cfg, cfg.seed)
        descs.append(pool_sequence(seq.matrix, noise, params,
                                   sequence_id=seq.sequence_id))
        labels.append(seq.label)
        splits.append(dataset.split[seq.sequence_id])
    return descs, np.array(labels), np.array(splits)


def classify_subspaces(descs, labels, splits, cfg):
    """Projection-kernel SVM accuracy on the test split."""
    beta = cfg.beta if cfg.beta is not None else 1.0 / cfg.p
    kp = KernelParams(beta=beta)
    tr = splits == "train"
    te = splits == "test"
    train_descs = [w for w, m in zip(descs, tr) if m]
    test_descs = [w for w, m in zip(descs, te) if m]
    K = gram(train_descs, kp)
    model = svm_train(K, labels[tr], C=cfg.c_svm)
    pred = svm_predict(model, cross_gram(test_descs, train_descs, kp))
    return float(np.mean(pred == labels[te])), pred, labels[te]


def pool_baseline(dataset, kind):
    """Mean/max pooled vectors per sequence."""
    fn = np.mean if kind == "ap" else np.max
    V = np.stack([fn(s.matrix, axis=0) for s in dataset.sequences])
    labels = np.array([s.label for s in dataset.sequences])
    splits = np.array([dataset.split[s.sequence_id] for s in dataset.sequences])
    return V, labels, splits


def classify_vectors(V, labels, splits, cfg, gamma=None):
    """RBF-kernel SVM accuracy on the test split (AP/MP baselines)."""
    tr = splits == "train"
    te = splits == "test"
    Xtr, Xte = V[tr], V[te]
    if gamma is None:
        d2 = (
            np.sum(Xtr * Xtr, axis=1)[:, None]
            + np.sum(Xtr * Xtr, axis=1)[None, :]
            - 2.0 * Xtr @ Xtr.T
        )
        med = float(np.median(d2[np.triu_indices(len(Xtr), k=1)]))
        gamma = 1.0 / max(med, 1e-12)
    model = svm_train(rbf_gram(Xtr, Xtr, gamma), labels[tr], C=cfg.c_svm)
    pred = svm_predict(model, rbf_gram(Xte, Xtr, gamma))
    return float(np.mean(pred == labels[te])), pred, labels[te]


def run_benchmark(spec, cfg, methods=("dsp", "ap", "mp")):
    """Full desk benchmark; returns per-method test accuracy plus artifacts."""
    dataset = generate(spec)
    out = {"dataset": dataset, "accuracy": {}}
    if "dsp" in methods:
        victim = fit_victim(dataset.train, cfg)
        pert = fit_uap(victim, dataset.train, cfg) if cfg.noise == "uap" else None
        descs, labels, splits = pool_dataset(dataset, pert, cfg)
        acc, pred, true = classify_subspaces(descs, labels, splits, cfg)
        out["accuracy"]["dsp"] = acc
        out["victim"] = victim
        out["perturbation"] = pert
        out["descriptors"] = (descs, labels, splits)
        out["predictions"] = {"dsp": (pred, true)}
    for kind in ("ap", "mp"):
        if kind in methods:
            V, labels, splits = pool_baseline(dataset, kind)
            acc, pred, true = classify_vectors(V, labels, splits, cfg)
            out["accuracy"][kind] = acc
            out.setdefault("predictions", {})[kind] = (pred, true)
    return out
