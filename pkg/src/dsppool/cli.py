"""Command-line pipeline driver.

Every stage is a subcommand reading and writing files under --out; each
invocation appends a key=value line to run_record.txt so a run can be
audited after the fact. Exit codes: 2 missing input, 3 validation
failure, 4 numerical failure.
"""

import argparse
import csv
import hashlib
import json
import os
import sys
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields

import numpy as np

from . import pool as pool_mod
from .data import (
    SynthSpec,
    generate,
    read_features,
    read_manifest,
    write_features,
    write_manifest,
)
from .data import Dataset
from .errors import DsppoolError, NumericalError, ParameterError
from .kernel_svm import (
    KernelParams,
    cross_gram,
    gram,
    svm_predict,
    svm_train,
    write_gram,
    write_model,
    read_model,
)
from .perturb import (
    Perturbation,
    compute_uap,
    default_rho,
    read_perturbation,
    read_softmax,
    train_softmax,
    write_perturbation,
    write_softmax,
)
from .pipeline import (
    RunConfig,
    dsp_params,
    frame_bank,
    pool_baseline,
    classify_vectors,
    sequence_noise,
)
from .pool import (
    build_segments,
    dsp_cost,
    dsp_grad,
    grad_wrt_input,
    pool_sequence,
    read_descriptor,
    solve_penalty,
    write_descriptor,
)
from .pool import DspParams, SequenceBags, _active_set, _segment_pairs
from .report import save_accuracy_bar, save_bench_curve, save_pressure_trace
from .stiefel import (
    StiefelPoint,
    orthonormality_residual,
    project_tangent,
    retract,
    skew_residual,
)

BENCH_BUDGET_MS = 20.0


# ---------------------------------------------------------------------------
# plumbing
# ---------------------------------------------------------------------------

def require(path):
    if not os.path.exists(path):
        raise FileNotFoundError(2, "missing input", str(path))
    return path


def config_hash(cfg):
    blob = json.dumps(asdict(cfg), sort_keys=True, default=str)
    return hashlib.md5(blob.encode()).hexdigest()[:8]


def record(out_dir, stage, cfg, t0, **metrics):
    os.makedirs(out_dir, exist_ok=True)
    parts = ["stage=%s" % stage, "config=%s" % config_hash(cfg),
             "wall_time=%.3f" % (time.time() - t0)]
    parts += ["%s=%s" % (k, v) for k, v in metrics.items()]
    with open(os.path.join(out_dir, "run_record.txt"), "a") as fh:
        fh.write(" ".join(parts) + "\n")


def load_config(args):
    cfg = RunConfig()
    if args.config:
        with open(require(args.config)) as fh:
            blob = json.load(fh)
        names = {f.name for f in fields(RunConfig)}
        for k, v in blob.items():
            if k not in names:
                raise ParameterError("unknown config key %r" % k)
            setattr(cfg, k, v)
    overrides = {
        "seed": args.seed,
        "p": getattr(args, "p", None),
        "psi": getattr(args, "psi", None),
        "rho_frac": getattr(args, "rho_frac", None),
        "ordering_weight": getattr(args, "ordering_weight", None),
        "delta_policy": getattr(args, "delta_policy", None),
        "beta": getattr(args, "beta", None),
        "c_svm": getattr(args, "c_svm", None),
    }
    for k, v in overrides.items():
        if v is not None:
            setattr(cfg, k, v)
    return cfg


def load_dataset(data_dir):
    manifest = require(os.path.join(data_dir, "manifest.csv"))
    rows = read_manifest(manifest)
    sequences, split = [], {}
    for row in rows:
        path = require(os.path.join(data_dir, row["path"]))
        seq = read_features(path, sequence_id=row["sequence_id"],
                            label=int(row["label"]))
        sequences.append(seq)
        split[row["sequence_id"]] = row["split"]
    return Dataset(sequences, split)


def load_descriptors(desc_dir):
    index = require(os.path.join(desc_dir, "index.csv"))
    with open(index, newline="") as fh:
        rows = list(csv.DictReader(fh))
    descs, labels, splits, ids = [], [], [], []
    for row in rows:
        path = require(os.path.join(desc_dir, row["path"]))
        descs.append(read_descriptor(path, sequence_id=row["sequence_id"]))
        labels.append(int(row["label"]))
        splits.append(row["split"])
        ids.append(row["sequence_id"])
    return descs, np.array(labels), np.array(splits), ids


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def cmd_gen_data(args):
    t0 = time.time()
    cfg = load_config(args)
    spec = SynthSpec(seed=cfg.seed)
    for name in ("classes", "per_class", "d", "signal_dims", "noise_std", "mode"):
        v = getattr(args, name, None)
        if v is not None:
            field = "sequences_per_class" if name == "per_class" else name
            setattr(spec, field, v)
    dataset = generate(spec)
    feat_dir = os.path.join(args.out, "features")
    os.makedirs(feat_dir, exist_ok=True)
    rows = []
    for seq in dataset.sequences:
        rel = os.path.join("features", seq.sequence_id + ".dspf")
        write_features(seq, os.path.join(args.out, rel))
        rows.append((seq.sequence_id, rel))
    write_manifest(dataset, rows, os.path.join(args.out, "manifest.csv"))
    record(args.out, "gen-data", cfg, t0, sequences=len(dataset.sequences),
           classes=spec.classes, mode=spec.mode)
    print("wrote %d sequences to %s" % (len(dataset.sequences), args.out))
    return 0


def cmd_train_base(args):
    t0 = time.time()
    cfg = load_config(args)
    dataset = load_dataset(args.data)
    X, y = frame_bank(dataset.train)
    model = train_softmax(X, y, epochs=cfg.softmax_epochs, lr=cfg.softmax_lr)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "victim.dspb")
    write_softmax(model, path)
    record(args.out, "train-base", cfg, t0,
           train_accuracy="%.4f" % model.train_accuracy, model=path)
    print("victim train accuracy %.4f -> %s" % (model.train_accuracy, path))
    return 0


def cmd_uap(args):
    t0 = time.time()
    cfg = load_config(args)
    dataset = load_dataset(args.data)
    model = read_softmax(require(args.model))
    X, _ = frame_bank(dataset.train)
    rho = default_rho(X, cfg.rho_frac)
    pert = compute_uap(model, X, psi=cfg.psi, rho=rho,
                       max_epochs=cfg.uap_max_epochs)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "uap.dspe")
    write_perturbation(pert, path)
    if pert.pressure_trace:
        save_pressure_trace(pert.pressure_trace,
                            os.path.join(args.out, "uap_pressure.png"))
    record(args.out, "uap", cfg, t0, rho="%.4f" % rho,
           fooling_rate="%.4f" % pert.achieved_fooling_rate,
           converged=pert.converged, epsilon=path)
    print("fooling rate %.4f (target psi=%.2f) -> %s"
          % (pert.achieved_fooling_rate, cfg.psi, path))
    return 0


def _pool_one(task):
    matrix, noise, params, sid = task
    return sid, pool_sequence(matrix, noise, params, sequence_id=sid)


def cmd_pool(args):
    t0 = time.time()
    cfg = load_config(args)
    dataset = load_dataset(args.data)
    if args.noise in ("gaussian", "dropout"):
        cfg.noise = args.noise
        pert = None
    else:
        cfg.noise = "uap"
        pert = read_perturbation(require(args.noise))
    params = dsp_params(cfg, dataset)
    desc_dir = os.path.join(args.out, "descriptors")
    os.makedirs(desc_dir, exist_ok=True)
    tasks = [
        (seq.matrix, sequence_noise(seq, pert, cfg, cfg.seed), params,
         seq.sequence_id)
        for seq in dataset.sequences
    ]
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as ex:
            results = dict(ex.map(_pool_one, tasks, chunksize=8))
    else:
        results = dict(map(_pool_one, tasks))
    rows = []
    for seq in dataset.sequences:
        desc = results[seq.sequence_id]
        rel = os.path.join("descriptors", seq.sequence_id + ".dspw")
        write_descriptor(desc, os.path.join(args.out, rel))
        rows.append((seq.sequence_id, rel, seq.label,
                     dataset.split[seq.sequence_id]))
    with open(os.path.join(args.out, "index.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sequence_id", "path", "label", "split"])
        w.writerows(rows)
    record(args.out, "pool", cfg, t0, sequences=len(rows), p=cfg.p,
           delta=params.delta_override, noise=cfg.noise)
    print("pooled %d sequences (p=%d) -> %s" % (len(rows), cfg.p, args.out))
    return 0


def cmd_train_svm(args):
    t0 = time.time()
    cfg = load_config(args)
    descs, labels, splits, ids = load_descriptors(args.descriptors)
    tr = splits == "train"
    p = descs[0].p
    beta = cfg.beta if cfg.beta is not None else 1.0 / p
    kp = KernelParams(beta=beta)
    train_descs = [w for w, m in zip(descs, tr) if m]
    train_ids = [i for i, m in zip(ids, tr) if m]
    K = gram(train_descs, kp)
    model = svm_train(K, labels[tr], C=cfg.c_svm, train_ids=train_ids)
    os.makedirs(args.out, exist_ok=True)
    write_gram(K, os.path.join(args.out, "gram.dspg"))
    mpath = os.path.join(args.out, "svm.dspm")
    write_model(model, mpath)
    train_acc = float(np.mean(svm_predict(model, K) == labels[tr]))
    record(args.out, "train-svm", cfg, t0, beta="%.4f" % beta,
           train_accuracy="%.4f" % train_acc, model=mpath)
    print("svm train accuracy %.4f (beta=%.4f) -> %s" % (train_acc, beta, mpath))
    return 0


def cmd_baseline(args):
    t0 = time.time()
    cfg = load_config(args)
    dataset = load_dataset(args.data)
    V, labels, splits = pool_baseline(dataset, args.kind)
    acc, pred, true = classify_vectors(V, labels, splits, cfg)
    os.makedirs(args.out, exist_ok=True)
    test_ids = [s.sequence_id for s in dataset.sequences
                if dataset.split[s.sequence_id] == "test"]
    with open(os.path.join(args.out, "predictions_%s.csv" % args.kind),
              "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sequence_id", "true_label", "predicted_label"])
        w.writerows(zip(test_ids, true, pred))
    with open(os.path.join(args.out, "accuracy_%s.csv" % args.kind),
              "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "accuracy"])
        w.writerow([args.kind, "%.4f" % acc])
    record(args.out, "baseline-%s" % args.kind, cfg, t0,
           accuracy="%.4f" % acc)
    print("%s baseline accuracy %.4f" % (args.kind, acc))
    return 0


def cmd_eval(args):
    t0 = time.time()
    cfg = load_config(args)
    dataset = load_dataset(args.data)
    descs, labels, splits, ids = load_descriptors(args.descriptors)
    model = read_model(require(args.svm))
    by_id = dict(zip(ids, descs))
    train_descs = [by_id[i] for i in model.train_ids]
    te = splits == "test"
    test_descs = [w for w, m in zip(descs, te) if m]
    test_ids = [i for i, m in zip(ids, te) if m]
    p = descs[0].p
    beta = cfg.beta if cfg.beta is not None else 1.0 / p
    kp = KernelParams(beta=beta)
    rows = cross_gram(test_descs, train_descs, kp)
    dec = model.decision_values(rows)
    pred = model.classes[np.argmax(dec, axis=1)]
    true = labels[te]
    acc = float(np.mean(pred == true))

    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "predictions_dsp.csv"), "w",
              newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sequence_id", "true_label", "predicted_label"]
                   + ["margin_%d" % c for c in model.classes])
        for i in range(len(test_ids)):
            w.writerow([test_ids[i], true[i], pred[i]]
                       + ["%.6f" % v for v in dec[i]])

    accuracy = {"dsp": acc}
    for kind in ("ap", "mp"):
        path = os.path.join(args.out, "accuracy_%s.csv" % kind)
        if os.path.exists(path):
            with open(path, newline="") as fh:
                for row in csv.DictReader(fh):
                    accuracy[row["method"]] = float(row["accuracy"])
    with open(os.path.join(args.out, "eval.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "accuracy"])
        for m, a in accuracy.items():
            w.writerow([m, "%.4f" % a])
    save_accuracy_bar(accuracy, os.path.join(args.out, "accuracy.png"))
    record(args.out, "eval", cfg, t0,
           **{"accuracy_" + m: "%.4f" % a for m, a in accuracy.items()})
    for m, a in accuracy.items():
        print("%s accuracy %.4f" % (m, a))
    return 0


# ---------------------------------------------------------------------------
# verification stages
# ---------------------------------------------------------------------------

def _gradcheck_manifold(rng, rounds=100):
    worst = 0.0
    for _ in range(rounds):
        d, p = [(8, 2), (64, 6), (256, 6)][int(rng.integers(3))]
        Q, _ = np.linalg.qr(rng.normal(size=(d, p)))
        W = StiefelPoint(Q, check=False)
        H = project_tangent(W, rng.normal(size=(d, p)))
        R = retract(W, H, t=float(rng.uniform(0.01, 1.0)))
        worst = max(worst, skew_residual(H),
                    orthonormality_residual(R.matrix))
    return worst


def _smooth_instance(rng, params):
    while True:
        n, d = 5, 4
        X = rng.normal(size=(n, d))
        bags = SequenceBags(X, X + rng.normal(size=d))
        segs = build_segments(n, 3)
        Q, _ = np.linalg.qr(rng.normal(size=(d, params.p)))
        ok = True
        for theta, y in ((bags.positive, 1.0), (bags.negative, -1.0)):
            scores = y * (theta @ Q)
            top = np.sort(scores, axis=1)
            if np.any(np.abs(top[:, -1] - 1.0) < 1e-3):
                ok = False
            if scores.shape[1] > 1 and np.any(top[:, -1] - top[:, -2] < 1e-3):
                ok = False
        pi, pj = _segment_pairs(segs)
        e = np.sum((bags.positive @ Q) ** 2, axis=1)
        if np.any(np.abs(1.0 + e[pi] - e[pj]) < 1e-3):
            ok = False
        if ok:
            return Q, bags, segs


def _gradcheck_fd(rng, params, rounds=10, h=1e-6):
    worst = 0.0
    for _ in range(rounds):
        Q, bags, segs = _smooth_instance(rng, params)
        G = dsp_grad(Q, bags, segs, params)
        F = np.zeros_like(Q)
        for r in range(Q.shape[0]):
            for q in range(Q.shape[1]):
                Wp, Wm = Q.copy(), Q.copy()
                Wp[r, q] += h
                Wm[r, q] -= h
                F[r, q] = (dsp_cost(Wp, bags, segs, params)
                           - dsp_cost(Wm, bags, segs, params)) / (2 * h)
        worst = max(worst, np.linalg.norm(G - F)
                    / max(np.linalg.norm(F), 1e-12))
    return worst


def _gradcheck_argmin(rng, rounds=4, h=1e-5):
    """FD through the re-solved penalized argmin; skips active-set changes."""
    params = DspParams(p=1, hinge_variant="squared-hinge", ordering_weight=0.0)
    segs = build_segments(4, 2)
    worst, skipped, checked = 0.0, 0, 0
    while checked < rounds:
        X = rng.normal(size=(4, 4))
        Z = X + 0.8 * rng.normal(size=4)
        bags = SequenceBags(X, Z)
        Wm = solve_penalty(bags, 1)
        U = rng.normal(size=(4, 1))
        grads, _ = grad_wrt_input(Wm, bags, segs, params, U, mode="exact")
        base_active = {(b, i, j) for b, i, j, _ in _active_set(Wm, bags)}
        F = np.zeros_like(X)
        stable = True
        for i in range(4):
            for k in range(4):
                vals = []
                for sign in (+1.0, -1.0):
                    Xp = X.copy()
                    Xp[i, k] += sign * h
                    bp = SequenceBags(Xp, Z)
                    Wp = solve_penalty(bp, 1)
                    act = {(b, a, j) for b, a, j, _ in _active_set(Wp, bp)}
                    if act != base_active:
                        stable = False
                    vals.append(float(np.sum(U * Wp)))
                F[i, k] = (vals[0] - vals[1]) / (2 * h)
        if not stable:
            skipped += 1
            continue
        denom = max(np.linalg.norm(F), 1e-12)
        worst = max(worst, np.linalg.norm(grads - F) / denom)
        checked += 1
    return worst, skipped


def cmd_gradcheck(args):
    t0 = time.time()
    cfg = load_config(args)
    failures = []
    for seed in range(args.seeds):
        rng = np.random.default_rng(seed)
        res = _gradcheck_manifold(rng, rounds=60)
        if res > 1e-10:
            failures.append("seed %d manifold residual %.3e" % (seed, res))
        rel = _gradcheck_fd(rng, DspParams(p=2, ordering_weight=1.0), rounds=6)
        if rel > 1e-4:
            failures.append("seed %d gradient rel err %.3e" % (seed, rel))
        rel2, skipped = _gradcheck_argmin(rng, rounds=2)
        if rel2 > 1e-2:
            failures.append("seed %d argmin rel err %.3e" % (seed, rel2))
        print("seed %d: manifold %.2e, gradient %.2e, argmin %.2e "
              "(%d unstable instances skipped)" % (seed, res, rel, rel2, skipped))
    if args.out:
        record(args.out, "gradcheck", cfg, t0, seeds=args.seeds,
               failures=len(failures))
    for msg in failures:
        print("FAIL: " + msg, file=sys.stderr)
    return 4 if failures else 0


def cmd_bench(args):
    t0 = time.time()
    cfg = load_config(args)
    rng = np.random.default_rng(cfg.seed)
    n = 100
    rows = []
    for d in (128, 512, 2048):
        for p in (1, 6):
            X = rng.normal(size=(n, d))
            eps = rng.normal(size=d)
            pert = Perturbation(eps, rho=float(np.linalg.norm(eps)), psi=0.8,
                                achieved_fooling_rate=1.0)
            params = DspParams(p=p, rcg=cfg_rcg(cfg))
            t1 = time.time()
            pool_sequence(X, pert, params)
            ms = (time.time() - t1) * 1000.0 / n
            rows.append({"d": d, "p": p, "ms_per_frame": ms})
            print("d=%4d p=%d: %.2f ms/frame" % (d, p, ms))
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "bench.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["d", "p", "ms_per_frame"])
        for r in rows:
            w.writerow([r["d"], r["p"], "%.3f" % r["ms_per_frame"]])
    save_bench_curve(rows, os.path.join(args.out, "bench.png"),
                     threshold_ms=BENCH_BUDGET_MS)
    headline = [r for r in rows if r["d"] == 2048 and r["p"] == 1][0]
    over = headline["ms_per_frame"] > BENCH_BUDGET_MS
    if over:
        print("warning: %.2f ms/frame at d=2048 p=1 exceeds the %.0f ms budget"
              % (headline["ms_per_frame"], BENCH_BUDGET_MS), file=sys.stderr)
    record(args.out, "bench", cfg, t0,
           ms_per_frame_d2048_p1="%.3f" % headline["ms_per_frame"],
           over_budget=over)
    return 0


def cfg_rcg(cfg):
    from .rcg import RcgParams
    return RcgParams(max_iters=cfg.rcg_max_iters, grad_tol=cfg.rcg_grad_tol,
                     seed=cfg.seed)


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of run-config fields")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--workers", type=int, default=os.cpu_count() or 1)

    knobs = argparse.ArgumentParser(add_help=False)
    knobs.add_argument("--p", type=int, default=None)
    knobs.add_argument("--psi", type=float, default=None)
    knobs.add_argument("--rho-frac", type=float, dest="rho_frac", default=None)
    knobs.add_argument("--ordering-weight", type=float,
                       dest="ordering_weight", default=None)
    knobs.add_argument("--delta-policy", dest="delta_policy", default=None)
    knobs.add_argument("--beta", type=float, default=None)
    knobs.add_argument("--c-svm", type=float, dest="c_svm", default=None)

    parser = argparse.ArgumentParser(
        prog="dsppool",
        description="Subspace pooling of feature sequences: data generation, "
                    "adversarial noise, pooling, and kernel SVM evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("gen-data", parents=[common, knobs])
    sp.add_argument("--classes", type=int, default=None)
    sp.add_argument("--per-class", type=int, dest="per_class", default=None)
    sp.add_argument("--d", type=int, default=None)
    sp.add_argument("--signal-dims", type=int, dest="signal_dims", default=None)
    sp.add_argument("--noise-std", type=float, dest="noise_std", default=None)
    sp.add_argument("--mode", choices=("default", "dynamics"), default=None)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train-base", parents=[common, knobs])
    sp.add_argument("--data", required=True)
    sp.set_defaults(func=cmd_train_base)

    sp = sub.add_parser("uap", parents=[common, knobs])
    sp.add_argument("--data", required=True)
    sp.add_argument("--model", required=True)
    sp.set_defaults(func=cmd_uap)

    sp = sub.add_parser("pool", parents=[common, knobs])
    sp.add_argument("--data", required=True)
    sp.add_argument("--noise", required=True,
                    help="path to a perturbation file, or gaussian/dropout")
    sp.set_defaults(func=cmd_pool)

    sp = sub.add_parser("train-svm", parents=[common, knobs])
    sp.add_argument("--descriptors", required=True)
    sp.set_defaults(func=cmd_train_svm)

    sp = sub.add_parser("eval", parents=[common, knobs])
    sp.add_argument("--data", required=True)
    sp.add_argument("--descriptors", required=True)
    sp.add_argument("--svm", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("baseline", parents=[common, knobs])
    sp.add_argument("kind", choices=("ap", "mp"))
    sp.add_argument("--data", required=True)
    sp.set_defaults(func=cmd_baseline)

    sp = sub.add_parser("gradcheck", parents=[common, knobs])
    sp.add_argument("--seeds", type=int, default=5)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("bench", parents=[common, knobs])
    sp.set_defaults(func=cmd_bench)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as err:
        print("missing input: %s" % err.filename, file=sys.stderr)
        return 2
    except NumericalError as err:
        print("numerical failure: %s" % err, file=sys.stderr)
        return 4
    except (DsppoolError, ValueError) as err:
        print("validation failure: %s" % err, file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
