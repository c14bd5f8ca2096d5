"""Command-line entry point: ``qfpn <verb> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import dataio, metrics, qsim, segnet, trainer
from .segnet import ModelConfig
from .trainer import TrainConfig


class UsageError(Exception):
    pass


def _g(v: float) -> str:
    return f"{v:.6g}"


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.replace(",", " ").split()]
    except ValueError as exc:
        raise UsageError(f"cannot parse number list {text!r}: {exc}") from None


# ---------------------------------------------------------------------------
# config resolution


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    unknown = set(raw) - {"model", "train"}
    if unknown:
        raise UsageError(f"config has unknown sections {sorted(unknown)}; expected 'model' and 'train'")
    return raw


def _build(cls, values: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise UsageError(f"unknown {section} keys in config: {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {section} config: {exc}") from None


def _merge_to_model(topology: str, merge: str) -> str:
    if topology == "fpn":
        if merge in ("quantum", "classical"):
            return merge
        raise UsageError(f"--merge {merge} is not an FPN merge; use quantum or classical with --topology fpn")
    if merge == "skip":
        return "quantum"
    if merge in ("identity", "classical"):
        return "identity"
    raise UsageError(
        "--merge quantum gates FPN merge points and needs --topology fpn; "
        "for quantum skip-connection attention on unet_skip use --merge skip"
    )


def resolve_configs(args) -> tuple[ModelConfig, TrainConfig]:
    """Defaults, then the JSON config file, then explicit flags."""
    raw = _load_config(getattr(args, "config", None))
    model = dict(raw.get("model", {}))
    train = dict(raw.get("train", {}))
    topology = getattr(args, "topology", None)
    if topology is not None:
        model["topology"] = topology
    merge = getattr(args, "merge", None)
    if merge is not None:
        model["merge_kind"] = _merge_to_model(model.get("topology", "fpn"), merge)
    for flag, key in (("qubits", "qubits"), ("reupload", "reupload")):
        if getattr(args, flag, None) is not None:
            model[key] = getattr(args, flag)
    for flag in ("folds", "seed"):
        if getattr(args, flag, None) is not None:
            train[flag] = getattr(args, flag)
    return _build(ModelConfig, model, "model"), _build(TrainConfig, train, "train")


def _corpus(path):
    root = Path(path)
    if not (root / "train.csv").exists():
        raise FileNotFoundError(f"no corpus at {root} (train.csv missing)")
    return dataio.load_corpus(root)


def _run_hash(result: trainer.RunResult) -> str:
    return hashlib.sha256("".join(f.batch_order_hash for f in result.folds).encode()).hexdigest()


def _init_hash(result: trainer.RunResult) -> str:
    return hashlib.sha256("".join(f.shared_init_hash for f in result.folds).encode()).hexdigest()


# ---------------------------------------------------------------------------
# verbs


def cmd_synth(args) -> int:
    if not 0.0 <= args.empty_fraction < 1.0:
        raise UsageError(f"--empty-fraction must be in [0, 1), got {args.empty_fraction}")
    if args.n < 1 or args.resolution < 8:
        raise UsageError("--n must be >= 1 and --resolution >= 8")
    records, depths = dataio.generate_synthetic_raw(args.n, args.resolution, args.empty_fraction, args.seed)
    dataio.export_corpus(args.out, records, depths)
    n_empty = sum(1 for r in records if not r.mask.any())
    print(f"wrote {len(records)} samples ({n_empty} empty) to {args.out}")
    return 0


def cmd_train(args) -> int:
    model_cfg, train_cfg = resolve_configs(args)
    records = _corpus(args.data)
    result = trainer.train(model_cfg, train_cfg, records, args.out)
    print(f"oof_tgs_map {_g(result.eval.tgs_map)}")
    print(f"best_threshold {_g(result.eval.best_threshold)}")
    return 0


def cmd_ablate(args) -> int:
    model_cfg, train_cfg = resolve_configs(args)
    if model_cfg.topology != "fpn":
        raise UsageError("the ablation compares FPN merges; the config must use topology fpn")
    records = _corpus(args.data)
    out = Path(args.out)
    plan = dataio.stratified_folds(records, train_cfg.folds, train_cfg.seed)
    runs = {}
    for merge in ("classical", "quantum"):
        cfg = ModelConfig(**(model_cfg.to_dict() | {"merge_kind": merge}))
        runs[merge] = trainer.train(cfg, train_cfg, records, out / merge, plan)
    delta = 100.0 * (runs["quantum"].eval.tgs_map - runs["classical"].eval.tgs_map)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["merge", "oof_tgs_map", "best_threshold", "n_quantum_params",
                    "batch_order_hash", "shared_init_hash", "delta_pp"])
        for merge, run in runs.items():
            w.writerow([merge, repr(run.eval.tgs_map), repr(run.eval.best_threshold),
                        run.model_summary["n_quantum_params"], _run_hash(run), _init_hash(run),
                        repr(delta) if merge == "quantum" else ""])
    for merge, run in runs.items():
        print(f"{merge:9s} oof_tgs_map {_g(run.eval.tgs_map)}")
    print(f"delta_pp {_g(delta)}")
    return 0


def cmd_eval(args) -> int:
    run = Path(args.run)
    out = Path(args.out) if args.out else run
    records = {r.id: r for r in _corpus(args.data)}
    assignments = json.loads((run / "folds.json").read_text())
    missing = sorted(set(assignments) - set(records))
    if missing:
        raise UsageError(f"{len(missing)} ids from the run are missing from --data (first: {missing[0]})")
    ids, probs, gts = [], [], []
    folds = sorted(set(assignments.values()))
    for k in folds:
        model = segnet.load_checkpoint(run / f"fold{k}")
        res = model.config.resolution
        fold_ids = [i for i, f in assignments.items() if f == k]
        x = np.stack([dataio.assemble_input(records[i], res) for i in fold_ids])
        for s in range(0, len(x), 8):
            probs.extend(metrics.tta_hflip(model, x[s : s + 8])[:, 0])
        gts.extend(dataio.target_mask(records[i], res) for i in fold_ids)
        ids.extend(fold_ids)
    result = metrics.evaluate(ids, probs, gts)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "eval.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "iou", "tgs_precision"])
        for sid, i, p in result.per_image:
            w.writerow([sid, _g(i), _g(p)])
        w.writerow(["mean", _g(np.mean([r[1] for r in result.per_image])), _g(result.tgs_map)])
    (out / "eval.json").write_text(json.dumps(result.to_dict(), indent=2) + "\n")
    print(f"tgs_map {_g(result.tgs_map)}")
    print(f"best_threshold {_g(result.best_threshold)}")
    return 0


def cmd_diagnose_circuit(args) -> int:
    n, layers = args.qubits, args.layers
    x = _floats(args.x) if args.x is not None else [0.0] * n
    if len(x) != n:
        raise UsageError(f"--x needs {n} values, got {len(x)}")
    if args.angles is not None:
        flat = _floats(args.angles)
        if len(flat) != 3 * n * layers:
            raise UsageError(f"--angles needs {3 * n * layers} values, got {len(flat)}")
        angles = np.array(flat).reshape(layers, n, 3)
    elif args.angles_seed is not None:
        angles = np.random.default_rng(args.angles_seed).uniform(-np.pi, np.pi, size=(layers, n, 3))
    else:
        angles = np.zeros((layers, n, 3))
    upstream = _floats(args.upstream) if args.upstream is not None else [1.0] * n
    if len(upstream) != n:
        raise UsageError(f"--upstream needs {n} values, got {len(upstream)}")
    scale = qsim.frequency_scales(layers) if args.encoding == "frequency" else np.ones(layers)
    params = qsim.CircuitParams(n, layers, angles, args.reupload, scale)
    expvals = qsim.run_circuit(x, params)
    d_angles, d_x = qsim.circuit_gradients(x, params, upstream)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["quantity", "layer", "qubit", "component", "value"])
    for q, v in enumerate(expvals):
        w.writerow(["expval", "", q, "", _g(v)])
    for (layer, q, c), v in np.ndenumerate(d_angles):
        w.writerow(["d_angle", layer, q, ("phi", "theta", "omega")[c], _g(v)])
    for q, v in enumerate(d_x):
        w.writerow(["d_x", "", q, "", _g(v)])
    return 0


def cmd_diagnose_gradients(args) -> int:
    logs = [Path(args.log)] if args.log else sorted(Path(args.run).glob("fold*/log.csv"))
    if not logs:
        raise FileNotFoundError(f"no log.csv files under {args.run}")
    qubits = args.qubits
    if qubits is None and args.run and (Path(args.run) / "config.json").exists():
        qubits = json.loads((Path(args.run) / "config.json").read_text())["model"]["qubits"]
    qubits = qubits or 4
    variances = []
    for path in logs:
        with open(path, newline="") as fh:
            variances += [float(row["q_grad_var"]) for row in csv.DictReader(fh) if row["q_grad_var"]]
    if not variances:
        raise UsageError("the logs carry no quantum gradient variance (classical run?)")
    floor = 2.0 ** (-qubits)
    vmin, vmed = float(np.min(variances)), float(np.median(variances))
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["statistic", "value"])
    for key, value in (
        ("n_epochs", len(variances)),
        ("bp_floor", floor),
        ("min_variance", vmin),
        ("median_variance", vmed),
        ("min_ratio_to_floor", vmin / floor),
        ("median_ratio_to_floor", vmed / floor),
    ):
        w.writerow([key, value if isinstance(value, int) else _g(value)])
    return 0


def cmd_rle(args) -> int:
    if args.action == "decode":
        if args.height is None or args.width is None:
            raise UsageError("rle decode needs --height and --width")
        mask = dataio.decode_rle(sys.stdin.read(), args.height, args.width)
        sys.stdout.buffer.write(dataio.pgm_bytes(mask * 255))
        sys.stdout.flush()
        return 0
    try:
        pixels = dataio.parse_pgm(sys.stdin.buffer.read())
    except ValueError as exc:
        raise UsageError(f"bad PGM on stdin: {exc}") from None
    if args.height is not None and args.width is not None and pixels.shape != (args.height, args.width):
        raise UsageError(f"PGM is {pixels.shape[0]}x{pixels.shape[1]}, flags say {args.height}x{args.width}")
    bad = ~np.isin(pixels, (0, 1, 255))
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise UsageError(f"non-binary pixel value {pixels[r, c]} at row {r}, column {c}")
    print(dataio.encode_rle((pixels > 0).astype(np.uint8)))
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_model_flags(p, merges):
    p.add_argument("--config", help="JSON file with 'model' and 'train' sections; flags win (default: none)")
    p.add_argument("--topology", choices=segnet.TOPOLOGIES, help="decoder topology (default: fpn)")
    p.add_argument("--merge", choices=merges, help="merge operator (default: quantum)")
    p.add_argument("--qubits", type=int, choices=(4, 6), help="circuit width (default: 4)")
    p.add_argument("--reupload", action=argparse.BooleanOptionalAction, default=None,
                   help="re-encode inputs before every layer (default: on)")
    p.add_argument("--folds", type=int, help="cross-validation folds (default: 5)")
    p.add_argument("--seed", type=int, help="global seed (default: 0)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qfpn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr (default: off)")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("synth", help="write a synthetic corpus")
    p.add_argument("--n", type=int, default=200, help="number of samples (default: %(default)s)")
    p.add_argument("--resolution", type=int, default=32, help="image size in pixels (default: %(default)s)")
    p.add_argument("--empty-fraction", type=float, default=0.2, help="share of empty masks (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="generator seed (default: %(default)s)")
    p.add_argument("--out", required=True, help="output corpus directory (required)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="cross-validated training run")
    p.add_argument("--data", required=True, help="corpus directory (required)")
    p.add_argument("--out", required=True, help="run directory (required)")
    _add_model_flags(p, ("quantum", "classical", "identity", "skip"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="matched quantum vs classical FPN pair")
    p.add_argument("--data", required=True, help="corpus directory (required)")
    p.add_argument("--out", required=True, help="output directory (required)")
    p.add_argument("--config", help="JSON config shared by both runs (default: none)")
    p.add_argument("--folds", type=int, help="cross-validation folds (default: 5)")
    p.add_argument("--seed", type=int, help="shared seed (default: 0)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="re-evaluate a run's checkpoints out of fold")
    p.add_argument("--run", required=True, help="run directory written by train (required)")
    p.add_argument("--data", required=True, help="corpus directory (required)")
    p.add_argument("--out", help="report directory (default: the run directory)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diagnose", help="circuit and gradient diagnostics")
    dsub = p.add_subparsers(dest="what", required=True)
    c = dsub.add_parser("circuit", help="expectations and parameter-shift gradients as CSV")
    c.add_argument("--qubits", type=int, default=4, help="number of qubits (default: %(default)s)")
    c.add_argument("--layers", type=int, default=2, help="variational layers (default: %(default)s)")
    c.add_argument("--x", help="comma-separated inputs (default: zeros)")
    c.add_argument("--angles", help="3*qubits*layers comma-separated angles, layer-major (default: zeros)")
    c.add_argument("--angles-seed", type=int, help="draw angles uniformly in [-pi, pi] (default: off)")
    c.add_argument("--upstream", help="weights on each expectation (default: ones)")
    c.add_argument("--reupload", action=argparse.BooleanOptionalAction, default=True,
                   help="re-encode inputs every layer (default: on)")
    c.add_argument("--encoding", choices=("unit", "frequency"), default="unit",
                   help="encoding scale per layer (default: %(default)s)")
    c.set_defaults(func=cmd_diagnose_circuit)
    g = dsub.add_parser("gradients", help="quantum gradient variance against the 2^-n floor")
    src = g.add_mutually_exclusive_group(required=True)
    src.add_argument("--run", help="run directory (reads every fold's log.csv)")
    src.add_argument("--log", help="a single log.csv")
    g.add_argument("--qubits", type=int, help="qubit count for the floor (default: from run config, else 4)")
    g.set_defaults(func=cmd_diagnose_gradients)

    p = sub.add_parser("rle", help="stdin/stdout run-length codec (PGM masks)")
    p.add_argument("action", choices=("encode", "decode"))
    p.add_argument("--height", type=int, help="mask height, required for decode (default: none)")
    p.add_argument("--width", type=int, help="mask width, required for decode (default: none)")
    p.set_defaults(func=cmd_rle)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, dataio.RLEError) as exc:
        print(f"qfpn {args.verb}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, trainer.TrainingDiverged, ValueError) as exc:
        print(f"qfpn {args.verb}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
