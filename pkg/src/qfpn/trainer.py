"""Two-stage training with differential learning rates, OOF evaluation and
quantum-gradient diagnostics.

Run directory layout::

    config.json                   resolved model/train config + parameter summary
    folds.json                    id -> fold assignment
    fold<k>/manifest.json         checkpoint manifest
    fold<k>/checkpoint.bin        little-endian float64 parameters
    fold<k>/log.csv               one row per epoch
    oof_report.json               pooled out-of-fold evaluation

Nothing written here depends on wall-clock time, so reruns with the same
seed are byte-identical.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import dataio, metrics, segnet
from . import tensorgraph as tg
from .losses import staged_loss
from .segnet import ModelConfig, SegModel

log = logging.getLogger(__name__)

BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
LOG_COLUMNS = [
    "epoch", "stage", "lr", "loss_total", "bce", "dice", "lovasz",
    "val_tgs_map", "q_grad_norm", "q_grad_var",
]


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    stage1_epochs: int = 12
    stage2_epochs: int = 6
    lr_encoder: float = 3e-5
    lr_decoder_quantum: float = 3e-4
    stage2_lr: float = 9e-5
    eta_min: float = 3e-7
    t0: int = 10
    clip_norm: float = 1.0
    batch_size: int = 8
    seed: int = 0
    folds: int = 5
    weight_decay: float = 1e-2

    def __post_init__(self):
        for name in ("lr_encoder", "lr_decoder_quantum", "stage2_lr", "eta_min", "clip_norm"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.stage1_epochs < 1 or self.stage2_epochs < 1:
            raise ValueError("epoch counts must be >= 1")
        if self.t0 < 1 or self.batch_size < 1 or self.folds < 2 or self.weight_decay < 0:
            raise ValueError("need t0 >= 1, batch_size >= 1, folds >= 2 and weight_decay >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# schedules, clipping, optimizer


def cosine_warm_restart_lr(base_lr: float, eta_min: float, t0: int, epoch: int) -> float:
    """Cosine annealing restarted every ``t0`` epochs (constant period)."""
    if t0 <= 0:
        raise ValueError("t0 must be positive")
    e = epoch % t0
    return eta_min + 0.5 * (base_lr - eta_min) * (1.0 + math.cos(math.pi * e / t0))


def cosine_decay_lr(base_lr: float, eta_min: float, total_epochs: int, epoch: int) -> float:
    return eta_min + 0.5 * (base_lr - eta_min) * (1.0 + math.cos(math.pi * epoch / total_epochs))


def clip_gradients(grads, max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm <= max_norm:
        return 1.0
    factor = max_norm / norm
    for g in grads:
        g *= factor
    return factor


def optimizer_step(params, grads, state: dict, lr_per_group: dict, weight_decay: float) -> None:
    """One AdamW update, in place.

    Weight decay is decoupled (``p *= 1 - lr * wd``) and skipped for
    parameters flagged ``decay=False`` and for the quantum group.
    """
    b1, b2 = BETAS
    for p, g in zip(params, grads):
        if g.shape != p.values.shape:
            raise ValueError(f"gradient {g.shape} does not match parameter {p.name} {p.values.shape}")
        m, v, t = state.get(p.name, (np.zeros_like(g), np.zeros_like(g), 0))
        if m.shape != g.shape:
            raise ValueError(f"optimizer state for {p.name} has shape {m.shape}")
        t += 1
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state[p.name] = (m, v, t)
        lr = lr_per_group[p.group]
        if weight_decay and p.decay and p.group != "quantum":
            p.node.values *= 1.0 - lr * weight_decay
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p.node.values -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


@dataclass
class QuantumGradStats:
    epoch: int
    l2_norm: float
    variance: float
    n_qubits: int = 4

    @property
    def bp_floor(self) -> float:
        return 2.0 ** (-self.n_qubits)


def quantum_grad_stats(grads, epoch: int = 0, n_qubits: int = 4) -> QuantumGradStats:
    """Norm and population variance of the flattened quantum gradients."""
    flat = np.concatenate([np.ravel(g) for g in grads]) if len(grads) else np.array([])
    if flat.size == 0:
        raise ValueError("no quantum gradients to summarize")
    return QuantumGradStats(epoch, float(np.sqrt(np.sum(flat**2))), float(np.var(flat)), n_qubits)


# ---------------------------------------------------------------------------
# helpers


def is_gate_param(name: str) -> bool:
    return ".gate" in name


def shared_init_hash(model: SegModel) -> str:
    h = hashlib.sha256()
    for name in sorted(model.params):
        if not is_gate_param(name):
            h.update(name.encode())
            h.update(np.ascontiguousarray(model.params[name].values).tobytes())
    return h.hexdigest()


def _group_lrs(cfg: TrainConfig, stage: int, epoch: int) -> dict:
    if stage == 1:
        dec = cosine_warm_restart_lr(cfg.lr_decoder_quantum, cfg.eta_min, cfg.t0, epoch)
        enc = cosine_warm_restart_lr(cfg.lr_encoder, cfg.eta_min, cfg.t0, epoch)
    else:
        # keep the stage-1 encoder/decoder ratio at the reduced base rate
        enc_base = cfg.stage2_lr * cfg.lr_encoder / cfg.lr_decoder_quantum
        dec = cosine_decay_lr(cfg.stage2_lr, cfg.eta_min, cfg.stage2_epochs, epoch)
        enc = cosine_decay_lr(enc_base, cfg.eta_min, cfg.stage2_epochs, epoch)
    return {"encoder": enc, "decoder": dec, "quantum": dec}


def _batched(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def predict_logits(model: SegModel, x: np.ndarray, batch_size: int) -> np.ndarray:
    return np.concatenate([segnet.forward(model, x[s]).values for s in _batched(len(x), batch_size)])


def mean_loss(model: SegModel, x, y, batch_size: int, stage: int = 1) -> float:
    total = 0.0
    for s in _batched(len(x), batch_size):
        _, br = staged_loss(segnet.forward(model, x[s]), y[s], stage)
        total += br.total * len(x[s])
    return total / len(x)


def _fmt(v) -> str:
    return "" if v is None else repr(float(v)) if isinstance(v, float) else str(v)


# ---------------------------------------------------------------------------
# training


@dataclass
class FoldResult:
    fold: int
    initial_loss: float
    final_loss: float
    batch_order_hash: str
    shared_init_hash: str
    quantum_update_stage1: float | None
    quantum_update_stage2: float | None
    grad_stats: list = field(default_factory=list)


def train_fold(model_cfg: ModelConfig, cfg: TrainConfig, x, y, train_idx, val_idx, fold: int):
    """Train one fold from scratch; returns the model, per-epoch log rows and a summary."""
    model = segnet.build_model(replace(model_cfg, seed=cfg.seed * 1009 + fold))
    params = model.parameters()
    quantum = [p for p in params if p.group == "quantum"]
    data_rng = np.random.default_rng([cfg.seed, fold, 1])
    order_hash = hashlib.sha256()
    init_hash = shared_init_hash(model)
    opt_state: dict = {}
    x_tr, y_tr = x[train_idx], y[train_idx]
    initial = mean_loss(model, x_tr, y_tr, cfg.batch_size)
    rows, stats, updates = [], [], {}

    single_stage = model_cfg.topology == "unet_skip"
    schedule = [(1, e) for e in range(cfg.stage1_epochs)]
    if not single_stage:
        schedule += [(2, e) for e in range(cfg.stage2_epochs)]

    stage_start = {}
    for global_epoch, (stage, epoch) in enumerate(schedule):
        if epoch == 0:
            stage_start[stage] = [p.values.copy() for p in quantum]
        lrs = _group_lrs(cfg, stage, epoch)
        perm = data_rng.permutation(len(train_idx))
        flips = data_rng.random(len(train_idx)) < 0.5
        order_hash.update(perm.astype("<i8").tobytes())
        order_hash.update(flips.tobytes())
        sums = np.zeros(4)
        q_acc = [np.zeros_like(p.values) for p in quantum]
        n_steps = 0
        for s in _batched(len(perm), cfg.batch_size):
            idx = perm[s]
            xb, yb = x_tr[idx].copy(), y_tr[idx].copy()
            xb[flips[s]] = xb[flips[s]][..., ::-1]
            yb[flips[s]] = yb[flips[s]][..., ::-1]
            model.zero_grad()
            loss, br = staged_loss(segnet.forward(model, xb), yb, stage)
            if not np.isfinite(br.total):
                raise TrainingDiverged(
                    f"non-finite loss in fold {fold}, stage {stage}, epoch {epoch}: "
                    f"bce={br.bce} dice={br.dice} lovasz={br.lovasz}"
                )
            tg.backward(loss)
            grads = [p.grad for p in params]
            for acc, p in zip(q_acc, quantum):
                acc += p.grad
            clip_gradients(grads, cfg.clip_norm)
            optimizer_step(params, grads, opt_state, lrs, cfg.weight_decay)
            sums += [br.total, br.bce, br.dice, br.lovasz]
            n_steps += 1
        means = sums / n_steps

        q_norm = q_var = None
        if quantum:
            st = quantum_grad_stats([a / n_steps for a in q_acc], global_epoch, model_cfg.qubits)
            stats.append(st)
            q_norm, q_var = st.l2_norm, st.variance
        val = _val_score(model, x[val_idx], y[val_idx], cfg.batch_size)
        rows.append([global_epoch, stage, lrs["decoder"], *means, val, q_norm, q_var])
        log.info("fold %d epoch %d stage %d loss %.4f", fold, global_epoch, stage, means[0])
        if epoch == (cfg.stage1_epochs if stage == 1 else cfg.stage2_epochs) - 1 and quantum:
            updates[stage] = float(
                np.sqrt(sum(np.sum((p.values - s0) ** 2) for p, s0 in zip(quantum, stage_start[stage])))
            )

    final = mean_loss(model, x_tr, y_tr, cfg.batch_size)
    result = FoldResult(
        fold, initial, final, order_hash.hexdigest(), init_hash,
        updates.get(1), updates.get(2), [asdict(s) | {"bp_floor": s.bp_floor} for s in stats],
    )
    return model, rows, result


def _val_score(model, x_val, y_val, batch_size) -> float:
    probs = 1.0 / (1.0 + np.exp(-predict_logits(model, x_val, batch_size)))
    return float(np.mean([metrics.tgs_precision(p[0] > 0.5, g[0]) for p, g in zip(probs, y_val)]))


@dataclass
class RunResult:
    run_dir: Path
    eval: metrics.EvalResult
    folds: list
    model_summary: dict


def train(model_cfg: ModelConfig, cfg: TrainConfig, records, out_dir, plan: dataio.FoldPlan | None = None) -> RunResult:
    """Cross-validated training; writes the run directory and returns its summary."""
    threads = int(os.environ.get("QFPN_THREADS", "1"))
    with threadpool_limits(limits=threads):
        return _train(model_cfg, cfg, records, Path(out_dir), plan)


def _train(model_cfg, cfg, records, out: Path, plan) -> RunResult:
    records = list(records)
    if plan is None:
        plan = dataio.stratified_folds(records, cfg.folds, cfg.seed)
    missing = [r.id for r in records if r.id not in plan.assignments]
    if missing or plan.k != cfg.folds:
        raise ValueError(f"fold plan does not cover the corpus (k={plan.k}, missing {len(missing)} ids)")
    out.mkdir(parents=True, exist_ok=True)
    res = model_cfg.resolution
    x = np.stack([dataio.assemble_input(r, res) for r in records])
    y = np.stack([dataio.target_mask(r, res)[None].astype(np.float64) for r in records])
    folds = np.array([plan.assignments[r.id] for r in records])

    summary = segnet.build_model(model_cfg).summary()
    (out / "config.json").write_text(json.dumps(
        {"model": model_cfg.to_dict(), "train": cfg.to_dict(), "n_samples": len(records), "model_summary": summary},
        indent=2,
    ) + "\n")
    (out / "folds.json").write_text(json.dumps(plan.assignments, indent=2) + "\n")

    oof = np.zeros((len(records), res, res))
    fold_results = []
    for k in range(plan.k):
        val_idx = np.flatnonzero(folds == k)
        train_idx = np.flatnonzero(folds != k)
        if len(val_idx) == 0 or len(train_idx) == 0:
            raise ValueError(f"fold {k} has an empty train or validation split")
        fold_dir = out / f"fold{k}"
        model, rows, fr = train_fold(model_cfg, cfg, x, y, train_idx, val_idx, k)
        segnet.save_checkpoint(model, fold_dir)
        with open(fold_dir / "log.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_COLUMNS)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
        oof[val_idx] = np.concatenate(
            [metrics.tta_hflip(model, x[val_idx][s])[:, 0] for s in _batched(len(val_idx), cfg.batch_size)]
        )
        fold_results.append(fr)

    result = metrics.evaluate([r.id for r in records], oof, y[:, 0])
    report = result.to_dict() | {
        "merge_kind": model_cfg.merge_kind,
        "topology": model_cfg.topology,
        "n_quantum_params": summary["n_quantum_params"],
        "folds": [asdict(f) for f in fold_results],
    }
    (out / "oof_report.json").write_text(json.dumps(report, indent=2) + "\n")
    return RunResult(out, result, fold_results, summary)
