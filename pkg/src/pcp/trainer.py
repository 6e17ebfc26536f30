"""Mini-batch Adam training, multi-seed runs and ablation switches."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import rng as rngs
from .losses import LossBreakdown, total_loss
from .metrics import evaluate
from .network import DimensionError, ParamSet, forward_train, init_params
from .priors import ConceptGroups, PriorTable
from .synthgen import Dataset, LabeledSplit

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 200
    learning_rate: float = 5e-4
    batch_size: int = 64
    lambda_kl: float = 0.3
    lambda_ent: float = 0.01
    mu: float = 0.5
    beta: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    kl_eps: float = 1e-6
    widths: tuple = (64, 32)
    h_prime: Optional[int] = None
    seeds: tuple = (0, 1, 2)
    disable_kl: bool = False
    disable_ent: bool = False

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")

    @property
    def effective_lambda_kl(self) -> float:
        return 0.0 if self.disable_kl else self.lambda_kl

    @property
    def effective_lambda_ent(self) -> float:
        return 0.0 if self.disable_ent else self.lambda_ent

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["widths"] = list(self.widths)
        doc["seeds"] = list(self.seeds)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**doc)

    def replace(self, **changes) -> "TrainConfig":
        doc = self.to_dict()
        doc.update(changes)
        return TrainConfig.from_dict(doc)


class Adam:
    """Adam with bias-corrected moments, one state slot per parameter block."""

    def __init__(self, lr=5e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            params[k] = params[k] - self.lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)


@dataclass
class TrainLog:
    seed: int
    config: dict
    epochs: list
    params: ParamSet
    initial_params: ParamSet
    wall_clock_s: float = 0.0
    skipped_triplet_batches: int = 0

    def to_json(self) -> str:
        # wall-clock lives in the run manifest so the log stays byte-reproducible
        doc = {
            "seed": self.seed,
            "config": self.config,
            "skipped_triplet_batches": self.skipped_triplet_batches,
            "epochs": self.epochs,
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def _mean_breakdown(rows: list[LossBreakdown]) -> dict:
    keys = ("trip", "match", "kl", "ent", "total")
    out = {k: float(np.mean([getattr(r, k) for r in rows])) for k in keys}
    out["lambda_kl"] = rows[0].lambda_kl
    out["lambda_ent"] = rows[0].lambda_ent
    return out


def as_training_data(data):
    """Reduce whatever is passed to (train, val) views without concepts."""
    if isinstance(data, Dataset):
        return data.train.labeled(), data.val.labeled()
    if isinstance(data, LabeledSplit):
        return data, None
    train, val = data
    return train, val


def _batch_step(X, y, params, table, groups, config, surrogate_rng, triplet_rng):
    trace = forward_train(X, y, params, table, surrogate_rng)
    single_class = np.unique(y).size < 2
    return single_class, total_loss(
        trace, y, table, groups, config.mu,
        config.effective_lambda_kl, config.effective_lambda_ent,
        rng=triplet_rng, eps=config.kl_eps, use_triplet=not single_class,
    )


def train(config: TrainConfig, data, table: PriorTable, groups: ConceptGroups, seed: int) -> TrainLog:
    """Train one model; every random draw comes from ``seed``'s named streams."""
    start = time.perf_counter()
    train_split, val_split = as_training_data(data)
    if np.unique(train_split.y).size < 2:
        raise ValueError("training split must contain at least two classes")
    if table.n_concepts != groups.n_concepts:
        raise DimensionError("groups do not match the prior table")
    if not np.all(np.isfinite(train_split.x)):
        raise ValueError("training features contain non-finite values")
    if train_split.y.max() >= table.n_classes:
        raise DimensionError("labels exceed the number of classes in the prior table")

    params = init_params(train_split.x.shape[1], table.n_concepts, rngs.stream(seed, "init"),
                         config.widths, config.h_prime, config.beta)
    initial = params.copy()
    opt = Adam(config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps)
    shuffle_rng = rngs.stream(seed, "shuffle")
    surrogate_rng = rngs.stream(seed, "surrogate")
    triplet_rng = rngs.stream(seed, "triplet")
    val_rng = rngs.stream(seed, "eval")

    n = len(train_split)
    epochs, skipped_total = [], 0
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n)
        rows, skipped = [], 0
        for b, lo in enumerate(range(0, n, config.batch_size)):
            idx = order[lo:lo + config.batch_size]
            try:
                single, (breakdown, grads) = _batch_step(
                    train_split.x[idx], train_split.y[idx], params, table, groups, config, surrogate_rng, triplet_rng
                )
            except ValueError as exc:
                if "non-finite" not in str(exc):
                    raise
                raise TrainingDiverged(f"non-finite values at epoch {epoch}, batch {b}: {exc}") from None
            if not np.isfinite(breakdown.total):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}: {breakdown}")
            skipped += int(single)
            opt.step(params.arrays, grads)
            if not params.is_finite():
                raise TrainingDiverged(f"non-finite parameters after epoch {epoch}, batch {b}")
            rows.append(breakdown)
        if skipped:
            log.info("epoch %d: %d single-class batch(es) trained without the triplet term", epoch, skipped)
        skipped_total += skipped
        entry = {"epoch": epoch, "train": _mean_breakdown(rows), "skipped_triplet_batches": skipped}
        if val_split is not None and len(val_split) >= 2:
            _, (vb, _) = _batch_step(val_split.x, val_split.y, params, table, groups, config, val_rng, val_rng)
            entry["val"] = vb.to_dict()
        epochs.append(entry)

    return TrainLog(seed, config.to_dict(), epochs, params, initial, time.perf_counter() - start, skipped_total)


def aggregate(reports: list[dict]) -> dict:
    keys = list(reports[0])
    mean = {k: float(np.mean([r[k] for r in reports])) for k in keys}
    std = {k: float(np.std([r[k] for r in reports], ddof=1)) for k in keys}
    return {"mean": mean, "std": std}


def _train_and_eval(args):
    config, dataset, table, groups, seed = args
    log_ = train(config, dataset, table, groups, seed)
    report = evaluate(log_.params, dataset.test, table, groups, seed=seed, train_split=dataset.train)
    return log_, report


def run_seeds(config: TrainConfig, dataset: Dataset, table: PriorTable, groups: ConceptGroups,
              seeds=None, n_jobs: int = 1) -> dict:
    """Train and evaluate once per seed; report mean and sample std of every metric.

    Returns a dict with ``seeds``, ``per_seed`` metric dicts, ``mean``, ``std``,
    and the raw ``logs`` / ``reports`` for callers that write artifacts.
    """
    seeds = list(config.seeds if seeds is None else seeds)
    if len(seeds) < 2:
        raise ValueError("at least two seeds for aggregation")
    jobs = [(config, dataset, table, groups, s) for s in seeds]
    if n_jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_train_and_eval, jobs))
    else:
        results = [_train_and_eval(j) for j in jobs]
    per_seed = [r.scalars() for _, r in results]
    out = {"seeds": seeds, "per_seed": per_seed}
    out.update(aggregate(per_seed))
    out["logs"] = [lg for lg, _ in results]
    out["reports"] = [r for _, r in results]
    return out
