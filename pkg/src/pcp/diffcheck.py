"""Central finite-difference oracle for the analytic gradients."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from . import rng as rngs
from .losses import KINK_TOL, sample_triplets, total_loss, triplet_slacks
from .network import ParamSet, forward_batch, init_params
from .priors import ConceptGroups, PriorTable, sample_surrogates


class NonFiniteLoss(FloatingPointError):
    pass


def finite_diff(loss_at: Callable[[ParamSet], float], params: ParamSet, h: float = 1e-6) -> np.ndarray:
    """(f(theta + h e_i) - f(theta - h e_i)) / 2h for every coordinate i."""
    if not 1e-8 <= h <= 1e-4:
        raise ValueError("step h must lie in [1e-8, 1e-4]")
    theta = params.flat()
    grad = np.empty_like(theta)
    for i in range(theta.size):
        step = np.zeros_like(theta)
        step[i] = h
        f_plus = loss_at(params.with_flat(theta + step))
        f_minus = loss_at(params.with_flat(theta - step))
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NonFiniteLoss(f"non-finite loss while perturbing coordinate {i}")
        grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def relative_error(g_analytic, g_fd) -> np.ndarray:
    g_analytic = np.asarray(g_analytic)
    g_fd = np.asarray(g_fd)
    scale = np.maximum(1e-12, np.maximum(np.abs(g_analytic), np.abs(g_fd)))
    return np.abs(g_analytic - g_fd) / scale


@dataclass
class GradCheckConfig:
    input_dim: int = 4
    n_concepts: int = 3
    n_classes: int = 2
    batch: int = 6
    widths: tuple = (5, 4)
    h_prime: Optional[int] = None
    groups: tuple = ((0, 1),)
    beta: float = 1.0
    mu: float = 0.5
    lambda_kl: float = 0.3
    lambda_ent: float = 0.01
    eps: float = 1e-6
    h: float = 1e-6
    threshold: float = 1e-5

    @classmethod
    def from_dict(cls, doc: dict) -> "GradCheckConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown gradcheck config keys: {sorted(unknown)}")
        doc = dict(doc)
        if "widths" in doc:
            doc["widths"] = tuple(doc["widths"])
        if "groups" in doc:
            doc["groups"] = tuple(tuple(g) for g in doc["groups"])
        return cls(**doc)


@dataclass
class GradReport:
    block_max: dict
    global_max: float
    skipped_kink: int
    n_coords: int
    threshold: float
    passed: bool
    refine_path_grad_max: float
    loss: dict = field(default_factory=dict)
    elapsed_s: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def _kink_coords(params, X, c_tilde, triplets, mu, h):
    """Flag coordinates whose +/- h perturbation reaches the hinge kink."""
    theta = params.flat()
    flags = np.zeros(theta.size, dtype=bool)
    if triplets is None or len(triplets) == 0:
        return flags
    for i in range(theta.size):
        step = np.zeros_like(theta)
        step[i] = h
        s_plus = triplet_slacks(forward_batch(X, params.with_flat(theta + step), c_tilde).z_prime, triplets, mu)
        s_minus = triplet_slacks(forward_batch(X, params.with_flat(theta - step), c_tilde).z_prime, triplets, mu)
        near = (np.abs(s_plus) < KINK_TOL) | (np.abs(s_minus) < KINK_TOL) | (np.sign(s_plus) != np.sign(s_minus))
        flags[i] = bool(np.any(near))
    return flags


def grad_check(config: GradCheckConfig = GradCheckConfig(), seed: int = 0, fault: Optional[str] = None) -> GradReport:
    """Compare analytic and finite-difference gradients on a random small model.

    Surrogates and triplet picks are drawn once and frozen for every loss
    evaluation.  ``fault`` names a parameter block whose analytic gradient
    is sign-flipped, to prove the check can fail.
    """
    start = time.perf_counter()
    cfg = config
    data_rng = rngs.stream(seed, "data")
    probs = data_rng.uniform(0.05, 0.95, size=(cfg.n_concepts, cfg.n_classes))
    table = PriorTable(
        [f"c{m}" for m in range(cfg.n_concepts)], [f"y{k}" for k in range(cfg.n_classes)], probs
    )
    groups = ConceptGroups.from_groups(cfg.groups, cfg.n_concepts)
    X = data_rng.normal(size=(cfg.batch, cfg.input_dim))
    labels = np.arange(cfg.batch) % cfg.n_classes
    params = init_params(cfg.input_dim, cfg.n_concepts, rngs.stream(seed, "init"), cfg.widths, cfg.h_prime, cfg.beta)
    # zero biases would hide bias-gradient errors
    for k in params.arrays:
        if k.endswith(".bias"):
            params.arrays[k] = data_rng.uniform(-0.5, 0.5, size=params.arrays[k].shape)
    c_tilde = sample_surrogates(table, labels, rngs.stream(seed, "surrogate"))
    triplets = sample_triplets(labels, rngs.stream(seed, "triplet"))

    def evaluate(p: ParamSet, details=False):
        trace = forward_batch(X, p, c_tilde)
        return total_loss(
            trace, labels, table, groups, cfg.mu, cfg.lambda_kl, cfg.lambda_ent,
            triplets=triplets, eps=cfg.eps, details=details,
        )

    breakdown, grads, det = evaluate(params, details=True)
    if fault is not None:
        if fault not in grads:
            raise ValueError(f"unknown parameter block {fault!r}")
        grads[fault] = -grads[fault]
    g_analytic = np.concatenate([g.ravel() for g in grads.values()])
    g_fd = finite_diff(lambda p: evaluate(p)[0].total, params, cfg.h)
    kink = _kink_coords(params, X, c_tilde, triplets, cfg.mu, cfg.h)
    err = relative_error(g_analytic, g_fd)
    err_used = np.where(kink, 0.0, err)

    block_max, pos = {}, 0
    for name, g in grads.items():
        block_max[name] = float(err_used[pos:pos + g.size].max()) if g.size else 0.0
        pos += g.size
    global_max = float(err_used.max())
    return GradReport(
        block_max=block_max,
        global_max=global_max,
        skipped_kink=int(kink.sum()),
        n_coords=int(g_analytic.size),
        threshold=cfg.threshold,
        passed=bool(global_max < cfg.threshold),
        refine_path_grad_max=float(np.abs(det.refine_grad).max()),
        loss=breakdown.to_dict(),
        elapsed_s=time.perf_counter() - start,
    )
