"""Training objective: triplet, class-matching, group KL and attention entropy.

Each term returns ``(value, gradient)`` where the gradient is taken with
respect to the batch quantity the term reads (z', c_hat or gamma).
:func:`total_loss` combines them and backpropagates into the parameters.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .network import BatchTrace, backward
from .priors import ConceptGroups, PriorTable

KINK_TOL = 1e-7


class DegenerateBatch(ValueError):
    pass


@dataclass(frozen=True)
class LossBreakdown:
    trip: float
    match: float
    kl: float
    ent: float
    total: float
    lambda_kl: float
    lambda_ent: float

    @classmethod
    def combine(cls, trip, match, kl, ent, lambda_kl, lambda_ent):
        total = trip + match + lambda_kl * kl + lambda_ent * ent
        return cls(float(trip), float(match), float(kl), float(ent), float(total), float(lambda_kl), float(lambda_ent))

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# triplet


def sample_triplets(labels, rng: np.random.Generator) -> np.ndarray:
    """Pick one positive and one negative per anchor, uniformly within the batch.

    Returns an (A, 3) integer array of (anchor, positive, negative) rows.
    Anchors whose class has no other member are skipped.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) < 2:
        raise DegenerateBatch("degenerate batch for triplet: fewer than two samples")
    if np.unique(labels).size < 2:
        raise DegenerateBatch("degenerate batch for triplet")
    idx = np.arange(len(labels))
    rows = []
    for i, y in enumerate(labels):
        pos = idx[(labels == y) & (idx != i)]
        if pos.size == 0:
            continue
        neg = idx[labels != y]
        j = pos[rng.integers(pos.size)]
        k = neg[rng.integers(neg.size)]
        rows.append((i, j, k))
    return np.array(rows, dtype=np.int64).reshape(-1, 3)


def triplet_slacks(z_prime: np.ndarray, triplets: np.ndarray, mu: float) -> np.ndarray:
    a, p, n = triplets.T
    d_pos = np.linalg.norm(z_prime[a] - z_prime[p], axis=1)
    d_neg = np.linalg.norm(z_prime[a] - z_prime[n], axis=1)
    return d_pos - d_neg + mu


def _unit(diff):
    norm = np.linalg.norm(diff, axis=1, keepdims=True)
    out = np.zeros_like(diff)
    nz = norm[:, 0] > 0
    out[nz] = diff[nz] / norm[nz]
    return out


def triplet_loss(z_prime, labels, mu: float = 0.5, rng=None, triplets=None):
    """Mean hinge of ||a - p|| - ||a - n|| + mu over the used anchors."""
    z_prime = np.asarray(z_prime, dtype=np.float64)
    if triplets is None:
        if rng is None:
            raise ValueError("need an rng or precomputed triplets")
        triplets = sample_triplets(labels, rng)
    grad = np.zeros_like(z_prime)
    if len(triplets) == 0:
        return 0.0, grad
    slack = triplet_slacks(z_prime, triplets, mu)
    active = slack > 0
    loss = float(np.sum(slack[active])) / len(triplets)
    a, p, n = triplets[active].T
    u_pos = _unit(z_prime[a] - z_prime[p]) / len(triplets)
    u_neg = _unit(z_prime[a] - z_prime[n]) / len(triplets)
    np.add.at(grad, a, u_pos - u_neg)
    np.add.at(grad, p, -u_pos)
    np.add.at(grad, n, u_neg)
    return loss, grad


# ---------------------------------------------------------------------------
# class matching


def similarities(c_hat, table: PriorTable) -> np.ndarray:
    """s[i, k] = <c_hat_i, P(. | k)>."""
    c_hat = np.asarray(c_hat, dtype=np.float64)
    if c_hat.shape[-1] != table.n_concepts:
        raise ValueError("concept dimension does not match prior table")
    return c_hat @ table.probs


def match_loss(c_hat, labels, table: PriorTable):
    c_hat = np.atleast_2d(np.asarray(c_hat, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    s = similarities(c_hat, table)
    s = s - s.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(s).sum(axis=1))
    n = len(labels)
    loss = float(np.mean(log_z - s[np.arange(n), labels]))
    soft = np.exp(s - log_z[:, None])
    soft[np.arange(n), labels] -= 1.0
    return loss, soft @ table.probs.T / n


# ---------------------------------------------------------------------------
# group KL


def _divergence_cells(p, q, eps):
    """Sum of p ln(p/q) - p + q over clamped cells, and d/dq."""
    pc = np.clip(p, eps, 1.0)
    qc = np.clip(q, eps, 1.0)
    value = np.sum(pc * np.log(pc / qc) - pc + qc)
    inside = (q >= eps) & (q <= 1.0)
    return value, (1.0 - pc / qc) * inside


def class_kl(p, q, groups: ConceptGroups, eps: float):
    """Divergence of priors ``p`` from mean predictions ``q`` for one class.

    Group members are compared cell-by-cell as given; every singleton is
    expanded to the binary pair {c, not c}.
    """
    grad = np.zeros_like(q)
    value = 0.0
    for g in groups.groups:
        g = list(g)
        v, d = _divergence_cells(p[g], q[g], eps)
        value += v
        grad[g] += d
    s = list(groups.singletons)
    if s:
        v1, d1 = _divergence_cells(p[s], q[s], eps)
        v0, d0 = _divergence_cells(1.0 - p[s], 1.0 - q[s], eps)
        value += v1 + v0
        grad[s] += d1 - d0
    return float(value), grad


def kl_loss(c_hat, labels, table: PriorTable, groups: ConceptGroups, eps: float = 1e-6):
    if not 0.0 < eps <= 1e-3:
        raise ValueError("eps must lie in (0, 1e-3]")
    c_hat = np.atleast_2d(np.asarray(c_hat, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    if groups.n_concepts != c_hat.shape[1]:
        raise ValueError("concept groups do not cover the predicted concepts")
    present = np.unique(labels)
    grad = np.zeros_like(c_hat)
    total = 0.0
    for y in present:
        mask = labels == y
        q = c_hat[mask].mean(axis=0)
        value, d_q = class_kl(table.probs[:, y], q, groups, eps)
        total += value
        grad[mask] = d_q / (mask.sum() * present.size)
    return total / present.size, grad


# ---------------------------------------------------------------------------
# attention entropy


def entropy_loss(gamma):
    gamma = np.atleast_2d(np.asarray(gamma, dtype=np.float64))
    if np.any(gamma < 0):
        raise ValueError("attention weights must be non-negative")
    n = gamma.shape[0]
    log_g = np.log(np.where(gamma > 0, gamma, 1.0))
    loss = float(-np.sum(gamma * log_g) / n)
    safe = np.log(np.maximum(gamma, np.finfo(np.float64).tiny))
    return loss, -(safe + 1.0) / n


# ---------------------------------------------------------------------------
# composite


@dataclass
class LossDetails:
    triplets: Optional[np.ndarray]
    refine_grad: np.ndarray
    d_zp: np.ndarray
    d_chat: np.ndarray
    d_gamma: np.ndarray


def total_loss(
    trace: BatchTrace,
    labels,
    table: PriorTable,
    groups: ConceptGroups,
    mu: float = 0.5,
    lambda_kl: float = 0.3,
    lambda_ent: float = 0.01,
    rng=None,
    triplets=None,
    eps: float = 1e-6,
    use_triplet: bool = True,
    details: bool = False,
):
    """Composite objective and its gradient with respect to every weight.

    ``total = trip + match + lambda_kl * kl + lambda_ent * ent``.  Triplet
    picks come from ``rng`` unless passed explicitly via ``triplets``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if use_triplet:
        if triplets is None:
            if rng is None:
                raise ValueError("need an rng or precomputed triplets")
            triplets = sample_triplets(labels, rng)
        trip, d_zp = triplet_loss(trace.z_prime, labels, mu, triplets=triplets)
    else:
        triplets = None
        trip, d_zp = 0.0, np.zeros_like(trace.z_prime)

    match, d_chat = match_loss(trace.c_hat, labels, table)
    if lambda_kl != 0.0:
        kl, d_kl = kl_loss(trace.c_hat, labels, table, groups, eps)
        d_chat = d_chat + lambda_kl * d_kl
    else:
        kl, _ = kl_loss(trace.c_hat, labels, table, groups, eps)
    ent, d_ent = entropy_loss(trace.gamma)
    d_gamma = lambda_ent * d_ent

    breakdown = LossBreakdown.combine(trip, match, kl, ent, lambda_kl, lambda_ent)
    grads, refine_grad = backward(trace, d_zp=d_zp, d_chat=d_chat, d_gamma=d_gamma, return_parts=True)
    if details:
        return breakdown, grads, LossDetails(triplets, refine_grad, d_zp, d_chat, d_gamma)
    return breakdown, grads
