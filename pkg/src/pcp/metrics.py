"""Concept and class metrics, prior matching, CBM head and ablation diagnostics."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import minimize

from . import rng as rngs
from .losses import similarities
from .network import DimensionError, ParamSet, forward_infer, forward_train
from .priors import PriorTable, sample_surrogates

log = logging.getLogger(__name__)


def binarize(c_hat, threshold: float = 0.5) -> np.ndarray:
    """Ties (exactly ``threshold``) count as positive."""
    return (np.asarray(c_hat) >= threshold).astype(np.int64)


def _f1(tp, fp, fn):
    denom = 2 * tp + fp + fn
    if denom == 0:
        return 1.0
    return 2 * tp / denom


def concept_metrics(c_hats, c_trues, threshold: float = 0.5) -> tuple[float, float]:
    """Cell-wise accuracy and macro F1 over concepts.

    A concept with no positives in truth or prediction scores F1 = 1.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    c_hats = np.atleast_2d(np.asarray(c_hats, dtype=np.float64))
    c_trues = np.atleast_2d(np.asarray(c_trues)).astype(np.int64)
    if c_hats.shape != c_trues.shape:
        raise ValueError(f"shape mismatch {c_hats.shape} vs {c_trues.shape}")
    pred = binarize(c_hats, threshold)
    acc = float(np.mean(pred == c_trues))
    tp = np.sum((pred == 1) & (c_trues == 1), axis=0)
    fp = np.sum((pred == 1) & (c_trues == 0), axis=0)
    fn = np.sum((pred == 0) & (c_trues == 1), axis=0)
    empty = (tp + fp + fn) == 0
    if np.any(empty):
        log.info("F1 convention: %d concept(s) with no positives scored as 1", int(empty.sum()))
    f1 = [_f1(a, b, c) for a, b, c in zip(tp, fp, fn)]
    return acc, float(np.mean(f1))


def class_macro_f1(pred, labels, n_classes: int) -> float:
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    scores = []
    for k in range(n_classes):
        tp = np.sum((pred == k) & (labels == k))
        fp = np.sum((pred == k) & (labels != k))
        fn = np.sum((pred != k) & (labels == k))
        scores.append(_f1(tp, fp, fn))
    return float(np.mean(scores))


def prior_match_classify(c_hat, table: PriorTable):
    """argmax_k <c_hat, P(. | k)>; ties go to the lowest class index.

    Accepts one vector (returns an int) or a batch (returns an array).
    """
    c_hat = np.asarray(c_hat, dtype=np.float64)
    s = similarities(c_hat, table)
    pred = np.argmax(s, axis=-1)
    n_ties = np.sum(s == s.max(axis=-1, keepdims=True), axis=-1) > 1
    if np.any(n_ties):
        log.info("prior matching: %d tie(s) broken toward the lowest class index", int(np.sum(n_ties)))
    return int(pred) if c_hat.ndim == 1 else pred


# ---------------------------------------------------------------------------
# CBM head


@dataclass(frozen=True, eq=False)
class CbmHead:
    weight: np.ndarray  # (L, M)
    bias: np.ndarray  # (L,)

    def logits(self, c_hat):
        return np.asarray(c_hat, dtype=np.float64) @ self.weight.T + self.bias


@dataclass
class CbmConfig:
    l2: float = 1e-3
    max_iter: int = 1000
    tol: float = 1e-10


def fit_cbm_head(c_hats, labels, config: CbmConfig = CbmConfig(), n_classes: Optional[int] = None) -> CbmHead:
    """Multinomial logistic regression from predicted concepts to classes.

    L-BFGS from a zero start, so repeated fits are identical.
    """
    X = np.atleast_2d(np.asarray(c_hats, dtype=np.float64))
    y = np.asarray(labels, dtype=np.int64)
    if np.unique(y).size < 2:
        raise ValueError("CBM head needs at least two classes in the training labels")
    L = int(n_classes or y.max() + 1)
    N, M = X.shape
    onehot = np.eye(L)[y]

    def objective(theta):
        W = theta[: L * M].reshape(L, M)
        b = theta[L * M:]
        a = X @ W.T + b
        a = a - a.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(a).sum(axis=1, keepdims=True))
        logp = a - log_z
        loss = -np.sum(onehot * logp) / N + 0.5 * config.l2 * np.sum(W * W)
        d = (np.exp(logp) - onehot) / N
        gW = d.T @ X + config.l2 * W
        return loss, np.concatenate([gW.ravel(), d.sum(axis=0)])

    res = minimize(objective, np.zeros(L * M + L), jac=True, method="L-BFGS-B",
                   options={"maxiter": config.max_iter, "ftol": config.tol, "gtol": 1e-9})
    return CbmHead(res.x[: L * M].reshape(L, M).copy(), res.x[L * M:].copy())


def classify(head: CbmHead, c_hat):
    pred = np.argmax(head.logits(c_hat), axis=-1)
    return int(pred) if np.ndim(c_hat) == 1 else pred


# ---------------------------------------------------------------------------
# diagnostics


def attention_entropy(gamma) -> np.ndarray:
    gamma = np.atleast_2d(np.asarray(gamma, dtype=np.float64))
    return -np.sum(gamma * np.log(np.where(gamma > 0, gamma, 1.0)), axis=1)


def ablation_diagnostics(trace, labels, table: PriorTable, groups=None):
    """Mean attention entropy and per-class prior TV distance.

    TV for one class is the mean over concepts of |mean c_hat_m - P(c_m | y)|,
    i.e. the binary total variation per concept, averaged.  ``groups`` is
    accepted for interface symmetry; TV is computed per concept either way.
    """
    labels = np.asarray(labels, dtype=np.int64)
    entropy = float(np.mean(attention_entropy(trace.gamma)))
    tv = {}
    for k, name in enumerate(table.class_names):
        mask = labels == k
        if not mask.any():
            raise ValueError(f"class {name!r} has no samples")
        tv[name] = float(np.mean(np.abs(trace.c_hat[mask].mean(axis=0) - table.probs[:, k])))
    return entropy, tv


def prior_sampling_baseline(labels, c_trues, table: PriorTable, rng: np.random.Generator, threshold: float = 0.5):
    """Concept metrics of predicting a surrogate drawn from the true class priors."""
    guess = sample_surrogates(table, labels, rng)
    return concept_metrics(guess, c_trues, threshold)


# ---------------------------------------------------------------------------
# report


@dataclass
class MetricsReport:
    concept_acc: float
    concept_macro_f1: float
    class_f1: float
    mean_attention_entropy: float
    per_class_prior_tv: dict
    cbm_class_f1: Optional[float] = None
    baseline_concept_acc: Optional[float] = None
    baseline_concept_f1: Optional[float] = None
    extra: dict = field(default_factory=dict)

    @property
    def tv_mean(self) -> float:
        return float(np.mean(list(self.per_class_prior_tv.values())))

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["tv_mean"] = self.tv_mean
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def scalars(self) -> dict:
        out = {
            "concept_acc": self.concept_acc,
            "concept_f1": self.concept_macro_f1,
            "class_f1": self.class_f1,
            "entropy": self.mean_attention_entropy,
            "tv_mean": self.tv_mean,
        }
        for key in ("cbm_class_f1", "baseline_concept_f1"):
            if getattr(self, key) is not None:
                out[key] = getattr(self, key)
        return out


CSV_HEADER = "dataset,seed,concept_acc,concept_f1,class_f1,entropy,tv_mean"


def csv_row(dataset: str, seed, report: MetricsReport) -> str:
    s = report.scalars()
    return ",".join([dataset, str(seed)] + [repr(float(s[k])) for k in CSV_HEADER.split(",")[2:]])


def evaluate(params: ParamSet, split, table: PriorTable, groups=None, seed: int = 0,
             train_split=None, threshold: float = 0.5) -> MetricsReport:
    """Score a frozen model on a split that carries ground-truth concepts.

    Concept and class metrics use the prior-free inference pass.  The
    attention and alignment diagnostics use a training-mode pass with
    surrogates drawn from the split's labels.  When ``train_split`` is
    given a CBM head is fitted on its predicted concepts.
    """
    if split.x.shape[1] != params.input_dim:
        raise DimensionError(f"data has dimension {split.x.shape[1]}, model expects {params.input_dim}")
    if split.c.shape[1] != params.n_concepts or table.n_concepts != params.n_concepts:
        raise DimensionError("concept count differs between model, data and priors")
    c_hat = forward_infer(split.x, params).c_hat
    acc, f1 = concept_metrics(c_hat, split.c, threshold)
    class_f1 = class_macro_f1(prior_match_classify(c_hat, table), split.y, table.n_classes)
    trace = forward_train(split.x, split.y, params, table, rngs.stream(seed, "eval"))
    entropy, tv = ablation_diagnostics(trace, split.y, table, groups)
    cbm_f1 = None
    if train_split is not None:
        head = fit_cbm_head(forward_infer(train_split.x, params).c_hat, train_split.y, n_classes=table.n_classes)
        cbm_f1 = class_macro_f1(classify(head, c_hat), split.y, table.n_classes)
    b_acc, b_f1 = prior_sampling_baseline(split.y, split.c, table, rngs.stream(seed, "baseline"), threshold)
    return MetricsReport(acc, f1, class_f1, entropy, tv, cbm_f1, b_acc, b_f1)
