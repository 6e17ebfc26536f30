"""Synthetic benchmark with known class priors and ground-truth concepts.

Samples follow a noisy linear model ``x = A c + noise``: the class is drawn
first, then concepts from the class priors (categorical inside each declared
group, Bernoulli for singletons).  Ground-truth concepts live only on
:class:`Split`; the trainer receives :class:`LabeledSplit`, which has none.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import rng as rngs
from .priors import ConceptGroups, PriorTable

SPLITS = ("train", "val", "test")
SPLIT_FRACTIONS = (0.70, 0.15, 0.15)


class SpecError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LabeledSplit:
    """What the trainer is allowed to see: features and class labels only."""

    x: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.y)


@dataclass(frozen=True, eq=False)
class Split:
    x: np.ndarray
    y: np.ndarray
    c: np.ndarray

    def __len__(self):
        return len(self.y)

    def labeled(self) -> LabeledSplit:
        return LabeledSplit(self.x, self.y)


@dataclass(frozen=True, eq=False)
class Dataset:
    train: Split
    val: Split
    test: Split

    def split(self, name: str) -> Split:
        if name not in SPLITS:
            raise KeyError(name)
        return getattr(self, name)

    def combined(self) -> Split:
        parts = [self.train, self.val, self.test]
        return Split(
            np.concatenate([p.x for p in parts]),
            np.concatenate([p.y for p in parts]),
            np.concatenate([p.c for p in parts]),
        )


@dataclass(frozen=True, eq=False)
class SynthSpec:
    priors: PriorTable
    groups: ConceptGroups
    feature_dim: int = 16
    noise_sigma: float = 0.1
    n_samples: int = 3000
    class_balance: Optional[np.ndarray] = None
    mixing: Optional[np.ndarray] = None  # (D, M); drawn from the seed when absent

    @property
    def n_classes(self) -> int:
        return self.priors.n_classes

    @property
    def n_concepts(self) -> int:
        return self.priors.n_concepts

    def balance(self) -> np.ndarray:
        if self.class_balance is None:
            return np.full(self.n_classes, 1.0 / self.n_classes)
        return np.asarray(self.class_balance, dtype=np.float64)

    def validate(self) -> None:
        b = self.balance()
        if b.shape != (self.n_classes,) or np.any(b < 0) or abs(b.sum() - 1.0) > 1e-9:
            raise SpecError("class_balance must be a simplex vector over the classes")
        if self.noise_sigma < 0:
            raise SpecError("noise_sigma must be non-negative")
        if self.n_samples < 1 or self.feature_dim < 1:
            raise SpecError("n_samples and feature_dim must be positive")
        if self.groups.n_concepts != self.n_concepts:
            raise SpecError("groups do not partition the prior table's concepts")
        if self.mixing is not None and np.shape(self.mixing) != (self.feature_dim, self.n_concepts):
            raise SpecError(
                f"mixing matrix must be {self.feature_dim}x{self.n_concepts}, got {np.shape(self.mixing)}"
            )
        for g in self.groups.groups:
            if np.any(self.priors.probs[list(g)].sum(axis=0) <= 0):
                raise SpecError("a group has zero total prior weight for some class")


def mixing_matrix(spec: SynthSpec, seed: int) -> np.ndarray:
    if spec.mixing is not None:
        return np.asarray(spec.mixing, dtype=np.float64)
    return rngs.stream(seed, "mixing").uniform(-1.0, 1.0, size=(spec.feature_dim, spec.n_concepts))


def sample_concepts(spec: SynthSpec, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = len(labels)
    probs = spec.priors.probs
    c = np.zeros((n, spec.n_concepts))
    for g in spec.groups.groups:
        g = list(g)
        w = probs[g][:, labels].T
        cum = np.cumsum(w / w.sum(axis=1, keepdims=True), axis=1)
        u = rng.random(n)
        pick = np.minimum((u[:, None] >= cum).sum(axis=1), len(g) - 1)
        c[np.arange(n), np.array(g)[pick]] = 1.0
    s = list(spec.groups.singletons)
    if s:
        c[:, s] = (rng.random((n, len(s))) < probs[s][:, labels].T).astype(np.float64)
    return c


def stratified_split(labels: np.ndarray, rng: np.random.Generator):
    parts = ([], [], [])
    for k in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == k))
        n_train = int(round(SPLIT_FRACTIONS[0] * idx.size))
        n_val = int(round(SPLIT_FRACTIONS[1] * idx.size))
        parts[0].append(idx[:n_train])
        parts[1].append(idx[n_train:n_train + n_val])
        parts[2].append(idx[n_train + n_val:])
    return [np.sort(np.concatenate(p)) for p in parts]


def generate(spec: SynthSpec, seed: int) -> Dataset:
    spec.validate()
    A = mixing_matrix(spec, seed)
    rng = rngs.stream(seed, "data")
    labels = rng.choice(spec.n_classes, size=spec.n_samples, p=spec.balance())
    c = sample_concepts(spec, labels, rng)
    noise = rng.normal(0.0, 1.0, size=(spec.n_samples, spec.feature_dim)) * spec.noise_sigma
    x = c @ A.T + noise
    idx = stratified_split(labels, rngs.stream(seed, "split"))
    splits = [Split(x[i], labels[i].astype(np.int64), c[i]) for i in idx]
    return Dataset(*splits)


def effective_priors(data, table: Optional[PriorTable] = None, n_classes: Optional[int] = None) -> PriorTable:
    """Empirical P(c_m | y) from ground-truth concepts.

    ``data`` is a :class:`Split` or :class:`Dataset` (all splits pooled).
    Names are copied from ``table`` when given.
    """
    if isinstance(data, Dataset):
        data = data.combined()
    if table is not None:
        n_classes = table.n_classes
    elif n_classes is None:
        n_classes = int(data.y.max()) + 1
    M = data.c.shape[1]
    probs = np.zeros((M, n_classes))
    for k in range(n_classes):
        mask = data.y == k
        if not mask.any():
            raise SpecError(f"class {k} has no samples")
        probs[:, k] = data.c[mask].mean(axis=0)
    if table is not None:
        return PriorTable(table.concept_names, table.class_names, probs)
    return PriorTable([f"c{m}" for m in range(M)], [f"y{k}" for k in range(n_classes)], probs)


# ---------------------------------------------------------------------------
# default task
#
# Class-specific concepts plus two concepts that are common in every class
# (halo, gloss).  For the common ones the class-matching gradient pushes the
# lower-prior classes toward zero, which only the KL term corrects.

DEFAULT_CLASSES = ("alpha", "beta", "gamma")
DEFAULT_CONCEPTS = (
    "hue_red", "hue_green", "hue_blue",
    "size_big", "size_small",
    "spots", "stripes", "rim", "halo", "grain", "gloss", "notch",
)
DEFAULT_GROUPS = (("hue", (0, 1, 2)), ("size", (3, 4)))
DEFAULT_PRIORS = np.array([
    # alpha beta  gamma
    [0.80, 0.10, 0.10],  # hue_red
    [0.10, 0.80, 0.10],  # hue_green
    [0.10, 0.10, 0.80],  # hue_blue
    [0.90, 0.20, 0.60],  # size_big
    [0.10, 0.80, 0.40],  # size_small
    [0.90, 0.10, 0.10],  # spots
    [0.10, 0.90, 0.20],  # stripes
    [0.20, 0.10, 0.90],  # rim
    [0.95, 0.70, 0.85],  # halo: common everywhere
    [0.10, 0.35, 0.90],  # grain
    [0.75, 0.95, 0.55],  # gloss: common everywhere
    [0.30, 0.90, 0.60],  # notch
])


def default_spec(**overrides) -> SynthSpec:
    table = PriorTable(DEFAULT_CONCEPTS, DEFAULT_CLASSES, DEFAULT_PRIORS)
    groups = ConceptGroups.from_groups([g for _, g in DEFAULT_GROUPS], table.n_concepts,
                                       [n for n, _ in DEFAULT_GROUPS])
    kwargs = dict(priors=table, groups=groups, feature_dim=16, noise_sigma=0.1, n_samples=3000)
    kwargs.update(overrides)
    return SynthSpec(**kwargs)


# ---------------------------------------------------------------------------
# serialization


def spec_to_dict(spec: SynthSpec) -> dict:
    t = spec.priors
    doc = {
        "class_names": list(t.class_names),
        "concept_names": list(t.concept_names),
        "priors": [[float(v) for v in row] for row in t.probs],
        "groups": [
            {"name": n, "members": [t.concept_names[i] for i in g]}
            for n, g in zip(spec.groups.names, spec.groups.groups)
        ],
        "feature_dim": spec.feature_dim,
        "noise_sigma": spec.noise_sigma,
        "n_samples": spec.n_samples,
        "class_balance": [float(v) for v in spec.balance()],
    }
    if spec.mixing is not None:
        doc["mixing"] = [[float(v) for v in row] for row in np.asarray(spec.mixing)]
    return doc


def spec_from_dict(doc: dict) -> SynthSpec:
    try:
        table = PriorTable(doc["concept_names"], doc["class_names"], np.array(doc["priors"], dtype=np.float64))
        index = {n: i for i, n in enumerate(table.concept_names)}
        entries = doc.get("groups", [])
        for e in entries:
            for m in e["members"]:
                if m not in index:
                    raise SpecError(f"unknown concept name {m!r} in groups")
        groups = ConceptGroups.from_groups(
            [[index[m] for m in e["members"]] for e in entries], table.n_concepts, [e["name"] for e in entries]
        )
        mixing = doc.get("mixing")
        spec = SynthSpec(
            priors=table,
            groups=groups,
            feature_dim=int(doc.get("feature_dim", 16)),
            noise_sigma=float(doc.get("noise_sigma", 0.1)),
            n_samples=int(doc.get("n_samples", 3000)),
            class_balance=None if doc.get("class_balance") is None else np.array(doc["class_balance"], dtype=np.float64),
            mixing=None if mixing is None else np.array(mixing, dtype=np.float64),
        )
    except (KeyError, TypeError) as exc:
        raise SpecError(f"malformed synthetic spec: {exc!r}") from None
    spec.validate()
    return spec


def load_spec(path) -> SynthSpec:
    return spec_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def write_split(split: Split, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for x, y, c in zip(split.x, split.y, split.c):
            fh.write(json.dumps({"x": [float(v) for v in x], "y": int(y), "c": [int(v) for v in c]}) + "\n")


def read_split(path) -> Split:
    xs, ys, cs = [], [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            xs.append(rec["x"])
            ys.append(rec["y"])
            cs.append(rec.get("c", []))
    if not xs:
        raise SpecError(f"{path}: no samples")
    return Split(np.array(xs, dtype=np.float64), np.array(ys, dtype=np.int64), np.array(cs, dtype=np.float64))


def write_dataset(ds: Dataset, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name in SPLITS:
        p = out_dir / f"{name}.jsonl"
        write_split(ds.split(name), p)
        paths.append(p)
    return paths


def read_dataset(data_dir) -> Dataset:
    data_dir = Path(data_dir)
    return Dataset(*(read_split(data_dir / f"{name}.jsonl") for name in SPLITS))
