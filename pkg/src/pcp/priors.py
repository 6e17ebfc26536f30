"""Class-level concept priors, concept groups and surrogate sampling.

A prior table stores P(c_m | y) as an M x L matrix: one row per concept,
one column per class.  It is the only concept-level supervision the model
ever sees.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class PriorsError(ValueError):
    """Raised for malformed prior tables or group files."""


@dataclass(frozen=True, eq=False)
class PriorTable:
    concept_names: tuple[str, ...]
    class_names: tuple[str, ...]
    probs: np.ndarray  # (M, L)

    def __post_init__(self):
        probs = np.array(self.probs, dtype=np.float64)
        object.__setattr__(self, "concept_names", tuple(self.concept_names))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if probs.ndim != 2:
            raise PriorsError("prior matrix must be two-dimensional")
        M, L = probs.shape
        if M < 1:
            raise PriorsError("at least one concept required")
        if L < 2:
            raise PriorsError("at least two classes required")
        if len(self.concept_names) != M or len(self.class_names) != L:
            raise PriorsError("name lists do not match prior matrix shape")
        _check_unique(self.concept_names, "concept")
        _check_unique(self.class_names, "class")
        if not np.all(np.isfinite(probs)) or probs.min() < 0.0 or probs.max() > 1.0:
            raise PriorsError("probability out of range")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @property
    def n_concepts(self) -> int:
        return self.probs.shape[0]

    @property
    def n_classes(self) -> int:
        return self.probs.shape[1]

    def column(self, y: int) -> np.ndarray:
        """Prior signature P(. | y) of class ``y``."""
        if not 0 <= y < self.n_classes:
            raise PriorsError(f"class index {y} out of range")
        return self.probs[:, y]

    def __eq__(self, other):
        if not isinstance(other, PriorTable):
            return NotImplemented
        return (
            self.concept_names == other.concept_names
            and self.class_names == other.class_names
            and np.array_equal(self.probs, other.probs)
        )

    __hash__ = None


def _check_unique(names, kind):
    seen = set()
    for name in names:
        if name in seen:
            raise PriorsError(f"duplicate {kind} name {name!r}")
        seen.add(name)


def read_priors(text: str) -> PriorTable:
    """Parse the CSV prior format from a string."""
    rows = [r for r in csv.reader(io.StringIO(text)) if r and any(c.strip() for c in r)]
    if not rows:
        raise PriorsError("empty priors file")
    header = [c.strip() for c in rows[0]]
    if header[0] != "concept":
        raise PriorsError("header must start with 'concept'")
    class_names = header[1:]
    concept_names, values = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise PriorsError(f"ragged rows: line {lineno} has {len(row)} fields, expected {len(header)}")
        concept_names.append(row[0].strip())
        try:
            values.append([float(v) for v in row[1:]])
        except ValueError as exc:
            raise PriorsError(f"line {lineno}: {exc}") from None
    if not values:
        raise PriorsError("at least one concept required")
    return PriorTable(concept_names, class_names, np.array(values, dtype=np.float64).reshape(len(values), -1))


def load_priors(path) -> PriorTable:
    return read_priors(Path(path).read_text(encoding="utf-8"))


def dump_priors(table: PriorTable) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["concept", *table.class_names])
    for name, row in zip(table.concept_names, table.probs):
        writer.writerow([name, *(repr(float(v)) for v in row)])
    return buf.getvalue()


def save_priors(table: PriorTable, path) -> None:
    Path(path).write_text(dump_priors(table), encoding="utf-8")


@dataclass(frozen=True)
class ConceptGroups:
    """Partition of concept indices into exclusive groups plus singletons."""

    groups: tuple[tuple[int, ...], ...]
    singletons: tuple[int, ...]
    names: tuple[str, ...] = field(default=())

    @classmethod
    def from_groups(cls, groups, n_concepts: int, names=()) -> "ConceptGroups":
        groups = tuple(tuple(int(i) for i in g) for g in groups)
        seen: set[int] = set()
        for g in groups:
            if len(g) < 2:
                raise PriorsError("group of size 1")
            if len(set(g)) != len(g):
                raise PriorsError("group lists a concept twice")
            for i in g:
                if not 0 <= i < n_concepts:
                    raise PriorsError(f"concept index {i} out of range")
                if i in seen:
                    raise PriorsError("overlapping groups")
                seen.add(i)
        singletons = tuple(i for i in range(n_concepts) if i not in seen)
        names = tuple(names) if names else tuple(f"group{k}" for k in range(len(groups)))
        return cls(groups, singletons, names)

    @property
    def n_concepts(self) -> int:
        return sum(len(g) for g in self.groups) + len(self.singletons)


def read_groups(text: str, table: PriorTable) -> ConceptGroups:
    try:
        doc = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise PriorsError(f"groups file is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise PriorsError("groups file must be a JSON object")
    index = {name: i for i, name in enumerate(table.concept_names)}
    groups, names = [], []
    for entry in doc.get("groups", []):
        members = []
        for name in entry.get("members", []):
            if name not in index:
                raise PriorsError(f"unknown concept name {name!r}")
            members.append(index[name])
        groups.append(members)
        names.append(str(entry.get("name", f"group{len(names)}")))
    return ConceptGroups.from_groups(groups, table.n_concepts, names)


def load_groups(path, table: PriorTable) -> ConceptGroups:
    return read_groups(Path(path).read_text(encoding="utf-8"), table)


def dump_groups(groups: ConceptGroups, table: PriorTable) -> str:
    doc = {
        "groups": [
            {"name": name, "members": [table.concept_names[i] for i in g]}
            for name, g in zip(groups.names, groups.groups)
        ]
    }
    return json.dumps(doc, indent=2) + "\n"


@dataclass(frozen=True, eq=False)
class SurrogateVector:
    bits: np.ndarray
    source_class: int


def sample_surrogate(table: PriorTable, y: int, rng: np.random.Generator) -> SurrogateVector:
    """Draw one binary surrogate: bit m ~ Bernoulli(P(c_m | y)), independently."""
    p = table.column(y)
    bits = (rng.random(p.shape[0]) < p).astype(np.float64)
    bits.setflags(write=False)
    return SurrogateVector(bits, int(y))


def sample_surrogates(table: PriorTable, labels, rng: np.random.Generator) -> np.ndarray:
    """Batched version of :func:`sample_surrogate`, shape (N, M)."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= table.n_classes):
        raise PriorsError("class index out of range")
    p = table.probs[:, labels].T
    return (rng.random(p.shape) < p).astype(np.float64)


def binomial_band(p: float, n: int, k: float = 3.0) -> tuple[float, float]:
    """Interval p +/- k binomial standard deviations for an n-draw mean."""
    sd = math.sqrt(p * (1.0 - p) / n)
    return p - k * sd, p + k * sd
