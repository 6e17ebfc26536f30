"""Forward pass of the prior-guided concept predictor and its backward pass.

Row-vector convention throughout: a batch is an (N, D) array, the two
bias-free projections act as ``z = f(x) @ W1 @ W2`` and the concept head as
``c_hat = sigmoid(z' @ Wc.T)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit

from .priors import PriorTable, sample_surrogates

PARAMS_VERSION = "pcp-params-v1"
_ONE_BELOW = float(np.nextafter(1.0, 0.0))
_TINY = float(np.finfo(np.float64).tiny)


class DimensionError(ValueError):
    """Shapes of inputs and parameters disagree."""


@dataclass(eq=False)
class ParamSet:
    """All learnable weights plus the (fixed) refinement strength beta.

    ``arrays`` is ordered: ``ext{i}.weight`` / ``ext{i}.bias`` for the
    feature extractor layers, then ``W1``, ``W2`` and ``Wc``.
    """

    arrays: dict[str, np.ndarray]
    beta: float = 1.0
    activation: str = "tanh"

    def __post_init__(self):
        if not self.beta >= 0.0:
            raise ValueError("beta must be non-negative")
        for name in ("W1", "W2", "Wc"):
            if name not in self.arrays:
                raise ValueError(f"missing parameter block {name}")
        if self.activation not in ("tanh",):
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def n_layers(self) -> int:
        return sum(1 for k in self.arrays if k.endswith(".weight"))

    @property
    def input_dim(self) -> int:
        if self.n_layers:
            return self.arrays["ext0.weight"].shape[0]
        return self.arrays["W1"].shape[0]

    @property
    def n_concepts(self) -> int:
        return self.arrays["Wc"].shape[0]

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self.arrays.items()}, self.beta, self.activation)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.arrays.values()])

    def with_flat(self, theta: np.ndarray) -> "ParamSet":
        out, pos = {}, 0
        for k, v in self.arrays.items():
            out[k] = np.asarray(theta[pos:pos + v.size], dtype=np.float64).reshape(v.shape).copy()
            pos += v.size
        return ParamSet(out, self.beta, self.activation)

    def to_json(self) -> str:
        doc = {
            "version": PARAMS_VERSION,
            "beta": float(self.beta),
            "activation": self.activation,
            "arrays": [
                {"name": k, "shape": list(v.shape), "data": [float(a) for a in v.ravel()]}
                for k, v in self.arrays.items()
            ],
        }
        return json.dumps(doc) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ParamSet":
        doc = json.loads(text)
        if doc.get("version") != PARAMS_VERSION:
            raise ValueError(f"unsupported parameter format {doc.get('version')!r}")
        arrays = {
            a["name"]: np.array(a["data"], dtype=np.float64).reshape(a["shape"]) for a in doc["arrays"]
        }
        return cls(arrays, float(doc["beta"]), doc.get("activation", "tanh"))

    def __eq__(self, other):
        if not isinstance(other, ParamSet):
            return NotImplemented
        return (
            self.beta == other.beta
            and list(self.arrays) == list(other.arrays)
            and all(np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays)
        )


def default_h_prime(n_concepts: int, hidden: int) -> int:
    return max(n_concepts, hidden // 2)


def init_params(
    input_dim: int,
    n_concepts: int,
    rng: np.random.Generator,
    widths=(64, 32),
    h_prime: Optional[int] = None,
    beta: float = 1.0,
) -> ParamSet:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.

    ``widths`` are the extractor's hidden widths; the last one is H.  An
    empty tuple gives the identity extractor (H = D).
    """
    arrays = {}
    fan_in = input_dim
    for i, width in enumerate(widths):
        bound = 1.0 / np.sqrt(fan_in)
        arrays[f"ext{i}.weight"] = rng.uniform(-bound, bound, size=(fan_in, width))
        arrays[f"ext{i}.bias"] = np.zeros(width)
        fan_in = width
    hidden = fan_in
    if h_prime is None:
        h_prime = default_h_prime(n_concepts, hidden)
    arrays["W1"] = rng.uniform(-1 / np.sqrt(hidden), 1 / np.sqrt(hidden), size=(hidden, h_prime))
    arrays["W2"] = rng.uniform(-1 / np.sqrt(h_prime), 1 / np.sqrt(h_prime), size=(h_prime, n_concepts))
    arrays["Wc"] = rng.uniform(-1 / np.sqrt(n_concepts), 1 / np.sqrt(n_concepts), size=(n_concepts, n_concepts))
    return ParamSet(arrays, beta)


# ---------------------------------------------------------------------------
# elementary stages


def _extract(X, params):
    acts = [X]
    a = X
    for i in range(params.n_layers):
        a = np.tanh(a @ params.arrays[f"ext{i}.weight"] + params.arrays[f"ext{i}.bias"])
        acts.append(a)
    return acts


def _check_input(X, params):
    if X.shape[-1] != params.input_dim:
        raise DimensionError(f"input has dimension {X.shape[-1]}, model expects {params.input_dim}")


def extract_and_project(x, params: ParamSet) -> np.ndarray:
    """Concept-space features z = f(x) W1 W2 for one sample or a batch."""
    x = np.asarray(x, dtype=np.float64)
    _check_input(x, params)
    f = _extract(x, params)[-1]
    return f @ params.arrays["W1"] @ params.arrays["W2"]


def softmax(s: np.ndarray) -> np.ndarray:
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def attention(z, c_tilde) -> np.ndarray:
    """gamma = softmax(z * c_tilde), max-subtracted."""
    z = np.asarray(z, dtype=np.float64)
    c_tilde = np.asarray(c_tilde, dtype=np.float64)
    if z.shape != c_tilde.shape:
        raise DimensionError("z and c_tilde differ in shape")
    if not (np.all(np.isfinite(z)) and np.all(np.isfinite(c_tilde))):
        raise ValueError("non-finite input to attention")
    return softmax(z * c_tilde)


def refine(z, gamma, beta: float) -> np.ndarray:
    if beta < 0:
        raise ValueError("beta must be non-negative")
    z = np.asarray(z, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    if z.shape != gamma.shape:
        raise DimensionError("z and gamma differ in shape")
    return z * (1.0 + beta * gamma)


def sigmoid(a) -> np.ndarray:
    """Logistic function clipped to the open interval (0, 1)."""
    return np.clip(expit(a), _TINY, _ONE_BELOW)


def predict_concepts(z_prime, Wc) -> np.ndarray:
    z_prime = np.asarray(z_prime, dtype=np.float64)
    Wc = np.asarray(Wc, dtype=np.float64)
    if Wc.shape[1] != z_prime.shape[-1]:
        raise DimensionError("concept head does not match z' length")
    return sigmoid(z_prime @ Wc.T)


# ---------------------------------------------------------------------------
# traces


@dataclass(frozen=True, eq=False)
class ForwardTrace:
    z: np.ndarray
    c_tilde: np.ndarray
    gamma: np.ndarray
    z_prime: np.ndarray
    c_hat: np.ndarray


@dataclass(eq=False)
class BatchTrace:
    """Batched intermediates, each of shape (N, M), plus the backprop cache."""

    z: np.ndarray
    c_tilde: np.ndarray
    gamma: np.ndarray
    z_prime: np.ndarray
    c_hat: np.ndarray
    params: ParamSet
    acts: list = field(repr=False, default_factory=list)
    proj: Optional[np.ndarray] = field(repr=False, default=None)

    def __len__(self):
        return self.z.shape[0]

    def sample(self, i: int) -> ForwardTrace:
        return ForwardTrace(self.z[i], self.c_tilde[i], self.gamma[i], self.z_prime[i], self.c_hat[i])


def forward_batch(X, params: ParamSet, c_tilde) -> BatchTrace:
    """Full forward pass with an explicit surrogate matrix (N, M)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    _check_input(X, params)
    c_tilde = np.asarray(c_tilde, dtype=np.float64)
    acts = _extract(X, params)
    proj = acts[-1] @ params.arrays["W1"]
    z = proj @ params.arrays["W2"]
    if c_tilde.shape != z.shape:
        raise DimensionError("surrogate matrix does not match batch shape")
    gamma = attention(z, c_tilde)
    z_prime = z * (1.0 + params.beta * gamma)
    c_hat = predict_concepts(z_prime, params.arrays["Wc"])
    return BatchTrace(z, c_tilde, gamma, z_prime, c_hat, params, acts, proj)


def forward_train(X, labels, params: ParamSet, table: PriorTable, rng: np.random.Generator) -> BatchTrace:
    labels = np.asarray(labels, dtype=np.int64)
    if table.n_concepts != params.n_concepts:
        raise DimensionError("prior table and model disagree on the number of concepts")
    c_tilde = sample_surrogates(table, labels, rng)
    return forward_batch(X, params, c_tilde)


def forward_infer(X, params: ParamSet) -> BatchTrace:
    """Inference pass: no labels, no priors, surrogate fixed to all-ones."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    return forward_batch(X, params, np.ones((X.shape[0], params.n_concepts)))


def forward(x, y, params: ParamSet, table: Optional[PriorTable], mode: str = "infer", rng=None) -> ForwardTrace:
    """Single-sample forward pass.

    In ``"train"`` mode the surrogate is drawn from the class-``y`` priors;
    in ``"infer"`` mode ``y`` and ``table`` are ignored and never touched.
    """
    if mode == "infer":
        return forward_infer(x, params).sample(0)
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    if y is None:
        raise ValueError("train mode requires a class label")
    if table is None or rng is None:
        raise ValueError("train mode requires a prior table and an rng")
    return forward_train(np.atleast_2d(x), [y], params, table, rng).sample(0)


# ---------------------------------------------------------------------------
# backward


def backward(trace: BatchTrace, d_zp=None, d_chat=None, d_gamma=None, return_parts: bool = False):
    """Backpropagate upstream gradients into every parameter block.

    The surrogate matrix is a constant: no gradient flows into it or into
    the prior table.  With ``return_parts`` the gradient reaching gamma
    through the refinement step is returned as well.
    """
    p = trace.params
    W = p.arrays
    shape = trace.z.shape
    d_zp = np.zeros(shape) if d_zp is None else np.array(d_zp, dtype=np.float64)
    grads = {}

    if d_chat is not None:
        c = trace.c_hat
        d_logit = d_chat * c * (1.0 - c)
        grads["Wc"] = d_logit.T @ trace.z_prime
        d_zp = d_zp + d_logit @ W["Wc"]
    else:
        grads["Wc"] = np.zeros_like(W["Wc"])

    gamma = trace.gamma
    d_z = d_zp * (1.0 + p.beta * gamma)
    d_gamma_refine = p.beta * trace.z * d_zp
    d_gam = d_gamma_refine if d_gamma is None else d_gamma_refine + d_gamma
    d_s = gamma * (d_gam - np.sum(d_gam * gamma, axis=1, keepdims=True))
    d_z = d_z + d_s * trace.c_tilde

    grads["W2"] = trace.proj.T @ d_z
    d_proj = d_z @ W["W2"].T
    grads["W1"] = trace.acts[-1].T @ d_proj
    d_a = d_proj @ W["W1"].T
    for i in reversed(range(p.n_layers)):
        a = trace.acts[i + 1]
        d_u = d_a * (1.0 - a * a)
        grads[f"ext{i}.weight"] = trace.acts[i].T @ d_u
        grads[f"ext{i}.bias"] = d_u.sum(axis=0)
        d_a = d_u @ W[f"ext{i}.weight"].T

    ordered = {k: grads[k] for k in W}
    if return_parts:
        return ordered, d_gamma_refine
    return ordered
