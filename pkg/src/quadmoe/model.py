"""Parameter records and forward evaluation for quadratic-gated MoE regression.

A mixing measure is an ordered list of atoms ``(A_i, b_i, c_i, eta_i)``. Gate
scores are ``x^T A_i x + b_i^T x + c_i`` (quadratic polynomial gate), with the
linear term dropped for the monomial gate and the quadratic term dropped for
the classical linear gate. The mixing weight of an atom is ``exp(c_i)``.

Single-point functions here are written for clarity; batched evaluation over a
data matrix goes through :mod:`quadmoe.kernels`.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import erf

from .errors import InvalidArgument

__all__ = [
    "Gate",
    "GateKind",
    "ExpertFamily",
    "LinearExpert",
    "TwoLayerExpert",
    "Atom",
    "MixingMeasure",
    "AttnGateParams",
    "NONLINEARITIES",
    "activation",
    "gate_scores",
    "gate_probs",
    "expert_eval",
    "moe_forward",
    "moe_predict",
    "induced_quadratic",
    "attn_gate_scores",
    "attention",
    "active_attention",
    "att_moe_forward",
]


def _frozen(arr, ndim, name):
    out = np.array(arr, dtype=np.float64)
    if out.ndim != ndim:
        raise InvalidArgument(f"{name} must have {ndim} dimensions, got shape {out.shape}")
    if not np.all(np.isfinite(out)):
        raise InvalidArgument(f"{name} has non-finite entries")
    out.setflags(write=False)
    return out


def _vector(x, d=None, name="x"):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or (d is not None and x.shape[0] != d):
        want = f"({d},)" if d is not None else "1-d"
        raise InvalidArgument(f"{name} must have shape {want}, got {x.shape}")
    return x


# --------------------------------------------------------------------------
# nonlinearities


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_d1(z):
    # subgradient 0 at the kink
    return (np.asarray(z) > 0).astype(np.float64)


def _relu_d2(z):
    return np.zeros_like(np.asarray(z, dtype=np.float64))


def _tanh_d1(z):
    t = np.tanh(z)
    return 1.0 - t * t


def _tanh_d2(z):
    t = np.tanh(z)
    return -2.0 * t * (1.0 - t * t)


def _gelu(z):
    return 0.5 * z * (1.0 + erf(np.asarray(z) / math.sqrt(2.0)))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z)))


def _silu(z):
    return np.asarray(z) * _sigmoid(z)


NONLINEARITIES = {
    "identity": lambda z: np.asarray(z, dtype=np.float64),
    "relu": _relu,
    "gelu": _gelu,
    "tanh": np.tanh,
    "sigmoid": _sigmoid,
    "silu": _silu,
}

# (value, first derivative, second derivative); the expert families only
# need relu and tanh
_ACTIVATIONS = {
    "relu": (_relu, _relu_d1, _relu_d2),
    "tanh": (np.tanh, _tanh_d1, _tanh_d2),
}


def activation(name, order=0):
    """Return the ``order``-th derivative of a hidden-layer activation."""
    try:
        return _ACTIVATIONS[name][order]
    except KeyError:
        raise InvalidArgument(f"unknown activation {name!r}") from None


# --------------------------------------------------------------------------
# gate kinds


class Gate(str, enum.Enum):
    LINEAR = "Linear"
    QUAD_POLY = "QuadPoly"
    QUAD_MONO = "QuadMono"
    ATTN_FORM = "AttnForm"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).replace("_", "").replace("-", "").lower()
        for g in cls:
            if g.value.lower() == key:
                return g
        raise InvalidArgument(f"unknown gate kind {value!r}")


@dataclass(frozen=True)
class GateKind:
    tag: Gate = Gate.QUAD_POLY
    top_k: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "tag", Gate.parse(self.tag))
        if self.top_k is not None and int(self.top_k) < 1:
            raise InvalidArgument(f"top_k must be >= 1, got {self.top_k}")

    @property
    def uses_A(self):
        return self.tag != Gate.LINEAR

    @property
    def uses_b(self):
        return self.tag != Gate.QUAD_MONO

    def to_json(self):
        return {"tag": self.tag.value, "top_k": self.top_k}

    @classmethod
    def from_json(cls, obj):
        if isinstance(obj, str):
            return cls(obj)
        return cls(obj["tag"], obj.get("top_k"))


# --------------------------------------------------------------------------
# experts


@dataclass(frozen=True)
class ExpertFamily:
    """Shape descriptor shared by every expert in a measure."""

    kind: str = "linear"
    m: int = 0
    activation: str | None = None

    def __post_init__(self):
        if self.kind == "linear":
            object.__setattr__(self, "m", 0)
            object.__setattr__(self, "activation", None)
        elif self.kind == "two_layer":
            if self.m < 1:
                raise InvalidArgument("two_layer experts need m >= 1 hidden units")
            if self.activation not in _ACTIVATIONS:
                raise InvalidArgument(f"activation must be relu or tanh, got {self.activation!r}")
        else:
            raise InvalidArgument(f"unknown expert family {self.kind!r}")

    @classmethod
    def named(cls, name, m=2):
        """``'linear'``, ``'relu'`` or ``'tanh'`` (the latter two are two-layer nets)."""
        if name == "linear":
            return cls("linear")
        if name in _ACTIVATIONS:
            return cls("two_layer", m, name)
        raise InvalidArgument(f"unknown expert name {name!r}")

    @property
    def name(self):
        return "linear" if self.kind == "linear" else self.activation

    def n_params(self, d):
        if self.kind == "linear":
            return d + 1
        return self.m * d + 2 * self.m + 1

    def unflatten(self, vec, d):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params(d),):
            raise InvalidArgument(f"expected {self.n_params(d)} expert parameters, got {vec.shape}")
        if self.kind == "linear":
            return LinearExpert(vec[:d], float(vec[d]))
        m = self.m
        W = vec[: m * d].reshape(m, d)
        v = vec[m * d : m * d + m]
        a = vec[m * d + m : m * d + 2 * m]
        return TwoLayerExpert(W, v, a, float(vec[-1]), self.activation)

    def to_json(self):
        if self.kind == "linear":
            return {"kind": "linear"}
        return {"kind": "two_layer", "m": self.m, "activation": self.activation}

    @classmethod
    def from_json(cls, obj):
        if isinstance(obj, str):
            return cls.named(obj)
        return cls(obj["kind"], obj.get("m", 0), obj.get("activation"))


@dataclass(frozen=True)
class LinearExpert:
    beta1: np.ndarray
    beta0: float

    def __post_init__(self):
        object.__setattr__(self, "beta1", _frozen(self.beta1, 1, "beta1"))
        object.__setattr__(self, "beta0", float(self.beta0))
        if not math.isfinite(self.beta0):
            raise InvalidArgument("beta0 must be finite")

    @property
    def d(self):
        return self.beta1.shape[0]

    @property
    def family(self):
        return ExpertFamily("linear")

    def flat(self):
        return np.concatenate([self.beta1, [self.beta0]])

    def __call__(self, x):
        return float(self.beta1 @ x + self.beta0)

    def to_json(self):
        return {"kind": "linear", "beta1": self.beta1.tolist(), "beta0": self.beta0}


@dataclass(frozen=True)
class TwoLayerExpert:
    """``a^T act(W x + v) + a0`` with ``W`` of shape (m, d)."""

    W: np.ndarray
    v: np.ndarray
    a: np.ndarray
    a0: float
    activation: str = "relu"

    def __post_init__(self):
        W = _frozen(self.W, 2, "W")
        m = W.shape[0]
        if m < 1:
            raise InvalidArgument("two-layer expert needs m >= 1")
        v = _frozen(self.v, 1, "v")
        a = _frozen(self.a, 1, "a")
        if v.shape != (m,) or a.shape != (m,):
            raise InvalidArgument(f"v and a must have shape ({m},)")
        if self.activation not in _ACTIVATIONS:
            raise InvalidArgument(f"activation must be relu or tanh, got {self.activation!r}")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "a0", float(self.a0))
        if not math.isfinite(self.a0):
            raise InvalidArgument("a0 must be finite")

    @property
    def d(self):
        return self.W.shape[1]

    @property
    def m(self):
        return self.W.shape[0]

    @property
    def family(self):
        return ExpertFamily("two_layer", self.m, self.activation)

    def flat(self):
        return np.concatenate([self.W.ravel(), self.v, self.a, [self.a0]])

    def __call__(self, x):
        act = _ACTIVATIONS[self.activation][0]
        return float(self.a @ act(self.W @ x + self.v) + self.a0)

    def to_json(self):
        return {
            "kind": "two_layer",
            "activation": self.activation,
            "W": self.W.tolist(),
            "v": self.v.tolist(),
            "a": self.a.tolist(),
            "a0": self.a0,
        }


def _expert_from_json(obj):
    if obj["kind"] == "linear":
        return LinearExpert(obj["beta1"], obj["beta0"])
    return TwoLayerExpert(obj["W"], obj["v"], obj["a"], obj["a0"], obj["activation"])


# --------------------------------------------------------------------------
# atoms and mixing measures


@dataclass(frozen=True)
class Atom:
    A: np.ndarray
    b: np.ndarray
    c: float
    eta: LinearExpert | TwoLayerExpert

    def __post_init__(self):
        A = _frozen(self.A, 2, "A")
        b = _frozen(self.b, 1, "b")
        d = b.shape[0]
        if A.shape != (d, d):
            raise InvalidArgument(f"A must be ({d}, {d}), got {A.shape}")
        if self.eta.d != d:
            raise InvalidArgument(f"expert input dimension {self.eta.d} != {d}")
        c = float(self.c)
        if not math.isfinite(c) or not -745.0 < c < 709.0:
            raise InvalidArgument(f"exp(c) must be finite and positive, got c={c}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", c)

    @property
    def d(self):
        return self.b.shape[0]

    @property
    def weight(self):
        return math.exp(self.c)

    def flat(self):
        return np.concatenate([self.A.ravel(), self.b, [self.c], self.eta.flat()])


@dataclass(frozen=True)
class MixingMeasure:
    atoms: tuple
    gate: GateKind = field(default_factory=GateKind)
    d: int | None = None
    family: ExpertFamily | None = None

    def __post_init__(self):
        atoms = tuple(self.atoms)
        if not atoms:
            raise InvalidArgument("a mixing measure needs at least one atom")
        gate = self.gate if isinstance(self.gate, GateKind) else GateKind(self.gate)
        if gate.tag == Gate.ATTN_FORM:
            raise InvalidArgument("AttnForm gates are expressed through AttnGateParams")
        d = atoms[0].d if self.d is None else int(self.d)
        family = atoms[0].eta.family if self.family is None else self.family
        for i, at in enumerate(atoms):
            if at.d != d:
                raise InvalidArgument(f"atom {i} has dimension {at.d}, expected {d}")
            if at.eta.family != family:
                raise InvalidArgument(f"atom {i} expert family {at.eta.family} != {family}")
            if not gate.uses_A and np.any(at.A != 0):
                raise InvalidArgument(f"Linear gate requires A_{i} = 0")
            if not gate.uses_b and np.any(at.b != 0):
                raise InvalidArgument(f"QuadMono gate requires b_{i} = 0")
        if gate.top_k is not None and gate.top_k > len(atoms):
            raise InvalidArgument(f"top_k={gate.top_k} exceeds N={len(atoms)}")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "gate", gate)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "family", family)

    def __len__(self):
        return len(self.atoms)

    @property
    def N(self):
        return len(self.atoms)

    @property
    def weights(self):
        return np.exp([a.c for a in self.atoms])

    def atom_size(self):
        return self.d * self.d + self.d + 1 + self.family.n_params(self.d)

    # flat parameter vector: atoms in order; A row-major, b, c, eta fields
    def flat(self):
        return np.concatenate([a.flat() for a in self.atoms])

    @classmethod
    def from_flat(cls, vec, like):
        """Rebuild a measure shaped like ``like``; gate-masked blocks are zeroed."""
        vec = np.asarray(vec, dtype=np.float64)
        d, fam = like.d, like.family
        size = like.atom_size()
        if vec.shape != (size * like.N,):
            raise InvalidArgument(f"expected {size * like.N} parameters, got {vec.shape}")
        atoms = []
        for i in range(like.N):
            chunk = vec[i * size : (i + 1) * size]
            A = chunk[: d * d].reshape(d, d)
            b = chunk[d * d : d * d + d]
            if not like.gate.uses_A:
                A = np.zeros_like(A)
            if not like.gate.uses_b:
                b = np.zeros_like(b)
            atoms.append(Atom(A, b, chunk[d * d + d], fam.unflatten(chunk[d * d + d + 1 :], d)))
        return cls(tuple(atoms), like.gate, d, fam)

    def packed(self):
        """Stacked arrays ``(A (N,d,d), B (N,d), C (N,), Eta (N,q))`` for the kernels."""
        A = np.stack([a.A for a in self.atoms])
        B = np.stack([a.b for a in self.atoms])
        C = np.array([a.c for a in self.atoms])
        Eta = np.stack([a.eta.flat() for a in self.atoms])
        return A, B, C, Eta

    @classmethod
    def from_packed(cls, A, B, C, Eta, like):
        fam, d = like.family, like.d
        atoms = tuple(
            Atom(
                A[i] if like.gate.uses_A else np.zeros((d, d)),
                B[i] if like.gate.uses_b else np.zeros(d),
                C[i],
                fam.unflatten(Eta[i], d),
            )
            for i in range(A.shape[0])
        )
        return cls(atoms, like.gate, d, fam)

    def replace_atoms(self, atoms):
        return MixingMeasure(tuple(atoms), self.gate, self.d, self.family)

    # JSON: {gate, d, atoms[{A, b, c, eta}], expert_family}
    def to_json(self):
        return {
            "schema_version": 1,
            "gate": self.gate.to_json(),
            "d": self.d,
            "expert_family": self.family.to_json(),
            "atoms": [
                {"A": a.A.tolist(), "b": a.b.tolist(), "c": a.c, "eta": a.eta.to_json()}
                for a in self.atoms
            ],
        }

    def dumps(self, **kw):
        return json.dumps(self.to_json(), **kw)

    @classmethod
    def from_json(cls, obj):
        if isinstance(obj, (str, bytes)):
            obj = json.loads(obj)
        atoms = tuple(
            Atom(a["A"], a["b"], a["c"], _expert_from_json(a["eta"])) for a in obj["atoms"]
        )
        return cls(
            atoms,
            GateKind.from_json(obj["gate"]),
            obj["d"],
            ExpertFamily.from_json(obj["expert_family"]),
        )


# --------------------------------------------------------------------------
# forward passes


def gate_scores(x, G):
    x = _vector(x, G.d)
    if G.gate.tag == Gate.ATTN_FORM:
        raise InvalidArgument("use attn_gate_scores for AttnForm gates")
    out = np.empty(G.N)
    for i, at in enumerate(G.atoms):
        s = at.c
        if G.gate.uses_A:
            s += x @ at.A @ x
        if G.gate.uses_b:
            s += at.b @ x
        out[i] = s
    return out


def gate_probs(scores, top_k=None):
    """Max-shifted softmax; with ``top_k`` only the largest entries keep mass.

    Ties at the K-th score go to the lower index.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise InvalidArgument("scores must be a non-empty vector")
    if not np.all(np.isfinite(s)):
        raise InvalidArgument("scores must be finite")
    if top_k is not None:
        if not 1 <= top_k <= s.size:
            raise InvalidArgument(f"top_k must lie in [1, {s.size}]")
        keep = np.argsort(-s, kind="stable")[:top_k]
        mask = np.zeros(s.size, dtype=bool)
        mask[keep] = True
    else:
        mask = np.ones(s.size, dtype=bool)
    z = np.where(mask, s - s[mask].max(), -np.inf)
    e = np.exp(z)
    return e / e.sum()


def expert_eval(x, eta):
    x = _vector(x, eta.d)
    return eta(x)


def moe_forward(x, G):
    x = _vector(x, G.d)
    g = gate_probs(gate_scores(x, G), G.gate.top_k)
    h = np.array([at.eta(x) for at in G.atoms])
    return float(g @ h)


def moe_predict(X, G):
    """Batched ``moe_forward`` over the rows of ``X``."""
    from . import kernels

    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != G.d:
        raise InvalidArgument(f"X must have shape (n, {G.d}), got {X.shape}")
    A, B, C, Eta = G.packed()
    return kernels.predict(X, A, B, C, Eta, G.family, G.gate.top_k)


# --------------------------------------------------------------------------
# attention-form gates


@dataclass(frozen=True)
class AttnGateParams:
    """Shared query embedding and per-expert key embeddings.

    ``Wk`` has shape (N, r, d). In monomial mode ``bq`` and ``bk`` are absent.
    """

    Wq: np.ndarray
    Wk: np.ndarray
    bq: np.ndarray | None = None
    bk: np.ndarray | None = None

    def __post_init__(self):
        Wq = _frozen(self.Wq, 2, "Wq")
        Wk = _frozen(self.Wk, 3, "Wk")
        r, d = Wq.shape
        if r < 1 or Wk.shape[1:] != (r, d):
            raise InvalidArgument(f"Wk must have shape (N, {r}, {d}), got {Wk.shape}")
        if (self.bq is None) != (self.bk is None):
            raise InvalidArgument("bq and bk must be both present or both absent")
        object.__setattr__(self, "Wq", Wq)
        object.__setattr__(self, "Wk", Wk)
        if self.bq is not None:
            bq = _frozen(self.bq, 1, "bq")
            bk = _frozen(self.bk, 2, "bk")
            if bq.shape != (r,) or bk.shape != (Wk.shape[0], r):
                raise InvalidArgument("bias shapes do not match the embedding rank")
            object.__setattr__(self, "bq", bq)
            object.__setattr__(self, "bk", bk)

    @property
    def monomial(self):
        return self.bq is None

    @property
    def N(self):
        return self.Wk.shape[0]

    @property
    def r(self):
        return self.Wq.shape[0]

    @property
    def d(self):
        return self.Wq.shape[1]


def induced_quadratic(attn):
    """Expand the query/key inner product into per-expert ``(A_i, b_i, c_i)``."""
    out = []
    for i in range(attn.N):
        Wk = attn.Wk[i]
        A = attn.Wq.T @ Wk
        if attn.monomial:
            b, c = np.zeros(attn.d), 0.0
        else:
            b = Wk.T @ attn.bq + attn.Wq.T @ attn.bk[i]
            c = float(attn.bq @ attn.bk[i])
        out.append((A, b, c))
    return out


def attn_gate_scores(x, attn):
    """Scores ``(Wq x + bq)^T (Wk_i x + bk_i)`` evaluated directly."""
    x = _vector(x, attn.d)
    q = attn.Wq @ x
    keys = attn.Wk @ x
    if not attn.monomial:
        q = q + attn.bq
        keys = keys + attn.bk
    return keys @ q


def _check_qkv(q, K, V):
    q = _vector(q, name="q")
    K = np.asarray(K, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if K.ndim != 2 or K.shape[1] != q.shape[0]:
        raise InvalidArgument(f"K must have shape (N, {q.shape[0]}), got {K.shape}")
    if V.ndim != 2 or V.shape[0] != K.shape[0]:
        raise InvalidArgument(f"V must have {K.shape[0]} rows, got {V.shape}")
    if q.shape[0] < 1:
        raise InvalidArgument("query dimension must be >= 1")
    return q, K, V


def attention(q, K, V):
    q, K, V = _check_qkv(q, K, V)
    w = gate_probs(K @ q / math.sqrt(q.shape[0]))
    return w @ V


def active_attention(q, K, V, nl="identity"):
    q, K, V = _check_qkv(q, K, V)
    try:
        fn = NONLINEARITIES[nl]
    except KeyError:
        raise InvalidArgument(f"unknown nonlinearity {nl!r}") from None
    w = gate_probs(K @ q / math.sqrt(q.shape[0]))
    return w @ fn(V)


def att_moe_forward(x, attn, experts: Sequence, top_k=None):
    if len(experts) != attn.N:
        raise InvalidArgument(f"need {attn.N} experts, got {len(experts)}")
    x = _vector(x, attn.d)
    g = gate_probs(attn_gate_scores(x, attn), top_k)
    h = np.array([expert_eval(x, e) for e in experts])
    return float(g @ h)
