"""Ground-truth measures and synthetic regression data.

Every random draw comes from a Philox (counter-based) generator keyed by
``(master seed, stream label, index)``, so measure, inputs and noise are
independent streams and growing ``n`` only appends rows.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidArgument
from .model import Atom, ExpertFamily, Gate, GateKind, MixingMeasure, moe_predict

__all__ = [
    "SynthConfig",
    "Dataset",
    "stream",
    "sample_true_measure",
    "sample_inputs",
    "generate_dataset",
]


def stream(seed, label, index=0):
    """Independent generator for ``(seed, label, index)``."""
    key = (zlib.crc32(label.encode()), int(index))
    ss = np.random.SeedSequence(int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class SynthConfig:
    d: int = 2
    N_star: int = 8
    gate: str = "QuadPoly"
    expert: str = "relu"  # linear | relu | tanh
    m: int = 2
    sigma2: float = 0.049
    sigma_r2: float | None = None  # default 0.01 / d
    sigma_e2: float | None = None  # default 1 / d
    input_dist: str = "uniform_cube"  # uniform_cube | gaussian
    B: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "gate", Gate.parse(self.gate).value)
        if self.d < 1 or self.N_star < 1:
            raise InvalidArgument("d and N_star must be >= 1")
        if self.sigma_r2 is None:
            object.__setattr__(self, "sigma_r2", 0.01 / self.d)
        if self.sigma_e2 is None:
            object.__setattr__(self, "sigma_e2", 1.0 / self.d)
        if not (self.sigma2 > 0 and self.sigma_r2 > 0 and self.sigma_e2 > 0 and self.B > 0):
            raise InvalidArgument("variances and the input bound must be positive")
        if self.input_dist not in ("uniform_cube", "gaussian"):
            raise InvalidArgument(f"unknown input_dist {self.input_dist!r}")
        ExpertFamily.named(self.expert, self.m)

    @property
    def family(self):
        return ExpertFamily.named(self.expert, self.m)

    @property
    def gate_kind(self):
        return GateKind(self.gate)

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, obj):
        if isinstance(obj, (str, bytes)):
            obj = json.loads(obj)
        return cls(**obj)

    def hash(self):
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    Y: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        Y = np.asarray(self.Y, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] < 1 or Y.shape != (X.shape[0],):
            raise InvalidArgument(f"bad dataset shapes {X.shape}, {Y.shape}")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def d(self):
        return self.X.shape[1]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"x_{j}" for j in range(self.d)] + ["y"])
        for x, y in zip(self.X, self.Y):
            w.writerow([repr(float(v)) for v in x] + [repr(float(y))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], rows[1:]
        if header[-1] != "y" or any(h != f"x_{j}" for j, h in enumerate(header[:-1])):
            raise InvalidArgument(f"unexpected CSV header {header}")
        arr = np.array([[float(v) for v in r] for r in body if r])
        return cls(arr[:, :-1], arr[:, -1])

    def to_json(self):
        return {"X": self.X.tolist(), "Y": self.Y.tolist(), "provenance": self.provenance}

    @classmethod
    def from_json(cls, obj):
        if isinstance(obj, (str, bytes)):
            obj = json.loads(obj)
        return cls(obj["X"], obj["Y"], obj.get("provenance", {}))


def sample_true_measure(cfg: SynthConfig, seed) -> MixingMeasure:
    """Gating entries ~ N(0, sigma_r2) for atoms 1..N*-1; the last atom is the zero anchor."""
    rng = stream(seed, "measure")
    d, fam, gate = cfg.d, cfg.family, cfg.gate_kind
    sr, se = math.sqrt(cfg.sigma_r2), math.sqrt(cfg.sigma_e2)
    gating = []
    for i in range(cfg.N_star):
        if i < cfg.N_star - 1:
            A = sr * rng.standard_normal((d, d))
            b = sr * rng.standard_normal(d)
            c = sr * rng.standard_normal()
        else:
            A, b, c = np.zeros((d, d)), np.zeros(d), 0.0
        gating.append((A, b, c))
    atoms = []
    for A, b, c in gating:
        eta = fam.unflatten(se * rng.standard_normal(fam.n_params(d)), d)
        # masks applied after drawing so all gate kinds share one random stream
        A = A if gate.uses_A else np.zeros_like(A)
        b = b if gate.uses_b else np.zeros_like(b)
        atoms.append(Atom(A, b, c, eta))
    return MixingMeasure(tuple(atoms), gate, d, fam)


def sample_inputs(cfg: SynthConfig, n, seed, label="inputs"):
    if n < 1:
        raise InvalidArgument("n must be >= 1")
    rng = stream(seed, label)
    if cfg.input_dist == "uniform_cube":
        return rng.uniform(-cfg.B, cfg.B, size=(n, cfg.d))
    return rng.standard_normal((n, cfg.d))


def generate_dataset(G_star, cfg: SynthConfig, n, seed) -> Dataset:
    if G_star.d != cfg.d:
        raise InvalidArgument("measure and config disagree on d")
    X = sample_inputs(cfg, n, seed)
    eps = math.sqrt(cfg.sigma2) * stream(seed, "noise").standard_normal(n)
    Y = moe_predict(X, G_star) + eps
    return Dataset(X, Y, {"seed": int(seed), "config_hash": cfg.hash()})
