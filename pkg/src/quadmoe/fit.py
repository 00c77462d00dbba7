"""Least-squares fitting by full-batch gradient descent."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import kernels
from .errors import DivergenceError, InvalidArgument
from .gradients import _xy
from .model import MixingMeasure, moe_predict
from .synth import SynthConfig, stream

__all__ = ["FitConfig", "init_overspecified", "gd_fit", "fn_l2_distance", "history_csv"]


@dataclass(frozen=True)
class FitConfig:
    lr: float = 0.1
    steps: int = 10
    perturb_scale: float = 0.01
    N_fit: int | None = None  # None: N_star + 1
    clamp: float | None = None  # optional |entry| bound against divergence
    identifiable_perturbation: bool = True

    def __post_init__(self):
        if not self.lr > 0:
            raise InvalidArgument("lr must be positive")
        if self.steps < 1:
            raise InvalidArgument("steps must be >= 1")
        if self.perturb_scale < 0:
            raise InvalidArgument("perturb_scale must be >= 0")

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, obj):
        return cls(**obj)


def init_overspecified(G_star, N_fit, perturb_scale=0.01, seed=0, duplicates=None,
                       identifiable=True):
    """Start near ``G_star`` with ``N_fit`` atoms.

    The first ``N_star`` atoms copy the truth; each extra atom copies a true atom
    drawn uniformly (or taken from ``duplicates``). Every copy of a true atom
    gets ``c - log(k)`` where ``k`` is its number of copies, so each Voronoi
    cell starts with the true total weight. Gaussian noise of scale
    ``perturb_scale`` is then added to every unmasked entry.

    With ``identifiable=True`` the noise on ``A`` is symmetrised and the gating
    noise (``A``, ``b``, ``c``) is centred across atoms. Antisymmetric parts of
    ``A`` and a common shift of all gate scores do not change the model, get
    zero gradient, and would otherwise survive any amount of descent.
    """
    N_star = G_star.N
    if N_fit is None:
        N_fit = N_star + 1
    if N_fit < N_star:
        raise InvalidArgument(f"N_fit={N_fit} < N_star={N_star}")
    rng = stream(seed, "init")
    if duplicates is None:
        duplicates = [int(j) for j in rng.integers(0, N_star, size=N_fit - N_star)]
    elif len(duplicates) != N_fit - N_star:
        raise InvalidArgument("need one duplicate source per extra atom")
    src = list(range(N_star)) + list(duplicates)
    counts = np.bincount(src, minlength=N_star)

    A, B, C, Eta = G_star.packed()
    A, B, Eta = A[src].copy(), B[src].copy(), Eta[src].copy()
    C = np.array([C[j] - math.log(counts[j]) for j in src])
    if perturb_scale > 0:
        s = perturb_scale
        nA = s * rng.standard_normal(A.shape)
        nB = s * rng.standard_normal(B.shape)
        nC = s * rng.standard_normal(C.shape)
        nE = s * rng.standard_normal(Eta.shape)
        if identifiable:
            nA = (nA + nA.transpose(0, 2, 1)) / math.sqrt(2.0)
            nA -= nA.mean(axis=0)
            nB -= nB.mean(axis=0)
            nC -= nC.mean()
        A += nA
        B += nB
        C += nC
        Eta += nE
    return MixingMeasure.from_packed(A, B, C, Eta, G_star), src


def gd_fit(G0, data, cfg: FitConfig):
    """Full-batch gradient descent on the mean squared error.

    Returns ``(G_hat, history)`` with ``cfg.steps + 1`` loss values, the first
    being the initial loss. Gate-masked blocks are never touched.
    """
    X, Y = _xy(data, G0.d)
    n = X.shape[0]
    fam, top_k = G0.family, G0.gate.top_k
    A, B, C, Eta = (a.copy() for a in G0.packed())
    history = []
    lr = cfg.lr
    for step in range(cfg.steps):
        sse, dA, dB, dC, dEta = kernels.loss_grad(X, Y, A, B, C, Eta, fam, top_k)
        loss = float(sse) / n
        if not math.isfinite(loss):
            raise DivergenceError(step, loss)
        history.append(loss)
        if G0.gate.uses_A:
            A -= (lr / n) * dA
        if G0.gate.uses_b:
            B -= (lr / n) * dB
        C -= (lr / n) * dC
        Eta -= (lr / n) * dEta
        if cfg.clamp is not None:
            for arr in (A, B, C, Eta):
                np.clip(arr, -cfg.clamp, cfg.clamp, out=arr)
    r = Y - kernels.predict(X, A, B, C, Eta, fam, top_k)
    loss = float(r @ r) / n
    if not math.isfinite(loss) or not all(np.all(np.isfinite(a)) for a in (A, B, C, Eta)):
        raise DivergenceError(cfg.steps, loss)
    history.append(loss)
    return MixingMeasure.from_packed(A, B, C, Eta, G0), history


def history_csv(history):
    lines = ["step,loss"] + [f"{i},{v:.17g}" for i, v in enumerate(history)]
    return "\n".join(lines) + "\n"


def fn_l2_distance(G1, G2, dist=None, M=20000, seed=0):
    """Monte-Carlo ``L2(mu)`` distance between two regression functions.

    ``dist`` is a :class:`SynthConfig` (its ``input_dist`` and ``B`` are used);
    the default is uniform on ``[-1, 1]^d``.
    """
    if M < 1:
        raise InvalidArgument("M must be >= 1")
    if G1.d != G2.d:
        raise InvalidArgument("measures have different input dimensions")
    if dist is None:
        dist = SynthConfig(d=G1.d, N_star=1)
    rng = stream(seed, "mc")
    if dist.input_dist == "uniform_cube":
        X = rng.uniform(-dist.B, dist.B, size=(M, G1.d))
    else:
        X = rng.standard_normal((M, G1.d))
    diff = moe_predict(X, G1) - moe_predict(X, G2)
    return math.sqrt(float(diff @ diff) / M)


def dump_history(history, path):
    with open(path, "w", newline="\n") as fh:
        fh.write(history_csv(history))


def dump_measure(G, path):
    with open(path, "w") as fh:
        json.dump(G.to_json(), fh, indent=2)
