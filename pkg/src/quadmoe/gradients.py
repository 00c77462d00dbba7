"""Mean squared-error objective, its analytic gradient, and a finite-difference checker.

The objective is ``(1/n) * sum_i (y_i - f_G(x_i))**2``. Per sample, with gate
probabilities ``g``, expert outputs ``h`` and ``f = g @ h``::

    df/dc_i   = g_i (h_i - f)
    df/db_i   = g_i (h_i - f) x
    df/dA_i   = g_i (h_i - f) x x^T
    df/deta_i = g_i dh/deta (x, eta_i)

Flattening order (used by :func:`grad_check` reports): atoms in sequence; within
an atom ``A`` row-major, then ``b``, ``c``, then the expert fields in declared
order (``beta1, beta0`` or ``W`` row-major, ``v, a, a0``).
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import InvalidArgument, NumericalFailure
from .model import AttnGateParams, Gate, GateKind, MixingMeasure, induced_quadratic, Atom

__all__ = [
    "GradientRecord",
    "GradCheckReport",
    "sq_loss",
    "sq_loss_grad",
    "finite_diff_grad",
    "grad_check",
    "kink_mask",
    "attn_measure",
    "attn_flat",
    "attn_from_flat",
    "attn_sq_loss",
    "attn_sq_loss_grad",
]


def _xy(data, d):
    X, Y = (data.X, data.Y) if hasattr(data, "X") else data
    X = np.ascontiguousarray(X, dtype=np.float64)
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise InvalidArgument("dataset must be non-empty")
    if X.shape[1] != d or Y.shape != (X.shape[0],):
        raise InvalidArgument(f"dataset shapes {X.shape}, {Y.shape} do not match d={d}")
    return X, Y


@dataclass(frozen=True)
class GradientRecord:
    dA: np.ndarray  # (N, d, d)
    db: np.ndarray  # (N, d)
    dc: np.ndarray  # (N,)
    dEta: np.ndarray  # (N, q) in expert flattening order
    family: object

    @property
    def N(self):
        return self.dc.shape[0]

    def eta(self, i):
        """Expert-shaped view of the gradient for atom ``i``."""
        return self.family.unflatten(self.dEta[i], self.db.shape[1])

    def flat(self):
        return np.concatenate(
            [
                np.concatenate([self.dA[i].ravel(), self.db[i], [self.dc[i]], self.dEta[i]])
                for i in range(self.N)
            ]
        )

    def scaled(self, s):
        return GradientRecord(self.dA * s, self.db * s, self.dc * s, self.dEta * s, self.family)


def sq_loss(G, data):
    X, Y = _xy(data, G.d)
    r = Y - _predict(G, X)
    return float(r @ r) / X.shape[0]


def _predict(G, X):
    A, B, C, Eta = G.packed()
    return kernels.predict(X, A, B, C, Eta, G.family, G.gate.top_k)


def sq_loss_grad(G, data, with_loss=False):
    X, Y = _xy(data, G.d)
    n = X.shape[0]
    A, B, C, Eta = G.packed()
    sse, dA, dB, dC, dEta = kernels.loss_grad(X, Y, A, B, C, Eta, G.family, G.gate.top_k)
    dA = dA / n
    dB = dB / n
    if not G.gate.uses_A:
        dA = np.zeros_like(dA)
    if not G.gate.uses_b:
        dB = np.zeros_like(dB)
    rec = GradientRecord(dA, dB, dC / n, dEta / n, G.family)
    if with_loss:
        return sse / n, rec
    return rec


def finite_diff_grad(objective, point, h=1e-5):
    """Central differences ``(f(p + h e_k) - f(p - h e_k)) / 2h`` per coordinate."""
    if not h > 0:
        raise InvalidArgument("step h must be positive")
    p = np.array(point, dtype=np.float64)
    out = np.empty_like(p)
    for k in range(p.size):
        save = p[k]
        p[k] = save + h
        fp = objective(p)
        p[k] = save - h
        fm = objective(p)
        p[k] = save
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalFailure(f"objective is not finite near coordinate {k}")
        out[k] = (fp - fm) / (2.0 * h)
    return out


def kink_mask(G, X, eps=1e-4):
    """Flat boolean mask of coordinates whose finite difference straddles a ReLU kink.

    Only ``W`` rows and ``v`` entries of hidden units with some
    ``|pre-activation| < eps`` are flagged.
    """
    mask = np.zeros(G.atom_size() * G.N, dtype=bool)
    fam = G.family
    if fam.kind != "two_layer" or fam.activation != "relu":
        return mask
    d, m = G.d, fam.m
    base = d * d + d + 1
    for i, at in enumerate(G.atoms):
        Z = X @ at.eta.W.T + at.eta.v
        near = np.any(np.abs(Z) < eps, axis=0)
        off = i * G.atom_size() + base
        for j in np.flatnonzero(near):
            mask[off + j * d : off + (j + 1) * d] = True
            mask[off + m * d + j] = True
    return mask


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_err: float
    worst_coordinate: int
    passed: bool
    skipped: int = 0

    def to_json(self):
        return {
            "max_rel_err": self.max_rel_err,
            "worst_coordinate": self.worst_coordinate,
            "pass": self.passed,
        }

    def dumps(self):
        return json.dumps(self.to_json())


def rel_err(a, b):
    return np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))


def grad_check(G, data, tol=1e-5, h=1e-5, grad_fn=None, skip_kinks=True):
    if not tol > 0:
        raise InvalidArgument("tol must be positive")
    X, Y = _xy(data, G.d)
    grad_fn = grad_fn or sq_loss_grad
    analytic = grad_fn(G, (X, Y)).flat()
    numeric = finite_diff_grad(lambda p: sq_loss(MixingMeasure.from_flat(p, G), (X, Y)), G.flat(), h)
    err = rel_err(analytic, numeric)
    skip = kink_mask(G, X) if skip_kinks else np.zeros(err.shape, dtype=bool)
    err = np.where(skip, 0.0, err)
    k = int(np.argmax(err))
    return GradCheckReport(float(err[k]), k, bool(err[k] <= tol), int(skip.sum()))


# --------------------------------------------------------------------------
# attention-form gate parameters, differentiated through the induced quadratic


def attn_measure(attn, experts, top_k=None):
    """The QuadPoly (or QuadMono) measure whose gate equals the attention-form gate."""
    tag = Gate.QUAD_MONO if attn.monomial else Gate.QUAD_POLY
    atoms = [Atom(A, b, c, e) for (A, b, c), e in zip(induced_quadratic(attn), experts)]
    return MixingMeasure(tuple(atoms), GateKind(tag, top_k))


def attn_flat(attn, experts):
    """Flat vector: ``Wq, bq, Wk, bk`` (biases only when present), then each expert."""
    parts = [attn.Wq.ravel()]
    if not attn.monomial:
        parts.append(attn.bq)
    parts.append(attn.Wk.ravel())
    if not attn.monomial:
        parts.append(attn.bk.ravel())
    parts.extend(e.flat() for e in experts)
    return np.concatenate(parts)


def attn_from_flat(vec, like, experts_like):
    r, d, N = like.r, like.d, like.N
    fam = experts_like[0].family
    i = 0

    def take(k):
        nonlocal i
        out = vec[i : i + k]
        i += k
        return out

    Wq = take(r * d).reshape(r, d)
    bq = None if like.monomial else take(r)
    Wk = take(N * r * d).reshape(N, r, d)
    bk = None if like.monomial else take(N * r).reshape(N, r)
    q = fam.n_params(d)
    experts = [fam.unflatten(take(q), d) for _ in range(N)]
    return AttnGateParams(Wq, Wk, bq, bk), experts


def attn_sq_loss(attn, experts, data, top_k=None):
    return sq_loss(attn_measure(attn, experts, top_k), data)


def attn_sq_loss_grad(attn, experts, data, top_k=None):
    """Gradient w.r.t. the flat attention-form parameter vector (see :func:`attn_flat`).

    With ``A_i = Wq^T Wk_i``, ``b_i = Wk_i^T bq + Wq^T bk_i`` and ``c_i = bq^T bk_i``
    the chain rule gives ``dWq = sum_i Wk_i dA_i^T + bk_i db_i^T``,
    ``dWk_i = Wq dA_i + bq db_i^T``, ``dbq = sum_i Wk_i db_i + dc_i bk_i`` and
    ``dbk_i = Wq db_i + dc_i bq``.
    """
    G = attn_measure(attn, experts, top_k)
    rec = sq_loss_grad(G, data)
    Wq, Wk = attn.Wq, attn.Wk
    dWq = np.zeros_like(Wq)
    dWk = np.zeros_like(Wk)
    for i in range(attn.N):
        dWq += Wk[i] @ rec.dA[i].T
        dWk[i] = Wq @ rec.dA[i]
    parts = [dWq]
    if not attn.monomial:
        dbq = np.zeros(attn.r)
        dbk = np.zeros_like(attn.bk)
        for i in range(attn.N):
            dWq += np.outer(attn.bk[i], rec.db[i])
            dWk[i] += np.outer(attn.bq, rec.db[i])
            dbq += Wk[i] @ rec.db[i] + rec.dc[i] * attn.bk[i]
            dbk[i] = Wq @ rec.db[i] + rec.dc[i] * attn.bq
        parts = [dWq.ravel(), dbq, dWk.ravel(), dbk.ravel()]
    else:
        parts = [dWq.ravel(), dWk.ravel()]
    return np.concatenate(parts + [rec.dEta.ravel()])
