"""Identifiability diagnostics.

* derivative feature matrices ``x^nu * d^gamma h / d eta^gamma`` and a
  singular-value independence test on them;
* finite-difference checks of the two parameter interactions of
  ``F(x; A, b, eta) = exp(x^T A x + b^T x) h(x, eta)``;
* the ``rbar`` polynomial system, its residual and a multi-start search;
* the explicit slowly converging sequence for linear experts.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

from .errors import InvalidArgument, NumericalFailure
from .model import Atom, MixingMeasure, activation
from .synth import stream

__all__ = [
    "ColumnLabel",
    "FeatureMatrix",
    "IdentReport",
    "derivative_features",
    "sample_points",
    "strong_ident_report",
    "pde_residual_gate",
    "pde_residual_linear_expert",
    "RBar",
    "rbar",
    "polysys_residual",
    "polysys_search",
    "PolySysResult",
    "SlowSequence",
    "slow_sequence",
]

TAU = 1e-8


# --------------------------------------------------------------------------
# derivative features


@dataclass(frozen=True)
class ColumnLabel:
    j: int  # expert index
    gamma: tuple  # parameter names differentiated, sorted by flat index
    nu: tuple  # monomial exponent

    def __str__(self):
        g = "*".join(self.gamma) if self.gamma else "h"
        return f"j={self.j} nu={self.nu} d[{g}]"

    def to_json(self):
        return {"j": self.j, "gamma": list(self.gamma), "nu": list(self.nu)}


@dataclass(frozen=True)
class FeatureMatrix:
    values: np.ndarray  # (M, C)
    labels: tuple
    keys: tuple  # identical keys <=> identical functions of x

    def __post_init__(self):
        if self.values.shape[1] != len(self.labels):
            raise InvalidArgument("one label per column required")
        if len(set(self.labels)) != len(self.labels):
            raise InvalidArgument("duplicate column labels")

    @property
    def shape(self):
        return self.values.shape

    def column(self, label):
        return self.values[:, self.labels.index(label)]


def param_names(family, d):
    if family.kind == "linear":
        return [f"beta1_{u}" for u in range(d)] + ["beta0"]
    m = family.m
    names = [f"W_{k}_{u}" for k in range(m) for u in range(d)]
    names += [f"v_{k}" for k in range(m)] + [f"a_{k}" for k in range(m)] + ["a0"]
    return names


def _parse(family, d, p):
    """(kind, unit, input coordinate) of flat parameter ``p``."""
    if family.kind == "linear":
        return ("beta1", None, p) if p < d else ("beta0", None, None)
    m = family.m
    if p < m * d:
        return "W", p // d, p % d
    if p < m * d + m:
        return "v", p - m * d, None
    if p < m * d + 2 * m:
        return "a", p - m * d - m, None
    return "a0", None, None


def _derivative(family, eta, d, gamma):
    """Structure of ``d^gamma h``: ``None`` if identically zero, else
    ``(kernel, monomial)`` with ``d^gamma h = kernel(x) * x^monomial``.

    Kernels are ``('h',)``, ``('one',)`` or ``(tag, unit)`` with tag among
    ``'s'`` (sigma), ``'as1'`` (a * sigma'), ``'s1'`` (sigma') and ``'as2'``
    (a * sigma'').
    """
    mono = [0] * d
    if not gamma:
        return ("h",), tuple(mono)
    parts = [_parse(family, d, p) for p in gamma]
    if family.kind == "linear":
        if len(gamma) > 1:
            return None
        kind, _, u = parts[0]
        if u is not None:
            mono[u] += 1
        return ("one",), tuple(mono)
    if len(gamma) > 2:
        raise InvalidArgument("two-layer derivatives are implemented up to order 2")
    kinds = [k for k, _, _ in parts]
    if "a0" in kinds:
        return (("one",), tuple(mono)) if len(gamma) == 1 else None
    units = {k for _, k, _ in parts}
    if len(units) > 1:
        return None
    k = units.pop()
    for kind, _, u in parts:
        if kind == "W":
            mono[u] += 1
    n_a = kinds.count("a")
    if len(gamma) == 1:
        return (("s", k) if n_a else ("as1", k)), tuple(mono)
    if n_a == 2:
        return None
    if n_a == 1:
        return ("s1", k), tuple(mono)
    if family.activation == "relu":
        return None  # second derivative vanishes off the kink
    return ("as2", k), tuple(mono)


def _h_batch(eta, X):
    if hasattr(eta, "beta1"):
        return X @ eta.beta1 + eta.beta0
    return activation(eta.activation, 0)(X @ eta.W.T + eta.v) @ eta.a + eta.a0


def _kernel_values(family, eta, X, kernel):
    tag = kernel[0]
    if tag == "h":
        return _h_batch(eta, X)
    if tag == "one":
        return np.ones(X.shape[0])
    k = kernel[1]
    z = X @ eta.W[k] + eta.v[k]
    if tag == "s":
        return activation(family.activation, 0)(z)
    if tag == "s1":
        return activation(family.activation, 1)(z)
    if tag == "as1":
        return eta.a[k] * activation(family.activation, 1)(z)
    return eta.a[k] * activation(family.activation, 2)(z)


def _monomials(d, degree):
    """Exponent tuples of total degree ``degree`` in lexicographic order (descending)."""
    out = []
    for combo in itertools.combinations_with_replacement(range(d), degree):
        e = [0] * d
        for u in combo:
            e[u] += 1
        out.append(tuple(e))
    return sorted(set(out), reverse=True)


def _index_set(mode, order):
    """Pairs (|gamma|, allowed |nu| values)."""
    if mode == "mono":
        return [(0, (0, 2, 4)), (1, (0, 2)), (2, (0,))]
    if order < 0:
        raise InvalidArgument("order must be >= 0")
    return [(g, tuple(range(0, 2 * (order - g) + 1))) for g in range(order + 1)]


def derivative_features(family, params, X, mode="poly", order=1, wrt="all"):
    """Columns ``x^nu * d^gamma h(x; eta_j)`` evaluated at the rows of ``X``.

    ``mode='poly'`` uses ``|gamma| <= order`` and ``|nu| <= 2 (order - |gamma|)``;
    ``mode='mono'`` uses ``|nu| in {0, 2, 4}`` and ``|gamma| <= 2 - |nu|/2``.
    ``gamma`` ranges over multisets of expert parameters (``wrt='hidden'``
    restricts two-layer experts to ``W`` and ``v``). Derivatives that vanish
    identically are left out.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise InvalidArgument("X must be a matrix")
    d = X.shape[1]
    if mode not in ("poly", "mono"):
        raise InvalidArgument(f"unknown mode {mode!r}")
    if any(e.family != family or e.d != d for e in params):
        raise InvalidArgument("every expert must match the family and the input dimension")
    names = param_names(family, d)
    active = list(range(len(names)))
    if wrt == "hidden":
        if family.kind != "two_layer":
            raise InvalidArgument("wrt='hidden' applies to two-layer experts")
        active = list(range(family.m * d + family.m))
    elif wrt != "all":
        raise InvalidArgument(f"unknown wrt {wrt!r}")
    plan = _index_set(mode, order)
    cols, labels, keys = [], [], []
    for j, eta in enumerate(params):
        cache = {}
        for g_order, nu_degrees in plan:
            for gamma in itertools.combinations_with_replacement(active, g_order):
                structure = _derivative(family, eta, d, gamma)
                if structure is None:
                    continue
                kernel, mono = structure
                if kernel not in cache:
                    cache[kernel] = _kernel_values(family, eta, X, kernel)
                base = cache[kernel] * np.prod(X ** np.array(mono), axis=1)
                for deg in nu_degrees:
                    for nu in _monomials(d, deg):
                        cols.append(base * np.prod(X ** np.array(nu), axis=1))
                        labels.append(ColumnLabel(j, tuple(names[p] for p in gamma), nu))
                        total = tuple(a + b for a, b in zip(mono, nu))
                        owner = None if kernel == ("one",) else j
                        keys.append((owner, kernel, total))
    return FeatureMatrix(np.column_stack(cols), tuple(labels), tuple(keys))


def sample_points(d, M, seed, family=None, params=(), B=1.0, eps=1e-6):
    """``M`` points uniform on ``[-B, B]^d``; ReLU kink-adjacent rows are redrawn."""
    rng = stream(seed, "ident-points")
    X = rng.uniform(-B, B, size=(M, d))
    if family is None or family.kind != "two_layer" or family.activation != "relu":
        return X
    for _ in range(100):
        bad = np.zeros(M, dtype=bool)
        for eta in params:
            bad |= np.any(np.abs(X @ eta.W.T + eta.v) < eps, axis=1)
        if not bad.any():
            return X
        X[bad] = rng.uniform(-B, B, size=(int(bad.sum()), d))
    raise NumericalFailure("could not draw points away from the ReLU kinks")


@dataclass(frozen=True)
class IdentReport:
    min_singular_value: float
    rank: int
    verdict: str
    witness: tuple | None = None
    n_columns: int = 0
    merged: int = 0

    @property
    def independent(self):
        return self.verdict == "independent"

    def to_json(self):
        return {
            "min_singular_value": self.min_singular_value,
            "rank": self.rank,
            "verdict": self.verdict,
            "witness": None if self.witness is None else [w.to_json() for w in self.witness],
            "n_columns": self.n_columns,
            "merged": self.merged,
        }

    def dumps(self):
        return json.dumps(self.to_json())


def strong_ident_report(features: FeatureMatrix, tau=TAU, merge_identical=False):
    """Smallest singular value of the unit-RMS column-normalised feature matrix.

    The matrix is divided by ``sqrt(M)`` so every column has unit norm and
    ``sigma_min`` lies in ``[0, 1]``. With ``merge_identical`` columns that are
    the same function of ``x`` (same key) are kept once, i.e. the feature
    family is treated as a set. When dependent, the witness is the pair with
    the largest absolute cosine (first such pair in column order).
    """
    V, labels = features.values, list(features.labels)
    merged = 0
    if merge_identical:
        seen, keep = set(), []
        for i, k in enumerate(features.keys):
            if k not in seen:
                seen.add(k)
                keep.append(i)
        merged = len(labels) - len(keep)
        V = V[:, keep]
        labels = [labels[i] for i in keep]
    M, C = V.shape
    if M < 2 * C:
        raise InvalidArgument(f"need M >= 2 * columns ({2 * C}), got M={M}")
    rms = np.sqrt(np.mean(V * V, axis=0))
    zero = np.flatnonzero(~(rms > 0))
    if zero.size:
        k = int(zero[0])
        return IdentReport(0.0, int(C - zero.size), "dependent", (labels[k], labels[k]), C, merged)
    Z = V / rms / math.sqrt(M)
    s = np.linalg.svd(Z, compute_uv=False)
    smin = float(s[-1])
    rank = int(np.sum(s > tau))
    if smin >= tau:
        return IdentReport(smin, rank, "independent", None, C, merged)
    cos = np.abs(Z.T @ Z)
    np.fill_diagonal(cos, -1.0)
    best = cos.max()
    i, k = np.argwhere(cos >= best - 1e-12)[0]
    return IdentReport(smin, rank, "dependent", (labels[i], labels[k]), C, merged)


# --------------------------------------------------------------------------
# parameter interactions


def _F(A, b, x, hval):
    e = float(x @ A @ x + b @ x)
    if e > 700.0:
        raise NumericalFailure(f"exp overflow: exponent {e:.3g}")
    return math.exp(e) * hval


def pde_residual_gate(A, b, eta, x, h=1e-4):
    """``dF/dA_uv - d2F/db_u db_v`` for ``F = exp(x^T A x + b^T x) h(x, eta)``.

    The first term is analytic (``x_u x_v F``); the second uses central
    differences of step ``h`` in ``b``.
    """
    A = np.asarray(A, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    d = b.shape[0]
    if A.shape != (d, d) or x.shape != (d,):
        raise InvalidArgument("A, b and x disagree on dimension")
    hval = eta(x)
    F0 = _F(A, b, x, hval)
    E = np.eye(d) * h
    out = np.empty((d, d))
    for u in range(d):
        for v in range(d):
            if u == v:
                second = (_F(A, b + E[u], x, hval) - 2.0 * F0 + _F(A, b - E[u], x, hval)) / (h * h)
            else:
                second = (
                    _F(A, b + E[u] + E[v], x, hval)
                    - _F(A, b + E[u] - E[v], x, hval)
                    - _F(A, b - E[u] + E[v], x, hval)
                    + _F(A, b - E[u] - E[v], x, hval)
                ) / (4.0 * h * h)
            out[u, v] = x[u] * x[v] * F0 - second
    return out


def pde_residual_linear_expert(A, b, beta1, beta0, x, h=1e-4):
    """``d2F/db_u d beta0 - dF/d beta1_u`` for a linear expert, mixed central differences on the left."""
    A = np.asarray(A, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    beta1 = np.asarray(beta1, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    d = b.shape[0]
    if A.shape != (d, d) or x.shape != (d,) or beta1.shape != (d,):
        raise InvalidArgument("A, b, beta1 and x disagree on dimension")

    def F(bb, b0):
        return _F(A, bb, x, float(beta1 @ x + b0))

    out = np.empty(d)
    for u in range(d):
        e = np.zeros(d)
        e[u] = h
        mixed = (F(b + e, beta0 + h) - F(b + e, beta0 - h) - F(b - e, beta0 + h) + F(b - e, beta0 - h)) / (
            4.0 * h * h
        )
        out[u] = mixed - x[u] * _F(A, b, x, 1.0)
    return out


# --------------------------------------------------------------------------
# the rbar polynomial system


@dataclass(frozen=True)
class RBar:
    value: int | None = None
    lower_bound: int | None = None

    def to_json(self):
        return {"value": self.value} if self.value is not None else {"lower_bound": self.lower_bound}


def rbar(m) -> RBar:
    """Exact for ``m <= 3``; only the lower bound 7 is known beyond."""
    m = int(m)
    if m < 1:
        raise InvalidArgument("rbar needs m >= 1")
    if m <= 3:
        return RBar({1: 1, 2: 4, 3: 6}[m])
    return RBar(None, 7)


def _polysys_terms(r):
    """Exponent table: rows (alpha - 1, n1, n2, 1 / (n1! n2!)) for alpha = 1..r."""
    rows = []
    for alpha in range(1, r + 1):
        for n2 in range(alpha // 2 + 1):
            n1 = alpha - 2 * n2
            rows.append((alpha - 1, n1, n2, 1.0 / (math.factorial(n1) * math.factorial(n2))))
    t = np.array(rows)
    return t[:, 0].astype(int), t[:, 1], t[:, 2], t[:, 3]


def polysys_residual(p, g1, g2, r):
    """Entry ``alpha`` (1..r): ``sum_l sum_{n1 + 2 n2 = alpha} p_l^2 g1_l^n1 g2_l^n2 / (n1! n2!)``."""
    p, g1, g2 = (np.asarray(a, dtype=np.float64) for a in (p, g1, g2))
    if not (p.shape == g1.shape == g2.shape) or p.ndim != 1:
        raise InvalidArgument("p, g1 and g2 must be vectors of one length")
    if r < 1:
        raise InvalidArgument("r must be >= 1")
    return _residual(p, g1, g2, *_polysys_terms(r), r)


def _residual(p, g1, g2, row, n1, n2, coef, r):
    terms = coef[:, None] * g1[None, :] ** n1[:, None] * g2[None, :] ** n2[:, None]
    out = np.zeros(r)
    np.add.at(out, row, terms @ (p * p))
    return out


def _jacobian(p, g1, g2, row, n1, n2, coef, r):
    m = p.shape[0]
    P1 = g1[None, :] ** n1[:, None]
    P2 = g2[None, :] ** n2[:, None]
    # n * g^(n-1), written to stay finite at g = 0
    D1 = n1[:, None] * np.where(n1[:, None] > 0, g1[None, :] ** np.maximum(n1 - 1, 0)[:, None], 0.0)
    D2 = n2[:, None] * np.where(n2[:, None] > 0, g2[None, :] ** np.maximum(n2 - 1, 0)[:, None], 0.0)
    p2 = p * p
    J = np.zeros((r, 3 * m))
    np.add.at(J[:, :m], row, coef[:, None] * P1 * P2 * (2.0 * p))
    np.add.at(J[:, m : 2 * m], row, coef[:, None] * D1 * P2 * p2)
    np.add.at(J[:, 2 * m :], row, coef[:, None] * P1 * D2 * p2)
    return J


@dataclass(frozen=True)
class PolySysResult:
    m: int
    r: int
    best_residual_norm: float
    best_point: dict
    best_restart: int
    budget: int
    constrained: bool = True
    certified: bool = field(default=False)

    def to_json(self):
        return {
            "m": self.m,
            "r": self.r,
            "best_residual_norm": self.best_residual_norm,
            "best_point": self.best_point,
            "best_restart": self.best_restart,
            "budget": self.budget,
            "constrained": self.constrained,
            "certified_solution": self.certified,
        }


def _polysys_restart(m, r, seed, k):
    rng = stream(seed, "polysys", k)
    lead, sign = divmod(k % (2 * m), 2)
    lo = np.full(3 * m, -np.inf)
    hi = np.full(3 * m, np.inf)
    lo[:m] = 0.1  # residual is even in p, so p >= 0.1 covers |p| >= 0.1
    if sign == 0:
        lo[m + lead] = 0.1
    else:
        hi[m + lead] = -0.1
    z0 = np.clip(rng.uniform(-3.0, 3.0, size=3 * m), lo, hi)

    table = _polysys_terms(r)

    def fun(z):
        return _residual(z[:m], z[m : 2 * m], z[2 * m :], *table, r)

    def jac(z):
        return _jacobian(z[:m], z[m : 2 * m], z[2 * m :], *table, r)

    sol = least_squares(fun, z0, jac=jac, bounds=(lo, hi), xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=500)
    z = sol.x
    return float(np.linalg.norm(fun(z))), z


def polysys_search(m, r, budget=100, seed=0, workers=1):
    """Multi-start bounded least squares on the system over
    ``|p_l| >= 0.1`` and ``max_l |g1_l| >= 0.1``.

    Restart ``k`` pins ``g1`` of variable ``k // 2 mod m`` to the side ``+`` or
    ``-`` of ``0.1`` (alternating) and starts uniformly in ``[-3, 3]``. A
    residual below ``1e-8`` certifies a non-trivial solution; a floor after the
    budget is only evidence that none exists.
    """
    if budget < 1:
        raise InvalidArgument("budget must be >= 1")
    if m < 1 or r < 1:
        raise InvalidArgument("m and r must be >= 1")
    ks = range(budget)
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_polysys_restart, [m] * budget, [r] * budget, [seed] * budget, ks))
    else:
        results = [_polysys_restart(m, r, seed, k) for k in ks]
    best = min(range(budget), key=lambda k: (results[k][0], k))
    norm, z = results[best]
    point = {"p": z[:m].tolist(), "g1": z[m : 2 * m].tolist(), "g2": z[2 * m :].tolist()}
    return PolySysResult(m, r, norm, point, best, budget, True, norm < 1e-8)


# --------------------------------------------------------------------------
# slowly converging sequence for linear experts


@dataclass(frozen=True)
class SlowSequence:
    G_n: MixingMeasure
    loss_closed_form: float
    loss_computed: float
    fn_dist: float

    def to_json(self, n=None, r=None):
        out = {
            "loss_closed_form": self.loss_closed_form,
            "loss_computed": self.loss_computed,
            "fn_dist": self.fn_dist,
        }
        if n is not None:
            out.update(n=n, r=r)
        return out


def slow_measure(G_star, n, r):
    """The first true atom is split into two copies with ``beta0 +- 1/n`` and
    weight ``exp(c*_1)/2 + 1/(2 n^(r+1))`` each; the other atoms are copied."""
    if G_star.family.kind != "linear":
        raise InvalidArgument("the slow sequence is defined for linear experts")
    if n < 2:
        raise InvalidArgument("n must be >= 2")
    first = G_star.atoms[0]
    w = 0.5 * first.weight + 0.5 / float(n) ** (r + 1)
    c = math.log(w)
    fam, d = G_star.family, G_star.d
    beta1 = first.eta.beta1
    plus = fam.unflatten(np.concatenate([beta1, [first.eta.beta0 + 1.0 / n]]), d)
    minus = fam.unflatten(np.concatenate([beta1, [first.eta.beta0 - 1.0 / n]]), d)
    atoms = [Atom(first.A, first.b, c, plus), Atom(first.A, first.b, c, minus)]
    atoms += list(G_star.atoms[1:])
    return G_star.replace_atoms(atoms)


def slow_sequence(G_star, n, r, M=50000, seed=0, dist=None):
    from .fit import fn_l2_distance
    from .voronoi import loss_L2r

    G_n = slow_measure(G_star, n, r)
    n = float(n)
    closed = 1.0 / n ** (r + 1) + (G_star.atoms[0].weight + 1.0 / n ** (r + 1)) / n**r
    computed = loss_L2r(G_n, G_star, r).total
    return SlowSequence(G_n, closed, computed, fn_l2_distance(G_n, G_star, dist, M, seed))
