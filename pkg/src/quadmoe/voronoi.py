"""Voronoi-cell matching of a fitted measure to a true one, and the Voronoi losses.

Fitted atom ``i`` belongs to the cell of the true atom ``j`` nearest in the
concatenated parameter ``omega = (A, b, eta)``; the gating bias ``c`` is not
part of the distance. Matrices use the Frobenius norm.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument, UnsupportedCellSize
from .model import Gate

__all__ = [
    "VoronoiAssignment",
    "LossBreakdown",
    "CellErrors",
    "assign_cells",
    "loss_L1",
    "loss_L3",
    "loss_L2r",
    "per_param_errors",
]


@dataclass(frozen=True)
class VoronoiAssignment:
    cells: tuple  # cells[j] = sorted tuple of fitted indices
    owner: tuple  # owner[i] = true index of fitted atom i

    def sizes(self):
        return [len(c) for c in self.cells]

    def to_json(self):
        return {"cells": {str(j): list(c) for j, c in enumerate(self.cells)}}


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    weight_term: float
    exact_cells_term: float
    over_cells_term: float
    cells: list = field(default_factory=list)

    def to_json(self):
        return {
            "total": self.total,
            "weight_term": self.weight_term,
            "exact_cells_term": self.exact_cells_term,
            "over_cells_term": self.over_cells_term,
            "cells": self.cells,
        }

    def dumps(self):
        return json.dumps(self.to_json())


def _check_pair(G, G_star):
    if G.d != G_star.d:
        raise InvalidArgument(f"input dimensions differ: {G.d} vs {G_star.d}")
    if G.family != G_star.family:
        raise InvalidArgument(f"expert architectures differ: {G.family} vs {G_star.family}")


def _diffs(ai, aj):
    """(||dA||_F, ||db||, ||d eta||) between two atoms."""
    return (
        float(np.linalg.norm(ai.A - aj.A)),
        float(np.linalg.norm(ai.b - aj.b)),
        float(np.linalg.norm(ai.eta.flat() - aj.eta.flat())),
    )


def _dist(ai, aj):
    dA, db, de = _diffs(ai, aj)
    return math.sqrt(dA * dA + db * db + de * de)


def assign_cells(G, G_star) -> VoronoiAssignment:
    _check_pair(G, G_star)
    owner = []
    for at in G.atoms:
        dists = [_dist(at, s) for s in G_star.atoms]
        owner.append(int(np.argmin(dists)))  # first minimum: lowest j wins ties
    cells = tuple(tuple(i for i, o in enumerate(owner) if o == j) for j in range(G_star.N))
    return VoronoiAssignment(cells, tuple(owner))


def _weight_term(G, G_star, asg):
    w = G.weights
    per = [abs(float(sum(w[i] for i in cell)) - G_star.atoms[j].weight) for j, cell in enumerate(asg.cells)]
    return per


def _breakdown(G, G_star, asg, over_fn, exact_fn):
    w = G.weights
    wdiff = _weight_term(G, G_star, asg)
    exact = over = 0.0
    cells = []
    for j, cell in enumerate(asg.cells):
        star = G_star.atoms[j]
        fn = over_fn(len(cell)) if len(cell) > 1 else exact_fn
        contrib = 0.0
        for i in cell:
            contrib += w[i] * fn(G.atoms[i], star)
        if len(cell) > 1:
            over += contrib
        else:
            exact += contrib
        cells.append({"j": j, "members": list(cell), "contribution": contrib, "weight_diff": wdiff[j]})
    weight = float(sum(wdiff))
    return LossBreakdown(exact + over + weight, weight, exact, over, cells)


def _require_gate(G, tags, what):
    if G.gate.tag not in tags:
        raise InvalidArgument(f"{what} needs a {'/'.join(t.value for t in tags)} gate, got {G.gate.tag.value}")


def loss_L1(G, G_star, rbar_lookup=None) -> LossBreakdown:
    """Voronoi loss for quadratic polynomial gates.

    Cells with several atoms use exponents ``rbar(|V_j|)/2`` on ``A``,
    ``rbar(|V_j|)`` on ``b`` and 2 on ``eta``; singletons use exponent 1.
    """
    _check_pair(G, G_star)
    _require_gate(G, (Gate.QUAD_POLY,), "loss_L1")
    if rbar_lookup is None:
        from .ident import rbar as rbar_lookup
    asg = assign_cells(G, G_star)

    def over_fn(size):
        rb = rbar_lookup(size)
        if rb.value is None:
            raise UnsupportedCellSize(size)
        r = rb.value

        def term(ai, aj):
            dA, db, de = _diffs(ai, aj)
            return dA ** (r / 2) + db ** r + de ** 2

        return term

    return _breakdown(G, G_star, asg, over_fn, lambda ai, aj: sum(_diffs(ai, aj)))


def loss_L3(G, G_star) -> LossBreakdown:
    """Voronoi loss for quadratic monomial gates (squares on over-fitted cells)."""
    _check_pair(G, G_star)
    _require_gate(G, (Gate.QUAD_MONO,), "loss_L3")
    asg = assign_cells(G, G_star)

    def over(ai, aj):
        dA, _, de = _diffs(ai, aj)
        return dA ** 2 + de ** 2

    def exact(ai, aj):
        dA, _, de = _diffs(ai, aj)
        return dA + de

    return _breakdown(G, G_star, asg, lambda size: over, exact)


def loss_L2r(G, G_star, r) -> LossBreakdown:
    """Voronoi loss for linear experts with a common exponent ``r`` on every block."""
    _check_pair(G, G_star)
    if G.family.kind != "linear":
        raise InvalidArgument("loss_L2r needs linear experts")
    if r < 1:
        raise InvalidArgument("r must be >= 1")
    asg = assign_cells(G, G_star)

    def term(ai, aj):
        dA = float(np.linalg.norm(ai.A - aj.A))
        db = float(np.linalg.norm(ai.b - aj.b))
        d1 = float(np.linalg.norm(ai.eta.beta1 - aj.eta.beta1))
        d0 = abs(ai.eta.beta0 - aj.eta.beta0)
        return dA ** r + db ** r + d1 ** r + d0 ** r

    return _breakdown(G, G_star, asg, lambda size: term, term)


@dataclass(frozen=True)
class CellErrors:
    errA: float
    errB: float
    errEta: float
    errW: float
    empty_cell: bool = False

    def to_json(self):
        return {
            "errA": self.errA,
            "errB": self.errB,
            "errEta": self.errEta,
            "errW": self.errW,
            "empty_cell": self.empty_cell,
        }


def per_param_errors(G, G_star):
    """Per true atom: worst block error over its cell and the cell weight error.

    An empty cell reports the block errors of the nearest fitted atom and the
    full true weight, with ``empty_cell=True``.
    """
    asg = assign_cells(G, G_star)
    w = G.weights
    out = []
    for j, cell in enumerate(asg.cells):
        star = G_star.atoms[j]
        if cell:
            diffs = np.array([_diffs(G.atoms[i], star) for i in cell])
            eA, eB, eE = diffs.max(axis=0)
            eW = abs(float(sum(w[i] for i in cell)) - star.weight)
            out.append(CellErrors(float(eA), float(eB), float(eE), eW))
        else:
            near = min(range(G.N), key=lambda i: _dist(G.atoms[i], star))
            eA, eB, eE = _diffs(G.atoms[near], star)
            out.append(CellErrors(eA, eB, eE, star.weight, True))
    return out
