"""Convergence-rate experiments, log-log slopes and the gating overhead calculator."""
from __future__ import annotations

import hashlib
import json
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .errors import DivergenceError, InvalidArgument, NumericalFailure
from .fit import FitConfig, fn_l2_distance, gd_fit, init_overspecified
from .ident import rbar
from .model import Gate
from .synth import SynthConfig, generate_dataset, sample_true_measure
from .voronoi import loss_L1, loss_L2r, loss_L3, per_param_errors

__all__ = [
    "ExperimentConfig",
    "RateReport",
    "Slope",
    "run_rate_experiment",
    "loglog_slope",
    "overhead_report",
    "OverheadReport",
    "default_n_grid",
    "COLUMNS",
]

SCHEMA_VERSION = 1
COLUMNS = ("loss", "errA", "errB", "errEta", "errW", "fn_dist")
CSV_HEADER = "n,rep,divergent," + ",".join(COLUMNS)
MAX_DIVERGENT = 0.2


def default_n_grid(k=7, lo=1e3, hi=1e5):
    """``k`` log-spaced integer sample sizes from ``lo`` to ``hi``."""
    return tuple(int(round(v)) for v in np.logspace(math.log10(lo), math.log10(hi), k))


@dataclass(frozen=True)
class ExperimentConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    loss: str = "L1"  # L1 | L3 | L2r
    loss_r: int = 1
    n_grid: tuple = field(default_factory=default_n_grid)
    reps: int = 20
    master_seed: int = 0
    mc_points: int = 20000
    aggregate: str = "mean"  # mean | median

    def __post_init__(self):
        object.__setattr__(self, "n_grid", tuple(int(n) for n in self.n_grid))
        if not self.n_grid:
            raise InvalidArgument("n_grid is empty")
        if any(n < 10 for n in self.n_grid):
            raise InvalidArgument("every sample size must be >= 10")
        if any(b <= a for a, b in zip(self.n_grid, self.n_grid[1:])):
            raise InvalidArgument("n_grid must be strictly increasing")
        if self.reps < 1:
            raise InvalidArgument("reps must be >= 1")
        if self.mc_points < 1:
            raise InvalidArgument("mc_points must be >= 1")
        if self.aggregate not in ("mean", "median"):
            raise InvalidArgument(f"unknown aggregate {self.aggregate!r}")
        gate = Gate.parse(self.synth.gate)
        linear = self.synth.expert == "linear"
        if self.loss == "L2r":
            if not linear:
                raise InvalidArgument("L2r needs linear experts")
            if self.loss_r < 1:
                raise InvalidArgument("loss_r must be >= 1")
        elif self.loss in ("L1", "L3"):
            want = Gate.QUAD_POLY if self.loss == "L1" else Gate.QUAD_MONO
            if gate != want:
                raise InvalidArgument(f"{self.loss} needs a {want.value} gate, got {gate.value}")
            if linear:
                raise InvalidArgument(f"{self.loss} is defined for two-layer experts; use L2r")
        else:
            raise InvalidArgument(f"unknown loss {self.loss!r}")
        if gate not in (Gate.QUAD_POLY, Gate.QUAD_MONO):
            raise InvalidArgument("rate experiments use QuadPoly or QuadMono gates")
        N_fit = self.N_fit
        if N_fit < self.synth.N_star:
            raise InvalidArgument(f"N_fit={N_fit} < N_star={self.synth.N_star}")

    @property
    def N_fit(self):
        return self.fit.N_fit if self.fit.N_fit is not None else self.synth.N_star + 1

    def to_json(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "synth": self.synth.to_json(),
            "fit": self.fit.to_json(),
            "loss": self.loss,
            "loss_r": self.loss_r,
            "n_grid": list(self.n_grid),
            "reps": self.reps,
            "master_seed": self.master_seed,
            "mc_points": self.mc_points,
            "aggregate": self.aggregate,
        }

    @classmethod
    def from_json(cls, obj):
        if isinstance(obj, (str, bytes)):
            obj = json.loads(obj)
        obj = dict(obj)
        version = obj.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise InvalidArgument(f"unsupported schema_version {version}")
        known = {"synth", "fit", "loss", "loss_r", "n_grid", "reps", "master_seed", "mc_points", "aggregate"}
        extra = set(obj) - known
        if extra:
            raise InvalidArgument(f"unknown config keys {sorted(extra)}")
        if "synth" in obj:
            obj["synth"] = SynthConfig.from_json(obj["synth"])
        if "fit" in obj:
            obj["fit"] = FitConfig.from_json(obj["fit"])
        try:
            return cls(**obj)
        except TypeError as exc:
            raise InvalidArgument(str(exc)) from None

    def hash(self):
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def cell_seed(master_seed, n_index, rep):
    """Seed for one (sample size, replicate) cell."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(zlib.crc32(b"cell"), n_index, rep))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass(frozen=True)
class Slope:
    slope: float
    intercept: float
    stderr: float
    n_points: int = 0

    def to_json(self):
        return asdict(self)


def loglog_slope(points):
    """OLS fit of ``log10(value)`` on ``log10(n)``."""
    points = list(points)
    if len(points) < 2:
        raise InvalidArgument("need at least two points")
    for n, v in points:
        if not (n > 0 and v > 0) or not math.isfinite(v):
            raise InvalidArgument(f"point (n={n}, value={v}) must be positive and finite")
    x = np.log10([float(n) for n, _ in points])
    y = np.log10([float(v) for _, v in points])
    if np.ptp(x) == 0:
        raise InvalidArgument("sample sizes must not all be equal")
    xc = x - x.mean()
    sxx = float(xc @ xc)
    slope = float(xc @ (y - y.mean())) / sxx
    intercept = float(y.mean() - slope * x.mean())
    # stderr from the residuals, so exact power laws give 0 up to rounding
    resid = y - (intercept + slope * x)
    dof = len(points) - 2
    stderr = math.sqrt(float(resid @ resid) / dof / sxx) if dof > 0 else 0.0
    return Slope(slope, intercept, stderr, len(points))


@dataclass
class RateReport:
    config: ExperimentConfig
    rows: list  # dicts with n, rep, divergent and COLUMNS
    slopes: dict  # column -> Slope or None
    aggregates: dict  # column -> per-n aggregate list
    backend: str = kernels.BACKEND

    @property
    def n_divergent(self):
        return sum(r["divergent"] for r in self.rows)

    def to_csv(self):
        lines = [CSV_HEADER]
        for r in self.rows:
            vals = ",".join(format(r[c], ".17g") for c in COLUMNS)
            lines.append(f"{r['n']},{r['rep']},{int(r['divergent'])},{vals}")
        return "\n".join(lines) + "\n"

    def to_json(self):
        def clean(v):
            return None if v is None or not math.isfinite(v) else v

        return {
            "schema_version": SCHEMA_VERSION,
            "config_hash": self.config.hash(),
            "config": self.config.to_json(),
            "backend": self.backend,
            "n_rows": len(self.rows),
            "n_divergent": self.n_divergent,
            "aggregate": self.config.aggregate,
            "per_n": {
                c: [{"n": n, "value": clean(v)} for n, v in zip(self.config.n_grid, self.aggregates[c])]
                for c in COLUMNS
            },
            "slopes": {c: (s.to_json() if s is not None else None) for c, s in self.slopes.items()},
        }

    def dumps(self):
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"


def _voronoi_loss(cfg, G_hat, G_star):
    if cfg.loss == "L1":
        return loss_L1(G_hat, G_star, rbar).total
    if cfg.loss == "L3":
        return loss_L3(G_hat, G_star).total
    return loss_L2r(G_hat, G_star, cfg.loss_r).total


def _run_cell(cfg, G_star, n_index, rep):
    n = cfg.n_grid[n_index]
    seed = cell_seed(cfg.master_seed, n_index, rep)
    row = {"n": n, "rep": rep, "divergent": False}
    data = generate_dataset(G_star, cfg.synth, n, seed)
    G0, _ = init_overspecified(
        G_star, cfg.N_fit, cfg.fit.perturb_scale, seed, identifiable=cfg.fit.identifiable_perturbation
    )
    try:
        G_hat, _ = gd_fit(G0, data, cfg.fit)
        errs = per_param_errors(G_hat, G_star)
        row["loss"] = _voronoi_loss(cfg, G_hat, G_star)
        row["errA"] = max(e.errA for e in errs)
        row["errB"] = max(e.errB for e in errs)
        row["errEta"] = max(e.errEta for e in errs)
        row["errW"] = max(e.errW for e in errs)
        row["fn_dist"] = fn_l2_distance(G_hat, G_star, cfg.synth, cfg.mc_points, seed)
    except (DivergenceError, OverflowError, FloatingPointError):
        row["divergent"] = True
        for c in COLUMNS:
            row[c] = math.nan
    return row


def _run_cells(args):
    cfg, G_star, jobs = args
    return [_run_cell(cfg, G_star, ni, rep) for ni, rep in jobs]


def run_rate_experiment(cfg: ExperimentConfig, workers=1) -> RateReport:
    """Fit every (n, replicate) cell and regress per-n aggregates on ``n``.

    Cells are independent jobs; results land in a table addressed by
    ``(n index, rep)`` so the output never depends on ``workers``.
    """
    G_star = sample_true_measure(cfg.synth, cfg.master_seed)
    K, R = len(cfg.n_grid), cfg.reps
    table = [[None] * R for _ in range(K)]
    jobs = [(ni, rep) for ni in range(K) for rep in range(R)]
    if workers > 1:
        # interleave so every worker gets a mix of small and large n
        batches = [jobs[i::workers] for i in range(workers)]
        with ProcessPoolExecutor(workers) as ex:
            for rows in ex.map(_run_cells, [(cfg, G_star, b) for b in batches]):
                for row in rows:
                    table[cfg.n_grid.index(row["n"])][row["rep"]] = row
    else:
        for ni, rep in jobs:
            table[ni][rep] = _run_cell(cfg, G_star, ni, rep)
    rows = [table[ni][rep] for ni in range(K) for rep in range(R)]
    n_div = sum(r["divergent"] for r in rows)
    if n_div > MAX_DIVERGENT * len(rows):
        raise NumericalFailure(f"{n_div} of {len(rows)} fits diverged")

    agg = np.mean if cfg.aggregate == "mean" else np.median
    aggregates, slopes = {}, {}
    for c in COLUMNS:
        per_n = []
        for ni in range(K):
            vals = [table[ni][rep][c] for rep in range(R) if not table[ni][rep]["divergent"]]
            per_n.append(float(agg(vals)) if vals else math.nan)
        aggregates[c] = per_n
        pts = [(n, v) for n, v in zip(cfg.n_grid, per_n) if math.isfinite(v)]
        if len(pts) >= 2 and all(v > 0 for _, v in pts):
            slopes[c] = loglog_slope(pts)
        else:
            slopes[c] = None  # degenerate grid or an identically zero column
    return RateReport(cfg, rows, slopes, aggregates)


def write_report(report: RateReport, out_dir):
    import os

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "rows.csv"), "w", newline="\n") as fh:
        fh.write(report.to_csv())
    with open(os.path.join(out_dir, "report.json"), "w", newline="\n") as fh:
        fh.write(report.dumps())


# --------------------------------------------------------------------------
# overhead of quadratic gating


@dataclass(frozen=True)
class OverheadReport:
    full_quad_gate_params: int  # gate parameters per expert with the full quadratic form
    full_quad_extra_per_expert: int
    full_quad_total: int
    lowrank_gate_params: int | None  # extra parameters per layer, low rank
    lowrank_total: int | None
    moe_layer_ratio: float
    lowrank_layer_ratio: float | None
    total_overhead: int
    flop_ratio: float | None
    memory_ratio: float | None
    reference: dict = field(default_factory=dict)

    def to_json(self):
        return asdict(self)


def overhead_report(arch) -> OverheadReport:
    """Extra router parameters from quadratic gating.

    ``arch`` keys: ``d``, ``d_ff``, ``N``, ``n_layers``; optional ``r`` (rank
    of the query/key embeddings), ``total_params`` and ``active_params``
    (baseline counts for the memory and FLOP ratios) and
    ``reference_total`` (a quoted overhead to compare against).
    """
    try:
        d, d_ff, N, L = (int(arch[k]) for k in ("d", "d_ff", "N", "n_layers"))
    except KeyError as exc:
        raise InvalidArgument(f"missing architecture field {exc}") from None
    if min(d, d_ff, N, L) < 1:
        raise InvalidArgument("d, d_ff, N and n_layers must be positive")
    r = arch.get("r")
    extra = d * (d + 1) // 2
    full_total = extra * N * L
    lr_layer = lr_total = lr_ratio = None
    if r is not None:
        r = int(r)
        if r < 1:
            raise InvalidArgument("rank r must be positive")
        lr_layer = (N + 1) * r * d
        lr_total = lr_layer * L
        lr_ratio = (N + 1) / N * r / (2.0 * d_ff)
    added = lr_total if lr_total is not None else full_total
    total, active = arch.get("total_params"), arch.get("active_params")
    reference = {}
    if arch.get("reference_total") is not None:
        ref = float(arch["reference_total"])
        factor = added / ref
        reference = {
            "quoted": ref,
            "computed": added,
            "factor": factor,
            "discrepancy": abs(factor - 1.0) > 0.05,
        }
    return OverheadReport(
        full_quad_gate_params=d + extra,
        full_quad_extra_per_expert=extra,
        full_quad_total=full_total,
        lowrank_gate_params=lr_layer,
        lowrank_total=lr_total,
        moe_layer_ratio=d / (4.0 * d_ff),
        lowrank_layer_ratio=lr_ratio,
        total_overhead=added,
        flop_ratio=None if active is None else added / float(active),
        memory_ratio=None if total is None else added / float(total),
        reference=reference,
    )
