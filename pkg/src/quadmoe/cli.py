"""Command-line entry point: ``quadmoe <subcommand> [options]``.

Exit codes: 0 success, 1 invalid input or usage, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import io
import json
import sys

import numpy as np

from .errors import InvalidArgument, NumericalFailure, QuadMoEError

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_INVALID)


def _load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise InvalidArgument(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise InvalidArgument(f"config {path} is not valid JSON: {exc}") from None


def _emit(obj, args, csv_text=None):
    """Write JSON (or CSV when requested and available) to --out or stdout."""
    if args.format == "csv" and csv_text is not None:
        text = csv_text
    else:
        text = json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"
    if args.out:
        with open(args.out, "w", newline="\n") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


# --------------------------------------------------------------------------
# subcommands


def cmd_rates(args):
    from .ratelab import ExperimentConfig, run_rate_experiment, write_report

    raw = _load_config(args.config)
    if args.seed is not None:
        raw["master_seed"] = args.seed
    cfg = ExperimentConfig.from_json(raw)
    report = run_rate_experiment(cfg, workers=args.threads)
    if not args.out:
        raise InvalidArgument("rates needs --out <directory>")
    write_report(report, args.out)
    summary = {c: (s.slope if s else None) for c, s in report.slopes.items()}
    sys.stdout.write(json.dumps({"out": args.out, "slopes": summary}, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_gradcheck(args):
    from .gradients import grad_check
    from .synth import SynthConfig, generate_dataset, sample_true_measure

    raw = _load_config(args.config)
    n = int(raw.pop("n", 16))
    tol = float(raw.pop("tol", 1e-6))
    scale = float(raw.pop("param_scale", 1.0))
    seed = 0 if args.seed is None else args.seed
    cfg = SynthConfig.from_json({"N_star": 3, "d": 2, **raw})
    G = sample_true_measure(cfg, seed)
    if scale != 1.0:  # spread the gates so gradients are not dominated by the expert block
        A, B, C, Eta = G.packed()
        G = type(G).from_packed(A * scale, B * scale, C * scale, Eta, G)
    data = generate_dataset(G, cfg, n, seed)
    rep = grad_check(G, data, tol=tol)
    _emit(rep.to_json(), args)
    return EXIT_OK if rep.passed else EXIT_NUMERIC


def cmd_ident(args):
    from .ident import derivative_features, sample_points, strong_ident_report
    from .model import ExpertFamily
    from .synth import stream

    raw = _load_config(args.config)
    d = int(raw.get("d", 2))
    fam = ExpertFamily.named(raw.get("expert", "linear"), int(raw.get("m", 1)))
    k = int(raw.get("experts", 2))
    seed = 0 if args.seed is None else args.seed
    rng = stream(seed, "ident-params")
    params = [fam.unflatten(rng.standard_normal(fam.n_params(d)), d) for _ in range(k)]
    X = sample_points(d, int(raw.get("M", 500)), seed, fam, params)
    F = derivative_features(fam, params, X, raw.get("mode", "poly"), int(raw.get("order", 1)), raw.get("wrt", "all"))
    rep = strong_ident_report(F, float(raw.get("tau", 1e-8)), bool(raw.get("merge_identical", False)))
    _emit(rep.to_json(), args)
    return EXIT_OK


def cmd_polysys(args):
    from .ident import polysys_search

    raw = _load_config(args.config)
    seed = 0 if args.seed is None else args.seed
    res = polysys_search(
        int(raw.get("m", 2)), int(raw.get("r", 3)), int(raw.get("budget", 100)), seed, workers=args.threads
    )
    _emit(res.to_json(), args)
    return EXIT_OK


def cmd_pathology(args):
    from .ident import slow_sequence
    from .synth import SynthConfig, sample_true_measure

    raw = _load_config(args.config)
    ns = raw.pop("n_values", [10, 100, 1000])
    rs = raw.pop("r_values", [1, 2])
    M = int(raw.pop("M", 50000))
    seed = 0 if args.seed is None else args.seed
    cfg = SynthConfig.from_json({"N_star": 3, "d": 2, "expert": "linear", **raw})
    G = sample_true_measure(cfg, seed)
    rows = []
    for r in rs:
        for n in ns:
            s = slow_sequence(G, int(n), int(r), M, seed, cfg)
            rows.append(
                {
                    "n": int(n),
                    "r": int(r),
                    "loss_closed_form": s.loss_closed_form,
                    "loss_computed": s.loss_computed,
                    "rel_err": abs(s.loss_computed - s.loss_closed_form) / s.loss_closed_form,
                    "fn_dist": s.fn_dist,
                    "ratio": s.fn_dist / s.loss_computed,
                }
            )
    keys = list(rows[0])
    buf = io.StringIO()
    buf.write(",".join(keys) + "\n")
    for row in rows:
        buf.write(",".join(format(row[k], ".17g") for k in keys) + "\n")
    _emit({"rows": rows}, args, buf.getvalue())
    return EXIT_OK


def cmd_overhead(args):
    from .ratelab import overhead_report

    raw = _load_config(args.config)
    if not raw:
        raise InvalidArgument("overhead needs --config with d, d_ff, N, n_layers")
    _emit(overhead_report(raw).to_json(), args)
    return EXIT_OK


def cmd_attn_demo(args):
    from .model import NONLINEARITIES, active_attention, attention
    from .synth import stream

    raw = _load_config(args.config)
    d, N, dv = int(raw.get("d", 4)), int(raw.get("N", 5)), int(raw.get("d_v", 3))
    names = raw.get("nonlinearities", sorted(NONLINEARITIES))
    rng = stream(0 if args.seed is None else args.seed, "attn-demo")
    q = rng.standard_normal(d)
    K = rng.standard_normal((N, d))
    V = rng.standard_normal((N, dv))
    out = {"attention": attention(q, K, V).tolist()}
    out["active_attention"] = {nl: active_attention(q, K, V, nl).tolist() for nl in names}
    _emit(out, args)
    return EXIT_OK


def cmd_gen(args):
    from .synth import SynthConfig, generate_dataset, sample_true_measure

    raw = _load_config(args.config)
    n = int(raw.pop("n", 1000))
    seed = 0 if args.seed is None else args.seed
    cfg = SynthConfig.from_json(raw)
    G = sample_true_measure(cfg, seed)
    data = generate_dataset(G, cfg, n, seed)
    if args.format == "json":
        _emit({"measure": G.to_json(), "dataset": data.to_json()}, args)
    else:
        _emit(None, args, data.to_csv())
    return EXIT_OK


COMMANDS = {
    "rates": (cmd_rates, "run a convergence-rate experiment; writes rows.csv and report.json"),
    "gradcheck": (cmd_gradcheck, "compare analytic and finite-difference gradients"),
    "ident": (cmd_ident, "derivative-feature independence test"),
    "polysys": (cmd_polysys, "multi-start search on the rbar polynomial system"),
    "pathology": (cmd_pathology, "slowly converging sequence for linear experts"),
    "overhead": (cmd_overhead, "router parameter overhead of quadratic gating"),
    "attn-demo": (cmd_attn_demo, "attention versus active-attention outputs"),
    "gen": (cmd_gen, "export a synthetic dataset"),
}


def build_parser():
    parser = _Parser(prog="quadmoe", description="Quadratic-gated mixture-of-experts laboratory.")
    sub = parser.add_subparsers(dest="command", metavar="<command>", parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--out", help="output path (directory for rates)")
        p.add_argument("--seed", type=int, help="master seed (u64)")
        p.add_argument("--threads", type=int, default=1, help="worker processes")
        p.add_argument("--format", choices=("csv", "json"), default="json")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_INVALID
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    if args.seed is not None and not 0 <= args.seed < 2**64:
        parser.error("--seed must be an unsigned 64-bit integer")
    handler = COMMANDS[args.command][0]
    try:
        return handler(args)
    except NumericalFailure as exc:
        sys.stderr.write(f"numerical failure: {exc}\n")
        return EXIT_NUMERIC
    except (QuadMoEError, ValueError, KeyError, TypeError) as exc:
        sys.stderr.write(f"invalid input: {exc}\n")
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
