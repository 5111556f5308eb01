"""Command-line front end.

Every command resolves its flags into a plain config dict, writes
``manifest.json`` next to its outputs and can be replayed with
``rerun --manifest``.  Exit codes: 0 success, 1 operational error,
2 validation failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import platform
import sys

import numpy as np

from . import __version__
from . import harness as H
from . import interval_solver as S
from . import reference as B
from . import walk as W
from .environment import (
    EnvironmentSpec,
    SpecError,
    WindowError,
    default_spec,
    generate,
    load_environment,
    plant_defect,
    save_environment,
    validate,
)
from .rng import derive_seed

EXIT_OK, EXIT_ERROR, EXIT_INVALID = 0, 1, 2
OUT_ENV = "CONDUCTANCE_LAB_OUT"


class CliError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# config plumbing


def versions():
    import numba
    import scipy

    return {
        "conductance_lab": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
        "numba": numba.__version__, "python": platform.python_version(),
    }


def manifest_lines(cfg):
    """Compact config echo for the ``#`` header of tabular outputs.

    The worker count is left out: it never changes results, so tables from
    runs that differ only in parallelism stay byte-identical.
    """
    shown = {k: v for k, v in cfg.items() if k != "workers"}
    return [json.dumps({"command": cfg["command"], "config": shown}, sort_keys=True),
            json.dumps(versions(), sort_keys=True)]


def write_manifest(cfg, out):
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump({"command": cfg["command"], "config": cfg, "versions": versions()}, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _env_config(args):
    if getattr(args, "env", None):
        return {"file": args.env}
    if args.model is None:
        return None
    params = {}
    if args.model == "homogeneous":
        params["profile"] = list(args.profile) if args.profile else [args.c1]
    elif args.model == "iid-polynomial":
        for key, val in (("kappa", args.kappa), ("tail_K", args.K), ("tail_beta", args.beta),
                         ("support_radius", args.support_radius)):
            if val is not None:
                params[key] = val
    elif args.model == "block-counterexample":
        params["block_epsilon"] = args.block_epsilon
        params["alt_value"] = args.alt_value
    if args.R is not None:
        params["truncation_radius"] = args.R
    return {
        "model": args.model, "window": list(args.window) if args.window else None,
        "seed": args.env_seed if args.env_seed is not None else derive_seed(args.seed, "environment") % 2**63,
        "params": params, "defects": list(args.defect or []),
    }


def parse_defect(text):
    parts = text.split(":")
    try:
        if parts[0] == "edge" and len(parts) == 3:
            x = int(parts[1])
            return x, x + 1, float(parts[2])
        if parts[0] == "pair" and len(parts) == 4:
            return int(parts[1]), int(parts[2]), float(parts[3])
    except ValueError:
        pass
    raise CliError(f"bad defect {text!r}; use edge:x:value or pair:x:y:value")


def build_environment(env_cfg, auto_half=None):
    if env_cfg is None:
        raise CliError("an environment is required (--env FILE or --model ...)")
    if "file" in env_cfg:
        return load_environment(env_cfg["file"])
    window = env_cfg["window"]
    params = dict(env_cfg["params"])
    if window is None:
        if auto_half is None:
            raise CliError("--window is required")
        R = params.get("truncation_radius", 1)
        if env_cfg["model"] == "iid-polynomial" and "truncation_radius" not in params:
            R = default_spec("iid-polynomial", (0, 10), **{k: v for k, v in params.items()}).truncation_radius
        half = int(auto_half) + 2 * int(R) + 2
        window = [-half, half]
    spec = default_spec(env_cfg["model"], tuple(window), env_cfg["seed"], **params)
    env = generate(spec)
    for d in env_cfg.get("defects", []):
        x, y, v = parse_defect(d)
        env = plant_defect(env, x, y, v)
    return env


def _ints(text):
    return [int(float(t)) for t in str(text).replace(",", " ").split()]


def _floats(text):
    return [float(t) for t in str(text).replace(",", " ").split()]


# --------------------------------------------------------------------------
# commands


def cmd_gen_env(cfg, out):
    env = build_environment(cfg["environment"])
    save_environment(env, os.path.join(out, "environment.txt"))
    report = validate(env)
    with open(os.path.join(out, "validation.txt"), "w") as fh:
        fh.write(report.to_text() + "\n")
    print(f"env_id {env.env_id} window {list(env.window)} R {env.truncation_radius}")
    print(report.to_text())
    return EXIT_OK if report.ok else EXIT_INVALID


def cmd_validate(cfg, out):
    env = build_environment(cfg["environment"])
    report = validate(env)
    with open(os.path.join(out, "validation.txt"), "w") as fh:
        fh.write(report.to_text() + "\n")
    print(report.to_text())
    return EXIT_OK if report.ok else EXIT_INVALID


def cmd_simulate(cfg, out):
    env = build_environment(cfg["environment"], auto_half=W.required_margin(cfg["steps"], cfg["margin_c"]) + abs(cfg["start"]))
    rows = []
    for p in range(cfg["paths"]):
        seed = derive_seed(cfg["seed"], "simulate", p)
        path = W.simulate(env, cfg["start"], cfg["steps"], seed, cfg["margin_c"])
        with open(os.path.join(out, f"path_{p:04d}.bin"), "wb") as fh:
            W.write_path_dump(path, fh)
        rs = W.range_stats(path, 0, path.n)
        rows.append((p, seed, int(path.steps[-1] - path.start), rs.r_plus, rs.r_minus, rs.r))
    with open(os.path.join(out, "paths.csv"), "w") as fh:
        for line in manifest_lines(cfg):
            fh.write(f"# {line}\n")
        fh.write("path,seed,displacement,r_plus,r_minus,r\n")
        for r in rows:
            fh.write(",".join(str(v) for v in r) + "\n")
    print(f"wrote {len(rows)} paths of {cfg['steps']} steps")
    return EXIT_OK


def _random_draws(env, count, seed, max_len=40):
    rng = np.random.default_rng(derive_seed(seed, "draws"))
    lo, hi = env.interior
    lo, hi = lo + env.truncation_radius, hi - env.truncation_radius
    out = []
    for _ in range(count):
        length = int(rng.integers(2, max_len + 1))
        a = int(rng.integers(lo - 1, hi - length + 2))
        b = a + length
        x = int(rng.integers(a + 1, b))
        out.append((a, b, x))
    return out


def cmd_exact(cfg, out):
    op = cfg["op"]
    need = max(cfg.get("L") or [0]) + 2 if op == "escape" else max(abs(cfg.get("a") or 0), abs(cfg.get("b") or 0), 40)
    env = build_environment(cfg["environment"], auto_half=need + 2)
    records = []
    try:
        if op == "escape":
            report = validate(env)
            for L in cfg["L"]:
                sol = S.solve_escape(env, L)
                phi = S.dirichlet_form(env, sol.f, (-L + 1, L - 1))
                records.append(S.SolverRecord("escape", {"L": L}, {
                    "probability": sol.probability, "bound": S.escape_bound(env, L, report)},
                    {"dirichlet": abs(phi - 2 * sol.C0 * sol.probability)}))
        elif op == "exit-dist":
            prob = S.build_collapsed_chain(env, cfg["a"], cfg["b"], S.EXIT)
            dist = S.exit_distribution(prob, cfg["x"])
            with open(os.path.join(out, "exit_distribution.csv"), "w") as fh:
                for line in manifest_lines(cfg):
                    fh.write(f"# {line}\n")
                fh.write("y,probability\n")
                for y, p in dist.as_dict().items():
                    fh.write(f"{y},{p!r}\n")
            records.append(S.SolverRecord("exit-dist", {"a": cfg["a"], "b": cfg["b"], "x": cfg["x"]},
                                          {"P_exit_right": float(dist.probs[dist.sites >= cfg["b"]].sum()),
                                           "P_exit_left": float(dist.probs[dist.sites <= cfg["a"]].sum())},
                                          {"mass": abs(float(dist.probs.sum()) - 1.0)}))
        elif op == "confinement":
            prob = S.build_collapsed_chain(env, cfg["a"], cfg["b"], S.CONFINEMENT)
            n = cfg["n"] if cfg["n"] is not None else (cfg["b"] - cfg["a"]) ** 2
            records.append(S.SolverRecord("confinement", {"a": cfg["a"], "b": cfg["b"], "x": cfg["x"], "n": n}, {
                "tail": S.confinement_tail(prob, cfg["x"], n), "expected_exit_time": S.expected_exit_time(prob, cfg["x"]),
                "rate": S.confinement_rate(prob), "exit_time_bound": S.exit_time_bound(prob)}))
        elif op in ("commute-check", "reversal-check"):
            draws = (_random_draws(env, cfg["draws"], cfg["seed"]) if cfg["draws"]
                     else [(cfg["a"], cfg["b"], cfg["x"])])
            rng = np.random.default_rng(derive_seed(cfg["seed"], "targets"))
            for a, b, x in draws:
                if op == "commute-check":
                    prob = S.build_collapsed_chain(env, a, b, S.CONFINEMENT)
                    lhs, rhs = S.commute_time_check(prob, x)
                    inputs = {"a": a, "b": b, "x": x}
                else:
                    prob = S.build_collapsed_chain(env, a, b, S.EXIT)
                    pos = np.nonzero(prob.C_boundary > 0)[0]
                    y = cfg["y"] if cfg["y"] is not None and not cfg["draws"] else int(prob.boundary[rng.choice(pos)])
                    lhs, rhs = S.reversal_identity_check(prob, x, y)
                    inputs = {"a": a, "b": b, "x": x, "y": y}
                records.append(S.SolverRecord(op, inputs, {"lhs": lhs, "rhs": rhs},
                                              {"relative": abs(lhs - rhs) / abs(rhs),
                                               "detailed_balance": prob.detailed_balance_residual()}))
        else:
            raise CliError(f"unknown op {op!r}")
    except (S.SolverError, WindowError, ValueError) as exc:
        raise CliError(f"exact --op {op}: {exc}") from exc
    with open(os.path.join(out, "exact.jsonl"), "w") as fh:
        for r in records:
            fh.write(r.to_text() + "\n")
    for r in records:
        print(r.to_text())
    if records and records[0].residuals:
        keys = sorted(records[0].residuals)
        worst = {k: max(r.residuals[k] for r in records) for k in keys}
        print("summary " + " ".join(f"max_{k}={v:.3e}" for k, v in worst.items()))
    return EXIT_OK


def _sigma_starts(n_max, H, count=85):
    half = int(math.floor(H * math.sqrt(n_max)))
    step = max(1, int(math.ceil(2 * half / count)))
    return np.arange(-half, half + 1, step)


def _sigma(env, cfg, workers):
    if cfg.get("sigma") is not None:
        return float(cfg["sigma"]), None
    n_max = max(cfg["n_list"])
    est = H.estimate_sigma(env, [max(n_max // 16, 1), max(n_max // 4, 1), n_max], cfg["sigma_paths"],
                           derive_seed(cfg["seed"], "sigma"), starts=_sigma_starts(n_max, cfg.get("H", 1.0)),
                           workers=workers, margin_c=cfg["margin_c"])
    return est.sigma, est


def cmd_estimate_sigma(cfg, out):
    n_max = max(cfg["n_list"])
    env = build_environment(cfg["environment"], auto_half=W.required_margin(n_max, cfg["margin_c"]) + max(abs(s) for s in cfg["starts"]))
    est = H.estimate_sigma(env, cfg["n_list"], cfg["paths"], derive_seed(cfg["seed"], "sigma"),
                           starts=cfg["starts"], workers=cfg["workers"], margin_c=cfg["margin_c"])
    with open(os.path.join(out, "sigma.csv"), "w") as fh:
        for line in manifest_lines(cfg):
            fh.write(f"# {line}\n")
        fh.write("n,variance,variance_se\n")
        for n, v, se in zip(est.n_list, est.variances, est.variance_se):
            fh.write(f"{n},{v!r},{se!r}\n")
    print(f"sigma {est.sigma!r} se {est.standard_error!r} sigma2 {est.sigma2!r}")
    return EXIT_OK


def cmd_classify_sites(cfg, out):
    n = cfg["n"]
    full_steps = (cfg["metric_terms"] + 1) * n
    reach = max([abs(s) for s in cfg["sites"]] + [int(2 * cfg["H"] * math.sqrt(n)) + 1])
    env = build_environment(cfg["environment"], auto_half=W.required_margin(full_steps, cfg["margin_c"]) + reach)
    th = B.thresholds_for(cfg["epsilon"])
    sigma, _ = _sigma(env, {**cfg, "n_list": [n]}, cfg["workers"])
    rows = []
    for x in cfg["sites"]:
        c = H.classify_site(env, x, cfg["epsilon"], n, th, sigma, cfg["mc"], derive_seed(cfg["seed"], "classify"),
                            mode=cfg["mode"], metric_terms=cfg["metric_terms"], workers=cfg["workers"],
                            margin_c=cfg["margin_c"])
        rows.append(c)
    with open(os.path.join(out, "classification.csv"), "w") as fh:
        for line in manifest_lines(cfg):
            fh.write(f"# {line}\n")
        fh.write("x,epsilon,n,samples,nice_prob,nice_radius,is_nice,ii_prob,iii_prob,good_i,good_ii,good_iii,is_good\n")
        for c in rows:
            fh.write(f"{c.x},{c.epsilon!r},{c.n},{c.samples},{c.nice_prob!r},{c.nice_radius!r},{int(c.is_nice)},"
                     f"{c.ii_prob!r},{c.iii_prob!r},{int(c.good_i)},{int(c.good_ii)},{int(c.good_iii)},{int(c.is_good)}\n")
    if cfg["nu"] is not None:
        rep = H.nice_site_density_scan(env, cfg["epsilon"], n, cfg["nu"], th, sigma, cfg["mc"],
                                       derive_seed(cfg["seed"], "density"), cfg["H"], cfg["budget"], cfg["workers"],
                                       cfg["margin_c"])
        with open(os.path.join(out, "density.csv"), "w") as fh:
            for line in manifest_lines(cfg):
                fh.write(f"# {line}\n")
            fh.write("lo,hi,tested,nice_site\n")
            for lo, hi, tested, found in rep.intervals:
                fh.write(f"{lo},{hi},{tested},{'' if found is None else found}\n")
        print(f"density fraction {rep.fraction!r} over {len(rep.intervals)} intervals of length {rep.interval_length}")
    for c in rows:
        print(f"x={c.x} nice={c.is_nice} good={c.is_good} nice_prob={c.nice_prob:.4f}")
    return EXIT_OK


def cmd_verify_uclt(cfg, out):
    n_max = max(cfg["n_list"])
    half = cfg["H"] * n_max ** cfg["alpha"]
    env = build_environment(cfg["environment"], auto_half=W.required_margin(n_max, cfg["margin_c"]) + half + 1)
    workers = cfg["workers"]
    sigma, est = _sigma(env, cfg, workers)
    echo = manifest_lines(cfg)
    # classification sample: nice-site density over the sqrt(n) window
    th = B.thresholds_for(cfg["epsilon"])
    nu = cfg["nu"] if cfg["nu"] is not None else 0.5 * (1.0 / (2.0 + env.tail_beta) + 0.5)
    dens = H.nice_site_density_scan(env, cfg["epsilon"], n_max, nu, th, sigma, cfg["classify_mc"],
                                    derive_seed(cfg["seed"], "density"), cfg["H"], 2, workers, cfg["margin_c"])
    policy = H.GridPolicy(alpha=cfg["alpha"], spacing=cfg["spacing"], extra=cfg["extra"])
    report = H.uclt_experiment(env, cfg["H"], cfg["n_list"], tuple(cfg["functionals"]), policy, sigma, cfg["mc"],
                               derive_seed(cfg["seed"], "uclt"), cfg["brownian_samples"], cfg["dt"], workers,
                               cfg["margin_c"])
    report.write(out, "uclt", echo)
    with open(os.path.join(out, "summary.txt"), "w") as fh:
        lines = [f"env_id {env.env_id}", f"sigma {sigma!r}" + (f" se {est.standard_error!r}" if est else " (given)"),
                 f"nice_density {dens.fraction!r} nu {nu!r}"]
        for F in report.functionals:
            col = report.sup_column(F)
            lines.append(f"{F} sup " + " ".join(f"{r.n}:{r.sup:.4f}+-{r.radius:.4f}" for r in col)
                         + f" trend_ok={report.trend_ok(F)}")
        if cfg["alpha"] > 0.5 and H.counterexample_consistent(report):
            lines.append("COUNTEREXAMPLE-CONSISTENT")
        fh.write("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


COMMANDS = {
    "gen-env": cmd_gen_env, "validate": cmd_validate, "simulate": cmd_simulate, "exact": cmd_exact,
    "estimate-sigma": cmd_estimate_sigma, "classify-sites": cmd_classify_sites, "verify-uclt": cmd_verify_uclt,
}


# --------------------------------------------------------------------------
# argument parsing


def _add_env_flags(p, required_window=False):
    g = p.add_argument_group("environment")
    g.add_argument("--env", help="environment file written by gen-env")
    g.add_argument("--model", choices=["homogeneous", "iid-polynomial", "block-counterexample"])
    g.add_argument("--window", nargs=2, type=int, metavar=("X_MIN", "X_MAX"), required=required_window)
    g.add_argument("--env-seed", type=int, help="environment seed (default: derived from --seed)")
    g.add_argument("--c1", type=float, default=1.0, help="homogeneous nearest-neighbour conductance")
    g.add_argument("--profile", type=_floats, help="homogeneous profile c_1,...,c_R")
    g.add_argument("--kappa", type=float)
    g.add_argument("--K", type=float)
    g.add_argument("--beta", type=float)
    g.add_argument("--R", type=int, help="truncation radius")
    g.add_argument("--support-radius", type=int)
    g.add_argument("--block-epsilon", type=float, default=0.5)
    g.add_argument("--alt-value", type=float, default=2.0)
    g.add_argument("--defect", action="append", help="edge:x:value or pair:x:y:value (repeatable)")


def _add_common(p):
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", default="out", help=f"output directory (overridden by ${OUT_ENV})")
    p.add_argument("--margin-c", type=float, default=W.DEFAULT_MARGIN_C)


def make_parser():
    parser = argparse.ArgumentParser(prog="conductance-lab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-env", help="generate and validate an environment")
    _add_env_flags(p, required_window=True)
    _add_common(p)

    p = sub.add_parser("validate", help="validate an environment")
    _add_env_flags(p)
    _add_common(p)

    p = sub.add_parser("simulate", help="simulate walks and dump paths")
    _add_env_flags(p)
    _add_common(p)
    p.add_argument("--start", type=int, default=0)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--paths", type=int, default=1)

    p = sub.add_parser("exact", help="exact interval computations")
    _add_env_flags(p)
    _add_common(p)
    p.add_argument("--op", required=True,
                   choices=["escape", "exit-dist", "confinement", "commute-check", "reversal-check"])
    p.add_argument("--a", type=int)
    p.add_argument("--b", type=int)
    p.add_argument("--x", type=int)
    p.add_argument("--y", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--L", type=_ints)
    p.add_argument("--draws", type=int, default=0, help="random (interval, x) draws instead of --a/--b/--x")

    p = sub.add_parser("estimate-sigma", help="estimate the diffusivity")
    _add_env_flags(p)
    _add_common(p)
    p.add_argument("--n-list", type=_ints, default=[1000, 3000, 10000])
    p.add_argument("--paths", type=int, default=4000)
    p.add_argument("--starts", type=_ints, default=[0])

    p = sub.add_parser("classify-sites", help="good/nice classification and nice-site density")
    _add_env_flags(p)
    _add_common(p)
    p.add_argument("--sites", type=_ints, default=[0])
    p.add_argument("--epsilon", type=float, default=0.2)
    p.add_argument("--n", type=int, default=10000)
    p.add_argument("--mode", choices=["full", "nice"], default="full")
    p.add_argument("--mc", type=int, default=400)
    p.add_argument("--sigma", type=float)
    p.add_argument("--sigma-paths", type=int, default=2000)
    p.add_argument("--metric-terms", type=int, default=6)
    p.add_argument("--nu", type=float, help="also run the nice-site density scan")
    p.add_argument("--H", type=float, default=1.0)
    p.add_argument("--budget", type=int, default=4)

    p = sub.add_parser("verify-uclt", help="uniform CLT sweep")
    _add_env_flags(p)
    _add_common(p)
    p.add_argument("--H", type=float, default=1.0)
    p.add_argument("--alpha", type=float, default=0.5, help="window exponent: starts in [-H n^alpha, H n^alpha]")
    p.add_argument("--n-list", type=_ints, default=[1000, 4000, 16000])
    p.add_argument("--functional", action="append", choices=sorted(H.FUNCTIONALS),
                   help="repeatable; default F1..F4")
    p.add_argument("--mc", type=int, default=1000, help="paths per start point")
    p.add_argument("--sigma", type=float)
    p.add_argument("--sigma-paths", type=int, default=2000)
    p.add_argument("--epsilon", type=float, default=0.2)
    p.add_argument("--nu", type=float)
    p.add_argument("--classify-mc", type=int, default=200)
    p.add_argument("--spacing", type=int)
    p.add_argument("--extra", type=int, default=32)
    p.add_argument("--brownian-samples", type=int, default=100000)
    p.add_argument("--dt", type=float, default=1 / 4096)

    p = sub.add_parser("rerun", help="replay a run from its manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help=f"output directory (default: manifest's directory; ${OUT_ENV} overrides)")
    return parser


_SKIP = {"command", "out", "manifest"} | {
    "env", "model", "window", "env_seed", "c1", "profile", "kappa", "K", "beta", "R", "support_radius",
    "block_epsilon", "alt_value", "defect",
}


def resolve(args):
    cfg = {k: v for k, v in vars(args).items() if k not in _SKIP}
    cfg["command"] = args.command
    cfg["environment"] = _env_config(args)
    if args.command == "verify-uclt" and not cfg.get("functional"):
        cfg["functional"] = list(H.CATALOGUE)
    if "functional" in cfg:
        cfg["functionals"] = cfg.pop("functional")
    return cfg


def output_dir(default):
    return os.environ.get(OUT_ENV) or default


def execute(cfg, out):
    os.makedirs(out, exist_ok=True)
    write_manifest(cfg, out)
    try:
        return COMMANDS[cfg["command"]](cfg, out)
    except (CliError, SpecError, WindowError, W.WalkAborted, S.SolverError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


def main(argv=None):
    args = make_parser().parse_args(argv)
    if args.command == "rerun":
        try:
            with open(args.manifest) as fh:
                doc = json.load(fh)
        except (OSError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_ERROR
        out = output_dir(args.out or os.path.dirname(os.path.abspath(args.manifest)))
        return execute(doc["config"], out)
    return execute(resolve(args), output_dir(args.out))


if __name__ == "__main__":
    sys.exit(main())
