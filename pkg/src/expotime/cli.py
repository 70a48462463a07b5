"""Command-line entry point: fit, table, model, forward, invert, bench.

Exit codes: 0 success, 1 numerical failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .expmact import (Pencil, PencilError, SnapshotMatrix, SolveLedger, eval_family_on_pencil,
                      eval_single_time_on_pencil, exact_expm_oracle, load_manifest,
                      parallel_eval)
from .fitting import (EquilibrationError, FitConfig,
                      FitDivergenceError, IllPosedFitError, SearchCapError, critical_K,
                      degree_table, fit_shared_poles, fit_single_time_best, log_times,
                      minimal_degree, weight_preset)
from .fitting.degree import DEFAULT_ACCURACIES, DEFAULT_RATIOS
from .inversion import CGLSConvergenceError, ForwardMap, RankDeficientError, gauss_newton
from .models import (Diffusion1D, build_diffusion_pencil, contiguous_regions, make_observation,
                     split_param_model)
from .ratcore import RationalFamily, uniform_error


class NumericalFailure(RuntimeError):
    pass


@dataclass
class RunConfig:
    subcommand: str
    flags: dict
    paths: dict = field(default_factory=dict)
    workers: int = 1
    seed: int | None = None

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> RunConfig:
        flags = {k: v for k, v in vars(args).items() if k not in ("func", "command")}
        paths = {k: Path(v).resolve() for k, v in flags.items()
                 if v is not None and k in PATH_FLAGS}
        return cls(args.command, flags, paths, int(flags.get("workers") or 1),
                   flags.get("seed"))


PATH_FLAGS = {"out", "family", "model", "data", "history", "sigma_file"}


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _default_workers() -> int:
    try:
        return max(1, int(os.environ.get("EXPOTIME_WORKERS", "1")))
    except ValueError:
        return 1


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1) + "\n")


def _baseline_at(t: float, m: int) -> RationalFamily:
    base = fit_single_time_best(m)
    return RationalFamily(base.pole_set, np.array([t]), np.array([1.0]), base.residues,
                          t, base.absolute_term, dict(base.meta))


# fit

def cmd_fit(cfg: RunConfig) -> int:
    a = cfg.flags
    times = log_times(a["tmin"], a["tmax"], a["nchannels"])
    ratio = times[-1] / times[0]
    weights = weight_preset(a["weights"], times)
    out = cfg.paths["out"]
    degree = a["degree"]
    if degree is None:
        degree = minimal_degree(a["target_tol"], ratio, a["weights"], times.size)
    if ratio == 1.0 and not a["subdiagonal"]:
        fam = _baseline_at(times[0], degree)
    else:
        config = FitConfig(degree, times, weights, a["max_iters"], a["stagnation_tol"])
        try:
            fam = fit_shared_poles(config)
        except FitDivergenceError as exc:
            hist = out.with_suffix(".history.csv")
            hist.write_text("iteration,objective\n" + "".join(
                f"{i},{v!r}\n" for i, v in enumerate(exc.history)))
            raise NumericalFailure(f"{exc}; iterate history in {hist}") from exc
    report = uniform_error(fam)
    out.parent.mkdir(parents=True, exist_ok=True)
    fam.save(out)
    _write_json(out.with_suffix(".error.json"), report.to_dict())
    print(f"degree {fam.degree}")
    print(f"uniform_error {report.uniform_error:.6e}")
    print(f"max_channel_error {report.per_time_error.max():.6e}")
    return 0


# table

def cmd_table(cfg: RunConfig) -> int:
    a = cfg.flags
    ratios = a["ratios"]
    table = degree_table(a["accuracies"], ratios, a["weights"], a["nchannels"],
                         workers=cfg.workers, cap=a["cap"])
    k_star = None
    if 1.0 in [float(r) for r in ratios]:
        try:
            k_star = critical_K(table)
        except ValueError:
            k_star = None
    text = table.to_csv(k_star)
    if "out" in cfg.paths:
        cfg.paths["out"].parent.mkdir(parents=True, exist_ok=True)
        cfg.paths["out"].write_text(text)
    sys.stdout.write(text)
    if table.failures:
        for (acc, r), msg in sorted(table.failures.items()):
            print(f"cell accuracy={acc:g} ratio={r:g} failed: {msg}", file=sys.stderr)
        return 1
    return 0


# model

def _parse_observations(spec: Diffusion1D, text: str | None):
    if not text:
        return None
    obs = None
    for item in text.split(","):
        kind, _, loc = item.partition(":")
        o = make_observation(spec, kind.strip(), int(loc))
        obs = o if obs is None else obs.stack(o)
    return obs


def _region_map(n_cells: int, text: str | None) -> np.ndarray:
    if text is None:
        return np.zeros(n_cells, dtype=int)
    vals = [int(v) for v in text.split(",")]
    if len(vals) == 1:
        return contiguous_regions(n_cells, vals[0])
    if len(vals) != n_cells:
        raise ValueError("--regions needs one count or one label per cell")
    return np.array(vals)


def cmd_model(cfg: RunConfig) -> int:
    a = cfg.flags
    if a["sigma_file"] is not None:
        sigma = np.loadtxt(cfg.paths["sigma_file"], delimiter=",", ndmin=1)
    else:
        sigma = np.array(a["sigma"])
    regions = _region_map(a["cells"], a["regions"])
    if sigma.size == 1:
        sigma = np.full(a["cells"], sigma[0])
    elif sigma.size == regions.max() + 1 and sigma.size != a["cells"]:
        sigma = sigma[regions]
    if sigma.size != a["cells"]:
        raise ValueError("--sigma needs one value, one per region, or one per cell")
    spec = Diffusion1D(a["length"], sigma, a["source_node"])
    obs = _parse_observations(spec, a["observe"])
    pencil = build_diffusion_pencil(spec, obs)
    pm = split_param_model(spec, regions)
    extra = {"diffusion1d": spec.to_dict(), "region_map": regions.tolist(),
             "observations": list(obs.descriptions) if obs else [],
             "m": None if pm.m is None else pm.m.tolist()}
    pencil.save(cfg.paths["out"], extra)
    print(f"nodes {pencil.n} regions {pm.n_params} bundle {cfg.paths['out']}")
    return 0


# forward

def _load_model(path: Path):
    pencil = Pencil.load(path)
    manifest = load_manifest(path)
    return pencil, manifest


def cmd_forward(cfg: RunConfig) -> int:
    a = cfg.flags
    fam = RationalFamily.load(cfg.paths["family"])
    pencil, _ = _load_model(cfg.paths["model"])
    ledger = SolveLedger()
    if a["oracle"]:
        snaps = exact_expm_oracle(pencil, fam.times)
    elif fam.absolute_term is not None:
        snaps = eval_single_time_on_pencil(fam, pencil, fam.times, ledger)
    elif cfg.workers > 1:
        snaps, _ = parallel_eval(fam, pencil, cfg.workers, ledger)
    else:
        snaps = eval_family_on_pencil(fam, pencil, ledger)
    if a["observed"]:
        if pencil.Q is None:
            raise ValueError("model bundle has no observation rows")
        snaps = snaps.observe(pencil.Q)
    out = cfg.paths["out"]
    out.parent.mkdir(parents=True, exist_ok=True)
    snaps.save(out)
    print(f"snapshots {snaps.columns.shape[0]}x{snaps.n_times} checksum {snaps.checksum()}")
    print(f"ledger {json.dumps(ledger.snapshot())}")
    return 0


# invert

def _param_vector(text, P, default):
    if text is None:
        return np.full(P, default) if np.ndim(default) == 0 else np.asarray(default, float)
    vals = np.array(text, dtype=float)
    if vals.size == 1:
        return np.full(P, vals[0])
    if vals.size != P:
        raise ValueError(f"expected 1 or {P} values, got {vals.size}")
    return vals


def cmd_invert(cfg: RunConfig) -> int:
    a = cfg.flags
    fam = RationalFamily.load(cfg.paths["family"])
    pencil, manifest = _load_model(cfg.paths["model"])
    if pencil.Q is None:
        raise ValueError("model bundle has no observation rows (use model --observe)")
    spec = Diffusion1D.from_dict(manifest["diffusion1d"])
    regions = (_region_map(spec.n_cells, a["regions"]) if a["regions"]
               else np.array(manifest.get("region_map") or np.zeros(spec.n_cells, int)))
    pm = split_param_model(Diffusion1D(spec.length, np.ones(spec.n_cells),
                                       spec.source_node), regions)
    data = SnapshotMatrix.load(cfg.paths["data"])
    if not np.allclose(data.times, fam.times, rtol=1e-12, atol=0):
        raise ValueError("data times differ from the family's channels")
    d = data.columns.T.ravel()
    if a["noise"]:
        rng = np.random.default_rng(cfg.seed)
        d = d + a["noise"] * np.abs(d).max() * rng.standard_normal(d.size)
    fm = ForwardMap(fam, pm, pencil.K, pencil.Q, pencil.f, pencil.bandwidth)
    m0 = _param_vector(a["m0"], pm.n_params, float(np.mean(np.log(spec.sigma))))
    m_ref = _param_vector(a["mref"], pm.n_params, m0)
    state = gauss_newton(fm, d, m0, alpha=a["alpha"], lam=a["lam"], m_ref=m_ref,
                         max_iters=a["max_iters"], mode=a["mode"])
    out = cfg.paths["out"]
    _write_json(out, {"m": state.m.tolist(), "sigma": np.exp(state.m).tolist(),
                      "converged": state.converged, "reason": state.reason,
                      "iterations": state.iterations, "mode": a["mode"],
                      "lambda": a["lam"]})
    hist = cfg.paths.get("history", out.with_suffix(".history.csv"))
    lines = ["iteration,residual_norm,objective," + ",".join(f"m{k}" for k in range(pm.n_params))]
    for i, (rn, ob, m) in enumerate(zip(state.residual_history, state.objective_history,
                                        state.iterates)):
        lines.append(f"{i},{rn!r},{ob!r}," + ",".join(repr(float(v)) for v in m))
    hist.write_text("\n".join(lines) + "\n")
    print(f"iterations {state.iterations} reason {state.reason}")
    print("m " + " ".join(f"{v:.10g}" for v in state.m))
    return 0 if state.converged or state.reason == "max_iters" else 1


# bench

def cmd_bench(cfg: RunConfig) -> int:
    a = cfg.flags
    fam = RationalFamily.load(cfg.paths["family"])
    try:
        pencil, _ = _load_model(cfg.paths["model"])
    except (OSError, KeyError, PencilError) as exc:
        raise NumericalFailure(f"cannot load model bundle: {exc}") from exc
    counts = [1]
    while counts[-1] * 2 <= cfg.workers:
        counts.append(counts[-1] * 2)
    if counts[-1] != cfg.workers:
        counts.append(cfg.workers)
    rows, diag = [], []
    for w in counts:
        ledger = SolveLedger()
        snaps, rep = parallel_eval(fam, pencil, w, ledger, repeats=a["repeats"])
        rows.append({"workers": w, "checksum": snaps.checksum(), "ledger": ledger.snapshot()})
        diag.append({"workers": w, "wall_time": rep.wall_time,
                     "speedup": 1.0 if w == 1 else rep.speedup})
    base_ledger = SolveLedger()
    base = _baseline_at(1.0, a["baseline_degree"])
    eval_single_time_on_pencil(base, pencil, fam.times, base_ledger)
    fam_f = rows[0]["ledger"]["factorizations"]
    base_f = base_ledger.factorizations
    report = {
        "results": {
            "family_degree": fam.degree, "channels": fam.n_channels,
            "baseline_degree": a["baseline_degree"],
            "family_factorizations": fam_f, "baseline_factorizations": base_f,
            "factorization_ratio": base_f / fam_f, "runs": rows,
            "identical_checksums": len({r["checksum"] for r in rows}) == 1,
        },
        "diagnostics": {"timings": diag, "repeats": a["repeats"]},
    }
    text = json.dumps(report, indent=1) + "\n"
    if "out" in cfg.paths:
        _write_json(cfg.paths["out"], report)
    sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="expotime", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def workers(sp):
        sp.add_argument("--workers", type=int, default=_default_workers())

    f = sub.add_parser("fit", help="fit a shared-pole family or single-time baseline")
    f.add_argument("--tmin", type=float, required=True)
    f.add_argument("--tmax", type=float, required=True)
    f.add_argument("--nchannels", type=int, default=31)
    g = f.add_mutually_exclusive_group(required=True)
    g.add_argument("--degree", type=int)
    g.add_argument("--target-tol", type=float)
    f.add_argument("--weights", choices=["unit", "t32", "t52"], default="unit")
    f.add_argument("--max-iters", type=int, default=100)
    f.add_argument("--stagnation-tol", type=float, default=1e-10)
    f.add_argument("--subdiagonal", action="store_true",
                   help="fit a shared-pole family even when tmin == tmax")
    f.add_argument("--out", default="family.json")
    workers(f)
    f.set_defaults(func=cmd_fit)

    t = sub.add_parser("table", help="minimal degrees by accuracy and time ratio (CSV)")
    t.add_argument("--accuracies", type=_floats, default=list(DEFAULT_ACCURACIES))
    t.add_argument("--ratios", type=_floats, default=list(DEFAULT_RATIOS))
    t.add_argument("--nchannels", type=int, default=31)
    t.add_argument("--weights", choices=["unit", "t32", "t52"], default="unit")
    t.add_argument("--cap", type=int, default=80)
    t.add_argument("--out")
    workers(t)
    t.set_defaults(func=cmd_table)

    m = sub.add_parser("model", help="write a 1D diffusion pencil bundle")
    m.add_argument("--cells", type=int, required=True)
    m.add_argument("--length", type=float, default=100.0)
    sg = m.add_mutually_exclusive_group()
    sg.add_argument("--sigma", type=_floats, default=[0.01])
    sg.add_argument("--sigma-file")
    m.add_argument("--regions", help="region count (contiguous blocks) or one label per cell")
    m.add_argument("--observe", help="e.g. point:100,derivative_stencil:150")
    m.add_argument("--source-node", type=int)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_model)

    fw = sub.add_parser("forward", help="evaluate a family on a model bundle")
    fw.add_argument("--family", required=True)
    fw.add_argument("--model", required=True)
    fw.add_argument("--observed", action="store_true", help="apply the bundle's Q rows")
    fw.add_argument("--oracle", action="store_true", help="use the eigendecomposition oracle")
    fw.add_argument("--out", required=True)
    workers(fw)
    fw.set_defaults(func=cmd_forward)

    iv = sub.add_parser("invert", help="Gauss-Newton recovery of region log-conductivities")
    iv.add_argument("--family", required=True)
    iv.add_argument("--model", required=True)
    iv.add_argument("--data", required=True)
    iv.add_argument("--regions")
    iv.add_argument("--lambda", dest="lam", type=float, default=0.0)
    iv.add_argument("--mref", type=_floats)
    iv.add_argument("--m0", type=_floats)
    iv.add_argument("--alpha", type=float, default=1.0)
    iv.add_argument("--mode", choices=["qr", "cgls"], default="qr")
    iv.add_argument("--max-iters", type=int, default=50)
    iv.add_argument("--noise", type=float, default=0.0,
                    help="relative Gaussian noise added to the data (demonstration only)")
    iv.add_argument("--seed", type=int)
    iv.add_argument("--history")
    iv.add_argument("--out", default="inversion.json")
    iv.set_defaults(func=cmd_invert)

    b = sub.add_parser("bench", help="parallel evaluation timings and solve counts")
    b.add_argument("--family", required=True)
    b.add_argument("--model", required=True)
    b.add_argument("--baseline-degree", type=int, default=14)
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--out")
    workers(b)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    cfg = RunConfig.from_args(args)
    try:
        return args.func(cfg)
    except (NumericalFailure, FitDivergenceError, IllPosedFitError, SearchCapError,
            EquilibrationError, RankDeficientError, CGLSConvergenceError,
            np.linalg.LinAlgError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, KeyError, PencilError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
