"""Command-line interface.

Every command writes into ``--out``. Existing files are left alone unless
``--overwrite`` is given. Settings merge as built-in defaults, then a JSON
``--config`` file, then explicit flags. Outputs are deterministic given
the inputs. Run metadata with timestamps goes to a separate ``meta.json``.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .discrete_mimic import GaussianStartScenario, convergence_study
from .errors import MimicryError
from .gcomp import TreatmentTree, figure1_tree, g_compute, naive_compare, parse_regime
from .inference import ScoreSpec, estimate_psi, test_no_effect
from .mimic_ode import PathTable, solve_backward
from .paths import read_paths_csv
from .shift_models import ShiftModel, closed_form_mimic
from .simulate import Dataset, Scenario, build_figure_tree, shift_model_for, simulate_observed, write_counterfactuals_csv
from .validate import mimicry_check

BUILTIN_SCENARIOS = {
    "gvhd": lambda: Scenario("GvHDSurvival"),
    "pcp": lambda: Scenario("PCPContinuous"),
    "null": lambda: Scenario("NullEffect"),
    "tree": build_figure_tree,
}

DEFAULTS = {
    "simulate": {"scenario": "gvhd", "n": 1000},
    "mimic": {"model": None, "psi": None, "subjects": None},
    "estimate": {"model": None, "bounds": "-2,2", "grid": 41},
    "test": {"alpha": 0.05},
    "gcomp": {"builtin": None, "tree": None, "regime": None, "naive": None},
    "converge": {"levels": "2..8", "start": 0.3, "y": 0.7, "psi": 1.0, "rate": 1.0, "mesh_level": 12},
    "validate": {"model": None, "reference": None, "times": None, "level": 2, "alpha": 0.01, "min_size": 500},
}


class CLIError(Exception):
    pass


# -- output handling -------------------------------------------------------------


class Output:
    def __init__(self, root: str | None, overwrite: bool):
        self.root = Path(root) if root else None
        self.overwrite = overwrite

    def path(self, name: str) -> Path:
        if self.root is None:
            raise CLIError("this command needs --out")
        p = self.root / name
        if p.exists() and not self.overwrite:
            raise CLIError(f"{p} exists; pass --overwrite to replace it")
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def text(self, name: str, text: str) -> None:
        with open(self.path(name), "w", newline="") as fh:
            fh.write(text)

    def json(self, name: str, obj) -> None:
        self.text(name, json.dumps(_finite(obj), sort_keys=True, indent=2, allow_nan=False) + "\n")

    def writer(self, name: str, fn) -> None:
        with open(self.path(name), "w", newline="") as fh:
            fn(fh)


def _finite(obj):
    """Replace NaN and infinities by ``None`` so every JSON file is strict JSON."""
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


def _load_json(path: str):
    with open(path) as fh:
        return json.load(fh)


def _load_scenario(ref: str) -> Scenario:
    if ref in BUILTIN_SCENARIOS:
        return BUILTIN_SCENARIOS[ref]()
    return Scenario.from_dict(_load_json(ref))


def _load_dataset(directory: str):
    d = Path(directory)
    scenario = Scenario.from_dict(_load_json(d / "scenario.json"))
    with open(d / "paths.csv") as fh:
        _, paths = read_paths_csv(fh, scenario.horizon)
    y, died = [], []
    with open(d / "outcomes.csv") as fh:
        next(fh)
        for line in fh:
            _, yy, dd = line.strip().split(",")
            y.append(float(yy))
            died.append(bool(int(dd)))

    meta = d / "dataset.json"
    seed = _load_json(meta).get("seed") if meta.exists() else None
    return Dataset(scenario, seed, paths, np.array(y), np.array(died), {})


def _load_counterfactuals(directory: str, n: int):
    rows: dict[float, dict[int, float]] = {}
    with open(Path(directory) / "counterfactuals.csv") as fh:
        next(fh)
        for line in fh:
            sid, t, v = line.strip().split(",")
            rows.setdefault(float(t), {})[int(sid)] = float(v)
    times = sorted(rows)
    return np.array(times), np.array([[rows[t][i] for t in times] for i in range(n)])


def _model(cfg, scenario: Scenario) -> ShiftModel:
    if cfg.get("model"):
        return ShiftModel.from_dict(_load_json(cfg["model"]))
    psi = cfg.get("psi")
    if psi is not None:
        psi = [float(v) for v in str(psi).split(",")]
    return shift_model_for(scenario, psi)


def _spec(scenario: Scenario) -> ScoreSpec:
    return ScoreSpec(scenario.treatment, "alive" if scenario.survival else None)


def _parse_levels(text: str) -> list[int]:
    if ".." in text:
        a, b = text.split("..")
        return list(range(int(a), int(b) + 1))
    return [int(v) for v in text.split(",")]


# -- commands --------------------------------------------------------------------


def cmd_simulate(cfg, out: Output) -> dict:
    if cfg["seed"] is None:
        raise CLIError("simulate needs --seed")
    scenario = _load_scenario(cfg["scenario"])
    ds = simulate_observed(scenario, int(cfg["n"]), int(cfg["seed"]))
    out.text("scenario.json", json.dumps(scenario.to_dict(), sort_keys=True, indent=2) + "\n")
    out.writer("paths.csv", ds.write_paths_csv)
    out.writer("outcomes.csv", ds.write_outcomes_csv)
    if scenario.kind != "DiscreteTree":
        grid = np.append(scenario.decision_grid, scenario.horizon)
        out.writer("counterfactuals.csv", lambda fh: write_counterfactuals_csv(fh, ds, grid))
    info = {"n": ds.n, "seed": ds.seed, "fingerprint": ds.fingerprint, "kind": scenario.kind}
    out.json("dataset.json", info)
    return info


def _solve_one(args):
    model, path, y = args
    return solve_backward(model, path, y)


def cmd_mimic(cfg, out: Output) -> dict:
    data = _load_dataset(cfg["data"])
    model = _model(cfg, data.scenario)
    n = data.y.size if cfg.get("subjects") is None else min(int(cfg["subjects"]), data.y.size)
    jobs = [(model, data.paths[i], float(data.y[i])) for i in range(n)]
    threads = int(cfg.get("threads") or 1)
    if threads > 1:
        with ProcessPoolExecutor(threads) as pool:
            trajs = list(pool.map(_solve_one, jobs, chunksize=64))
    else:
        trajs = [_solve_one(j) for j in jobs]
    worst = 0.0
    reports = {}
    for i, tr in enumerate(trajs):
        out.writer(f"trajectories/subject_{i:06d}.csv", tr.write_csv)
        reports[str(i)] = tr.report
        if model.y_independent:
            ref = [closed_form_mimic(model, data.paths[i], data.y[i], t) for t in tr.mesh]
            worst = max(worst, float(np.max(np.abs(np.asarray(ref) - tr.values))))
    out.json("solver_reports.json", reports)
    summary = {"n": n, "model": model.to_dict(), "max_closed_form_deviation": worst if model.y_independent else None}
    out.json("summary.json", summary)
    return summary


def cmd_estimate(cfg, out: Output) -> dict:
    data = _load_dataset(cfg["data"])
    model = _model(cfg, data.scenario)
    lo, hi = (float(v) for v in str(cfg["bounds"]).split(","))
    res = estimate_psi(data, model, _spec(data.scenario), bounds=(lo, hi), n_grid=int(cfg["grid"]))
    result = {"psi_hat": res.psi_hat, "ci": list(res.ci), "identified": res.identified, "flags": res.flags}
    out.json("estimate.json", result)
    out.text("score_curve.csv", "psi,z\n" + "".join(f"{g!r},{z!r}\n" for g, z in res.score_curve))
    return result


def cmd_test(cfg, out: Output) -> dict:
    data = _load_dataset(cfg["data"])
    res = test_no_effect(data, _spec(data.scenario))
    res["alpha"] = float(cfg["alpha"])
    res["reject"] = res["p_value"] < res["alpha"]
    out.json("test.json", res)
    return res


def cmd_gcomp(cfg, out: Output) -> dict:
    if cfg.get("builtin"):
        if cfg["builtin"] != "figure1":
            raise CLIError(f"unknown built-in tree {cfg['builtin']!r}")
        tree = figure1_tree()
    elif cfg.get("tree"):
        tree = TreatmentTree.from_dict(_load_json(cfg["tree"]))
    else:
        raise CLIError("gcomp needs --builtin or --tree")
    result: dict = {}
    if cfg.get("regime") is not None:
        res = g_compute(tree, parse_regime(cfg["regime"]))
        result["regime"] = cfg["regime"]
        result.update(res.to_dict())
    if cfg.get("naive") is not None:
        cond = {k: int(v) for k, v in parse_regime(cfg["naive"]).items()}
        result["naive"] = {
            str(arm): {"survivors": c["survivors"], "total": c["total"], "proportion": str(c["proportion"])}
            for arm, c in naive_compare(tree, cond).items()
        }
    if out.root is not None:
        out.json("gcomp.json", result)
    return result


def cmd_converge(cfg, out: Output) -> dict:
    scen = GaussianStartScenario(psi=float(cfg["psi"]), rate=float(cfg["rate"]))
    res = convergence_study(
        scen, scen.path(float(cfg["start"])), float(cfg["y"]), _parse_levels(cfg["levels"]), int(cfg["mesh_level"])
    )
    out.text("convergence.csv", "level,sup_gap,bound\n" + "".join(f"{l},{g!r},{b!r}\n" for l, g, b in res.rows()))
    summary = {
        "levels": res.levels,
        "gaps": res.gaps,
        "bounds": res.bounds,
        "nonincreasing": res.nonincreasing,
        "reference": res.reference,
    }
    out.json("summary.json", summary)
    return summary


def cmd_validate(cfg, out: Output) -> dict:
    data = _load_dataset(cfg["data"])
    ref_dir = cfg.get("reference") or cfg["data"]
    ref = data if ref_dir == cfg["data"] else _load_dataset(ref_dir)
    cf_times, cf = _load_counterfactuals(ref_dir, ref.y.size)
    times = cf_times if cfg.get("times") is None else np.array([float(v) for v in str(cfg["times"]).split(",")])
    cols = [int(np.argmin(np.abs(cf_times - t))) for t in times]
    if not np.allclose(cf_times[cols], times):
        raise CLIError("requested times are not in counterfactuals.csv")
    model = _model(cfg, data.scenario)
    X = PathTable(data.paths, data.y).mimic(model, times) if model.y_independent else None
    if X is None:
        X = np.array([solve_backward(model, p, y).at(times) for p, y in zip(data.paths, data.y)])
    sc = data.scenario
    rep = mimicry_check(
        X,
        data.paths,
        cf[:, cols],
        ref.paths,
        times,
        level=int(cfg["level"]),
        alpha=float(cfg["alpha"]),
        min_size=int(cfg["min_size"]),
        status=sc.treatment,
        alive="alive" if sc.survival else None,
    )
    out.writer("strata.csv", rep.write_csv)
    summary = rep.summary()
    out.json("summary.json", summary)
    return summary


COMMANDS = {
    "simulate": cmd_simulate,
    "mimic": cmd_mimic,
    "estimate": cmd_estimate,
    "test": cmd_test,
    "gcomp": cmd_gcomp,
    "converge": cmd_converge,
    "validate": cmd_validate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default=None)
    common.add_argument("--threads", type=int, default=None)
    common.add_argument("--overwrite", action="store_true", default=None)
    common.add_argument("--config", default=None, help="JSON file with settings for this command")
    ap = argparse.ArgumentParser(prog="mimicry", description="Mimicking counterfactuals for structural nested models.")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, *specs):
        p = sub.add_parser(name, parents=[common])
        for flag, kw in specs:
            p.add_argument(flag, default=None, **kw)
        return p

    add("simulate", ("--scenario", {}), ("--n", {"type": int}))
    add("mimic", ("--data", {"required": True}), ("--model", {}), ("--psi", {}), ("--subjects", {"type": int}))
    add("estimate", ("--data", {"required": True}), ("--model", {}), ("--bounds", {}), ("--grid", {"type": int}))
    add("test", ("--data", {"required": True}), ("--alpha", {"type": float}))
    add("gcomp", ("--builtin", {}), ("--tree", {}), ("--regime", {}), ("--naive", {}))
    add(
        "converge",
        ("--levels", {}),
        ("--start", {"type": float}),
        ("--y", {"type": float}),
        ("--psi", {"type": float}),
        ("--rate", {"type": float}),
        ("--mesh-level", {"type": int, "dest": "mesh_level"}),
    )
    add(
        "validate",
        ("--data", {"required": True}),
        ("--reference", {}),
        ("--model", {}),
        ("--psi", {}),
        ("--times", {}),
        ("--level", {"type": int}),
        ("--alpha", {"type": float}),
        ("--min-size", {"type": int, "dest": "min_size"}),
    )
    return ap


def merged_config(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS[args.command])
    cfg.update({"seed": None, "out": None, "threads": 1, "overwrite": False})
    if args.config:
        file_cfg = _load_json(args.config)
        if not isinstance(file_cfg, dict):
            raise CLIError("config file must hold a JSON object")
        cfg.update({k.replace("-", "_"): v for k, v in file_cfg.items()})
    cfg.update({k: v for k, v in vars(args).items() if v is not None and k not in ("command", "config")})
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = merged_config(args)
        out = Output(cfg.get("out"), bool(cfg.get("overwrite")))
        started = time.time()
        result = COMMANDS[args.command](cfg, out)
        if out.root is not None:
            meta = {
                "command": args.command,
                "argv": list(sys.argv[1:] if argv is None else argv),
                "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
                "elapsed_seconds": round(time.time() - started, 3),
                "version": __version__,
                "pid": os.getpid(),
            }
            meta_path = out.root / "meta.json"
            meta_path.parent.mkdir(parents=True, exist_ok=True)
            meta_path.write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
        print(json.dumps(_finite(result), sort_keys=True, default=_jsonable))
        return 0
    except (CLIError, MimicryError, ValueError, TypeError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _jsonable(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return str(obj)


if __name__ == "__main__":
    sys.exit(main())
