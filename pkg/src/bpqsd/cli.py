"""Config-driven experiment runner.

Every run writes its artifacts plus ``manifest.json`` (config hash, seed,
library versions, output list) into one directory.  Results are staged in a
sibling scratch directory and only moved into place once every stage has
succeeded, so a failed run leaves no outputs behind.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import platform
import shutil
import sys
import tempfile
import warnings
from concurrent.futures import ThreadPoolExecutor
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import scipy

from . import __version__, flow, ldp, model as mdl, qsd, simulate

EXPERIMENTS = ("validate", "simulate", "qsd", "flow", "quasipotential", "scaling")
MANIFEST = "manifest.json"


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists ``(field_path, message)`` pairs."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(f"{p}: {m}" for p, m in self.errors))


class SchemaMismatch(ValueError):
    pass


def config_schema() -> dict:
    return json.loads(resources.files("bpqsd").joinpath("config.schema.json").read_text())


def _path(parts) -> str:
    return "/".join(str(p) for p in parts) or "<root>"


def validate_config(cfg: dict) -> dict:
    """Check ``cfg`` against the schema and the module preconditions.

    Returns the config with defaults filled in.  Raises ``ConfigError`` with
    every problem found, each tagged by its field path.
    """
    validator = jsonschema.Draft202012Validator(config_schema())
    errors = [(_path(e.absolute_path), e.message) for e in sorted(validator.iter_errors(cfg), key=str)]
    if errors:
        raise ConfigError(errors)
    cfg = json.loads(json.dumps(cfg))
    try:
        model = mdl.load_model(cfg["model"])
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError([("model", str(exc))]) from None
    d = model.d
    scale = cfg.setdefault("scale", {})
    scale.setdefault("N", [10])
    scale.setdefault("policy", "absorb")
    scale.setdefault("budget", 20000)
    scale.setdefault("grid_step", 0.02 if d == 1 else 0.05)
    scale.setdefault("delta", 0.05 if d == 1 else 0.06)
    scale.setdefault("T", 8.0 if d == 1 else 2.0)
    scale.setdefault("flow_step", 0.01)
    scale.setdefault("eps", 0.2)
    scale.setdefault("eps_V", 3e-4 if d == 1 else 2e-3)
    scale.setdefault("ring", 3)
    scale.setdefault("time_grid", list(ldp.DEFAULT_TIMES))
    scale.setdefault("qp_grid_step", scale["grid_step"])
    if "box" not in scale:
        hi = float(min(2.0 * mdl.sup_norm_bound(model), 10.0))
        scale["box"] = [[0.0, hi]] * d
    errors = []
    if len(scale["box"]) != d:
        errors.append(("scale/box", f"needs {d} intervals"))
    for i, (lo, hi) in enumerate(scale["box"]):
        if not hi > lo:
            errors.append((f"scale/box/{i}", "upper bound must exceed lower bound"))
    if "source" in scale and len(scale["source"]) != d:
        errors.append(("scale/source", f"needs {d} coordinates"))
    sim = cfg.setdefault("simulate", {})
    sim.setdefault("steps", 500)
    sim.setdefault("reps", 20)
    if "x0" in sim:
        if len(sim["x0"]) != d:
            errors.append(("simulate/x0", f"needs {d} coordinates"))
        else:
            for N in scale["N"]:
                if not mdl.on_lattice(np.asarray(sim["x0"]), N):
                    errors.append(("simulate/x0", f"not a point of the lattice Z^d/{N}"))
    if "lln_T" in sim:
        for N in scale["N"]:
            if abs(sim["lln_T"] * N - round(sim["lln_T"] * N)) > 1e-9:
                errors.append(("simulate/lln_T", f"lln_T * N must be an integer (N={N})"))
            if sim["lln_T"] * N > sim["steps"]:
                errors.append(("simulate/lln_T", f"longer than the simulated horizon (N={N})"))
    val = cfg.setdefault("validate", {})
    val.setdefault("region", [0.01, float(scale["box"][0][1])])
    val.setdefault("step", 0.05)
    val.setdefault("samples", 2000)
    q = cfg.setdefault("qsd", {})
    q.setdefault("tol", 1e-12)
    q.setdefault("max_iter", 1_000_000)
    if errors:
        raise ConfigError(errors)
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# stages


class _Run:
    def __init__(self, cfg, seed, threads, stage_dir: Path):
        self.cfg = cfg
        self.seed = seed
        self.threads = max(1, threads)
        self.dir = stage_dir
        self.model = mdl.load_model(cfg["model"])
        self.outputs = []
        self.cache = {}

    def write_json(self, name, obj, kind="deterministic"):
        (self.dir / name).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default))
        self.outputs.append({"path": name, "kind": kind})

    def write_csv(self, name, header, rows, kind="deterministic"):
        with open(self.dir / name, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in rows:
                w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
        self.outputs.append({"path": name, "kind": kind})

    def add_file(self, name, kind="deterministic"):
        self.outputs.append({"path": name, "kind": kind})

    # -- experiments -------------------------------------------------------

    def validate(self):
        v = self.cfg["validate"]
        report = mdl.validate_assumptions(self.model, v["region"], v["step"], rng=simulate.stream(self.seed, 0),
                                          samples=v["samples"])
        self.write_json("validation.json", report, kind="monte_carlo")
        return report

    def flow(self):
        if "recurrence" in self.cache:
            return self.cache["recurrence"]
        s = self.cfg["scale"]
        rec = flow.chain_recurrence(self.model, s["box"], s["grid_step"], s["delta"], T=s["T"], step=s["flow_step"])
        self.write_json("recurrence.json", rec.to_dict())
        self.cache["recurrence"] = rec
        return rec

    def simulate(self):
        s, sim = self.cfg["scale"], self.cfg["simulate"]
        summary = {}
        for b, N in enumerate(s["N"]):
            x0 = sim.get("x0")
            if x0 is None:
                x0 = np.round(np.full(self.model.d, 1.0) * N) / N
            batch = simulate.run_chains(self.model, x0, N, sim["steps"], sim["reps"], seed=self.seed, batch=b)
            rows = []
            for k in range(batch.counts.shape[0]):
                for j in range(batch.counts.shape[1]):
                    rows.append([k, j, *batch.counts[k, j].tolist()])
            self.write_csv(f"paths_N{N}.csv", ["step", "replicate", *[f"n_{i + 1}" for i in range(self.model.d)]],
                           rows, kind="monte_carlo")
            entry = {"N": N, "extinct": int(np.sum(batch.extinct_at >= 0)), "reps": sim["reps"]}
            if "lln_T" in sim:
                D = simulate.lln_deviations(self.model, batch, sim["lln_T"])
                entry.update({"lln_T": sim["lln_T"], "median_D": float(np.median(D)), "max_D": float(np.max(D))})
            summary[str(N)] = entry
        self.write_json("simulate_summary.json", summary, kind="monte_carlo")
        return summary

    def _kernels(self):
        s = self.cfg["scale"]
        if "kernels" not in self.cache:
            def build(N):
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    return qsd.build_truncated_kernel(self.model, N, s.get("r"), s["policy"], s["budget"])
            with ThreadPoolExecutor(self.threads) as pool:
                self.cache["kernels"] = dict(zip(s["N"], pool.map(build, s["N"])))
        return self.cache["kernels"]

    def qsd(self):
        q = self.cfg["qsd"]
        estimates = {}
        table = []
        for N, kernel in self._kernels().items():
            est = qsd.conditioned_power_iteration(kernel, tol=q["tol"], max_iter=q["max_iter"])
            estimates[N] = est
            self.write_csv(f"qsd_N{N}.csv", [f"x_{i + 1}" for i in range(self.model.d)] + ["mu"],
                           [[*x, p] for x, p in zip(est.states.tolist(), est.mu.tolist())])
            sr = qsd.survival_rate(est)
            table.append([N, len(kernel), est.per_step_survival, est.killing, sr["lambda_N"],
                          sr["one_minus_lambda_N"], sr["rate"], est.residual_tv, est.iterations])
            fv = q.get("fleming_viot")
            if fv:
                res = qsd.fleming_viot_estimate(self.model, N, fv["particles"], fv["steps"],
                                                rng=simulate.stream(self.seed, 1, N), burn_in=fv.get("burn_in"))
                self.write_json(f"fleming_viot_N{N}.json", {
                    "N": N, "particles": fv["particles"], "steps": fv["steps"], "killing": res.killing,
                    "tv_to_power_iteration": qsd.tv(res.on_kernel(kernel), est.mu)}, kind="monte_carlo")
        self.write_csv("lambda_table.csv", ["N", "states", "per_step_survival", "killing", "lambda_N",
                                            "one_minus_lambda_N", "rate", "residual_tv", "iterations"], table)
        self.cache["qsd"] = estimates
        return estimates

    def quasipotential(self):
        s = self.cfg["scale"]
        rec = self.cache.get("recurrence")
        source = s.get("source")
        if source is None:
            rec_for_source = rec if rec is not None else self.flow()
            qa = rec_for_source.quasiattractors
            if not qa:
                raise RuntimeError("no quasiattractor to use as quasipotential source; set scale.source")
            source = rec_for_source.points(qa[0]).mean(axis=0)
            rec = rec_for_source
        g = ldp.action_graph(self.model, s["box"], s["qp_grid_step"], s["time_grid"], s["ring"])
        field = ldp.quasipotential_field(self.model, s["box"], s["qp_grid_step"], source, graph=g)
        field.to_csv(self.dir / "quasipotential.csv")
        self.add_file("quasipotential.csv")
        vc = ldp.v_chain_classes(self.model, s["box"], s["qp_grid_step"], s["eps_V"], recurrence=rec, graph=g)
        self.write_json("v_classes.json", vc.to_dict())
        return field, vc

    def scaling(self):
        s = self.cfg["scale"]
        self.validate()
        rec = self.flow()
        estimates = self.qsd()
        conc = {str(N): qsd.support_concentration(est, rec, s["eps"]) for N, est in estimates.items()}
        Ns = sorted(estimates)
        om = [qsd.survival_rate(estimates[N])["one_minus_lambda_N"] for N in Ns]
        trend = {"N": Ns, "one_minus_lambda_N": om,
                 "strictly_decreasing": bool(all(a > b for a, b in zip(om, om[1:])))}
        logs = [math.log(v) for v in om if v > 0]
        if len(logs) == len(Ns) and len(Ns) >= 2:
            slope, intercept = np.polyfit(Ns, logs, 1)
            pred = slope * np.asarray(Ns) + intercept
            ss = float(np.sum((np.asarray(logs) - np.mean(logs)) ** 2))
            trend.update({"slope": float(slope),
                          "r_squared": 1.0 - float(np.sum((np.asarray(logs) - pred) ** 2)) / ss if ss > 0 else 1.0})
        self.write_json("concentration.json", {"concentration": conc, "trend": trend})
        self.quasipotential()


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serialisable: {type(o)}")


def run(cfg: dict, experiment: str | None = None, seed: int | None = None, threads: int = 1,
        out: str | Path | None = None) -> Path:
    """Validate ``cfg``, run one experiment and return the output directory.

    Raises
    ------
    ConfigError
        Before any computation when the config is invalid.
    """
    cfg = validate_config(cfg)
    experiment = experiment or cfg.get("experiment")
    if experiment not in EXPERIMENTS:
        raise ConfigError([("experiment", f"must be one of {', '.join(EXPERIMENTS)}")])
    seed = int(cfg.get("seed", 0) if seed is None else seed)
    if not 0 <= seed < 2 ** 64:
        raise ConfigError([("seed", "must fit in an unsigned 64-bit integer")])
    out = Path(out or cfg.get("out") or f"runs/{experiment}")
    cfg = {**cfg, "experiment": experiment, "seed": seed}
    cfg.pop("out", None)
    out.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=f".{out.name}.partial-", dir=out.parent))
    try:
        r = _Run(cfg, seed, threads, stage)
        getattr(r, experiment)()
        manifest = {
            "experiment": experiment,
            "config": cfg,
            "config_sha256": config_hash(cfg),
            "seed": seed,
            "threads": threads,
            "versions": {"bpqsd": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                         "python": platform.python_version()},
            "outputs": [{**o, "sha256": _sha256(stage / o["path"])} for o in r.outputs],
        }
        (stage / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
        out.mkdir(parents=True, exist_ok=True)
        for f in [*(o["path"] for o in r.outputs), MANIFEST]:
            shutil.move(str(stage / f), str(out / f))
    finally:
        shutil.rmtree(stage, ignore_errors=True)
    return out


# ---------------------------------------------------------------------------
# comparing runs


def _numbers(path: Path):
    """Flatten a CSV or JSON artifact into ``{key: value}``."""
    if path.suffix == ".csv":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        flat = {"__header__": tuple(rows[0]) if rows else ()}
        for i, row in enumerate(rows[1:]):
            for j, cell in enumerate(row):
                flat[(i, j)] = _num(cell)
        return flat
    flat = {}

    def walk(o, key):
        if isinstance(o, dict):
            for k, v in o.items():
                walk(v, key + (k,))
        elif isinstance(o, list):
            for k, v in enumerate(o):
                walk(v, key + (k,))
        else:
            flat[key] = _num(o)

    walk(json.loads(path.read_text()), ())
    return flat


def _num(v):
    if isinstance(v, bool) or v is None:
        return v
    try:
        return float(v)
    except (TypeError, ValueError):
        return v


def diff_runs(manifest_a, manifest_b, rtol: float = 0.0, atol: float = 0.0) -> dict:
    """Per-file numeric comparison of two runs.

    ``differences`` maps each file to its largest absolute difference and the
    number of differing entries; files that agree within ``atol + rtol * |b|``
    are left out, so identical runs give an empty mapping.

    Raises
    ------
    SchemaMismatch
        When a manifest or a listed file is missing, or two files do not have
        the same layout.
    """
    ma, mb = Path(manifest_a), Path(manifest_b)
    for m in (ma, mb):
        if m.is_dir():
            m = m / MANIFEST
        if not m.exists():
            raise SchemaMismatch(f"manifest not found: {m}")
    ma = ma / MANIFEST if ma.is_dir() else ma
    mb = mb / MANIFEST if mb.is_dir() else mb
    A, B = json.loads(ma.read_text()), json.loads(mb.read_text())
    for key in ("experiment", "outputs", "seed"):
        if key not in A or key not in B:
            raise SchemaMismatch(f"manifest lacks '{key}'")
    fa = {o["path"]: o for o in A["outputs"]}
    fb = {o["path"]: o for o in B["outputs"]}
    if set(fa) != set(fb):
        raise SchemaMismatch(f"output lists differ: {sorted(set(fa) ^ set(fb))}")
    report = {"a": str(ma), "b": str(mb), "seeds": [A["seed"], B["seed"]], "differences": {}, "identical": []}
    for name in sorted(fa):
        pa, pb = ma.parent / name, mb.parent / name
        for p in (pa, pb):
            if not p.exists():
                raise SchemaMismatch(f"listed output missing: {p}")
        if pa.read_bytes() == pb.read_bytes():
            report["identical"].append(name)
            continue
        na, nb = _numbers(pa), _numbers(pb)
        if set(na) != set(nb):
            raise SchemaMismatch(f"{name}: layouts differ")
        worst, count = 0.0, 0
        for k, va in na.items():
            vb = nb[k]
            if isinstance(va, float) and isinstance(vb, float):
                if math.isnan(va) and math.isnan(vb) or va == vb:
                    continue
                gap = abs(va - vb)
                if not gap <= atol + rtol * abs(vb):
                    worst, count = max(worst, gap), count + 1
            elif va != vb:
                worst, count = math.inf, count + 1
        if count:
            report["differences"][name] = {"max_abs_diff": worst, "entries": count, "kind": fa[name].get("kind")}
        else:
            report["identical"].append(name)
    return report


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bpqsd", description="Quasi-stationary analysis of Binomial-Poisson chains.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        s = sub.add_parser(name, help=f"run the {name} pipeline")
        s.add_argument("--config", required=True, help="JSON config file")
        s.add_argument("--seed", type=int, default=None, help="unsigned 64-bit seed (overrides the config)")
        s.add_argument("--threads", type=int, default=1, help="worker threads")
        s.add_argument("--out", default=None, help="output directory")
    d = sub.add_parser("diff", help="compare two runs by their manifests")
    d.add_argument("a")
    d.add_argument("b")
    d.add_argument("--rtol", type=float, default=0.0)
    d.add_argument("--atol", type=float, default=0.0)
    d.add_argument("--out", default=None, help="write the report here instead of stdout")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "diff":
        try:
            rep = diff_runs(args.a, args.b, args.rtol, args.atol)
        except SchemaMismatch as exc:
            print(f"schema error: {exc}", file=sys.stderr)
            return 2
        text = json.dumps(rep, indent=2)
        if args.out:
            Path(args.out).write_text(text)
        else:
            print(text)
        return 1 if rep["differences"] else 0
    try:
        cfg = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if args.threads < 1:
        print("config error: --threads must be at least 1", file=sys.stderr)
        return 2
    try:
        out = run(cfg, args.command, args.seed, args.threads, args.out)
    except ConfigError as exc:
        for path, msg in exc.errors:
            print(f"config error at {path}: {msg}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001  (report and exit nonzero; staging is already cleaned up)
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(out / MANIFEST)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
