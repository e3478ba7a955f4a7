"""Study drivers: configure a problem from JSON, run parameter sweeps,
write machine-readable reports.

A study is described by one JSON document (see load_config) and produces
in its output directory:

  report.json   deterministic summary — config echo, per-cell values with
                their exact seeds, slope fits, pass/fail flags.  The only
                line that varies between identical runs is the single
                "generated" header entry (timestamp and total wall time).
  <kind>.csv    flat per-cell rows: study, J, t, repeat, seed,
                metric_name, value, wall_ms.  Wall times live here and
                only here, so report.json stays byte-reproducible.
  *.csv         ensemble particles / per-step diagnostics where the study
                calls for them.

Every cell derives its own seed from the base seed and its coordinates,
so cells can run in any order — or concurrently — and still land on
identical numbers.
"""

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .dynamics import SdeConfig, run, sample_gaussian
from .ensemble import empirical_stats, save_csv
from .errors import EksError, TooLarge
from .metrics import fit_slope, gaussian_w2, w2_ensemble_vs_gaussian
from .model import (
    GaussianMoments,
    InverseProblem,
    make_perpendicular_perturbation,
    posterior_moments,
    quadrature_moments,
)
from .noise import derive_seed
from .reference import MomentFlow, rho_at, w2_decay_curve

__all__ = [
    "ConfigError",
    "StudyConfig",
    "StudyCell",
    "StudyReport",
    "default_problem",
    "default_rho0",
    "load_config",
    "parse_config",
    "run_sample",
    "run_study_j",
    "run_study_time",
    "run_study_coupling",
    "run_demo_nonlinear",
    "run_validate",
    "run_study",
    "write_report",
]

STUDY_KINDS = ("sample", "study-j", "study-time", "study-coupling",
               "demo-nonlinear", "validate")

# documented defaults; everything else must be explicit in the config
DEFAULT_H = 0.01
DEFAULT_SQRT_TOL = 1e-12
DEFAULT_DT_ODE = 1e-3


class ConfigError(EksError):
    """A study configuration could not be parsed or validated; the message
    names the offending field (and JSON line where available)."""


def default_problem():
    """The anisotropic off-center 2-D linear problem used throughout the
    acceptance studies."""
    return InverseProblem(a=[[1.0, 0.0], [0.0, 2.0]],
                          gamma=np.eye(2), gamma0=np.eye(2),
                          y=[1.0, 1.0], u0=[0.0, 0.0])


def default_rho0():
    return GaussianMoments(mean=[2.0, -2.0], cov=np.eye(2))


@dataclass(frozen=True)
class StudyConfig:
    """Everything a study needs; built by parse_config, never by hand."""

    kind: str
    problem: InverseProblem
    rho0: GaussianMoments
    h: float
    n_steps: int
    j_particles: int
    seed: int
    sqrt_tol: float = DEFAULT_SQRT_TOL
    dt_ode: float = DEFAULT_DT_ODE
    j_values: tuple = ()
    t_checkpoints: tuple = ()
    repeats: int = 1
    share_noise: bool = True
    with_particles: bool = False
    write_ensemble: bool = True
    fit_t_min: float = 1.0
    bands: dict = field(default_factory=dict)
    echo: dict = field(default_factory=dict)

    def sde(self, seed, j_particles=None, n_steps=None):
        return SdeConfig(h=self.h,
                         n_steps=self.n_steps if n_steps is None else n_steps,
                         j_particles=(self.j_particles if j_particles is None
                                      else j_particles),
                         seed=seed, sqrt_tol=self.sqrt_tol)


@dataclass
class StudyCell:
    study: str
    j: Optional[int]
    t: Optional[float]
    repeat: Optional[int]
    seed: Optional[int]
    metric: str
    value: float
    wall_ms: float = 0.0

    def as_row(self):
        def show(x):
            return "" if x is None else x
        return [self.study, show(self.j), show(self.t), show(self.repeat),
                show(self.seed), self.metric, repr(self.value),
                f"{self.wall_ms:.3f}"]

    def as_json(self):
        # wall_ms deliberately excluded: it is the one nondeterministic
        # cell field and belongs to the CSV
        return {"study": self.study, "j": self.j, "t": self.t,
                "repeat": self.repeat, "seed": self.seed,
                "metric": self.metric, "value": self.value}


@dataclass
class StudyReport:
    kind: str
    base_seed: int
    config_echo: dict
    cells: list
    fits: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    wall_ms_total: float = 0.0

    @property
    def passed(self):
        return all(self.flags.values())


# --------------------------------------------------------------- parsing


def _require(doc, key, kind):
    if key not in doc:
        raise ConfigError(f"{kind} study requires config field '{key}'")
    return doc[key]


def _matrix(doc, key):
    try:
        return np.asarray(doc[key], dtype=float)
    except (KeyError, TypeError, ValueError) as err:
        raise ConfigError(f"problem field '{key}' is missing or not "
                          f"numeric: {err}") from None


def _parse_problem(spec, base_dir):
    if spec == "default" or spec is None:
        return default_problem()
    if not isinstance(spec, dict):
        raise ConfigError("'problem' must be \"default\", an object, or "
                          "an object with a 'path'")
    if "path" in spec:
        path = Path(base_dir) / spec["path"]
        try:
            spec = json.loads(path.read_text())
        except OSError as err:
            raise ConfigError(f"cannot read problem file: {err}") from None
        except json.JSONDecodeError as err:
            raise ConfigError(
                f"problem file {path}: invalid JSON at line {err.lineno}, "
                f"column {err.colno}: {err.msg}") from None
    nonlinear = None
    if spec.get("nonlinear") is not None:
        nl = spec["nonlinear"]
        for fld in ("seed_direction", "frequency", "amplitude"):
            if fld not in nl:
                raise ConfigError(f"nonlinear spec requires '{fld}'")
        nonlinear = make_perpendicular_perturbation(
            _matrix(spec, "a"), _matrix(spec, "gamma"),
            seed_direction=np.asarray(nl["seed_direction"], dtype=float),
            frequency=np.asarray(nl["frequency"], dtype=float),
            amplitude=float(nl["amplitude"]))
    try:
        return InverseProblem(a=_matrix(spec, "a"),
                              gamma=_matrix(spec, "gamma"),
                              gamma0=_matrix(spec, "gamma0"),
                              y=_matrix(spec, "y"),
                              u0=_matrix(spec, "u0"),
                              nonlinear=nonlinear)
    except EksError as err:
        raise ConfigError(f"invalid problem: {err}") from None


def _parse_rho0(spec, problem):
    if spec is None:
        if problem.dim_l == 2 and np.allclose(problem.u0, 0.0):
            return default_rho0()
        return GaussianMoments(mean=problem.u0, cov=problem.gamma0)
    try:
        return GaussianMoments(mean=np.asarray(spec["mean"], dtype=float),
                               cov=np.asarray(spec["cov"], dtype=float))
    except (KeyError, TypeError, ValueError, EksError) as err:
        raise ConfigError(f"invalid rho0: {err}") from None


def _sorted_sweep(values, name):
    vals = list(values)
    if not vals:
        raise ConfigError(f"sweep list '{name}' must be non-empty")
    if any(b <= a for a, b in zip(vals, vals[1:])):
        raise ConfigError(f"sweep list '{name}' must be strictly increasing")
    return tuple(vals)


def load_config(path):
    """Read and validate a study config from a JSON file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config: {err}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON at line {err.lineno}, "
                          f"column {err.colno}: {err.msg}") from None
    return parse_config(doc, base_dir=path.parent)


def parse_config(doc, base_dir="."):
    """Validate a config document and resolve defaults into a StudyConfig."""
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    kind = doc.get("kind")
    if kind not in STUDY_KINDS:
        raise ConfigError(f"'kind' must be one of {STUDY_KINDS}, "
                          f"got {kind!r}")
    problem = _parse_problem(doc.get("problem"), base_dir)
    rho0 = _parse_rho0(doc.get("rho0"), problem)
    if rho0.dim != problem.dim_l:
        raise ConfigError(f"rho0 dimension {rho0.dim} does not match "
                          f"problem dimension {problem.dim_l}")

    sde = doc.get("sde", {})
    if not isinstance(sde, dict):
        raise ConfigError("'sde' must be an object")
    h = float(sde.get("h", DEFAULT_H))
    sqrt_tol = float(sde.get("sqrt_tol", DEFAULT_SQRT_TOL))
    n_steps = int(sde.get("n_steps", 0))
    j_particles = int(sde.get("j_particles", 0))
    needs_run = kind in ("sample", "demo-nonlinear", "study-j",
                         "study-coupling")
    if needs_run and n_steps < 0:
        raise ConfigError("sde.n_steps must be >= 0")
    if kind in ("sample", "demo-nonlinear") and j_particles < 1:
        raise ConfigError(f"{kind} study requires sde.j_particles >= 1")

    sweep = doc.get("sweep", {})
    j_values = ()
    t_checkpoints = ()
    if kind in ("study-j", "study-coupling"):
        j_values = _sorted_sweep(
            [int(v) for v in _require(sweep, "j_values", kind)], "j_values")
        if any(v < 2 for v in j_values):
            raise ConfigError("j_values must all be >= 2")
        if n_steps < 1:
            raise ConfigError(f"{kind} study requires sde.n_steps >= 1")
    if kind == "study-time":
        t_checkpoints = _sorted_sweep(
            [float(v) for v in _require(sweep, "t_checkpoints", kind)],
            "t_checkpoints")
        if t_checkpoints[0] < 0.0:
            raise ConfigError("t_checkpoints must be >= 0")
        if doc.get("with_particles"):
            if j_particles < 2:
                raise ConfigError(
                    "with_particles requires sde.j_particles >= 2")
            for t in t_checkpoints:
                if abs(round(t / h) * h - t) > 1e-9:
                    raise ConfigError(
                        f"checkpoint t={t} is not a multiple of h={h}")

    repeats = int(doc.get("repeats", 1))
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")

    seed = int(doc.get("seed", 0))
    if seed < 0:
        raise ConfigError("seed must be a non-negative integer")

    bands = doc.get("bands", {})
    if not isinstance(bands, dict):
        raise ConfigError("'bands' must be an object")

    if kind == "demo-nonlinear":
        if problem.nonlinear is None:
            raise ConfigError("demo-nonlinear requires a problem with a "
                              "'nonlinear' section")
        if problem.dim_l > 2:
            raise ConfigError("demo-nonlinear requires L <= 2 (quadrature "
                              "oracle limit)")

    return StudyConfig(
        kind=kind, problem=problem, rho0=rho0, h=h, n_steps=n_steps,
        j_particles=j_particles, seed=seed, sqrt_tol=sqrt_tol,
        dt_ode=float(doc.get("dt_ode", DEFAULT_DT_ODE)),
        j_values=j_values, t_checkpoints=t_checkpoints, repeats=repeats,
        share_noise=bool(doc.get("share_noise", True)),
        with_particles=bool(doc.get("with_particles", False)),
        write_ensemble=bool(doc.get("write_ensemble", True)),
        fit_t_min=float(doc.get("fit_t_min", 1.0)),
        bands=dict(bands), echo=doc,
    )


def _config_echo(cfg):
    """Fully-resolved config (defaults materialized) for the report."""
    problem = {
        "a": cfg.problem.a.tolist(),
        "gamma": cfg.problem.gamma.tolist(),
        "gamma0": cfg.problem.gamma0.tolist(),
        "y": cfg.problem.y.tolist(),
        "u0": cfg.problem.u0.tolist(),
    }
    raw_nl = cfg.echo.get("problem")
    if isinstance(raw_nl, dict) and raw_nl.get("nonlinear") is not None:
        problem["nonlinear"] = raw_nl["nonlinear"]
    out = {
        "kind": cfg.kind,
        "seed": cfg.seed,
        "problem": problem,
        "rho0": {"mean": cfg.rho0.mean.tolist(),
                 "cov": cfg.rho0.cov.tolist()},
        "sde": {"h": cfg.h, "n_steps": cfg.n_steps,
                "j_particles": cfg.j_particles, "sqrt_tol": cfg.sqrt_tol},
        "dt_ode": cfg.dt_ode,
        "repeats": cfg.repeats,
        "share_noise": cfg.share_noise,
        "with_particles": cfg.with_particles,
        "write_ensemble": cfg.write_ensemble,
        "fit_t_min": cfg.fit_t_min,
        "bands": cfg.bands,
    }
    if cfg.j_values:
        out["sweep"] = {"j_values": list(cfg.j_values)}
    if cfg.t_checkpoints:
        out.setdefault("sweep", {})["t_checkpoints"] = list(cfg.t_checkpoints)
    return out


# ------------------------------------------------------------ execution


def _map_cells(fn, specs, threads):
    """Evaluate fn over cell specs, possibly concurrently; results come
    back in spec order regardless of completion order."""
    if threads <= 1 or len(specs) <= 1:
        return [fn(spec) for spec in specs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, specs))


def _flow(cfg):
    return MomentFlow(problem=cfg.problem, m0=cfg.rho0.mean,
                      c0=cfg.rho0.cov, dt_ode=cfg.dt_ode)


def _moment_errors(ens, problem, target):
    stats = empirical_stats(ens, problem)
    mean_err = float(np.linalg.norm(stats.mean_u - target.mean))
    cov_err = float(np.linalg.norm(stats.cov_uu - target.cov, ord="fro"))
    return stats, mean_err, cov_err


def _check_band(flags, bands, name, value, lo_hi=None):
    """Grade value against a pre-registered band; bands absent from the
    config simply do not produce a flag."""
    if name not in bands:
        return
    band = bands[name]
    if lo_hi == "max":
        flags[name] = bool(value <= band)
    elif lo_hi == "min":
        flags[name] = bool(value >= band)
    else:
        lo, hi = band
        flags[name] = bool(lo <= value <= hi)


def run_sample(cfg, out_dir=None, threads=1):
    """Draw an initial ensemble, evolve it, and compare its moments with
    the analytic posterior (linear case).  A configured perturbation
    switches the evolution to the gradient-based step."""
    t0 = time.perf_counter()
    mode = "eks_gradient" if cfg.problem.nonlinear is not None else "eks"
    init_seed = derive_seed(cfg.seed, "init")
    run_seed = derive_seed(cfg.seed, "run")
    initial = sample_gaussian(cfg.rho0, cfg.j_particles, init_seed)
    flow = _flow(cfg) if cfg.problem.nonlinear is None else None
    res = run(initial, cfg.problem, cfg.sde(run_seed), mode, flow=flow,
              record_diagnostics=True)

    cells = []
    t_final = res.final.time
    summary = {"mode": mode, "t_final": t_final,
               "j_particles": cfg.j_particles}
    flags = {}
    if cfg.problem.nonlinear is None:
        target = posterior_moments(cfg.problem)
        _, mean_err, cov_err = _moment_errors(res.final, cfg.problem, target)
        wall = (time.perf_counter() - t0) * 1e3
        cells.append(StudyCell("sample", cfg.j_particles, t_final, 0,
                               cfg.seed, "mean_error_vs_posterior",
                               mean_err, wall))
        cells.append(StudyCell("sample", cfg.j_particles, t_final, 0,
                               cfg.seed, "cov_error_vs_posterior",
                               cov_err, wall))
        summary["posterior_mean"] = target.mean.tolist()
        summary["posterior_cov"] = target.cov.tolist()
        _check_band(flags, cfg.bands, "mean_error", mean_err, "max")
        _check_band(flags, cfg.bands, "cov_error", cov_err, "max")

    if out_dir is not None and cfg.write_ensemble:
        save_csv(res.final, Path(out_dir) / "ensemble.csv")
        _write_diagnostics(res.diagnostics, Path(out_dir) / "diagnostics.csv")

    report = StudyReport(kind="sample", base_seed=cfg.seed,
                         config_echo=_config_echo(cfg), cells=cells,
                         flags=flags, summary=summary,
                         wall_ms_total=(time.perf_counter() - t0) * 1e3)
    return report


def run_study_j(cfg, out_dir=None, threads=1):
    """Ensemble-size sweep: distance between the evolved ensemble and the
    mean-field Gaussian at T, averaged over repeats, slope-fitted in J."""
    t0 = time.perf_counter()
    flow = _flow(cfg)
    t_final = cfg.h * cfg.n_steps
    target = rho_at(flow, t_final)

    specs = [(j, rep) for j in cfg.j_values for rep in range(cfg.repeats)]

    def one(spec):
        j, rep = spec
        cell_seed = derive_seed(cfg.seed, "study-j", j, rep)
        c0 = time.perf_counter()
        initial = sample_gaussian(cfg.rho0, j, derive_seed(cell_seed, "init"))
        res = run(initial, cfg.problem,
                  cfg.sde(derive_seed(cell_seed, "run"), j_particles=j),
                  "eks")
        value = w2_ensemble_vs_gaussian(
            res.final, target, j, derive_seed(cell_seed, "reference"))
        wall = (time.perf_counter() - c0) * 1e3
        return StudyCell("study-j", j, t_final, rep, cell_seed,
                         "w2_vs_mean_field", value, wall)

    cells = _map_cells(one, specs, threads)

    means = {}
    for j in cfg.j_values:
        vals = [c.value for c in cells if c.j == j]
        means[j] = float(np.mean(vals))
        cells.append(StudyCell("study-j", j, t_final, None, None,
                               "w2_mean_over_repeats", means[j]))
    fits = {}
    flags = {}
    if len(cfg.j_values) >= 3:
        fits["w2_vs_j"] = fit_slope([(j, means[j]) for j in cfg.j_values])
        _check_band(flags, cfg.bands, "slope_j", fits["w2_vs_j"].slope)

    report = StudyReport(kind="study-j", base_seed=cfg.seed,
                         config_echo=_config_echo(cfg), cells=cells,
                         fits=fits, flags=flags,
                         summary={"t_final": t_final,
                                  "mean_w2": {str(j): means[j]
                                              for j in cfg.j_values}},
                         wall_ms_total=(time.perf_counter() - t0) * 1e3)
    return report


def run_study_time(cfg, out_dir=None, threads=1):
    """Exponential-decay study: the deterministic W2(rho(t), posterior)
    curve, log-linear fit over t >= fit_t_min, and (optionally) the
    particle system's Gaussian-moment distance at the same checkpoints."""
    t0 = time.perf_counter()
    flow = _flow(cfg)
    curve = w2_decay_curve(flow, cfg.t_checkpoints)
    cells = [StudyCell("study-time", None, t, None, None,
                       "w2_reference_vs_posterior", w2)
             for t, w2 in curve]

    fits = {}
    flags = {}
    fit_pts = [(t, w2) for t, w2 in curve if t >= cfg.fit_t_min and w2 > 0]
    if len(fit_pts) >= 3:
        # exponential decay shows up as a line in t vs ln(w2), so the fit
        # here is semilog, not the log-log of fit_slope
        ts = np.array([p[0] for p in fit_pts])
        logs = np.log([p[1] for p in fit_pts])
        slope, intercept = np.polyfit(ts, logs, 1)
        pred = slope * ts + intercept
        ss_res = float(np.sum((logs - pred) ** 2))
        ss_tot = float(np.sum((logs - np.mean(logs)) ** 2))
        r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
        fits["log_w2_vs_t"] = {
            "slope": float(slope), "intercept": float(intercept),
            "r_squared": float(r2),
            "points": [[float(a), float(b)] for a, b in zip(ts, logs)],
        }
        _check_band(flags, cfg.bands, "decay_slope", float(slope))
        _check_band(flags, cfg.bands, "decay_r_squared", float(r2), "min")

    if cfg.with_particles:
        cells.extend(_particle_checkpoints(cfg, threads))

    report = StudyReport(kind="study-time", base_seed=cfg.seed,
                         config_echo=_config_echo(cfg), cells=cells,
                         fits=fits, flags=flags,
                         summary={"curve": [[t, w2] for t, w2 in curve]},
                         wall_ms_total=(time.perf_counter() - t0) * 1e3)
    return report


def _particle_checkpoints(cfg, threads):
    """Evolve one EKS ensemble, reading off gaussian_w2(empirical moments,
    posterior) at every checkpoint (checkpoints must sit on the step grid)."""
    if cfg.j_particles < 2:
        raise ConfigError("with_particles requires sde.j_particles >= 2")
    steps = []
    for t in cfg.t_checkpoints:
        n = int(round(t / cfg.h))
        if abs(n * cfg.h - t) > 1e-9:
            raise ConfigError(
                f"checkpoint t={t} is not a multiple of h={cfg.h}")
        steps.append(n)
    target = posterior_moments(cfg.problem)
    cell_seed = derive_seed(cfg.seed, "time-particles")
    ens = sample_gaussian(cfg.rho0, cfg.j_particles,
                          derive_seed(cell_seed, "init"))
    run_seed = derive_seed(cell_seed, "run")
    cells = []
    done = 0
    for t, n in zip(cfg.t_checkpoints, steps):
        c0 = time.perf_counter()
        if n > done:
            res = run(ens, cfg.problem,
                      cfg.sde(run_seed, n_steps=n - done), "eks")
            ens = res.final
            done = n
        stats = empirical_stats(ens, cfg.problem)
        emp = GaussianMoments(mean=stats.mean_u, cov=stats.cov_uu)
        cells.append(StudyCell(
            "study-time", cfg.j_particles, t, 0, cell_seed,
            "w2_particles_vs_posterior", gaussian_w2(emp, target),
            (time.perf_counter() - c0) * 1e3))
    return cells


def run_study_coupling(cfg, out_dir=None, threads=1):
    """Coupling sweep: mean squared particle-vs-mean-field distance at T
    under shared Brownian increments, slope-fitted in J.  share_noise
    false runs the negative control (independent increments)."""
    t0 = time.perf_counter()
    flow = _flow(cfg)
    t_final = cfg.h * cfg.n_steps

    specs = [(j, rep) for j in cfg.j_values for rep in range(cfg.repeats)]

    def one(spec):
        j, rep = spec
        cell_seed = derive_seed(cfg.seed, "study-coupling", j, rep)
        c0 = time.perf_counter()
        initial = sample_gaussian(cfg.rho0, j, derive_seed(cell_seed, "init"))
        res = run(initial, cfg.problem,
                  cfg.sde(derive_seed(cell_seed, "run"), j_particles=j),
                  "coupled", flow=flow, share_noise=cfg.share_noise)
        value = float(res.coupling_error[-1])
        wall = (time.perf_counter() - c0) * 1e3
        return StudyCell("study-coupling", j, t_final, rep, cell_seed,
                         "sq_coupling_error", value, wall)

    cells = _map_cells(one, specs, threads)

    means = {}
    for j in cfg.j_values:
        vals = [c.value for c in cells if c.j == j]
        means[j] = float(np.mean(vals))
        cells.append(StudyCell("study-coupling", j, t_final, None, None,
                               "sq_coupling_error_mean", means[j]))
    fits = {}
    flags = {}
    if len(cfg.j_values) >= 3:
        fits["coupling_vs_j"] = fit_slope(
            [(j, means[j]) for j in cfg.j_values])
        _check_band(flags, cfg.bands, "slope_coupling",
                    fits["coupling_vs_j"].slope)

    report = StudyReport(kind="study-coupling", base_seed=cfg.seed,
                         config_echo=_config_echo(cfg), cells=cells,
                         fits=fits, flags=flags,
                         summary={"t_final": t_final,
                                  "share_noise": cfg.share_noise,
                                  "mean_sq_error": {str(j): means[j]
                                                    for j in cfg.j_values}},
                         wall_ms_total=(time.perf_counter() - t0) * 1e3)
    return report


def run_demo_nonlinear(cfg, out_dir=None, threads=1):
    """Paired comparison on a perturbed forward map: the gradient-based
    step against a quadrature oracle of the true posterior, and the
    plain Kalman step on the same seeds to expose its bias."""
    t0 = time.perf_counter()
    if cfg.problem.dim_l > 2:
        raise TooLarge("the quadrature oracle supports L <= 2 only")
    target = quadrature_moments(cfg.problem)
    t_final = cfg.h * cfg.n_steps

    def one(rep):
        rep_seed = derive_seed(cfg.seed, "demo", rep)
        c0 = time.perf_counter()
        initial = sample_gaussian(cfg.rho0, cfg.j_particles,
                                  derive_seed(rep_seed, "init"))
        sde = cfg.sde(derive_seed(rep_seed, "run"))
        out = {}
        for label, mode in (("alg2", "eks_gradient"), ("alg1", "eks")):
            res = run(initial, cfg.problem, sde, mode)
            _, mean_err, cov_err = _moment_errors(
                res.final, cfg.problem, target)
            out[label] = (mean_err, cov_err, res.final)
        wall = (time.perf_counter() - c0) * 1e3
        return rep, rep_seed, out, wall

    results = _map_cells(one, list(range(cfg.repeats)), threads)

    cells = []
    alg1_errs, alg2_errs = [], []
    finals = None
    for rep, rep_seed, out, wall in results:
        for label, (mean_err, cov_err, final) in out.items():
            cells.append(StudyCell("demo-nonlinear", cfg.j_particles,
                                   t_final, rep, rep_seed,
                                   f"{label}_mean_error", mean_err, wall))
            cells.append(StudyCell("demo-nonlinear", cfg.j_particles,
                                   t_final, rep, rep_seed,
                                   f"{label}_cov_error", cov_err, wall))
        alg1_errs.append(out["alg1"][0])
        alg2_errs.append(out["alg2"][0])
        if rep == 0:
            finals = {label: out[label][2] for label in out}

    wins = int(sum(a1 > a2 for a1, a2 in zip(alg1_errs, alg2_errs)))
    mean_alg2 = float(np.mean(alg2_errs))
    max_alg2 = float(np.max(alg2_errs))
    flags = {}
    _check_band(flags, cfg.bands, "alg2_mean_error", max_alg2, "max")
    _check_band(flags, cfg.bands, "min_alg1_worse_count", wins, "min")

    summary = {
        "t_final": t_final,
        "quadrature_mean": target.mean.tolist(),
        "quadrature_cov": target.cov.tolist(),
        "alg1_mean_errors": [float(v) for v in alg1_errs],
        "alg2_mean_errors": [float(v) for v in alg2_errs],
        "alg2_mean_error_avg": mean_alg2,
        "alg1_worse_count": wins,
        "repeats": cfg.repeats,
    }
    if out_dir is not None and cfg.write_ensemble and finals is not None:
        for label, final in finals.items():
            save_csv(final, Path(out_dir) / f"ensemble_{label}.csv")

    report = StudyReport(kind="demo-nonlinear", base_seed=cfg.seed,
                         config_echo=_config_echo(cfg), cells=cells,
                         flags=flags, summary=summary,
                         wall_ms_total=(time.perf_counter() - t0) * 1e3)
    return report


# ----------------------------------------------------------- validation


def _validation_checks(seed):
    """Small fast re-statements of each module's core invariants; each
    returns None on success or a failure description."""
    from . import dynamics, ensemble, metrics, noise, reference, spd
    from .ensemble import Ensemble
    from .noise import NoiseSource

    rng = np.random.default_rng(derive_seed(seed, "validate"))
    problem = default_problem()
    rho0 = default_rho0()

    def check_spd_sqrt():
        q = rng.normal(size=(4, 4))
        m = q @ q.T + 0.1 * np.eye(4)
        root = spd.spd_sqrt(m)
        if not np.allclose(root @ root, m, atol=1e-10):
            return "spd_sqrt does not square back"

    def check_spd_rejects_indefinite():
        from .errors import NotPSD
        try:
            spd.spd_sqrt(np.diag([1.0, -1e-3]))
        except NotPSD:
            return None
        return "spd_sqrt accepted an indefinite matrix"

    def check_noise_addressing():
        src = NoiseSource(seed=derive_seed(seed, "noise"))
        block = src.normal_block(3, 6, 2)
        rows = src.normal_rows(3, np.arange(6), 2)
        if not np.array_equal(block, rows):
            return "bulk and per-particle noise addressing disagree"

    def check_stats_permutation():
        ens = Ensemble(particles=rng.normal(size=(6, 2)), time=0.0, step=0)
        perm = rng.permutation(6)
        permuted = Ensemble(particles=ens.particles[perm], time=0.0, step=0)
        a = ensemble.empirical_stats(ens, problem)
        b = ensemble.empirical_stats(permuted, problem)
        if not (np.array_equal(a.cov_uu, b.cov_uu)
                and np.array_equal(a.mean_u, b.mean_u)):
            return "empirical statistics depend on particle order"

    def check_degenerate_freeze():
        ens = Ensemble(particles=np.tile([[1.3, -0.4]], (4, 1)),
                       time=0.0, step=0)
        cfg = SdeConfig(h=0.1, n_steps=1, j_particles=4, seed=seed)
        out = dynamics.eks_step(ens, problem, cfg,
                                NoiseSource(seed=seed))
        if not np.array_equal(out.particles, ens.particles):
            return "degenerate ensemble moved"

    def check_linear_agreement():
        ens = Ensemble(particles=rng.normal(size=(8, 2)), time=0.0, step=0)
        cfg = SdeConfig(h=0.05, n_steps=1, j_particles=8, seed=seed)
        a = dynamics.eks_step(ens, problem, cfg, NoiseSource(seed=seed))
        b = dynamics.eks_gradient_step(ens, problem, cfg,
                                       NoiseSource(seed=seed))
        if not np.allclose(a.particles, b.particles, atol=1e-12):
            return "linear-case step agreement broken"

    def check_affine_span():
        wide = InverseProblem(a=np.eye(5), gamma=np.eye(5),
                              gamma0=np.eye(5), y=np.zeros(5),
                              u0=np.zeros(5))
        initial = Ensemble(particles=rng.normal(size=(3, 5)),
                           time=0.0, step=0)
        cfg = SdeConfig(h=0.05, n_steps=1, j_particles=3, seed=seed)
        src = NoiseSource(seed=seed)
        ens = initial
        for _ in range(20):
            ens = dynamics.eks_step(ens, wide, cfg, src)
        if ensemble.affine_span_distance(ens, initial) > 1e-8:
            return "iterates left the initial affine span"

    def check_rerun_determinism():
        cfg = SdeConfig(h=0.05, n_steps=10, j_particles=8, seed=seed)
        outs = []
        for _ in range(2):
            ens = sample_gaussian(rho0, 8, seed)
            src = NoiseSource(seed=seed)
            for _ in range(cfg.n_steps):
                ens = dynamics.eks_step(ens, problem, cfg, src)
            outs.append(ens.particles)
        if not np.array_equal(outs[0], outs[1]):
            return "reruns are not bit-identical"

    def check_particle_moments():
        cfg = SdeConfig(h=0.05, n_steps=80, j_particles=256,
                        seed=derive_seed(seed, "moments"))
        ens = sample_gaussian(rho0, 256, derive_seed(seed, "moments-init"))
        src = NoiseSource(seed=cfg.seed)
        for _ in range(cfg.n_steps):
            ens = dynamics.eks_step(ens, problem, cfg, src)
        stats = ensemble.empirical_stats(ens, problem)
        target = posterior_moments(problem)
        if (np.linalg.norm(stats.mean_u - target.mean) > 0.5
                or np.linalg.norm(stats.cov_uu - target.cov, ord="fro") > 0.6):
            return "evolved ensemble moments miss the posterior"

    def check_reference_closed_form():
        flow = MomentFlow(problem=problem, m0=rho0.mean, c0=rho0.cov)
        ode = reference.integrate_moments(flow, 1.0)
        gap = ode.cov - reference.covariance_closed_form(flow, 1.0)
        if np.max(np.abs(gap)) > 1e-6:
            return "covariance closed form disagrees with the ODE"

    def check_reference_equilibrium():
        flow = MomentFlow(problem=problem, m0=rho0.mean, c0=rho0.cov)
        rho = rho_at(flow, 30.0)
        target = posterior_moments(problem)
        if (np.linalg.norm(rho.mean - target.mean) > 1e-8
                or np.linalg.norm(rho.cov - target.cov) > 1e-8):
            return "reference flow misses the posterior equilibrium"

    def check_metric_oracles():
        import itertools
        from .metrics import empirical_w2_exact
        x = rng.normal(size=(5, 2))
        y = rng.normal(size=(5, 2))
        best = min(
            np.mean(np.sum((x - y[list(p)]) ** 2, axis=1))
            for p in itertools.permutations(range(5)))
        if abs(empirical_w2_exact(x, y) - np.sqrt(best)) > 1e-12:
            return "assignment W2 disagrees with brute force"
        a = GaussianMoments(mean=[0.0], cov=[[1.0]])
        b = GaussianMoments(mean=[0.0], cov=[[4.0]])
        if abs(metrics.gaussian_w2(a, b) - 1.0) > 1e-12:
            return "gaussian W2 misses the 1-D closed form"

    def check_posterior_quadrature():
        target = posterior_moments(problem)
        quad = quadrature_moments(problem)
        if np.linalg.norm(quad.mean - target.mean) > 1e-4:
            return "quadrature disagrees with the analytic posterior"

    def check_slope_fit():
        js = [10.0, 100.0, 1000.0]
        fit = fit_slope([(j, 7.0 * j ** -0.5) for j in js])
        if abs(fit.slope + 0.5) > 1e-12 or fit.r_squared < 1.0 - 1e-12:
            return "slope fit misses an exact power law"

    return [
        ("spd_sqrt_round_trip", check_spd_sqrt),
        ("spd_sqrt_rejects_indefinite", check_spd_rejects_indefinite),
        ("noise_addressing", check_noise_addressing),
        ("stats_permutation_invariance", check_stats_permutation),
        ("degenerate_freeze", check_degenerate_freeze),
        ("linear_step_agreement", check_linear_agreement),
        ("affine_span_invariance", check_affine_span),
        ("rerun_determinism", check_rerun_determinism),
        ("particle_posterior_moments", check_particle_moments),
        ("reference_closed_form", check_reference_closed_form),
        ("reference_equilibrium", check_reference_equilibrium),
        ("metric_oracles", check_metric_oracles),
        ("posterior_quadrature", check_posterior_quadrature),
        ("slope_fit_power_law", check_slope_fit),
    ]


def run_validate(cfg, out_dir=None, threads=1):
    """One-shot execution of every module's core invariants at small
    sizes; any failure flips the report's flag (CLI exit 1)."""
    t0 = time.perf_counter()
    cells = []
    failures = {}
    for name, check in _validation_checks(cfg.seed):
        c0 = time.perf_counter()
        try:
            detail = check()
        except Exception as err:          # a crash is a failure, not an abort
            detail = f"{type(err).__name__}: {err}"
        wall = (time.perf_counter() - c0) * 1e3
        cells.append(StudyCell("validate", None, None, None, cfg.seed, name,
                               1.0 if detail is None else 0.0, wall))
        if detail is not None:
            failures[name] = detail
    report = StudyReport(
        kind="validate", base_seed=cfg.seed, config_echo=_config_echo(cfg),
        cells=cells,
        flags={"all_checks_passed": not failures},
        summary={"failures": failures, "n_checks": len(cells)},
        wall_ms_total=(time.perf_counter() - t0) * 1e3)
    return report


_DRIVERS = {
    "sample": run_sample,
    "study-j": run_study_j,
    "study-time": run_study_time,
    "study-coupling": run_study_coupling,
    "demo-nonlinear": run_demo_nonlinear,
    "validate": run_validate,
}


def run_study(cfg, out_dir=None, threads=1):
    """Dispatch a parsed config to its driver and write the report files."""
    driver = _DRIVERS[cfg.kind]
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    report = driver(cfg, out_dir=out_dir, threads=threads)
    if out_dir is not None:
        write_report(report, out_dir)
    return report


# -------------------------------------------------------------- output


def _fit_as_json(fit):
    if isinstance(fit, dict):
        return fit
    return {"slope": fit.slope, "intercept": fit.intercept,
            "r_squared": fit.r_squared,
            "points": [[float(a), float(b)] for a, b in fit.points]}


def write_report(report, out_dir):
    """report.json plus the flat per-cell CSV."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stamp = datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
    doc = {
        # the single nondeterministic line: timestamp and wall time live
        # here and nowhere else in this file
        "generated": f"{stamp} wall_ms={report.wall_ms_total:.1f}",
        "package": f"eks-lab {__version__}",
        "study": report.kind,
        "base_seed": report.base_seed,
        "passed": report.passed,
        "flags": report.flags,
        "config": report.config_echo,
        "fits": {name: _fit_as_json(fit)
                 for name, fit in sorted(report.fits.items())},
        "summary": report.summary,
        "cells": [cell.as_json() for cell in report.cells],
    }
    (out / "report.json").write_text(json.dumps(doc, indent=2) + "\n")

    csv_name = report.kind.replace("-", "_") + ".csv"
    lines = ["study,J,t,repeat,seed,metric_name,value,wall_ms"]
    for cell in report.cells:
        lines.append(",".join(str(v) for v in cell.as_row()))
    (out / csv_name).write_text("\n".join(lines) + "\n")
    return out / "report.json"


def _write_diagnostics(diag, path):
    if diag is None:
        return
    cols = ["step", "time", "coupling_error", "condition", "trace_cov_uu",
            "fourth_moment"]
    lines = [",".join(cols)]
    n = len(diag["step"])
    for i in range(n):
        lines.append(",".join(repr(float(diag[c][i])) for c in cols))
    Path(path).write_text("\n".join(lines) + "\n")
