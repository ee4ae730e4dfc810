"""Experiment orchestration for every harness mode.

Each ``run_*`` function takes a validated config (see :mod:`.config`) and
returns a :class:`RunResult` holding artifact texts keyed by file name,
summary records and failures. Nothing here touches the file system, so the
same code backs the CLI and the tests, and artifacts can be compared byte
for byte.
"""

import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from ..core import RngSpec, max_norm
from ..exceptions import ConfigError, PopdynError
from ..finite_sim import SimConfig, interpolate, make_protocol, run_finite, tail_statistics, tail_window_stats
from ..game import solve_equilibrium
from ..meanfield import MeanFieldConfig, integrate_closed_loop
from ..passivity import (
    AntistorageSpec,
    StorageSpec,
    bound_inputs_from_finite,
    bound_inputs_from_meanfield,
    check_dissipation_bound,
)
from ..stationary import StationaryChain, closed_form_moments, monte_carlo_moments
from .config import build_game, sweep_points
from .svg import line_chart

__all__ = [
    "SCHEMA_VERSION",
    "SummaryRecord",
    "RunResult",
    "finite_sim_config",
    "run_finite_job",
    "sup_deviation",
    "aggregate",
    "run_mode",
    "run_equilibrium",
    "run_finite_mode",
    "run_meanfield",
    "run_stationary",
    "run_verify_bound",
    "run_sweep",
    "default_jobs",
]

SCHEMA_VERSION = 1


@dataclass
class SummaryRecord:
    """Per-run scalars; one record per (grid point, seed)."""

    mode: str
    label: str
    point: int
    protocol: str
    eta: float
    lam: float
    N: int
    d: float
    seed: int
    T: float
    tail_mean: float
    tail_sd: float
    sup_dev_meanfield: float = None
    n_events: int = None
    wall_time: float = None
    bound: dict = None
    schema_version: int = SCHEMA_VERSION

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class RunResult:
    artifacts: dict = field(default_factory=dict)
    records: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    rows: list = None
    reports: list = None

    def merge(self, other):
        self.artifacts.update(other.artifacts)
        self.records.extend(other.records)
        self.failures.extend(other.failures)
        return self


def default_jobs():
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:  # pragma: no cover - non-Linux
        return max(1, os.cpu_count() or 1)


def _json(obj):
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _jsonl(records):
    return "".join(r.to_json() + "\n" for r in records)


def _protocol(cfg, name=None, eta=None):
    params, _ = build_game(cfg)
    proto = cfg["protocol"]
    name = name or proto["name"]
    try:
        return make_protocol(
            name,
            params.n,
            eta=proto["eta"] if eta is None else eta,
            theta=proto.get("theta"),
            varrho=proto.get("varrho"),
            M_q=proto["M_q"],
            game=params,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _bound_digest(report):
    return {
        "holds": report.holds,
        "lhs": report.lhs,
        "rhs": report.rhs,
        "premise_storage_ok": report.premise_storage_ok,
        "premise_antistorage_ok": report.premise_antistorage_ok,
        "resolution_gap": report.resolution_gap,
    }


def _point_from_cfg(cfg):
    p, f = cfg["protocol"], cfg["finite"]
    return {"protocol": p["name"], "eta": p["eta"] if p["name"] == "kldrl" else None,
            "lam": p["lam"], "N": f["N"], "d": f["d"]}


def finite_sim_config(cfg, point, seed, record_dense=False):
    """``SimConfig`` for one (grid point, seed) pair."""
    params, q0 = build_game(cfg)
    f = cfg["finite"]
    protocol = _protocol(cfg, point["protocol"], point["eta"])
    return SimConfig(
        N=point["N"],
        protocol=protocol,
        lam=point["lam"],
        d=point["d"],
        T=f["T"],
        h=f["h"],
        game=params,
        q0=q0,
        graph_prob=f["graph_prob"],
        rng=RngSpec(seed=seed, stream=cfg["stream"]),
        observation=f["observation"],
        observer_fraction=f["observer_fraction"],
        include_self=f["include_self"],
        sample_every=f["sample_every"],
        record_dense=record_dense,
    )


def sup_deviation(traj, mf_traj, horizon):
    """``sup ||Xhat^N(t) - x(t)||_inf`` over mean-field grid times ``t <= horizon``.

    The finite path is the piecewise-linear interpolation through the
    arrivals, so times beyond the last arrival are excluded.
    """
    last = traj.knots()[0][-1]
    mask = mf_traj.t <= min(horizon, last) + 1e-12
    t = mf_traj.t[mask]
    X_hat = interpolate(traj, np.minimum(t, last))
    return float(np.max(np.abs(X_hat - mf_traj.x[mask])))


def _meanfield_from_finite(cfg, sim_cfg, x0, horizon):
    return MeanFieldConfig(
        protocol=sim_cfg.protocol,
        lam=sim_cfg.lam,
        q0=sim_cfg.q0,
        x0=tuple(np.asarray(x0, dtype=float).tolist()),
        game=sim_cfg.game,
        d=float(sim_cfg.d),
        T=float(horizon),
        h=sim_cfg.h,
    )


def run_finite_job(cfg, point, seed, point_index=0, mode="finite"):
    """Run one finite replica and build its record and artifacts."""
    label = cfg["label"]
    f = cfg["finite"]
    start = time.perf_counter()
    sim_cfg = finite_sim_config(cfg, point, seed)
    traj = run_finite(sim_cfg)
    tail_mean, tail_sd = tail_statistics(traj)
    sup_dev = None
    if f["compare_meanfield"]:
        horizon = f.get("compare_horizon", f["T"])
        mf = integrate_closed_loop(_meanfield_from_finite(cfg, sim_cfg, traj.x0, horizon))
        sup_dev = sup_deviation(traj, mf, horizon)
    wall = time.perf_counter() - start
    stem = f"{label}_p{point_index:03d}_s{seed}" if mode == "sweep" else f"{label}_s{seed}"
    artifacts = {}
    if cfg["write_trajectories"]:
        artifacts[f"{stem}.csv"] = traj.to_csv()
    if cfg["svg"]:
        name = f"{point['protocol']} lam={point['lam']:g} N={point['N']} d={point['d']} seed={seed}"
        artifacts[f"{stem}.svg"] = line_chart(
            [(name, traj.sample_t, traj.qmax)], title="maximum remaining jobs", ylabel="||q||_inf"
        )
    record = SummaryRecord(
        mode=mode,
        label=label,
        point=point_index,
        protocol=point["protocol"],
        eta=point["eta"],
        lam=point["lam"],
        N=point["N"],
        d=point["d"],
        seed=seed,
        T=f["T"],
        tail_mean=tail_mean,
        tail_sd=tail_sd,
        sup_dev_meanfield=sup_dev,
        n_events=int(traj.n_events),
        wall_time=wall if cfg["record_wall_time"] else None,
    )
    return record, artifacts


def _job(args):
    cfg, point, seed, index, mode = args
    try:
        record, artifacts = run_finite_job(cfg, point, seed, index, mode)
        return index, seed, record, artifacts, None
    except (PopdynError, ArithmeticError, ValueError) as exc:
        return index, seed, None, {}, f"{type(exc).__name__}: {exc}"


def _run_jobs(cfg, points, mode, jobs):
    # validate every grid point before spending any compute
    for point in points:
        finite_sim_config(cfg, point, cfg["seeds"][0])
    tasks = [(cfg, p, s, i, mode) for i, p in enumerate(points) for s in cfg["seeds"]]
    if jobs is None:
        jobs = default_jobs()
    if jobs <= 1 or len(tasks) == 1:
        outputs = [_job(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outputs = list(pool.map(_job, tasks, chunksize=1))
    outputs.sort(key=lambda o: (o[0], o[1]))
    result = RunResult()
    for index, seed, record, artifacts, error in outputs:
        if error is None:
            result.records.append(record)
            result.artifacts.update(artifacts)
        else:
            result.failures.append({"point": index, "seed": seed, "error": error})
    return result


def _quartiles(values):
    values = np.asarray([v for v in values if v is not None], dtype=float)
    if values.size == 0:
        return None, None, None
    q1, med, q3 = np.percentile(values, [25, 50, 75])
    return float(med), float(q1), float(q3)


def aggregate(records, points, n_seeds):
    """Median and interquartile range per grid point; independent of record order."""
    rows = []
    for index, point in enumerate(points):
        recs = [r for r in records if r.point == index]
        row = dict(point=index, **point, n_ok=len(recs), n_failed=n_seeds - len(recs))
        for key in ("tail_mean", "tail_sd", "sup_dev_meanfield", "n_events"):
            med, q1, q3 = _quartiles([getattr(r, key) for r in recs])
            row[f"{key}_median"], row[f"{key}_q1"], row[f"{key}_q3"] = med, q1, q3
        rows.append(row)
    return rows


def _rows_to_csv(rows):
    cols = list(rows[0].keys())
    lines = [",".join(cols)]
    for row in rows:
        cells = []
        for c in cols:
            v = row[c]
            if v is None:
                cells.append("")
            elif isinstance(v, float):
                cells.append(repr(float(v)))
            else:
                cells.append(str(v))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def smith_calibration(rows, cfg):
    """Best Smith rate per ``(N, d)``: the grid value with the smallest median tail mean."""
    sw = cfg["sweep"]
    if not sw["smith_calibration"]:
        return {"enabled": False, "smith_lam": sw["smith_default_lam"], "groups": []}
    groups = {}
    for row in rows:
        if row["protocol"] == "smith" and row["tail_mean_median"] is not None:
            groups.setdefault((row["N"], row["d"]), []).append(row)
    out = []
    for (N, d), grp in sorted(groups.items()):
        best = min(grp, key=lambda r: (r["tail_mean_median"], r["lam"]))
        out.append({
            "N": N,
            "d": d,
            "best_lam": best["lam"],
            "best_tail_mean_median": best["tail_mean_median"],
            "tail_mean_median_by_lam": {f"{r['lam']:g}": r["tail_mean_median"] for r in grp},
        })
    return {"enabled": True, "smith_lam": out[0]["best_lam"] if len(out) == 1 else None, "groups": out}


def run_sweep(cfg, jobs=None):
    points = sweep_points(cfg)
    result = _run_jobs(cfg, points, "sweep", jobs)
    rows = aggregate(result.records, points, len(cfg["seeds"]))
    label = cfg["label"]
    result.artifacts[f"{label}_summary.jsonl"] = _jsonl(result.records)
    result.artifacts[f"{label}_sweep.csv"] = _rows_to_csv(rows)
    meta = {
        "schema_version": SCHEMA_VERSION,
        "n_points": len(points),
        "seeds": cfg["seeds"],
        "smith_calibration": smith_calibration(rows, cfg),
        "failures": result.failures,
    }
    result.artifacts[f"{label}_sweep_meta.json"] = _json(meta)
    result.rows = rows
    return result


def run_finite_mode(cfg, jobs=None):
    point = _point_from_cfg(cfg)
    result = _run_jobs(cfg, [point], "finite", jobs)
    result.artifacts[f"{cfg['label']}_summary.jsonl"] = _jsonl(result.records)
    return result


def run_equilibrium(cfg, jobs=None):
    params, _ = build_game(cfg)
    eq = solve_equilibrium(params)
    R, alpha, beta, w = params.as_arrays()
    payload = {
        "schema_version": SCHEMA_VERSION,
        "R": R.tolist(),
        "alpha": alpha.tolist(),
        "beta": beta.tolist(),
        "w": w.tolist(),
        "q_bar": eq.q_bar,
        "q_star": np.asarray(eq.q_star).tolist(),
        "x_star": np.asarray(eq.x_star).tolist(),
        "residual": eq.residual,
        "q_star_max_norm": max_norm(eq.q_star),
    }
    return RunResult(artifacts={f"{cfg['label']}_equilibrium.json": _json(payload)})


def _meanfield_config(cfg):
    params, q0 = build_game(cfg)
    mf = cfg["meanfield"]
    x0 = mf.get("x0") or [1.0 / params.n] * params.n
    return MeanFieldConfig(
        protocol=_protocol(cfg),
        lam=cfg["protocol"]["lam"],
        q0=q0,
        x0=tuple(x0),
        game=params,
        d=float(mf["d"]),
        T=float(mf["T"]),
        h=float(mf["h"]),
        record_every=mf["record_every"],
    )


def run_meanfield(cfg, jobs=None):
    start = time.perf_counter()
    mcfg = _meanfield_config(cfg)
    traj = integrate_closed_loop(mcfg)
    tail_mean, tail_sd = tail_window_stats(traj.t, traj.qmax, mcfg.T)
    point = _point_from_cfg(cfg)
    record = SummaryRecord(
        mode="meanfield", label=cfg["label"], point=0, protocol=point["protocol"], eta=point["eta"],
        lam=mcfg.lam, N=None, d=mcfg.d, seed=None, T=mcfg.T, tail_mean=tail_mean, tail_sd=tail_sd,
        wall_time=time.perf_counter() - start if cfg["record_wall_time"] else None,
    )
    result = RunResult(records=[record])
    label = cfg["label"]
    if cfg["write_trajectories"]:
        result.artifacts[f"{label}_meanfield.csv"] = traj.to_csv()
    if cfg["svg"]:
        result.artifacts[f"{label}_meanfield.svg"] = line_chart(
            [("mean field", traj.t, traj.qmax)], title="maximum remaining jobs", ylabel="||q||_inf"
        )
    result.artifacts[f"{label}_summary.jsonl"] = _jsonl(result.records)
    return result


def _xstar(cfg):
    xs = cfg["stationary"].get("xstar")
    if xs is not None:
        return np.asarray(xs, dtype=float)
    params, _ = build_game(cfg)
    return np.asarray(solve_equilibrium(params).x_star)


def run_stationary(cfg, jobs=None):
    st = cfg["stationary"]
    xstar = _xstar(cfg)
    label = cfg["label"]
    result = RunResult()
    reports, mc_lines = [], []
    for N in st["N_values"]:
        chain = StationaryChain(N=N, method=st["method"]).fit(xstar)
        reports.append(chain.report())
        if st["write_mu"]:
            result.artifacts[f"{label}_mu_N{N}.csv"] = chain.mu_to_csv()
        if st["monte_carlo_samples"] > 0:
            exact_mean, exact_var = closed_form_moments(xstar, N)
            for seed in cfg["seeds"]:
                mean, var, se = monte_carlo_moments(
                    xstar, N, st["monte_carlo_burn"], st["monte_carlo_samples"],
                    rng=RngSpec(seed=seed, stream=cfg["stream"]),
                )
                z_mean = (mean - exact_mean) / np.where(se["mean"] > 0, se["mean"], np.inf)
                z_var = (var - exact_var) / se["sum_var"] if se["sum_var"] > 0 else 0.0
                mc_lines.append(json.dumps({
                    "schema_version": SCHEMA_VERSION, "N": N, "seed": seed,
                    "mean": mean.tolist(), "mean_se": se["mean"].tolist(),
                    "sum_var": var, "sum_var_se": se["sum_var"],
                    "max_abs_z_mean": float(np.max(np.abs(z_mean))), "z_sum_var": float(z_var),
                }, sort_keys=True))
    result.artifacts[f"{label}_stationary.jsonl"] = "".join(r.to_json() + "\n" for r in reports)
    if mc_lines:
        result.artifacts[f"{label}_stationary_mc.jsonl"] = "".join(s + "\n" for s in mc_lines)
    result.reports = reports
    return result


def _specs(cfg, protocol):
    params, _ = build_game(cfg)
    storage = StorageSpec(eta=protocol.eta, theta=protocol.theta,
                          interior_clamp=cfg["bound"]["interior_clamp"])
    return storage, AntistorageSpec(game=params)


def run_verify_bound(cfg, jobs=None):
    b = cfg["bound"]
    label = cfg["label"]
    result = RunResult()
    reports = []
    if b["source"] == "meanfield":
        mcfg = _meanfield_config(cfg)
        traj = integrate_closed_loop(mcfg)
        storage, anti = _specs(cfg, mcfg.protocol)
        report = check_dissipation_bound(
            bound_inputs_from_meanfield(traj), mcfg.lam, storage, anti, b["require_resolution"]
        )
        reports.append(dict(asdict(report), seed=None, source="meanfield"))
        if cfg["write_trajectories"]:
            result.artifacts[f"{label}_meanfield.csv"] = traj.to_csv()
    else:
        point = _point_from_cfg(cfg)
        for seed in cfg["seeds"]:
            start = time.perf_counter()
            sim_cfg = finite_sim_config(cfg, point, seed, record_dense=True)
            traj = run_finite(sim_cfg)
            storage, anti = _specs(cfg, sim_cfg.protocol)
            report = check_dissipation_bound(
                bound_inputs_from_finite(traj), sim_cfg.lam, storage, anti, b["require_resolution"]
            )
            reports.append(dict(asdict(report), seed=seed, source="finite"))
            tail_mean, tail_sd = tail_statistics(traj)
            result.records.append(SummaryRecord(
                mode="verify-bound", label=label, point=0, protocol=point["protocol"], eta=point["eta"],
                lam=point["lam"], N=point["N"], d=point["d"], seed=seed, T=cfg["finite"]["T"],
                tail_mean=tail_mean, tail_sd=tail_sd, n_events=int(traj.n_events),
                wall_time=time.perf_counter() - start if cfg["record_wall_time"] else None,
                bound=_bound_digest(report),
            ))
            if cfg["write_trajectories"]:
                result.artifacts[f"{label}_s{seed}.csv"] = traj.to_csv()
        result.artifacts[f"{label}_summary.jsonl"] = _jsonl(result.records)
    result.artifacts[f"{label}_bound.jsonl"] = "".join(json.dumps(r, sort_keys=True) + "\n" for r in reports)
    result.reports = reports
    return result


_MODES = {
    "equilibrium": run_equilibrium,
    "finite": run_finite_mode,
    "meanfield": run_meanfield,
    "stationary": run_stationary,
    "verify-bound": run_verify_bound,
    "sweep": run_sweep,
}


def run_mode(cfg, jobs=None):
    """Dispatch on ``cfg["mode"]``."""
    return _MODES[cfg["mode"]](cfg, jobs=jobs)

