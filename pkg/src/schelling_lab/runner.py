"""Experiment dispatch: matrix cells, artifacts, run summary and exit status."""

from __future__ import annotations

import json
import math
import os
import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig
from .continuum import (
    classify_limit,
    domination_csv,
    evolve,
    field_from_initial,
    field_from_values,
    sawtooth_initial,
    trajectory_csv,
)
from .gaussian_field import hat_field, sample_initial_field
from .lattice import (
    Geometry,
    build_neighborhood_mask,
    disagreement_sum,
    extract_clusters,
    init_configuration,
    is_stable_configuration,
    run_dynamics,
)
from .occupation import function_to_text, sup_over_family, sup_table_csv
from .rng import RNG_ALGORITHM
from .scaling import (
    FinalConfigStats,
    couple_and_compare,
    final_config_analysis,
    final_configs_csv,
    run_length_table,
    survival_decay_fit,
)
from .shapes import erode_to_stable, min_stable_diameter
from .stencil import GridSpec

SCHEMA_VERSION = 1
OUTPUT_ROOT_ENV = "SCHELLING_LAB_OUTPUT"
SUMMARY_NAME = "run-summary.json"
HEADER_PREFIX = "# schelling-lab"

EXIT_OK, EXIT_FAILURE, EXIT_USAGE, EXIT_INCONCLUSIVE = 0, 1, 2, 3


@dataclass
class Outcome:
    files: dict = field(default_factory=dict)  # name -> text payload
    results: dict = field(default_factory=dict)
    inconclusive: list = field(default_factory=list)


def header(config_hash: str) -> str:
    return f"{HEADER_PREFIX} config_hash={config_hash} schema={SCHEMA_VERSION}\n"


def read_artifact(path) -> tuple[str, str]:
    """(config hash, payload) of a text artifact written by ``dispatch``."""
    text = Path(path).read_text()
    first, _, body = text.partition("\n")
    if not first.startswith(HEADER_PREFIX) or "config_hash=" not in first:
        raise ValueError(f"{path}: missing artifact header")
    return first.split("config_hash=")[1].split()[0], body


def verify_artifacts(out_dir) -> list[str]:
    """Artifacts whose header hash differs from the run summary's."""
    out_dir = Path(out_dir)
    expected = json.loads((out_dir / SUMMARY_NAME).read_text())["config_hash"]
    bad = []
    for p in sorted(out_dir.iterdir()):
        if p.name == SUMMARY_NAME:
            continue
        try:
            got, _ = read_artifact(p)
        except ValueError:
            got = None
        if got != expected:
            bad.append(p.name)
    return bad


def default_out_dir(cfg: RunConfig) -> Path:
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    return root / f"{cfg.experiment}-{cfg.hash()[:10]}"


def _map(fn, items, cfg: RunConfig) -> list:
    items = list(items)
    if cfg.sequential or len(items) < 2 or cfg.workers == 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=cfg.workers or os.cpu_count()) as ex:
        return list(ex.map(fn, items))


def _csv(header_row: str, rows) -> str:
    return header_row + "\n" + "".join(",".join(_cell(v) for v in r) + "\n" for r in rows)


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


# ---- simulate ----------------------------------------------------------------

def _simulate_cell(cfg: RunConfig, cell):
    w, seed = cell
    R = cfg.R_for(w)
    geometry = Geometry.torus(cfg.N, R, w)
    mask = build_neighborhood_mask(cfg.N, w, cfg.p, cfg.closure)
    grid = init_configuration(geometry, cfg.M, mask, seed)
    d0 = disagreement_sum(grid)
    log = run_dynamics(grid, cfg.horizon, seed, max_events=cfg.max_events_per_node * geometry.n_nodes,
                       record_events=False)
    cl = extract_clusters(grid)
    row = (w, seed, R, geometry.n_nodes, log.outcome, log.stabilized_at, log.n_events, d0,
           disagreement_sum(grid), cl.n_clusters, int(cl.sizes.min()), is_stable_configuration(grid))
    clusters = [(w, seed, j, int(m), int(s), int(d)) for j, (m, s, d) in
                enumerate(zip(cl.opinions, cl.sizes, cl.diameters))]
    return row, clusters


def run_simulate(cfg: RunConfig) -> Outcome:
    cells = [(w, s) for w in cfg.w for s in cfg.seed]
    out = _map(partial(_simulate_cell, cfg), cells, cfg)
    rows = [r for r, _ in out]
    o = Outcome()
    o.files["summary.csv"] = _csv("w,seed,R,nodes,outcome,stabilized_at,events,disagreement_initial,"
                                  "disagreement_final,clusters,min_cluster_size,stable", rows)
    o.files["clusters.csv"] = _csv("w,seed,cluster,opinion,size,diameter", [c for _, cs in out for c in cs])
    o.results["stabilized"] = sum(r[4] == "stabilized" for r in rows)
    o.results["runs"] = len(rows)
    o.inconclusive = [f"w={r[0]} seed={r[1]}: horizon exceeded" for r in rows if r[4] != "stabilized"]
    return o


# ---- solve -------------------------------------------------------------------

def _solve_cell(cfg: RunConfig, seed: int):
    spec = GridSpec(cfg.R, cfg.cells_per_unit, cfg.N)
    if cfg.init == "sawtooth":
        f = field_from_values(spec, sawtooth_initial(spec), "sign", 2, cfg.p, cfg.dt, cfg.quadrature)
    else:
        f = field_from_initial(sample_initial_field(spec, cfg.M, seed, cfg.p), cfg.form, cfg.dt, cfg.quadrature)
    times = np.linspace(0.0, cfg.T, cfg.snapshots)
    track = cfg.N == 1 and cfg.M == 2 and cfg.form != "pair_swap"
    traj = evolve(f, cfg.T, cfg.scheme, snapshot_times=times, track_frozen=track,
                  raise_on_divergence=True)
    sups = [(seed, t, float(np.abs(Y).max())) for t, Y in zip(traj.times, traj.snapshots)]
    files = {
        f"trajectory_s{seed}.csv": trajectory_csv(traj),
        f"tie_measure_s{seed}.csv": _csv("t,tie_measure", zip(traj.step_times, traj.tie_measure)),
    }
    info = {"seed": seed, "dt": f.dt, "h": spec.h, "scheme": traj.scheme, "quadrature": f.quadrature,
            "sup_final": sups[-1][2], "frozen_violations": traj.frozen_violations if track else None}
    if track:
        lim = classify_limit(traj)
        files[f"domination_s{seed}.csv"] = domination_csv(traj, lim)
        files[f"intervals_s{seed}.csv"] = _csv(
            "interval,start_cell,length,opinion",
            [(j, int(s), float(L), int(m)) for j, (s, L, m) in enumerate(zip(lim.starts, lim.lengths,
                                                                              lim.opinions))])
        info["limit_status"] = lim.status
        info["shortest_interval"] = float(lim.lengths.min())
    else:
        files[f"domination_s{seed}.csv"] = domination_csv(traj)
    return sups, files, info


def run_solve(cfg: RunConfig) -> Outcome:
    seeds = cfg.seed[:1] if cfg.init == "sawtooth" else cfg.seed
    out = _map(partial(_solve_cell, cfg), seeds, cfg)
    o = Outcome()
    o.files["regression.csv"] = _csv("seed,t,sup_abs_Y", [r for sups, _, _ in out for r in sups])
    for _, files, _ in out:
        o.files.update(files)
    o.results["runs"] = [info for _, _, info in out]
    return o


# ---- couple ------------------------------------------------------------------

def _couple_cell(cfg: RunConfig, cell):
    w, seed = cell
    row = couple_and_compare(seed, w, cfg.T, cfg.R_for(w), cfg.N, cfg.M, cfg.snapshots, cfg.dt)
    return row


def run_couple(cfg: RunConfig) -> Outcome:
    cells = [(w, s) for w in cfg.w for s in cfg.seed]
    rows = _map(partial(_couple_cell, cfg), cells, cfg)
    o = Outcome()
    o.files["errors.csv"] = _csv("w,seed,T,t,E,bound", [(r.w, r.seed, r.T, t, e, b) for r in rows
                                                        for t, e, b in zip(r.times, r.errors, r.bounds)])
    med = [(w, float(np.median([r.E_T for r in rows if r.w == w])), len(cfg.seed)) for w in cfg.w]
    o.files["medians.csv"] = _csv("w,median_E_T,seeds", med)
    o.results["median_E_T"] = {str(w): m for w, m, _ in med}
    o.results["median_non_increasing"] = all(b[1] <= a[1] for a, b in zip(med, med[1:]))
    o.results["E0_all_zero"] = all(r.E0 == 0.0 for r in rows)
    o.results["within_bound"] = sum(r.within_bound for r in rows)
    o.results["runs"] = len(rows)
    return o


# ---- final configurations ----------------------------------------------------

def _final_cell(cfg: RunConfig, seed: int) -> FinalConfigStats:
    return final_config_analysis(cfg.w, [seed], cfg.R, cfg.coupled, cfg.max_events_per_node)


def run_final_configs(cfg: RunConfig) -> Outcome:
    parts = _map(partial(_final_cell, cfg), cfg.seed, cfg)
    stats = FinalConfigStats(cfg.R, [])
    for s in parts:
        stats.configs.extend(s.configs)
        stats.excluded.extend(s.excluded)
        stats.hausdorff.extend(s.hausdorff)
    stats.configs.sort(key=lambda c: (c.w, c.seed))
    o = Outcome()
    o.files["final_configs.csv"] = final_configs_csv(stats)
    o.files["runs.txt"] = "".join(f"w={c.w} seed={c.seed}: {run_length_table(c)}\n" for c in stats.configs)
    o.files["origin.csv"] = _csv("w,seed,origin_length", [(c.w, c.seed, c.origin_length) for c in stats.configs])
    if cfg.coupled:
        o.files["hausdorff.csv"] = _csv("seed,w_a,w_b,distance", sorted(stats.hausdorff))
    short = [(c.w, c.seed) for c in stats.configs if (c.run_lengths < c.w + 1).any() or not c.stable]
    o.results["runs"] = len(stats.configs)
    o.results["violations"] = [list(x) for x in short]
    o.results["min_run_length"] = {str(w): int(min(c.run_lengths.min() for c in stats.configs if c.w == w))
                                   for w in cfg.w if any(c.w == w for c in stats.configs)}
    try:
        fit = survival_decay_fit(stats.origin_lengths())
        o.results["origin_decay"] = {"slope": fit.slope, "slope_upper95": fit.slope_upper95, "decays": fit.decays}
    except ValueError:
        o.results["origin_decay"] = None
    o.inconclusive = [f"w={w} seed={s}: did not stabilize" for w, s in stats.excluded]
    return o


# ---- stable shapes -----------------------------------------------------------

def _shape_cell(cfg: RunConfig, w: int):
    N = cfg.N
    wanted = cfg.radius or 2 ** (2 * N) * w ** (N + 1)
    r = min(wanted, cfg.r_cap)
    shape, trace = erode_to_stable(r, w, N, cfg.p, cfg.rule, cfg.seed[0], cfg.closure)
    best = min_stable_diameter(w, N, cfg.p, cfg.budget, cfg.closure)
    erosion_row = (w, r, wanted, r < wanted, len(trace.flipped), trace.edge_counts[0], trace.edge_counts[-1],
                   bool(np.all(np.diff(trace.edge_counts) < 0)), len(shape.nodes),
                   shape.diameter if len(shape.nodes) else None, shape.certificate)
    min_row = (w, N, best.diameter, best.exact, best.budget_exceeded, best.explored)
    files = {f"terminal_w{w}.csv": shape.to_csv()}
    witness = best.witnesses[0]
    files[f"witness_w{w}.csv"] = witness.to_csv()
    if N <= 2:
        files[f"witness_w{w}.txt"] = witness.ascii() + "\n"
    return erosion_row, min_row, files


def run_stable_shape(cfg: RunConfig) -> Outcome:
    out = _map(partial(_shape_cell, cfg), cfg.w, cfg)
    o = Outcome()
    o.files["erosion.csv"] = _csv("w,r,r_requested,capped,flips,edges_initial,edges_final,strictly_decreasing,"
                                  "terminal_size,terminal_diameter,stable", [e for e, _, _ in out])
    o.files["min_diameter.csv"] = _csv("w,N,diameter,exact,budget_exceeded,explored", [m for _, m, _ in out])
    for _, _, files in out:
        o.files.update(files)
    o.results["min_diameter"] = {str(m[0]): {"diameter": m[2], "exact": m[3]} for _, m, _ in out}
    o.results["capped"] = [e[0] for e, _, _ in out if e[3]]
    return o


# ---- occupation --------------------------------------------------------------

def _occupation_cell(cfg: RunConfig, seed: int):
    spec = GridSpec(cfg.R, cfg.cells_per_unit, 1)
    hat = hat_field(sample_initial_field(spec, 2, seed, cfg.p))
    res = sup_over_family(hat, spec, cfg.K, cfg.k, cfg.eps, cfg.sampler_size, seed=seed)
    body = sup_table_csv(res, seed).split("\n", 1)[1]
    best = {f"maximizer_s{seed}_e{j}.txt": function_to_text(r.best) for j, r in enumerate(res)}
    ratios = [r.ratio for r in res]
    measures = [r.measure for r in sorted(res, key=lambda r: r.epsilon)]
    return body, best, max(ratios) / min(ratios), all(b >= a for a, b in zip(measures, measures[1:]))


def run_occupation(cfg: RunConfig) -> Outcome:
    out = _map(partial(_occupation_cell, cfg), cfg.seed, cfg)
    o = Outcome()
    o.files["sup.csv"] = "seed,epsilon,measure,density,ratio,improved,resolution_limited\n" + \
        "".join(b for b, _, _, _ in out)
    for _, best, _, _ in out:
        o.files.update(best)
    o.results["ratio_spread"] = {str(s): spread for s, (_, _, spread, _) in zip(cfg.seed, out)}
    o.results["monotone"] = all(m for *_, m in out)
    return o


RUNNERS = {
    "simulate": run_simulate,
    "solve": run_solve,
    "couple": run_couple,
    "final-configs": run_final_configs,
    "stable-shape": run_stable_shape,
    "occupation": run_occupation,
}


def _prepare_target(out: Path) -> None:
    if out.exists() and any(out.iterdir()) and not (out / SUMMARY_NAME).exists():
        raise RuntimeError(f"{out} exists and is not a previous run directory; refusing to overwrite it")


def dispatch(cfg: RunConfig) -> tuple[int, Path, dict]:
    """Run ``cfg`` and write its artifacts; returns (exit code, output dir, summary).

    Files are written to a sibling staging directory that replaces the
    target only when the run finishes, so a failure leaves nothing behind.
    """
    out = Path(cfg.out) if cfg.out else default_out_dir(cfg)
    _prepare_target(out)
    stage = out.with_name(out.name + f".partial-{os.getpid()}")
    if stage.exists():
        shutil.rmtree(stage)
    stage.mkdir(parents=True)
    t0 = time.perf_counter()
    try:
        outcome = RUNNERS[cfg.experiment](cfg)
        code = EXIT_INCONCLUSIVE if outcome.inconclusive else EXIT_OK
        h = cfg.hash()
        for name, text in outcome.files.items():
            (stage / name).write_text(header(h) + text)
        summary = {
            "config_hash": h,
            "schema_version": SCHEMA_VERSION,
            "experiment": cfg.experiment,
            "status": "inconclusive" if outcome.inconclusive else "ok",
            "exit_code": code,
            "config": cfg.to_dict(),
            "seeds": list(cfg.seed),
            "rng_algorithm": RNG_ALGORITHM,
            "version": __version__,
            "wall_time_s": time.perf_counter() - t0,
            "artifacts": sorted(outcome.files),
            "results": outcome.results,
            "inconclusive_reasons": outcome.inconclusive,
        }
        (stage / SUMMARY_NAME).write_text(json.dumps(_finite(summary), indent=2) + "\n")
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    if out.exists():
        shutil.rmtree(out)
    stage.rename(out)
    return code, out, summary


def _finite(obj):
    """JSON has no infinities: write them as strings."""
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    if isinstance(obj, np.generic):
        return _finite(obj.item())
    return obj

