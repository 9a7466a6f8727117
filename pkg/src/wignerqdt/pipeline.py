"""Batch pipeline behind the command line: simulate, reconstruct, sweep, report.

Every stage writes text tables plus an entry in the run directory's
``manifest.json``. Nothing time- or host-dependent is recorded, so the same
configuration and seed give byte-identical artifacts.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import DetectorSpec, RunConfig, resolve
from .detectors import DetectorModel
from .fockspace import overlap_matrix
from .forward import (
    PhaseGrid,
    ThermalProbeSet,
    apply_lo_noise,
    build_response_matrix,
    omitted_response,
    responses_from_overlap,
)
from .reconstruction import (
    FitResult,
    SolverConfig,
    UnderdeterminedFitError,
    WignerEstimate,
    _shot_sample,
    analytic_curve,
    reconstruct_from_clicks,
    reconstruct_pointwise,
    relative_error,
    robust_gaussian_poly_fit,
)
from .tables import SchemaError, read_table, write_table

log = logging.getLogger("wignerqdt")

MANIFEST = "manifest.json"
MANIFEST_FORMAT = "wignerqdt-manifest"
MANIFEST_VERSION = 1
SUMMARY = "summary.json"
NO_REG_LABEL = "without regularization"
DENSE_POINTS = 401


class ManifestError(ValueError):
    """Run directory has no readable manifest or a corrupt one."""


@dataclass
class StageResult:
    out_dir: Path
    artifacts: list = field(default_factory=list)
    unusable: int = 0
    summary: dict = field(default_factory=dict)


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def read_manifest(run_dir) -> dict:
    path = Path(run_dir) / MANIFEST
    if not path.is_file():
        raise ManifestError(f"{path}: no manifest")
    try:
        doc = json.loads(path.read_text())
    except (OSError, UnicodeDecodeError) as exc:
        raise ManifestError(f"{path}: unreadable ({exc})") from exc
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict) or doc.get("format") != MANIFEST_FORMAT:
        raise ManifestError(f"{path}: not a {MANIFEST_FORMAT} document")
    if doc.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"{path}: unsupported manifest version {doc.get('version')!r}")
    if not isinstance(doc.get("stages"), dict) or not isinstance(doc.get("config"), dict):
        raise ManifestError(f"{path}: missing 'stages' or 'config'")
    return doc


def _write_manifest(out: Path, cfg: RunConfig, stage: str, entry: dict) -> Path:
    path = out / MANIFEST
    stages = {}
    if path.is_file():
        try:
            stages = read_manifest(out)["stages"]
        except ManifestError:
            stages = {}
    stages[stage] = entry
    doc = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "package_version": __version__,
        "config": cfg.as_dict(),
        "stages": stages,
    }
    out.mkdir(parents=True, exist_ok=True)
    path.write_text(_dump_json(doc))
    return path


def _artifact_list(out: Path, paths) -> list:
    return [{"path": p.relative_to(out).as_posix(), "sha256": _sha256(p)} for p in paths]


def _seed_info(cfg: RunConfig) -> dict:
    return {
        "noise_seed": cfg.noise["seed"],
        "lo_noise_stream": "Philox(SeedSequence([seed, iteration, alpha_index]))",
        "shot_stream": "Philox(SeedSequence([seed, iteration, alpha_index, k, 1]))",
    }


# simulate

def _simulate_iteration(args):
    """Click probabilities of one iteration: ``{label: (actual, {k: Q})}``."""
    models, outcomes, probes, grid, noise, it, shots = args
    resp = build_response_matrix(probes)
    actual = apply_lo_noise(grid, noise, it).alphas
    out = {}
    for model in models:
        cols = {k: np.empty((len(grid), probes.n0 + 1)) for k in outcomes}
        for i, a in enumerate(actual):
            O = overlap_matrix(model.m0, probes.pmf_cutoff, float(abs(a) ** 2))
            for k in outcomes:
                pi = responses_from_overlap(model.diag[:, k], O, model.tail[k])
                cols[k][i] = np.clip(resp.full @ pi, 0.0, 1.0)
        if shots:
            cols = {k: _shot_sample(Q, shots, noise.seed, it, k) for k, Q in cols.items()}
        out[model.label] = (np.array(actual), cols)
    return out


def tail_diagnostics(cfg: RunConfig, models, probes: ThermalProbeSet, grid: PhaseGrid) -> dict:
    resp = build_response_matrix(probes)
    diag = {
        "n0": probes.n0,
        "pmf_cutoff": probes.pmf_cutoff,
        "tail_tol": cfg.truncation["tail_tol"],
        "thermal_tail_at_pmf_cutoff": float(probes.tail_masses().max()),
        "thermal_tail_at_n0": float(probes.tail_masses(probes.n0).max()),
        "condition_estimate": float(resp.condition_estimate),
        "response_tail": {},
    }
    for model in models:
        worst = 0.0
        for a in grid.alphas:
            for k in cfg.outcomes:
                worst = max(worst, omitted_response(model.diag[:, k], a, probes.n0))
        diag["response_tail"][model.label] = worst
    return diag


def simulate(cfg: RunConfig, out: Path, workers: int = 1) -> StageResult:
    models = cfg.detector_models()
    probes, grid, noise = cfg.probe_set(), cfg.phase_grid(), cfg.noise_config()
    shots = cfg.noise["shots"]
    tasks = [(models, cfg.outcomes, probes, grid, noise, it, shots)
             for it in range(noise.iterations)]
    log.info("simulating %d iteration(s) x %d point(s) x %d probe(s)",
             noise.iterations, len(grid), probes.n0 + 1)
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_simulate_iteration, tasks))
    else:
        results = [_simulate_iteration(t) for t in tasks]

    paths, entries = [], {}
    for spec, model in zip(cfg.detectors, models):
        entries[model.label] = 0
        for k in cfg.outcomes:
            rows = []
            for it, res in enumerate(results):
                actual, cols = res[model.label]
                Q = cols[k]
                for j, nb in enumerate(probes.nbars):
                    for i, a in enumerate(grid.alphas):
                        rows.append((it, k, j, nb, i, a, actual[i], Q[i, j], shots or 0))
            meta = {"detector": json.dumps(_spec_dict(spec), sort_keys=True),
                    "label": model.label, "outcome": k,
                    "iterations": noise.iterations, "sigma_fraction": repr(noise.sigma_fraction),
                    "seed": noise.seed}
            p = write_table(out / "clicks" / f"{model.label}_k{k}.tsv", "clicks", rows, meta)
            paths.append(p)
            entries[model.label] += len(rows)
    entry = {
        "seeds": _seed_info(cfg),
        "diagnostics": tail_diagnostics(cfg, models, probes, grid),
        "entries": entries,
        "artifacts": _artifact_list(out, paths),
    }
    _write_manifest(out, cfg, "simulate", entry)
    return StageResult(out, paths, 0, entry)


def _spec_dict(spec: DetectorSpec) -> dict:
    d = dict(spec.__dict__)
    return d


# reconstruct

@dataclass
class ClickData:
    spec: DetectorSpec
    label: str
    k: int
    probes: ThermalProbeSet
    grid: PhaseGrid
    clicks: np.ndarray  # (iterations, points, probes)
    path: Path


def load_clicks(path) -> ClickData:
    """Read one click table and rebuild the probe set and grid it was made with."""
    t = read_table(path, "clicks")
    for key in ("detector", "label", "outcome"):
        if key not in t.meta:
            raise SchemaError(path, None, None, f"missing metadata key {key!r}")
    try:
        spec = DetectorSpec(**json.loads(t.meta["detector"]))
    except (json.JSONDecodeError, TypeError) as exc:
        raise SchemaError(path, None, None, f"bad detector metadata: {exc}") from exc
    if len(t) == 0:
        raise SchemaError(path, None, None, "no data rows")
    n_it = int(t["iteration"].max()) + 1
    n_j = int(t["j"].max()) + 1
    n_i = int(t["alpha_index"].max()) + 1
    if len(t) != n_it * n_j * n_i:
        raise SchemaError(path, None, None,
                          f"expected {n_it}x{n_j}x{n_i} rows, found {len(t)}")
    order = np.lexsort((t["alpha_index"], t["j"], t["iteration"]))
    expect_i = np.tile(np.arange(n_i), n_it * n_j)
    expect_j = np.tile(np.repeat(np.arange(n_j), n_i), n_it)
    if not (np.array_equal(t["alpha_index"][order], expect_i)
            and np.array_equal(t["j"][order], expect_j)):
        raise SchemaError(path, None, None, "incomplete (iteration, j, alpha_index) grid")
    if len(set(t["k"].tolist())) != 1:
        raise SchemaError(path, None, None, "table mixes several outcomes")
    q = t["q"][order].reshape(n_it, n_j, n_i).transpose(0, 2, 1)
    nbars = t["nbar"][order].reshape(n_it, n_j, n_i)[0, :, 0]
    alphas = t["alpha_nominal"][order].reshape(n_it, n_j, n_i)[0, 0, :]
    try:
        probes = ThermalProbeSet(nbars)
        grid = PhaseGrid(alphas)
    except ValueError as exc:
        raise SchemaError(path, None, None, str(exc)) from exc
    return ClickData(spec, t.meta["label"], int(t["k"][0]), probes, grid, q, Path(path))


def find_click_tables(stats) -> list[Path]:
    p = Path(stats)
    if p.is_file():
        return [p]
    if not p.is_dir():
        raise SchemaError(p, None, None, "stats path not found")
    if (p / MANIFEST).is_file():
        doc = read_manifest(p)
        sim = doc["stages"].get("simulate")
        if sim is None:
            raise ManifestError(f"{p / MANIFEST}: no simulate stage")
        return [p / a["path"] for a in sim["artifacts"]]
    files = sorted((p / "clicks").glob("*.tsv")) if (p / "clicks").is_dir() else []
    if not files:
        raise SchemaError(p, None, None, "no click tables found")
    return files


def fit_points(cfg: RunConfig, est: WignerEstimate, m0: int) -> FitResult | None:
    use = est.usable & np.isfinite(est.mean)
    a = est.alphas[use]
    n = int(np.sum(a >= 0)) if cfg.fit["symmetric"] else int(a.size)
    fit_m0 = cfg.fit_m0(est.outcome_index, m0, n)
    try:
        return robust_gaussian_poly_fit(a, est.mean[use], 2 * fit_m0,
                                        symmetric=cfg.fit["symmetric"], scale=cfg.fit["scale"])
    except UnderdeterminedFitError as exc:
        log.warning("fit skipped: %s", exc)
        return None


def interior_extrema(curve, hi: float, step: float = 0.01) -> list[float]:
    """|alpha| of the interior local extrema of ``curve`` on a fixed-step grid over [0, hi]."""
    a = np.round(np.arange(0.0, hi + 0.5 * step, step), 10)
    w = np.asarray(curve(a), dtype=float)
    d = np.sign(np.diff(w))
    idx = np.where(d[1:] * d[:-1] < 0)[0] + 1
    return [float(a[i]) for i in idx]


def score(cfg: RunConfig, model: DetectorModel, est: WignerEstimate, fit: FitResult | None):
    theory = analytic_curve(model.element(est.outcome_index), est.alphas)
    use = est.usable
    out = {"delta_pointwise": None, "delta_fit": None}
    if np.linalg.norm(theory[use]) > 0:
        out["delta_pointwise"] = relative_error(theory[use], est.mean[use]).delta
        if fit is not None:
            out["delta_fit"] = relative_error(theory, fit(est.alphas)).delta
    return theory, out


def _solver_rows(est: WignerEstimate):
    rows = []
    for it, reps in enumerate(est.reports):
        for i, r in enumerate(reps):
            rows.append((it, i, est.alphas[i], r.objective_value, r.kkt_residual, r.iterations,
                         r.at_lower, r.at_upper, str(r.slab_state), int(r.fallback),
                         int(r.converged)))
    return rows


def _estimate_rows(est: WignerEstimate, theory):
    return [(i, a, est.mean[i], est.spread[i], est.counts[i], int(est.usable[i]), theory[i])
            for i, a in enumerate(est.alphas)]


def reconstruct(cfg: RunConfig, out: Path, stats=None, workers: int = 1) -> StageResult:
    """Invert click tables; simulate first when ``stats`` is not given."""
    if stats is None:
        simulate(cfg, out, workers)
        stats = out
    files = find_click_tables(stats)
    data = [load_clicks(f) for f in files]
    solver = cfg.solver_config()
    paths, results, unusable = [], {}, 0
    for d in data:
        model = d.spec.build()
        log.info("reconstructing %s k=%d (%d iteration(s))", d.label, d.k, d.clicks.shape[0])
        est = reconstruct_from_clicks(d.clicks, d.probes, d.grid, d.k, solver, workers)
        fit = fit_points(cfg, est, model.m0)
        theory, deltas = score(cfg, model, est, fit)
        name = f"{d.label}_k{d.k}"
        meta = {"label": d.label, "outcome": d.k, "gamma": repr(solver.gamma),
                "iterations": est.iterations_used}
        paths.append(write_table(out / "estimates" / f"{name}.tsv", "estimate",
                                 _estimate_rows(est, theory), meta))
        paths.append(write_table(out / "solver" / f"{name}.tsv", "solver", _solver_rows(est),
                                 meta))
        reps = [r for reps in est.reports for r in reps]
        lo, hi = float(est.alphas.min()), float(est.alphas.max())
        results[name] = {
            "label": d.label,
            "outcome": d.k,
            "detector": _spec_dict(d.spec),
            "iterations": est.iterations_used,
            "gamma": solver.gamma,
            "unusable_alphas": est.alphas[est.unusable].tolist(),
            "failures": [[a, it] for a, it in est.failures],
            "error": {"norm_kind": "l2", **deltas},
            "fit": None if fit is None else fit.as_dict(),
            "fit_extrema_abs_alpha": None if fit is None else interior_extrema(fit, max(-lo, hi)),
            "solver": {
                "max_kkt_residual": max((r.kkt_residual for r in reps), default=0.0),
                "total_iterations": sum(r.iterations for r in reps),
                "fallbacks": sum(int(r.fallback) for r in reps),
                "not_converged": sum(int(not r.converged) for r in reps),
            },
        }
        unusable += int(est.unusable.sum())
    summary = {"format": "wignerqdt-summary", "version": 1, "solver": cfg.solver,
               "fit": cfg.fit, "results": results, "unusable_points": unusable}
    sp = out / SUMMARY
    sp.parent.mkdir(parents=True, exist_ok=True)
    sp.write_text(_dump_json(summary))
    paths.append(sp)
    stats_list = [{"path": Path(os.path.relpath(f, out)).as_posix(), "sha256": _sha256(f)}
                  for f in files]
    entry = {"seeds": _seed_info(cfg), "stats": stats_list,
             "artifacts": _artifact_list(out, paths), "unusable_points": unusable}
    _write_manifest(out, cfg, "reconstruct", entry)
    return StageResult(out, paths, unusable, summary)


# sweep

def sweep_target(cfg: RunConfig) -> DetectorModel:
    models = cfg.detector_models()
    if cfg.sweep["detector"] is not None:
        return next(m for m in models if m.label == cfg.sweep["detector"])
    lossy = [m for m in models if m.kind.value == "LossyPNR"]
    return (lossy or models)[0]


def sweep_gamma(cfg: RunConfig, out: Path, gammas, workers: int = 1) -> StageResult:
    gammas = [float(g) for g in gammas]
    if len(gammas) < 2:
        raise ValueError("sweep needs at least two gamma values")
    model = sweep_target(cfg)
    k = cfg.sweep["outcome"]
    if k >= model.n_columns:
        raise ValueError(f"sweep outcome {k} outside detector {model.label}")
    element = model.element(k)
    probes, grid, noise = cfg.probe_set(), cfg.phase_grid(), cfg.noise_config()
    base = cfg.solver_config()
    rows, detail, unusable = [], [], 0
    for g in gammas:
        log.info("sweep %s k=%d gamma=%g", model.label, k, g)
        est = reconstruct_pointwise(element, probes, grid, noise,
                                    SolverConfig(g, base.tol, base.max_iter, base.warm_start,
                                                 base.form),
                                    cfg.noise["shots"], workers, keep_reports=False)
        fit = fit_points(cfg, est, model.m0)
        _, deltas = score(cfg, model, est, fit)
        primary = deltas["delta_fit"] if deltas["delta_fit"] is not None \
            else deltas["delta_pointwise"]
        label = NO_REG_LABEL if g == 0.0 else "regularized"
        rows.append((g, primary))
        detail.append((g, deltas["delta_fit"] if deltas["delta_fit"] is not None else np.nan,
                       deltas["delta_pointwise"], int(est.unusable.sum()), label))
        unusable += int(est.unusable.sum())
    meta = {"label": model.label, "outcome": k, "sigma_fraction": repr(noise.sigma_fraction),
            "iterations": noise.iterations, "seed": noise.seed, "delta": "fitted curve"}
    paths = [write_table(out / "sweep" / "gamma_delta.tsv", "gamma", rows, meta),
             write_table(out / "sweep" / "gamma_detail.tsv", "gamma-detail", detail, meta)]
    entry = {"seeds": _seed_info(cfg), "gammas": gammas, "detector": model.label,
             "outcome": k, "artifacts": _artifact_list(out, paths)}
    _write_manifest(out, cfg, "sweep-gamma", entry)
    return StageResult(out, paths, unusable, {"rows": rows})


# report

def report(run_dir, figures: bool = False) -> tuple[str, list[Path]]:
    """Render plot-ready tables (and optionally figures) from a finished run."""
    run = Path(run_dir)
    doc = read_manifest(run)
    try:
        cfg = resolve(doc["config"])
    except ValueError as exc:
        raise ManifestError(f"{run / MANIFEST}: embedded config invalid: {exc}") from exc
    stages = doc["stages"]
    if not ({"reconstruct", "sweep-gamma"} & stages.keys()):
        raise ManifestError(f"{run / MANIFEST}: nothing to report (run reconstruct or sweep)")
    rep = run / "report"
    paths, lines = [], [f"run: {run}"]
    if "reconstruct" in stages:
        try:
            summary = json.loads((run / SUMMARY).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ManifestError(f"{run / SUMMARY}: {exc}") from exc
        for name, res in sorted(summary["results"].items()):
            est = read_table(run / "estimates" / f"{name}.tsv", "estimate")
            fit = FitResult.from_dict(res["fit"]) if res["fit"] else None
            a = est["alpha"]
            w_fit = fit(a) if fit else np.full(a.shape, np.nan)
            rows = zip(a, est["w_mean"], est["w_mean"] - est["w_spread"],
                       est["w_mean"] + est["w_spread"], est["w_theory"], w_fit)
            paths.append(write_table(rep / f"curve_{name}.tsv", "curve", rows,
                                     {"label": res["label"], "outcome": res["outcome"]}))
            if fit:
                model = DetectorSpec(**res["detector"]).build()
                ad, wd = fit.dense(float(a.min()), float(a.max()), DENSE_POINTS)
                th = analytic_curve(model.element(res["outcome"]), ad)
                paths.append(write_table(rep / f"dense_{name}.tsv", "dense", zip(ad, wd, th),
                                         {"label": res["label"], "outcome": res["outcome"]}))
            err = res["error"]
            lines.append(f"{name}: delta(points)={_num(err['delta_pointwise'])} "
                         f"delta(fit)={_num(err['delta_fit'])} "
                         f"extrema |alpha|={res['fit_extrema_abs_alpha']} "
                         f"unusable={len(res['unusable_alphas'])} "
                         f"max kkt={res['solver']['max_kkt_residual']:.2e}")
    if "sweep-gamma" in stages:
        t = read_table(run / "sweep" / "gamma_detail.tsv", "gamma-detail")
        paths.append(write_table(rep / "gamma_delta.tsv", "gamma",
                                 zip(t["gamma"], t["delta_fit"]),
                                 {"label": stages["sweep-gamma"]["detector"],
                                  "outcome": stages["sweep-gamma"]["outcome"]}))
        for g, dfit, dpt, lab in zip(t["gamma"], t["delta_fit"], t["delta_pointwise"],
                                     t["label"]):
            lines.append(f"gamma={g:g}: delta(fit)={dfit:.4g} delta(points)={dpt:.4g}"
                         + (f" [{lab}]" if lab == NO_REG_LABEL else ""))
    if figures:
        from .plotting import render_report_figures
        paths.extend(render_report_figures(rep))
    text = "\n".join(lines) + "\n"
    (rep / "summary.txt").parent.mkdir(parents=True, exist_ok=True)
    (rep / "summary.txt").write_text(text)
    paths.append(rep / "summary.txt")
    return text, paths


def _num(v) -> str:
    return "n/a" if v is None else f"{v:.4g}"
