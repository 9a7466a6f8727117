"""Run configuration: YAML/JSON loading, schema validation and resolution.

A configuration file is a key-value tree validated against
``data/run_config.schema.json``. Every key is optional; omitted keys take
the defaults below, so an empty file describes the noiseless two-detector
reference run. ``resolve`` returns a ``RunConfig`` whose ``as_dict`` form is
embedded in every manifest and can be fed back to ``load_config``.
"""

from __future__ import annotations

import copy
import json
import os
import re
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from .detectors import DetectorKind, DetectorModel, load_povm
from .fockspace import TAIL_TOL, TruncationConfig
from .forward import NoiseConfig, PhaseGrid, ThermalProbeSet
from .reconstruction import SolverConfig

OUT_ENV = "WIGNERQDT_OUT"
DEFAULT_OUT = "wignerqdt-runs"
SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Configuration failed schema or cross-field validation."""


def load_schema() -> dict:
    text = resources.files("wignerqdt").joinpath("data/run_config.schema.json").read_text()
    return json.loads(text)


DEFAULTS = {
    "version": SCHEMA_VERSION,
    "detectors": [
        {"kind": "IdealPNR", "eta": 1.0, "m0": 50, "label": "ideal"},
        {"kind": "LossyPNR", "eta": 0.9, "m0": 50, "label": "lossy"},
    ],
    "outcomes": [0, 1, 2],
    "truncation": {"hilbert_dim": 51, "tail_tol": TAIL_TOL},
    "probes": {"count": 50, "nbar_min": 0.0, "nbar_max": 4.0, "nbars": None, "pmf_cutoff": None},
    "grid": {"count": 51, "min": -3.6, "max": 3.6, "preset": "uniform", "alphas": None},
    "noise": {"sigma_fraction": 0.0, "iterations": 1, "seed": 0, "shots": None},
    "solver": {"gamma": 1e-3, "tol": 1e-9, "max_iter": None, "warm_start": False,
               "form": "squared"},
    "fit": {"m0": None, "symmetric": False, "scale": 1.0},
    "sweep": {"gammas": [0.0, 1e-4, 1e-3, 3e-3, 6e-3, 1e-2, 1.2e-2], "detector": None,
              "outcome": 1},
    "output": {"dir": None},
}

DETECTOR_DEFAULTS = {"eta": 1.0, "m0": 50, "outcomes": None, "overflow": True,
                     "label": None, "povm_file": None}


@dataclass(frozen=True)
class DetectorSpec:
    kind: str
    eta: float = 1.0
    m0: int = 50
    outcomes: int | None = None
    overflow: bool = True
    label: str = ""
    povm_file: str | None = None

    def build(self) -> DetectorModel:
        kind = DetectorKind(self.kind)
        if kind is DetectorKind.GENERAL_DIAGONAL:
            model = load_povm(self.povm_file)
            return DetectorModel(model.kind, model.m0, model.diag, model.eta,
                                 model.overflow, self.label)
        if kind is DetectorKind.IDEAL_PNR:
            return DetectorModel.ideal(self.m0, self.outcomes, self.overflow, self.label)
        return DetectorModel.lossy(self.eta, self.m0, self.outcomes, self.overflow, self.label)


@dataclass(frozen=True)
class RunConfig:
    detectors: tuple
    outcomes: tuple
    truncation: dict
    probes: dict
    grid: dict
    noise: dict
    solver: dict
    fit: dict
    sweep: dict
    output: dict
    source: str | None = field(default=None, compare=False)

    def as_dict(self) -> dict:
        return {
            "version": SCHEMA_VERSION,
            "detectors": [asdict(d) for d in self.detectors],
            "outcomes": list(self.outcomes),
            "truncation": dict(self.truncation),
            "probes": dict(self.probes),
            "grid": dict(self.grid),
            "noise": dict(self.noise),
            "solver": dict(self.solver),
            "fit": dict(self.fit),
            "sweep": dict(self.sweep),
            "output": dict(self.output),
        }

    # builders for the numerical objects
    def detector_models(self) -> list[DetectorModel]:
        return [d.build() for d in self.detectors]

    def probe_set(self) -> ThermalProbeSet:
        p = self.probes
        nbars = p["nbars"] if p["nbars"] is not None else np.linspace(
            p["nbar_min"], p["nbar_max"], p["count"])
        return ThermalProbeSet(np.asarray(nbars, dtype=float), p["pmf_cutoff"],
                               self.truncation["tail_tol"])

    def phase_grid(self) -> PhaseGrid:
        g = self.grid
        if g["alphas"] is not None:
            return PhaseGrid(np.asarray(g["alphas"], dtype=float))
        if g["preset"] == "dense-origin":
            return PhaseGrid.dense_origin(g["count"], g["min"], g["max"])
        return PhaseGrid.uniform(g["count"], g["min"], g["max"])

    def noise_config(self) -> NoiseConfig:
        n = self.noise
        return NoiseConfig(n["sigma_fraction"], n["iterations"], n["seed"])

    def solver_config(self) -> SolverConfig:
        s = self.solver
        return SolverConfig(s["gamma"], s["tol"], s["max_iter"], s["warm_start"], s["form"])

    def truncation_config(self, m0: int) -> TruncationConfig:
        t = self.truncation
        return TruncationConfig(t["hilbert_dim"], self.probe_set().n0, m0, t["tail_tol"])

    def fit_m0(self, k: int, m0: int, n_points: int) -> int:
        """Fit cutoff: configured value, else a small degree matched to the outcome."""
        if self.fit["m0"] is not None:
            return self.fit["m0"]
        limit = n_points - 1 if self.fit["symmetric"] else (n_points - 1) // 2
        return max(0, min(m0, max(5, k + 3), limit))

    def output_dir(self, override=None) -> Path:
        if override:
            return Path(override)
        if self.output["dir"]:
            return Path(self.output["dir"])
        return Path(os.environ.get(OUT_ENV, DEFAULT_OUT))

    def with_seed(self, seed: int) -> RunConfig:
        d = self.as_dict()
        d["noise"]["seed"] = int(seed)
        return resolve(d, self.source)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def _format_error(err: jsonschema.ValidationError) -> str:
    where = "/".join(str(p) for p in err.absolute_path) or "<root>"
    return f"{where}: {err.message}"


def validate(raw: dict) -> None:
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        raise ConfigError("; ".join(_format_error(e) for e in errors))


def resolve(raw: dict | None, source: str | None = None) -> RunConfig:
    """Validate a raw tree, fill defaults and check cross-field constraints."""
    raw = {} if raw is None else raw
    if not isinstance(raw, dict):
        raise ConfigError("configuration root must be a mapping")
    validate(raw)
    merged = _merge(DEFAULTS, {k: v for k, v in raw.items() if k != "detectors"})
    dets = []
    for i, d in enumerate(raw.get("detectors", DEFAULTS["detectors"])):
        spec = _merge(DETECTOR_DEFAULTS, d)
        if spec["label"] is None:
            spec["label"] = f"det{i}"
        if spec["kind"] == "IdealPNR":
            spec["eta"] = 1.0
        if spec["kind"] == "GeneralDiagonal":
            if not spec["povm_file"]:
                raise ConfigError(f"detectors/{i}: GeneralDiagonal needs povm_file")
            if source and not os.path.isabs(spec["povm_file"]):
                spec["povm_file"] = str(Path(source).parent / spec["povm_file"])
        dets.append(DetectorSpec(**spec))
    cfg = RunConfig(tuple(dets), tuple(merged["outcomes"]), merged["truncation"],
                    merged["probes"], merged["grid"], merged["noise"], merged["solver"],
                    merged["fit"], merged["sweep"], merged["output"], source)
    _cross_check(cfg)
    return cfg


def _cross_check(cfg: RunConfig) -> None:
    labels = [d.label for d in cfg.detectors]
    if len(set(labels)) != len(labels):
        raise ConfigError(f"detectors: duplicate labels {labels}")
    if len(set(cfg.outcomes)) != len(cfg.outcomes):
        raise ConfigError("outcomes: duplicate outcome indices")
    p, g = cfg.probes, cfg.grid
    if p["nbars"] is None:
        if p["nbar_max"] < p["nbar_min"]:
            raise ConfigError("probes: nbar_max must not be below nbar_min")
        if p["count"] > 1 and p["nbar_max"] == p["nbar_min"]:
            raise ConfigError("probes: identical mean photon numbers make P singular")
    elif len(set(p["nbars"])) != len(p["nbars"]) or list(p["nbars"]) != sorted(p["nbars"]):
        raise ConfigError("probes/nbars: values must be distinct and ascending")
    if g["alphas"] is None and g["count"] > 1 and g["max"] <= g["min"]:
        raise ConfigError("grid: max must exceed min")
    if cfg.sweep["detector"] is not None and cfg.sweep["detector"] not in labels:
        raise ConfigError(f"sweep/detector: unknown label {cfg.sweep['detector']!r}")
    try:
        probes = cfg.probe_set()
        cfg.phase_grid()
        cfg.noise_config()
        cfg.solver_config()
        models = cfg.detector_models()
    except (ValueError, OSError) as exc:
        raise ConfigError(str(exc)) from exc
    for spec, model in zip(cfg.detectors, models):
        try:
            TruncationConfig(cfg.truncation["hilbert_dim"], probes.n0, model.m0,
                             cfg.truncation["tail_tol"])
        except ValueError as exc:
            raise ConfigError(f"detector {spec.label}: {exc}") from exc
        bad = [k for k in cfg.outcomes if k >= model.outcomes]
        if bad:
            # the overflow outcome has no convergent truncated parity sum
            raise ConfigError(f"detector {spec.label}: outcomes {bad} are not resolved "
                              f"outcomes (0..{model.outcomes - 1})")
    if cfg.fit["symmetric"] and cfg.fit["m0"] is not None and cfg.fit["m0"] < 0:
        raise ConfigError("fit/m0 must be non-negative")


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads exponent floats without a dot (``1e-9``)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
    |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
    |\.[0-9_]+(?:[eE][-+][0-9]+)?
    |[-+]?\.(?:inf|Inf|INF)
    |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."),
)


def parse_text(text: str, source: str = "<string>") -> dict:
    try:
        raw = yaml.load(text, Loader=_Loader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}:{mark.column + 1}" if mark else source
        raise ConfigError(f"{where}: {getattr(exc, 'problem', exc)}") from exc
    if isinstance(raw, dict) and raw.get("format") == "wignerqdt-manifest":
        raw = raw.get("config")
    return raw


def load_config(path=None) -> RunConfig:
    """Load a YAML or JSON file (or a run manifest); ``None`` gives the defaults."""
    if path is None:
        return resolve({})
    text = Path(path).read_text()
    return resolve(parse_text(text, str(path)), str(path))
