"""Diagonal POVM models for photon-number-resolving detectors."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .fockspace import DomainError, binomial_loss, laguerre_table

POVM_FORMAT = "wignerqdt-povm"
POVM_VERSION = 1


class OutcomeRangeError(ValueError):
    """Outcome index outside the detector's resolvable range."""


class DetectorKind(str, Enum):
    IDEAL_PNR = "IdealPNR"
    LOSSY_PNR = "LossyPNR"
    GENERAL_DIAGONAL = "GeneralDiagonal"


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class PovmElement:
    """One diagonal POVM element: ``weights[m] = <m|M_k|m>`` for m = 0..m0.

    An ``overflow`` element also has weight 1 on every photon number above
    m0: a saturated detector reports all of those in its overflow outcome.
    """

    outcome_index: int
    weights: np.ndarray
    overflow: bool = False

    def __post_init__(self):
        w = _frozen(self.weights)
        if w.ndim != 1 or w.size == 0:
            raise ValueError("weights must be a non-empty vector")
        if np.any(w < 0) or np.any(w > 1 + 1e-12):
            raise ValueError("POVM diagonal weights must lie in [0, 1]")
        object.__setattr__(self, "weights", w)

    @property
    def m0(self) -> int:
        return self.weights.size - 1

    @property
    def tail_weight(self) -> float:
        return 1.0 if self.overflow else 0.0


def ideal_pnr_povm(k: int, m0: int) -> PovmElement:
    """Fock projector |k><k| truncated at m0."""
    if not 0 <= k <= m0:
        raise OutcomeRangeError(f"outcome {k} outside 0..{m0}")
    w = np.zeros(m0 + 1)
    w[k] = 1.0
    return PovmElement(k, w)


def lossy_pnr_povm(k: int, eta: float, m0: int) -> PovmElement:
    """k-click element of a PNR detector with efficiency eta and no dark counts."""
    if not 0 <= k <= m0:
        raise OutcomeRangeError(f"outcome {k} outside 0..{m0}")
    if not 0.0 < eta <= 1.0:
        raise DomainError(f"eta must lie in (0, 1], got {eta}")
    w = np.zeros(m0 + 1)
    for m in range(k, m0 + 1):
        w[m] = binomial_loss(k, m, eta)
    return PovmElement(k, w)


@dataclass(frozen=True, eq=False)
class DetectorModel:
    """A complete set of diagonal POVM elements over photon numbers 0..m0.

    ``diag`` has shape ``(m0 + 1, n_columns)``; column k is ``<m|M_k|m>``.
    When ``overflow`` is set the last column is a declared overflow outcome
    holding whatever completeness mass the resolved outcomes 0..K-1 leave
    over, so the full set always sums to the identity.
    """

    kind: DetectorKind
    m0: int
    diag: np.ndarray
    eta: float = 1.0
    overflow: bool = False
    label: str = field(default="")

    def __post_init__(self):
        d = _frozen(self.diag)
        if d.ndim != 2 or d.shape[0] != self.m0 + 1:
            raise ValueError(f"diag must have shape (m0+1, K), got {d.shape}")
        if np.any(d < 0) or np.any(d > 1 + 1e-12):
            raise ValueError("POVM diagonal weights must lie in [0, 1]")
        object.__setattr__(self, "diag", d)
        object.__setattr__(self, "kind", DetectorKind(self.kind))
        if not self.label:
            object.__setattr__(self, "label", f"{self.kind.value}-eta{self.eta:.3f}-m{self.m0}")

    @classmethod
    def ideal(cls, m0: int, outcomes: int | None = None, overflow: bool = True, label: str = ""):
        return cls._pnr(DetectorKind.IDEAL_PNR, 1.0, m0, outcomes, overflow, label)

    @classmethod
    def lossy(cls, eta: float, m0: int, outcomes: int | None = None, overflow: bool = True,
              label: str = ""):
        return cls._pnr(DetectorKind.LOSSY_PNR, eta, m0, outcomes, overflow, label)

    @classmethod
    def general(cls, diag, overflow: bool = False, label: str = ""):
        d = np.asarray(diag, dtype=float)
        if overflow:
            d = np.column_stack([d, np.clip(1.0 - d.sum(axis=1), 0.0, 1.0)])
        return cls(DetectorKind.GENERAL_DIAGONAL, d.shape[0] - 1, d, 1.0, overflow, label)

    @classmethod
    def _pnr(cls, kind, eta, m0, outcomes, overflow, label):
        K = m0 + 1 if outcomes is None else outcomes
        if not 1 <= K <= m0 + 1:
            raise OutcomeRangeError(f"number of outcomes must be in 1..{m0 + 1}, got {K}")
        if kind is DetectorKind.IDEAL_PNR:
            cols = [ideal_pnr_povm(k, m0).weights for k in range(K)]
        else:
            cols = [lossy_pnr_povm(k, eta, m0).weights for k in range(K)]
        d = np.column_stack(cols)
        if overflow:
            d = np.column_stack([d, np.clip(1.0 - d.sum(axis=1), 0.0, 1.0)])
        return cls(kind, m0, d, eta, overflow, label)

    @property
    def outcomes(self) -> int:
        """Number of resolved click outcomes K (overflow column excluded)."""
        return self.diag.shape[1] - int(self.overflow)

    @property
    def n_columns(self) -> int:
        return self.diag.shape[1]

    @property
    def tail(self) -> np.ndarray:
        """Weight of each outcome on photon numbers above m0."""
        t = np.zeros(self.n_columns)
        if self.overflow:
            t[-1] = 1.0
        return t

    def element(self, k: int) -> PovmElement:
        if not 0 <= k < self.n_columns:
            raise OutcomeRangeError(f"outcome {k} outside 0..{self.n_columns - 1}")
        return PovmElement(k, self.diag[:, k], overflow=self.overflow and k == self.n_columns - 1)

    def elements(self) -> list[PovmElement]:
        return [self.element(k) for k in range(self.n_columns)]

    def save(self, path) -> None:
        save_povm(self, path)


def analytic_wigner(element: PovmElement, alpha_sq):
    """Closed-form Wigner function of a diagonal POVM element.

    ``(2/pi) exp(-2x) sum_m (-1)^m w_m L_m(4x)`` with ``x = |alpha|^2``,
    plus the Abel-summed contribution above m0 for an overflow element.
    Accepts a scalar or an array of ``alpha_sq``.
    """
    x = np.asarray(alpha_sq, dtype=float)
    if np.any(x < 0):
        raise DomainError("alpha_sq must be non-negative")
    w = element.weights
    lag = laguerre_table(w.size - 1, 0, 4.0 * x, max_degree=max(200, w.size - 1))
    signs = (-1.0) ** np.arange(w.size)
    modulated = lag * np.exp(-2.0 * x)
    val = (2.0 / math.pi) * np.tensordot(signs * w, modulated, axes=1)
    if element.overflow:
        # weight 1 above m0: sum_{m > m0} (-1)^m e^{-2x} L_m(4x) = 1/2 - sum_{m <= m0} (...)
        val = val + 1.0 / math.pi - (2.0 / math.pi) * np.tensordot(signs, modulated, axes=1)
    return float(val) if val.ndim == 0 else val


@dataclass(frozen=True)
class CompletenessReport:
    max_deviation: float
    worst_m: int
    deviations: np.ndarray

    @property
    def ok(self) -> bool:
        return self.max_deviation <= 1e-10


def check_completeness(model: DetectorModel) -> CompletenessReport:
    dev = np.abs(1.0 - model.diag.sum(axis=1))
    worst = int(np.argmax(dev))
    return CompletenessReport(float(dev[worst]), worst, dev)


def save_povm(model: DetectorModel, path) -> None:
    """Write the POVM table: one row per m, one column per outcome k.

    Values use ``repr`` so the round trip through ``load_povm`` is exact.
    """
    names = [f"k{k}" for k in range(model.outcomes)]
    if model.overflow:
        names.append("overflow")
    lines = [
        f"# {POVM_FORMAT} v{POVM_VERSION}",
        f"# kind={model.kind.value}",
        f"# eta={model.eta!r}",
        f"# m0={model.m0}",
        f"# overflow={int(model.overflow)}",
        f"# label={model.label}",
        "\t".join(["m"] + names),
    ]
    for m in range(model.m0 + 1):
        lines.append("\t".join([str(m)] + [repr(float(v)) for v in model.diag[m]]))
    Path(path).write_text("\n".join(lines) + "\n")


def load_povm(path) -> DetectorModel:
    text = Path(path).read_text().splitlines()
    meta = {}
    rows = []
    header = None
    for lineno, line in enumerate(text, 1):
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith(POVM_FORMAT):
                version = body.split()[-1]
                if version != f"v{POVM_VERSION}":
                    raise ValueError(f"{path}:{lineno}: unsupported POVM version {version}")
            elif "=" in body:
                key, val = body.split("=", 1)
                meta[key.strip()] = val.strip()
            continue
        if not line.strip():
            continue
        cells = line.split("\t")
        if header is None:
            header = cells
            continue
        if len(cells) != len(header):
            raise ValueError(f"{path}:{lineno}: expected {len(header)} columns, got {len(cells)}")
        if int(cells[0]) != len(rows):
            raise ValueError(f"{path}:{lineno}: rows must be ordered m = 0, 1, ...")
        rows.append([float(c) for c in cells[1:]])
    missing = {"kind", "eta", "m0", "overflow"} - meta.keys()
    if header is None or missing:
        raise ValueError(f"{path}: malformed POVM file (missing {sorted(missing) or 'header'})")
    diag = np.array(rows, dtype=float)
    m0 = int(meta["m0"])
    if diag.shape[0] != m0 + 1:
        raise ValueError(f"{path}: expected {m0 + 1} rows, got {diag.shape[0]}")
    return DetectorModel(
        DetectorKind(meta["kind"]), m0, diag, float(meta["eta"]),
        bool(int(meta["overflow"])), meta.get("label", ""),
    )
