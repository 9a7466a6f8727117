"""Versioned tab-separated tables used for every run artifact.

Each file starts with ``# wignerqdt-<kind> v<version>``, followed by
``# key=value`` metadata lines, one header row and the data rows. Floats
are written with ``repr`` so values survive a round trip bit for bit and
repeated runs produce byte-identical files.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

INT, FLOAT, STR = "int", "float", "str"

SCHEMAS = {
    "clicks": (1, [("iteration", INT), ("k", INT), ("j", INT), ("nbar", FLOAT),
                   ("alpha_index", INT), ("alpha_nominal", FLOAT), ("alpha_actual", FLOAT),
                   ("q", FLOAT), ("shots", INT)]),
    "estimate": (1, [("alpha_index", INT), ("alpha", FLOAT), ("w_mean", FLOAT),
                     ("w_spread", FLOAT), ("count", INT), ("usable", INT),
                     ("w_theory", FLOAT)]),
    "solver": (1, [("iteration", INT), ("alpha_index", INT), ("alpha", FLOAT),
                   ("objective", FLOAT), ("kkt_residual", FLOAT), ("iterations", INT),
                   ("at_lower", INT), ("at_upper", INT), ("slab", STR), ("fallback", INT),
                   ("converged", INT)]),
    "curve": (1, [("alpha", FLOAT), ("w_mean", FLOAT), ("band_lo", FLOAT),
                  ("band_hi", FLOAT), ("w_theory", FLOAT), ("w_fit", FLOAT)]),
    "dense": (1, [("alpha", FLOAT), ("w_fit", FLOAT), ("w_theory", FLOAT)]),
    "gamma": (1, [("gamma", FLOAT), ("delta", FLOAT)]),
    "gamma-detail": (1, [("gamma", FLOAT), ("delta_fit", FLOAT), ("delta_pointwise", FLOAT),
                         ("unusable", INT), ("label", STR)]),
}


class SchemaError(ValueError):
    """A table does not match its declared schema."""

    def __init__(self, path, line: int | None, column: int | None, message: str):
        self.path, self.line, self.column = str(path), line, column
        loc = str(path)
        if line is not None:
            loc += f":{line}"
            if column is not None:
                loc += f":{column}"
        super().__init__(f"{loc}: {message}")


@dataclass
class Table:
    kind: str
    meta: dict
    columns: dict = field(default_factory=dict)

    def __len__(self):
        first = next(iter(self.columns.values()), [])
        return len(first)

    def __getitem__(self, name):
        return self.columns[name]


def _fmt(value, typ: str) -> str:
    if typ == INT:
        return str(int(value))
    if typ == FLOAT:
        v = float(value)
        return "nan" if math.isnan(v) else repr(v)
    s = str(value)
    if "\t" in s or "\n" in s:
        raise ValueError(f"string cell contains a tab or newline: {s!r}")
    return s


def write_table(path, kind: str, rows, meta: dict | None = None) -> Path:
    """Write ``rows`` (iterables ordered like the schema columns) to ``path``."""
    version, cols = SCHEMAS[kind]
    lines = [f"# wignerqdt-{kind} v{version}"]
    for key, val in (meta or {}).items():
        lines.append(f"# {key}={val}")
    lines.append("\t".join(name for name, _ in cols))
    for row in rows:
        row = tuple(row)
        if len(row) != len(cols):
            raise ValueError(f"{kind} row has {len(row)} cells, expected {len(cols)}")
        lines.append("\t".join(_fmt(v, t) for v, (_, t) in zip(row, cols)))
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text("\n".join(lines) + "\n")
    return p


def _parse(cell: str, typ: str):
    if typ == INT:
        return int(cell)
    if typ == FLOAT:
        return float(cell)
    return cell


def read_table(path, kind: str) -> Table:
    """Parse a table, reporting the line and column of the first violation."""
    version, cols = SCHEMAS[kind]
    p = Path(path)
    try:
        text = p.read_text()
    except FileNotFoundError as exc:
        raise SchemaError(p, None, None, "file not found") from exc
    except (OSError, UnicodeDecodeError) as exc:
        raise SchemaError(p, None, None, f"unreadable: {exc}") from exc
    lines = text.splitlines()
    if not lines:
        raise SchemaError(p, 1, None, "empty file")
    magic = f"# wignerqdt-{kind} v{version}"
    if lines[0].strip() != magic:
        raise SchemaError(p, 1, 1, f"expected header {magic!r}, got {lines[0][:60]!r}")
    meta = {}
    lineno = 1
    for lineno, line in enumerate(lines[1:], 2):
        if not line.startswith("#"):
            break
        body = line[1:].strip()
        if "=" not in body:
            raise SchemaError(p, lineno, 3, "metadata lines must read '# key=value'")
        key, val = body.split("=", 1)
        meta[key.strip()] = val.strip()
    else:
        raise SchemaError(p, lineno + 1, None, "missing column header")
    header = lines[lineno - 1].split("\t")
    expected = [name for name, _ in cols]
    if header != expected:
        for c, (got, want) in enumerate(zip(header + [""] * len(expected), expected), 1):
            if got != want:
                raise SchemaError(p, lineno, c, f"expected column {want!r}, got {got!r}")
        raise SchemaError(p, lineno, len(expected) + 1, "unexpected extra columns")
    data = [[] for _ in cols]
    for ln, line in enumerate(lines[lineno:], lineno + 1):
        if not line.strip():
            continue
        cells = line.split("\t")
        if len(cells) != len(cols):
            raise SchemaError(p, ln, min(len(cells), len(cols)) + 1,
                              f"expected {len(cols)} cells, got {len(cells)}")
        for c, (cell, (name, typ)) in enumerate(zip(cells, cols), 1):
            try:
                data[c - 1].append(_parse(cell, typ))
            except ValueError:
                raise SchemaError(p, ln, c, f"column {name!r}: cannot parse {cell!r} as {typ}")
    columns = {}
    for (name, typ), vals in zip(cols, data):
        if typ == INT:
            columns[name] = np.array(vals, dtype=np.int64)
        elif typ == FLOAT:
            columns[name] = np.array(vals, dtype=float)
        else:
            columns[name] = list(vals)
    return Table(kind, meta, columns)
