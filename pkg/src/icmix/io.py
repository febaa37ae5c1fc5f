"""CSV data files, result tables, key=value config files and run manifests."""

from __future__ import annotations

import csv
import datetime as _dt
import json
import math
import platform
from pathlib import Path

import numpy as np

from icmix import __version__
from icmix.model import DataError, Dataset, classify_observation


class DataFileError(DataError):
    """Malformed data file; the message cites the offending line."""


def format_number(value) -> str:
    if value is None:
        return "NA"
    value = float(value)
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    if math.isnan(value):
        return "NA"
    return format(value, ".17g")


def _parse_number(text: str, what: str, line: int, row_id: str) -> float:
    token = text.strip()
    if token.lower() in ("inf", "+inf", "infinity"):
        return math.inf
    try:
        value = float(token)
    except ValueError:
        raise DataFileError(f"line {line} (id {row_id!r}): cannot parse {what} value {text!r}") from None
    if math.isnan(value):
        raise DataFileError(f"line {line} (id {row_id!r}): {what} is NaN")
    return value


def read_dataset(path) -> Dataset:
    """Read ``id,L,R,x1,...,xr`` rows; ``R`` may be the token ``inf``."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataFileError(f"{path}: empty file (header row required)") from None
        if len(header) < 3 or [h.lower() for h in header[:3]] != ["id", "l", "r"]:
            raise DataFileError(f"line 1: header must start with id,L,R; got {header[:3]}")
        covariates = header[3:]
        ids, L, R, X = [], [], [], []
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            row_id = row[0].strip()
            if len(row) != len(header):
                raise DataFileError(
                    f"line {line} (id {row_id!r}): expected {len(header)} fields, got {len(row)}"
                )
            lo = _parse_number(row[1], "L", line, row_id)
            hi = _parse_number(row[2], "R", line, row_id)
            xs = [_parse_number(v, name, line, row_id) for v, name in zip(row[3:], covariates)]
            if any(math.isinf(v) for v in xs):
                raise DataFileError(f"line {line} (id {row_id!r}): covariates must be finite")
            try:
                classify_observation(lo, hi)
            except DataError as exc:
                raise DataFileError(f"line {line} (id {row_id!r}): {exc}") from None
            ids.append(row_id)
            L.append(lo)
            R.append(hi)
            X.append(xs)
    if not ids:
        raise DataFileError(f"{path}: no observations")
    if len(set(ids)) != len(ids):
        raise DataFileError(f"{path}: duplicate ids")
    return Dataset(
        np.array(L),
        np.array(R),
        np.array(X, dtype=float).reshape(len(ids), len(covariates)),
        ids=tuple(ids),
        covariate_names=tuple(covariates),
    )


def write_dataset(path, data: Dataset) -> None:
    rows = [
        [ident, format_number(lo), format_number(hi), *map(format_number, x)]
        for ident, lo, hi, x in zip(data.ids, data.L, data.R, data.X)
    ]
    write_csv(path, ["id", "L", "R", *data.covariate_names], rows)


def write_csv(path, header, rows) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([v if isinstance(v, str) else format_number(v) for v in row])


def read_config(path) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    for line_no, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{line_no}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ValueError(f"{path}:{line_no}: empty key")
        out[key.lower()] = value
    return out


def write_manifest(directory, command: str, config: dict, *, seed=None, diagnostics=None, started=None) -> Path:
    now = _dt.datetime.now(_dt.timezone.utc)
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "software": {"icmix": __version__, "python": platform.python_version(), "numpy": np.__version__},
        "started": (started or now).isoformat(),
        "finished": now.isoformat(),
        "diagnostics": diagnostics or {},
    }
    path = Path(directory) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, float) and math.isinf(obj):
        return "inf"
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")
