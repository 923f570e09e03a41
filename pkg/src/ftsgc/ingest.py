"""Long-format CSV input and output.

Rows are ``series_id,time_index,tau,value``. Each series' abscissae are
rescaled affinely to [0, 1]; the original values travel with the sample so
outputs can echo them.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from pathlib import Path

import numpy as np

from . import grid as gridmod
from .errors import IngestError
from .model import FunctionalSample

log = logging.getLogger(__name__)

HEADER = ("series_id", "time_index", "tau", "value")


def _rescale(tau: np.ndarray) -> np.ndarray:
    lo, hi = float(tau.min()), float(tau.max())
    if hi == lo:
        return np.zeros_like(tau)
    return (tau - lo) / (hi - lo)


def _parse_rows(text: str):
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise IngestError("file is empty") from None
    if tuple(h.strip() for h in header) != HEADER:
        raise IngestError(f"header must be {','.join(HEADER)}, got {','.join(header)}", row=1)
    seen = set()
    rows = []
    for line, rec in enumerate(reader, start=2):
        if not rec or all(not f.strip() for f in rec):
            continue
        if len(rec) != 4:
            raise IngestError(f"expected 4 fields, got {len(rec)}", row=line)
        sid = rec[0].strip()
        try:
            t = int(rec[1])
            tau = float(rec[2])
            value = float(rec[3])
        except ValueError:
            raise IngestError(f"non-numeric field in {rec[1:]}", row=line) from None
        if not (math.isfinite(tau) and math.isfinite(value)):
            raise IngestError("tau and value must be finite", row=line)
        key = (sid, t, tau)
        if key in seen:
            raise IngestError(f"duplicate key {key}", row=line)
        seen.add(key)
        rows.append((sid, t, tau, value))
    if not rows:
        raise IngestError("file has no data rows")
    return rows


def parse_long_csv(text: str, series=None, vector_series=()) -> FunctionalSample:
    """Build a sample from CSV text.

    ``series`` orders (and selects) the series ids; by default they appear
    in order of first occurrence. Series in ``vector_series``, and any with
    fewer than three distinct abscissae, become vector series with one grid
    point per component. Times between the first and last that have no rows
    at all are dropped with a warning.
    """
    rows = _parse_rows(text)
    order = []
    for sid, *_ in rows:
        if sid not in order:
            order.append(sid)
    if series is not None:
        missing = [s for s in series if s not in order]
        if missing:
            raise IngestError(f"series {missing} not present in the file")
        order = list(series)
    keep = set(order)
    rows = [r for r in rows if r[0] in keep]
    times = np.array(sorted({r[1] for r in rows}))
    gaps = int(times[-1] - times[0] + 1 - times.size)
    if gaps:
        log.warning("%d time index value(s) without any observation were dropped", gaps)
    t_pos = {t: i for i, t in enumerate(times)}
    points, kinds, values, originals = [], [], [], []
    for sid in order:
        mine = [r for r in rows if r[0] == sid]
        tau = np.array(sorted({r[2] for r in mine}))
        kind = gridmod.VECTOR if (sid in vector_series or tau.size < 3) else gridmod.FUNCTIONAL
        pts = _rescale(tau) if kind == gridmod.FUNCTIONAL else np.arange(tau.size, dtype=float)
        col = {v: i for i, v in enumerate(tau)}
        vals = np.full((times.size, tau.size), np.nan)
        for _, t, ta, v in mine:
            vals[t_pos[t], col[ta]] = v
        points.append(pts)
        kinds.append(kind)
        values.append(vals)
        originals.append(tau)
    g = gridmod.make_grid(points, kinds)
    return FunctionalSample(g, tuple(values), tuple(order), times, tuple(originals))


def read_long_csv(path, series=None, vector_series=()) -> FunctionalSample:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise IngestError(f"cannot read {p}: {exc}") from None
    return parse_long_csv(text, series, vector_series)


def read_many(paths, series=None, vector_series=()) -> FunctionalSample:
    """Concatenate several long-format files (one header each) and parse them together."""
    parts = []
    for i, path in enumerate(paths):
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise IngestError(f"cannot read {path}: {exc}") from None
        lines = text.splitlines()
        parts.extend(lines if i == 0 else lines[1:])
    return parse_long_csv("\n".join(parts) + "\n", series, vector_series)


def format_long_csv(sample: FunctionalSample) -> str:
    """Canonical CSV for ``sample`` (missing entries are omitted)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADER)
    for n, sid in enumerate(sample.series_ids):
        tau = sample.tau_original[n]
        for i, t in enumerate(sample.time_index):
            for j, v in enumerate(sample.values[n][i]):
                if not np.isnan(v):
                    w.writerow([sid, int(t), repr(float(tau[j])), repr(float(v))])
    return buf.getvalue()
