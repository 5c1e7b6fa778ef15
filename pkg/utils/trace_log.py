from __future__ import annotations
import csv
import os
from typing import Any, Iterable, List, Optional, Sequence

import numpy as np

from utils.errors import FormatError

TRACE_HEADER = ('step', 'train_kid', 'val_kid')


def _fmt(value: Any) -> str:
    if value is None:
        return ''
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_rows(path: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    """UTF-8, comma separated, '\\n' line ends, header first."""
    folder = os.path.dirname(path)
    if folder:
        os.makedirs(folder, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def read_rows(path: str, header: Optional[Sequence[str]] = None) -> List[List[str]]:
    try:
        with open(path, 'r', encoding='utf-8', newline='') as f:
            rows = list(csv.reader(f))
    except (OSError, UnicodeDecodeError) as e:
        raise FormatError(f"cannot read CSV {path}: {e}") from None
    if not rows:
        raise FormatError(f"{path}: empty CSV (header row is mandatory)")
    if header is not None and tuple(rows[0]) != tuple(header):
        raise FormatError(f"{path}: expected header {','.join(header)}, found {','.join(rows[0])}")
    return rows[1:]


def write_trace(path: str, trace) -> None:
    write_rows(path, TRACE_HEADER, ((r.step, r.train_kid, r.val_kid) for r in trace))


def read_trace(path: str):
    from utils.ddss import TraceRow

    out = []
    for i, row in enumerate(read_rows(path, TRACE_HEADER), start=2):
        try:
            out.append(TraceRow(step=int(row[0]), train_kid=float(row[1]),
                                val_kid=float(row[2]) if row[2] else None))
        except (ValueError, IndexError):
            raise FormatError(f"{path}:{i}: malformed trace row {row!r}") from None
    return out


def point_header(d: int) -> List[str]:
    return [f"x{i}" for i in range(d)]


def write_points(path: str, points: np.ndarray) -> None:
    points = np.asarray(points, dtype=np.float64)
    write_rows(path, point_header(points.shape[1]), points.tolist())


def read_points(path: str) -> np.ndarray:
    rows = read_rows(path)
    try:
        data = np.array([[float(v) for v in row] for row in rows], dtype=np.float64)
    except ValueError:
        raise FormatError(f"{path}: non-numeric entry in point CSV") from None
    if data.ndim != 2 or len({len(r) for r in rows}) > 1:
        raise FormatError(f"{path}: ragged point CSV")
    if not np.all(np.isfinite(data)):
        raise FormatError(f"{path}: non-finite coordinates")
    return data


def write_trajectory(path: str, trajectory: Sequence[np.ndarray], timesteps: Sequence[float]) -> None:
    """One row per (stage, sample); stage 0 is x_K and the last stage is the emitted x_0."""
    d = np.asarray(trajectory[0]).shape[1]
    labels = list(timesteps)[::-1] + [0.0]

    def rows():
        for stage, x in enumerate(trajectory):
            for i, p in enumerate(np.asarray(x)):
                yield [stage, labels[stage], i, *p.tolist()]

    write_rows(path, ['stage', 't', 'sample', *point_header(d)], rows())
