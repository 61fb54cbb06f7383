"""Per-iteration records for every iterative routine in the package."""
from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

BASE_COLUMNS = ("iter", "residual", "fidelity", "objective", "time_ms")


@dataclass
class TraceRecord:
    iter: int
    residual: float
    fidelity: Optional[float] = None
    objective: Optional[float] = None
    time_ms: float = 0.0
    extra: dict = field(default_factory=dict)


class FixedPointTrace:
    """Ordered list of :class:`TraceRecord` with a wall clock started at creation."""

    def __init__(self):
        self.records: list[TraceRecord] = []
        self.converged = False
        self._t0 = time.perf_counter()

    def add(self, iter, residual, fidelity=None, objective=None, **extra) -> TraceRecord:
        if self.records and iter <= self.records[-1].iter:
            raise ValueError("trace iterations must be strictly increasing")
        rec = TraceRecord(
            iter=int(iter),
            residual=float(residual),
            fidelity=None if fidelity is None else float(fidelity),
            objective=None if objective is None else float(objective),
            time_ms=1e3 * (time.perf_counter() - self._t0),
            extra={k: float(v) for k, v in extra.items()},
        )
        self.records.append(rec)
        return rec

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    @property
    def residuals(self) -> list[float]:
        return [r.residual for r in self.records]

    @property
    def objectives(self) -> list[Optional[float]]:
        return [r.objective for r in self.records]

    @property
    def iterations(self) -> int:
        return len(self.records)

    @property
    def final_residual(self) -> float:
        return self.records[-1].residual if self.records else float("nan")

    def extra_columns(self) -> list[str]:
        cols: list[str] = []
        for rec in self.records:
            for key in rec.extra:
                if key not in cols:
                    cols.append(key)
        return cols

    def to_csv(self, path=None) -> str:
        """Serialise to CSV; extra per-solver columns follow the base ones."""
        extras = self.extra_columns()
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(list(BASE_COLUMNS) + extras)
        for rec in self.records:
            row = [rec.iter, repr(rec.residual), _fmt(rec.fidelity), _fmt(rec.objective),
                   f"{rec.time_ms:.3f}"]
            row += [_fmt(rec.extra.get(k)) for k in extras]
            writer.writerow(row)
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, text: str) -> "FixedPointTrace":
        """Inverse of :meth:`to_csv`; blank extra cells are left out."""
        trace = cls()
        for row in csv.DictReader(io.StringIO(text)):
            extra = {k: float(v) for k, v in row.items() if k not in BASE_COLUMNS and v != ""}
            trace.records.append(TraceRecord(
                iter=int(row["iter"]),
                residual=float(row["residual"]),
                fidelity=_parse(row["fidelity"]),
                objective=_parse(row["objective"]),
                time_ms=float(row["time_ms"]),
                extra=extra,
            ))
        return trace


def _fmt(v):
    return "" if v is None else repr(float(v))


def _parse(s):
    return None if s == "" else float(s)
