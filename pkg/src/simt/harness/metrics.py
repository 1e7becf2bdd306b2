"""Metrics rows and their CSV serialization."""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import astuple, dataclass, fields

COLUMNS = ("step", "split", "task_loss", "kd_loss", "total_loss", "accuracy_or_return",
           "wall_ms", "eval_network")


@dataclass(frozen=True)
class MetricsRow:
    step: int
    split: str            # train | val | test
    task_loss: float
    kd_loss: float
    total_loss: float
    accuracy_or_return: float
    wall_ms: float
    eval_network: str     # theta | momentum

    def __post_init__(self):
        if self.split not in ("train", "val", "test"):
            raise ValueError(f"bad split {self.split!r}")
        if self.eval_network not in ("theta", "momentum"):
            raise ValueError(f"bad eval_network {self.eval_network!r}")

    def consistent(self, lam: float, tol: float = 1e-9) -> bool:
        """``total = (1 - lam) * task + lam * kd`` up to ``tol`` (relative to scale)."""
        expect = (1.0 - lam) * self.task_loss + lam * self.kd_loss
        scale = max(1.0, abs(expect))
        return abs(self.total_loss - expect) <= tol * scale


assert tuple(f.name for f in fields(MetricsRow)) == COLUMNS


def _fmt(x) -> str:
    if isinstance(x, float):
        # repr round-trips exactly, so equal runs give byte-equal files
        return "nan" if math.isnan(x) else repr(x)
    return str(x)


def format_row(row: MetricsRow) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerow([_fmt(x) for x in astuple(row)])
    return buf.getvalue()


class MetricsWriter:
    """Appends rows to ``path``; the header is written once for a new file."""

    def __init__(self, path: str | os.PathLike, truncate_after: int | None = None):
        self.path = os.fspath(path)
        if truncate_after is not None and os.path.exists(self.path):
            kept = [r for r in read_rows(self.path)
                    if r.step <= truncate_after and r.split != "test"]
            with open(self.path, "w", encoding="utf-8", newline="") as f:
                f.write(",".join(COLUMNS) + "\n")
                f.writelines(format_row(r) for r in kept)
        elif not os.path.exists(self.path) or truncate_after is None:
            with open(self.path, "w", encoding="utf-8", newline="") as f:
                f.write(",".join(COLUMNS) + "\n")

    def write(self, row: MetricsRow) -> None:
        with open(self.path, "a", encoding="utf-8", newline="") as f:
            f.write(format_row(row))


def read_rows(path: str | os.PathLike) -> list[MetricsRow]:
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if tuple(header) != COLUMNS:
            raise ValueError(f"unexpected metrics header {header}")
        return [MetricsRow(int(r[0]), r[1], float(r[2]), float(r[3]), float(r[4]), float(r[5]),
                           float(r[6]), r[7]) for r in reader]
