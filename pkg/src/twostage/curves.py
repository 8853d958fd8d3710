"""Learning-dynamics records and their CSV form."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

CURVE_COLUMNS = ("iter", "loss", "base_acc", "novel_acc")


@dataclass(frozen=True)
class CurveRecord:
    iteration: int
    loss: float
    base_acc: float
    novel_acc: float | None


@dataclass
class DynamicsCurve:
    records: list[CurveRecord] = field(default_factory=list)
    strategy: str = ""
    config_hash: str = ""

    def append(self, record: CurveRecord) -> None:
        if self.records and record.iteration <= self.records[-1].iteration:
            raise ValueError("curve iterations must be strictly increasing")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def iterations(self) -> list[int]:
        return [r.iteration for r in self.records]

    @property
    def base(self) -> list[float]:
        return [r.base_acc for r in self.records]

    @property
    def novel(self) -> list[float]:
        return [r.novel_acc for r in self.records]

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.records]

    def to_csv(self) -> str:
        buf = io.StringIO()
        if self.config_hash:
            buf.write(f"# config_hash={self.config_hash} strategy={self.strategy}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for r in self.records:
            w.writerow([r.iteration, f"{r.loss:.10g}", f"{r.base_acc:.6f}",
                        "" if r.novel_acc is None else f"{r.novel_acc:.6f}"])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "DynamicsCurve":
        lines = text.splitlines()
        meta = {}
        if lines and lines[0].startswith("#"):
            for part in lines[0][1:].split():
                key, _, val = part.partition("=")
                meta[key] = val
            lines = lines[1:]
        rows = list(csv.DictReader(lines))
        curve = cls(strategy=meta.get("strategy", ""), config_hash=meta.get("config_hash", ""))
        for row in rows:
            curve.append(CurveRecord(int(row["iter"]), float(row["loss"]), float(row["base_acc"]),
                                     float(row["novel_acc"]) if row["novel_acc"] else None))
        return curve
