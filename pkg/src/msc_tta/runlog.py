"""Newline-delimited JSON run log: one header line, one record per event, one trailer."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

SCHEMA_VERSION = "msc-tta-log/1"

# within one tick, events are emitted in this order
EVENT_ORDER = ("transition", "predict", "ingest", "train", "broadcast")


class LogFormatError(ValueError):
    pass


@dataclass
class RunLog:
    header: dict[str, Any]
    records: list[dict[str, Any]] = field(default_factory=list)
    _frames: Any = field(default=None, repr=False, compare=False)

    @property
    def n_classes(self) -> int:
        return int(self.header["n_classes"])

    def of_kind(self, kind: str) -> list[dict[str, Any]]:
        return [r for r in self.records if r["k"] == kind]


def dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_log(path: Path, log: RunLog) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps({"k": "header", **log.header}) + "\n")
        for rec in log.records:
            fh.write(dumps(rec) + "\n")
        fh.write(dumps({"k": "end", "n_records": len(log.records)}) + "\n")


def _describe(rec: dict[str, Any] | None, lineno: int) -> str:
    if rec is None:
        return "no valid record"
    where = f"line {lineno}, kind={rec.get('k')}"
    if "t" in rec:
        where += f", t={rec['t']}"
    return where


def read_log(path: Path) -> RunLog:
    """Parse a run log, raising LogFormatError that names the last valid record."""
    path = Path(path)
    header = None
    records: list[dict[str, Any]] = []
    last, last_line = None, 0
    ended = False
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if ended:
                raise LogFormatError(f"{path}: data after end marker at line {lineno}")
            try:
                if not line.endswith("\n"):
                    raise ValueError("unterminated line")
                rec = json.loads(line)
                if not isinstance(rec, dict) or "k" not in rec:
                    raise ValueError("record without kind")
            except ValueError as exc:
                raise LogFormatError(
                    f"{path}: malformed record at line {lineno} ({exc}); "
                    f"last valid record: {_describe(last, last_line)}"
                ) from None
            if header is None:
                if rec["k"] != "header" or rec.get("schema") != SCHEMA_VERSION:
                    raise LogFormatError(f"{path}: missing or unsupported header")
                header = {k: v for k, v in rec.items() if k != "k"}
            elif rec["k"] == "end":
                if rec.get("n_records") != len(records):
                    raise LogFormatError(
                        f"{path}: end marker expects {rec.get('n_records')} records, "
                        f"found {len(records)}"
                    )
                ended = True
            else:
                records.append(rec)
            last, last_line = rec, lineno
    if header is None:
        raise LogFormatError(f"{path}: empty log")
    if not ended:
        raise LogFormatError(
            f"{path}: log truncated (no end marker); last valid record: {_describe(last, last_line)}"
        )
    return RunLog(header, records)


def write_csv(path: Path, header_line: str, columns: Iterable[str], rows: Iterable[Iterable]) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# {header_line}\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if v != v else repr(v)
    return str(v)
