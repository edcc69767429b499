"""Per-iteration generation records and their JSON-lines serialization."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError


def summary_path(trace_path) -> Path:
    p = Path(trace_path)
    return p.with_name(p.stem + ".summary.json") if p.suffix else p.with_name(p.name + ".summary.json")


def tokens_hash(tokens) -> str:
    arr = np.asarray(tokens, dtype="<i8")
    return hashlib.sha256(arr.tobytes()).hexdigest()[:16]


@dataclass
class GenerationTrace:
    """Append-only log of one generation session.

    ``meta`` describes the run (model shape, lengths, strategy config);
    ``records`` has one dict per iteration. ``logits`` is filled only when the
    session asked for it and is never serialized.
    """

    meta: dict = field(default_factory=dict)
    records: list[dict] = field(default_factory=list)
    logits: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    tokens: list[int] = field(default_factory=list)

    def append(self, record: dict) -> None:
        self.records.append(record)

    @property
    def iterations(self) -> int:
        return len(self.records)

    @property
    def total_flops(self) -> int:
        return sum(r["flops"] for r in self.records)

    def unmask_order(self) -> list[int]:
        return [ev[0] for r in self.records for ev in r["unmask"]]

    def output_tokens(self) -> list[int]:
        start = self.meta.get("prompt_length", 0)
        return self.tokens[start:]

    def summary(self) -> dict:
        return {
            "total_flops": self.total_flops,
            "iterations": self.iterations,
            "unmask_order": self.unmask_order(),
            "tokens": self.tokens,
            "tokens_hash": tokens_hash(self.output_tokens()),
            **self.meta,
        }

    def write(self, path) -> Path:
        """Write the JSON-lines trace and its summary; returns the summary path."""
        path = Path(path)
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")))
                fh.write("\n")
        spath = summary_path(path)
        with open(spath, "w", encoding="utf-8") as fh:
            json.dump(self.summary(), fh, sort_keys=True, indent=1)
            fh.write("\n")
        return spath

    @classmethod
    def read(cls, path) -> "GenerationTrace":
        path = Path(path)
        if not path.exists():
            raise InputError(f"trace file {path} does not exist")
        with open(path, encoding="utf-8") as fh:
            records = [json.loads(line) for line in fh if line.strip()]
        spath = summary_path(path)
        if not spath.exists():
            raise InputError(f"trace {path} has no summary file {spath.name}")
        with open(spath, encoding="utf-8") as fh:
            summary = json.load(fh)
        tokens = summary.pop("tokens")
        for key in ("total_flops", "iterations", "unmask_order", "tokens_hash"):
            summary.pop(key, None)
        return cls(meta=summary, records=records, tokens=tokens)
