"""JSONL ingestion and persistence, run manifests, and plot-data reports.

All writers emit one record per line, UTF-8, with stable field order, so a
rerun under the same manifest reproduces files byte for byte. Ingestion
validates each record, skips invalid ones with a line-numbered diagnostic,
and keeps going.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Iterable, Optional, Sequence

from .answers import normalize_answer
from .types import Table, TableSample, Trajectory, validate_sample

INGEST_FORMATS = ("canonical", "wtq_like", "hitab_like", "finqa_like")


def iter_jsonl(path: str):
    """Yield (line_number, record) pairs; malformed JSON raises with the
    offending line number."""
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            try:
                obj = json.loads(stripped)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{lineno}: malformed JSON line: {e}") from e
            if not isinstance(obj, dict):
                raise ValueError(f"{path}:{lineno}: each JSONL line must be an object")
            yield lineno, obj


def read_jsonl(path: str) -> list[dict]:
    return [rec for _, rec in iter_jsonl(path)]


def write_jsonl(path: str, records: Iterable[dict]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, ensure_ascii=False))
            f.write("\n")
            n += 1
    return n


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _answers_list(value) -> list[str]:
    if isinstance(value, (str, int, float, bool)):
        return [str(value)]
    if isinstance(value, list) and value:
        return [str(v) for v in value]
    raise ValueError("answers must be a scalar or a non-empty list")


def _from_canonical(rec: dict) -> TableSample:
    return TableSample.from_dict(rec)


def _from_wtq(rec: dict) -> TableSample:
    table = rec["table"]
    rows = [list(map(str, table["header"]))] + [list(map(str, r)) for r in table["rows"]]
    raw = _answers_list(rec["answers"])
    return TableSample(
        id=str(rec["id"]),
        table=Table.from_rows(rows, has_header=True),
        question=str(rec["question"]),
        gold_answers=tuple(normalize_answer(a) for a in raw),
        source="wtq_like",
        gold_answers_raw=tuple(raw),
    )


def _from_hitab(rec: dict) -> TableSample:
    cells = [list(map(str, r)) for r in rec["table"]["cells"]]
    raw = _answers_list(rec["answer"])
    return TableSample(
        id=str(rec["id"]),
        table=Table.from_rows(cells, has_header=True),
        question=str(rec["question"]),
        gold_answers=tuple(normalize_answer(a) for a in raw),
        source="hitab_like",
        gold_answers_raw=tuple(raw),
    )


def _from_finqa(rec: dict) -> TableSample:
    rows = [list(map(str, r)) for r in rec["table"]]
    raw = _answers_list(rec["answer"])
    return TableSample(
        id=str(rec["id"]),
        table=Table.from_rows(rows, has_header=True),
        question=str(rec["question"]),
        gold_answers=tuple(normalize_answer(a) for a in raw),
        source="finqa_like",
        gold_answers_raw=tuple(raw),
    )


_ADAPTERS = {
    "canonical": _from_canonical,
    "wtq_like": _from_wtq,
    "hitab_like": _from_hitab,
    "finqa_like": _from_finqa,
}


@dataclass(frozen=True)
class IngestResult:
    samples: list[TableSample]
    skipped: list[tuple[int, str]]

    @property
    def n_loaded(self) -> int:
        return len(self.samples)

    @property
    def n_skipped(self) -> int:
        return len(self.skipped)

    def summary(self) -> str:
        return f"loaded {self.n_loaded} samples, skipped {self.n_skipped}"


def ingest_samples(path: str, format: str = "canonical") -> IngestResult:
    """Load and validate samples; invalid records are reported with their
    line numbers and skipped, never silently dropped."""
    if format not in _ADAPTERS:
        raise ValueError(f"unknown format {format!r}; expected one of {INGEST_FORMATS}")
    adapter = _ADAPTERS[format]
    samples: list[TableSample] = []
    skipped: list[tuple[int, str]] = []
    for lineno, rec in iter_jsonl(path):
        try:
            sample = adapter(rec)
        except (KeyError, TypeError, ValueError) as e:
            skipped.append((lineno, f"unparseable record: {e}"))
            continue
        violations = validate_sample(sample)
        if violations:
            skipped.append((lineno, "; ".join(violations)))
            continue
        samples.append(sample)
    return IngestResult(samples=samples, skipped=skipped)


def export_samples(samples: Sequence[TableSample], path: str) -> int:
    return write_jsonl(path, (s.to_dict() for s in samples))


def read_trajectories(path: str) -> list[Trajectory]:
    return [Trajectory.from_dict(rec) for _, rec in iter_jsonl(path)]


def write_trajectories(trajectories: Sequence[Trajectory], path: str) -> int:
    return write_jsonl(path, (t.to_dict() for t in trajectories))


@dataclass
class RunManifest:
    """Frozen record of everything needed to reproduce a run."""

    config: dict
    code_version: str
    input_digests: dict[str, str] = field(default_factory=dict)
    started_at: Optional[str] = None
    finished_at: Optional[str] = None

    @staticmethod
    def now() -> str:
        return datetime.now(timezone.utc).isoformat()

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "code_version": self.code_version,
            "input_digests": self.input_digests,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        return cls(
            config=dict(d["config"]),
            code_version=str(d["code_version"]),
            input_digests=dict(d.get("input_digests", {})),
            started_at=d.get("started_at"),
            finished_at=d.get("finished_at"),
        )


def write_manifest(manifest: RunManifest, out_dir: str) -> str:
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest.to_dict(), f, indent=2, ensure_ascii=False)
        f.write("\n")
    return path


def read_manifest(out_dir: str) -> RunManifest:
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "r", encoding="utf-8") as f:
        return RunManifest.from_dict(json.load(f))


@dataclass(frozen=True)
class ReportBundle:
    files: dict[str, str]
    summary: str
    n_steps: int


_STEP_FIELDS = ("step", "stage", "mean_reward", "objective")
_BUCKET_FIELDS = ("step", "active", "review", "excluded")


def _write_csv(path: str, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(str(v) for v in row) + "\n")


def emit_report(metrics_paths: Sequence[str], out_dir: str) -> ReportBundle:
    """Merge metrics files into plot-ready CSVs plus a text summary.

    Emits step-vs-reward, bucket-sizes-vs-step, and k-vs-pass@k tables;
    no graphics rendering. An empty input produces an explicit "no data"
    marker rather than an empty directory.
    """
    os.makedirs(out_dir, exist_ok=True)
    step_rows: list[tuple] = []
    bucket_rows: list[tuple] = []
    pass_rows: dict[int, float] = {}
    for path in metrics_paths:
        for lineno, rec in iter_jsonl(path):
            kind = rec.get("kind")
            if kind == "step":
                try:
                    step_rows.append(tuple(rec[f] for f in _STEP_FIELDS))
                    if "active" in rec:
                        bucket_rows.append(tuple(rec[f] for f in _BUCKET_FIELDS))
                except KeyError as e:
                    raise ValueError(f"{path}:{lineno}: step record missing field {e}") from e
            elif kind == "pass_at_k":
                try:
                    pass_rows[int(rec["k"])] = float(rec["value"])
                except (KeyError, TypeError) as e:
                    raise ValueError(f"{path}:{lineno}: bad pass_at_k record: {e}") from e
            elif kind is None:
                raise ValueError(f"{path}:{lineno}: metrics record has no 'kind'")

    files: dict[str, str] = {}
    lines: list[str] = []
    if not step_rows and not pass_rows:
        lines.append("no data")
    if step_rows:
        path = os.path.join(out_dir, "reward_vs_step.csv")
        _write_csv(path, _STEP_FIELDS, step_rows)
        files["reward_vs_step"] = path
        lines.append(f"steps: {len(step_rows)}")
        lines.append(f"final mean_reward: {step_rows[-1][2]}")
    if bucket_rows:
        path = os.path.join(out_dir, "buckets_vs_step.csv")
        _write_csv(path, _BUCKET_FIELDS, bucket_rows)
        files["buckets_vs_step"] = path
        lines.append(f"final buckets (active/review/excluded): {bucket_rows[-1][1:]}")
    if pass_rows:
        path = os.path.join(out_dir, "pass_at_k.csv")
        ordered = sorted(pass_rows.items())
        _write_csv(path, ("k", "value"), ordered)
        files["pass_at_k"] = path
        lines.append("pass@k: " + ", ".join(f"{k}:{v:.4f}" for k, v in ordered))

    summary = "\n".join(lines) + "\n"
    summary_path = os.path.join(out_dir, "summary.txt")
    with open(summary_path, "w", encoding="utf-8") as f:
        f.write(summary)
    files["summary"] = summary_path
    return ReportBundle(files=files, summary=summary, n_steps=len(step_rows))
