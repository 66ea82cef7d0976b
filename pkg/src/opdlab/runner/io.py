"""Run-directory persistence. Every file written here carries the config hash."""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path
from typing import Iterable, Sequence

MANIFEST = "MANIFEST"
NONDETERMINISTIC_FIELDS = ("wallclock_ms",)


def jsonl_header(config_hash: str, kind: str) -> dict:
    return {"_header": {"config_hash": config_hash, "kind": kind}}


class MetricsWriter:
    """Append-only JSONL stream whose first line is the header record."""

    def __init__(self, path, config_hash: str, resume_from_step: int | None = None):
        self.path = Path(path)
        if resume_from_step is None or not self.path.exists():
            self.path.write_text(json.dumps(jsonl_header(config_hash, "metrics")) + "\n",
                                 encoding="utf-8")
        else:
            kept = [ln for ln in self.path.read_text(encoding="utf-8").splitlines()
                    if _keep(ln, resume_from_step)]
            self.path.write_text("".join(ln + "\n" for ln in kept), encoding="utf-8")

    def write(self, record: dict) -> None:
        with open(self.path, "a", encoding="utf-8", newline="\n") as f:
            f.write(json.dumps(record, sort_keys=False) + "\n")


def _keep(line: str, step: int) -> bool:
    if not line.strip():
        return False
    rec = json.loads(line)
    return "_header" in rec or rec.get("step", 0) <= step


def read_jsonl(path) -> list[dict]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            rec = json.loads(line)
            if "_header" not in rec:
                out.append(rec)
    return out


def read_header(path) -> dict | None:
    with open(path, encoding="utf-8") as f:
        first = f.readline()
    try:
        rec = json.loads(first)
    except json.JSONDecodeError:
        return None
    return rec.get("_header") if isinstance(rec, dict) else None


def strip_nondeterministic(records: Iterable[dict]) -> list[dict]:
    return [{k: v for k, v in r.items() if k not in NONDETERMINISTIC_FIELDS} for r in records]


def write_json(path, obj: dict, config_hash: str) -> None:
    Path(path).write_text(json.dumps({"config_hash": config_hash, **obj}, indent=2) + "\n",
                          encoding="utf-8")


def write_csv(path, rows: Sequence[dict], config_hash: str, columns: Sequence[str] | None = None) -> None:
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(f"# config_hash = {config_hash}\n")
        w = csv.DictWriter(f, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: "" if r.get(k) is None else r.get(k) for k in columns})


def write_text(path, text: str, config_hash: str) -> None:
    Path(path).write_text(f"# config_hash = {config_hash}\n{text.rstrip()}\n", encoding="utf-8")


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(run_dir, config_hash: str) -> Path:
    """List every file under ``run_dir`` (except the manifest) with its size."""
    run_dir = Path(run_dir)
    lines = [f"config_hash {config_hash}"]
    for p in sorted(run_dir.rglob("*")):
        if p.is_file() and p.name != MANIFEST:
            lines.append(f"{p.relative_to(run_dir).as_posix()} {p.stat().st_size}")
    out = run_dir / MANIFEST
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out
