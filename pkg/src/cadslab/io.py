"""CSV dialects, run manifests and the output-directory lock.

Samples CSV: header ``label,chain,x0,x1``; dataset CSV: header ``label,x0,x1``.
Both are comma-separated with Unix newlines, no quoting, coordinates written
with 17 significant digits so 64-bit values round-trip exactly.
"""

from __future__ import annotations

import hashlib
import json
import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

SAMPLES_HEADER = ("label", "chain", "x0", "x1")
DATASET_HEADER = ("label", "x0", "x1")
LOCK_NAME = ".cadslab.lock"


class CsvFormatError(ValueError):
    pass


class OutputLocked(RuntimeError):
    pass


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_samples_csv(path, points, labels, chains=None) -> None:
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if chains is None:
        chains = np.arange(len(labels))
    lines = [",".join(SAMPLES_HEADER)]
    for lab, c, (x0, x1) in zip(labels, chains, points):
        lines.append(f"{int(lab)},{int(c)},{_fmt(x0)},{_fmt(x1)}")
    _write_text(path, "\n".join(lines) + "\n")


def write_dataset_csv(path, points, labels) -> None:
    points = np.asarray(points, dtype=np.float64)
    lines = [",".join(DATASET_HEADER)]
    for lab, (x0, x1) in zip(np.asarray(labels), points):
        lines.append(f"{int(lab)},{_fmt(x0)},{_fmt(x1)}")
    _write_text(path, "\n".join(lines) + "\n")


def _write_text(path, text: str) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def read_points_csv(path):
    """Read either CSV dialect; returns ``(points, labels, chains or None)``."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CsvFormatError(f"{path}: {exc.strerror}") from None
    rows = [r for r in text.splitlines() if r.strip()]
    if not rows:
        raise CsvFormatError(f"{path}: empty file")
    header = tuple(h.strip() for h in rows[0].split(","))
    if header not in (SAMPLES_HEADER, DATASET_HEADER):
        raise CsvFormatError(f"{path}: unexpected header {rows[0]!r}")
    width = len(header)
    labels, chains, pts = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        parts = row.split(",")
        if len(parts) != width:
            raise CsvFormatError(f"{path}:{lineno}: expected {width} fields, got {len(parts)}")
        try:
            labels.append(int(parts[0]))
            if width == 4:
                chains.append(int(parts[1]))
            pts.append((float(parts[-2]), float(parts[-1])))
        except ValueError:
            raise CsvFormatError(f"{path}:{lineno}: non-numeric field") from None
    if not pts:
        raise CsvFormatError(f"{path}: no data rows")
    points = np.array(pts, dtype=np.float64)
    if not np.all(np.isfinite(points)):
        raise CsvFormatError(f"{path}: non-finite coordinate")
    return points, np.array(labels, dtype=np.int64), (np.array(chains, dtype=np.int64) if chains else None)


def write_table_csv(path, columns, rows) -> None:
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_cell(row.get(c)) for c in columns))
    _write_text(path, "\n".join(lines) + "\n")


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return _fmt(v)
    return str(v)


def write_json(path, obj) -> None:
    _write_text(path, json.dumps(obj, indent=2, sort_keys=False, allow_nan=False) + "\n")


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    timings: Dict[str, float] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def add_input(self, name: str, path) -> None:
        self.inputs[name] = str(path)

    def add_output(self, name: str, path) -> None:
        self.outputs[name] = str(path)

    def to_dict(self) -> dict:
        def hashed(paths):
            return {k: {"path": p, "sha256": file_sha256(p)} for k, p in paths.items()}

        return {
            "command": self.command,
            "seed": self.seed,
            "config": self.config,
            "inputs": hashed(self.inputs),
            "outputs": hashed(self.outputs),
            "timings": self.timings,
            **self.extra,
        }

    def write(self, path) -> None:
        for p in list(self.inputs.values()) + list(self.outputs.values()):
            if not os.path.exists(p):
                raise FileNotFoundError(f"manifest references missing file {p}")
        write_json(path, self.to_dict())


def verify_manifest(path) -> list:
    """Return a list of problems (missing files or hash mismatches); empty if intact."""
    data = json.loads(Path(path).read_text())
    problems = []
    for group in ("inputs", "outputs"):
        for name, entry in data.get(group, {}).items():
            p = entry["path"]
            if not os.path.exists(p):
                problems.append(f"{group}.{name}: missing {p}")
            elif file_sha256(p) != entry["sha256"]:
                problems.append(f"{group}.{name}: hash mismatch for {p}")
    return problems


@contextmanager
def output_lock(directory):
    """Exclusive writer guard for an output directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise OutputLocked(f"{directory} is locked by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield directory
    finally:
        lock.unlink(missing_ok=True)


def resolve_output_dir(cli_value: Optional[str], config_value: Optional[str] = None) -> Path:
    """CLI flag wins, then the ``CADSLAB_OUTPUT_DIR`` environment variable, then config."""
    if cli_value:
        return Path(cli_value)
    env = os.environ.get("CADSLAB_OUTPUT_DIR")
    if env:
        return Path(env)
    return Path(config_value or "runs")
