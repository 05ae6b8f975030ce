import csv
import json
import logging
from pathlib import Path
from typing import Iterable

import numpy as np

from app.errors import MissingUpstreamArtifact

logger = logging.getLogger(__name__)


def _plain(value):
    """Turn numpy scalars/arrays and complex numbers into JSON-ready values."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (complex, np.complexfloating)):
        return [float(value.real), float(value.imag)]
    if isinstance(value, np.floating):
        value = float(value)
    if isinstance(value, float) and not np.isfinite(value):
        return None if np.isnan(value) else ("inf" if value > 0 else "-inf")
    return value


def artifact_path(out_dir: Path, name: str) -> Path:
    return Path(out_dir) / name


def save_json(out_dir: Path, name: str, data: dict) -> Path:
    path = artifact_path(out_dir, name)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(_plain(data), indent=2, sort_keys=True)
    path.write_text(text + "\n", encoding="utf-8")
    logger.info(f"[Artifacts] Wrote {path}")
    return path


def load_json(out_dir: Path, name: str) -> dict:
    path = artifact_path(out_dir, name)
    if not path.exists():
        raise MissingUpstreamArtifact(f"{path} not found; run the command that produces it first")
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    logger.info(f"[Artifacts] Loaded {path}")
    return data


def save_csv(out_dir: Path, name: str, rows: Iterable[dict]) -> Path:
    rows = [_plain(r) for r in rows]
    path = artifact_path(out_dir, name)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields: list[str] = []
    for row in rows:
        fields.extend(k for k in row if k not in fields)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    logger.info(f"[Artifacts] Wrote {len(rows)} rows to {path}")
    return path


def save_text(out_dir: Path, name: str, text: str) -> Path:
    path = artifact_path(out_dir, name)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    logger.info(f"[Artifacts] Wrote {path}")
    return path


def save_columns(out_dir: Path, name: str, header: list[str], columns: list) -> Path:
    """Whitespace-separated plot data with a commented header line."""
    path = artifact_path(out_dir, name)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["# " + " ".join(header)]
    for row in zip(*columns):
        lines.append(" ".join(repr(float(v)) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info(f"[Artifacts] Wrote {path}")
    return path


def exists(out_dir: Path, name: str) -> bool:
    return artifact_path(out_dir, name).exists()
