"""Output plumbing: atomic file writes, checksums and run manifests."""
import hashlib
import json
import os
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np


@contextmanager
def atomic_path(path):
    """Yield a temporary path next to `path`; rename over it on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    os.close(fd)
    try:
        yield Path(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def sha256_file(path, chunk_size=1 << 16):
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(chunk_size), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _to_jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    if isinstance(obj, Path):
        return str(obj)
    return obj


def dumps(obj):
    """Deterministic JSON text (sorted keys, NaN/inf as null)."""
    return json.dumps(_to_jsonable(obj), indent=2, sort_keys=True) + "\n"


def write_json(path, obj):
    with atomic_path(path) as tmp:
        tmp.write_text(dumps(obj), encoding="utf-8")


def write_jsonl(path, records):
    with atomic_path(path) as tmp:
        with open(tmp, "w", encoding="utf-8") as handle:
            for record in records:
                handle.write(json.dumps(_to_jsonable(record), sort_keys=True) + "\n")


def write_table(path, frame, float_format="%.10g"):
    """Write a pandas DataFrame as CSV atomically."""
    with atomic_path(path) as tmp:
        frame.to_csv(tmp, index=False, float_format=float_format, lineterminator="\n")


def build_manifest(subcommand, config, version, seed, inputs=(), outputs=()):
    """Reproducibility manifest: config echo, version, seed and checksums."""
    return {
        "subcommand": subcommand,
        "version": version,
        "seed": seed,
        "config": dict(config),
        "inputs": {str(p): sha256_file(p) for p in inputs if p and Path(p).exists()},
        "outputs": {Path(p).name: sha256_file(p) for p in outputs if Path(p).exists()},
    }
