"""On-disk artifact formats.

CSV files open with ``# key: value`` metadata lines, JSON files carry a
top-level ``"meta"`` object, and posterior draws also go to a compact binary
file::

    magic  b"PSTDRAW\\0"   8 bytes
    version                uint32 little-endian
    header length          uint32 little-endian
    header                 UTF-8 JSON (shapes, names, layout hash, metadata)
    draws                  float64 little-endian, C order, (chains, draws, dim)
    log posterior          float64 little-endian, (chains, draws)
"""
from __future__ import annotations

import csv
import hashlib
import json
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .sampler import PosteriorDraws

__all__ = [
    "ArtifactError",
    "BINARY_MAGIC",
    "BINARY_VERSION",
    "fmt",
    "write_table",
    "read_table",
    "read_meta",
    "write_json",
    "read_json",
    "write_draws_csv",
    "write_draws_binary",
    "read_draws_binary",
    "write_traces",
    "file_sha256",
]

BINARY_MAGIC = b"PSTDRAW\0"
BINARY_VERSION = 1
_HEAD = struct.Struct("<8sII")


class ArtifactError(ValueError):
    pass


def fmt(v) -> str:
    """Shortest round-trip text for a number; other values via ``str``."""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return "" if v is None else str(v)


def _meta_lines(meta: dict) -> list[str]:
    return [f"# {k}: {json.dumps(v, sort_keys=True) if isinstance(v, (dict, list)) else v}"
            for k, v in sorted(meta.items())]


def write_table(path: str | Path, header: Sequence[str], rows: Iterable[Sequence],
                meta: dict) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        for line in _meta_lines(meta):
            fh.write(line + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])
    return path


def _parse_meta_line(line: str) -> tuple[str, object]:
    key, _, value = line[1:].strip().partition(":")
    value = value.strip()
    if value[:1] in "{[":
        try:
            return key.strip(), json.loads(value)
        except json.JSONDecodeError:
            pass
    return key.strip(), value


def read_table(path: str | Path) -> tuple[dict, list[str], list[list[str]]]:
    """Return ``(meta, header, rows)`` of a table written by :func:`write_table`."""
    meta, lines = {}, []
    with Path(path).open(encoding="utf-8", newline="") as fh:
        for line in fh:
            if line.startswith("#"):
                k, v = _parse_meta_line(line)
                meta[k] = v
            else:
                lines.append(line)
    rows = list(csv.reader(lines))
    if not rows:
        raise ArtifactError(f"{path}: no header row")
    return meta, rows[0], rows[1:]


def write_json(path: str | Path, payload: dict, meta: dict) -> Path:
    path = Path(path)
    doc = {"meta": meta, **payload}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=True) + "\n",
                    encoding="utf-8")
    return path


def read_json(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def write_draws_csv(draws: PosteriorDraws, path: str | Path, meta: dict) -> Path:
    c, m, _ = draws.draws.shape
    rows = ([ci, mi, draws.log_posterior[ci, mi], *draws.draws[ci, mi]]
            for ci in range(c) for mi in range(m))
    return write_table(path, ["chain", "draw", "log_posterior", *draws.names], rows,
                       {**meta, "layout_hash": draws.layout_hash})


def write_traces(draws: PosteriorDraws, path: str | Path, meta: dict) -> Path:
    """Warmup and sampling iterations per chain, for trace plots."""
    warm = draws.warmup_draws
    c = draws.draws.shape[0]
    n_warm = 0 if warm is None else warm.shape[1]

    def rows():
        for ci in range(c):
            for it in range(n_warm):
                yield [ci, it, "warmup", *warm[ci, it]]
            for mi in range(draws.draws.shape[1]):
                yield [ci, n_warm + mi, "sampling", *draws.draws[ci, mi]]

    return write_table(path, ["chain", "iteration", "phase", *draws.names], rows(),
                       {**meta, "layout_hash": draws.layout_hash})


def write_draws_binary(draws: PosteriorDraws, path: str | Path, meta: dict) -> Path:
    path = Path(path)
    header = {
        "shape": list(draws.draws.shape),
        "names": list(draws.names),
        "layout_hash": draws.layout_hash,
        "accept_stats": [float(v) for v in draws.accept_stats],
        "divergence_count": [int(v) for v in draws.divergence_count],
        "warmup_divergences": [int(v) for v in draws.warmup_divergences],
        "step_size": [float(v) for v in draws.step_size],
        "mass": np.asarray(draws.mass, dtype=float).tolist(),
        "iterations_run": [int(v) for v in draws.iterations_run],
        "sampler": draws.meta,
        "meta": meta,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(_HEAD.pack(BINARY_MAGIC, BINARY_VERSION, len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(draws.draws, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(draws.log_posterior, dtype="<f8").tobytes())
    return path


def _read_binary_header(fh, path) -> dict:
    raw = fh.read(_HEAD.size)
    if len(raw) < _HEAD.size:
        raise ArtifactError(f"{path}: truncated header")
    magic, version, n = _HEAD.unpack(raw)
    if magic != BINARY_MAGIC:
        raise ArtifactError(f"{path}: not a pstrata draws file")
    if version != BINARY_VERSION:
        raise ArtifactError(f"{path}: unsupported draws format version {version}")
    try:
        return json.loads(fh.read(n).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArtifactError(f"{path}: corrupt header") from exc


def read_draws_binary(path: str | Path) -> PosteriorDraws:
    path = Path(path)
    with path.open("rb") as fh:
        h = _read_binary_header(fh, path)
        c, m, d = h["shape"]
        body = fh.read()
    need = 8 * (c * m * d + c * m)
    if len(body) != need:
        raise ArtifactError(f"{path}: expected {need} payload bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype="<f8")
    out = PosteriorDraws(
        draws=arr[:c * m * d].reshape(c, m, d).copy(),
        log_posterior=arr[c * m * d:].reshape(c, m).copy(),
        accept_stats=np.array(h["accept_stats"]),
        divergence_count=np.array(h["divergence_count"], dtype=int),
        step_size=np.array(h["step_size"]),
        mass=np.array(h["mass"]),
        names=list(h["names"]),
        warmup_divergences=np.array(h["warmup_divergences"], dtype=int),
        iterations_run=np.array(h["iterations_run"], dtype=int),
        meta={**h.get("sampler", {}), "artifact": h["meta"]},
    )
    out.layout_hash = h["layout_hash"]
    return out


def read_meta(path: str | Path) -> dict:
    """Metadata stamp of any pstrata artifact (CSV, JSON or binary draws)."""
    path = Path(path)
    if path.suffix == ".json":
        return dict(read_json(path).get("meta") or {})
    if path.suffix == ".bin":
        with path.open("rb") as fh:
            return dict(_read_binary_header(fh, path).get("meta") or {})
    meta = {}
    with path.open(encoding="utf-8") as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            k, v = _parse_meta_line(line)
            meta[k] = v
    return meta


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
