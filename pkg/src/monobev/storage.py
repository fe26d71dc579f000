"""File formats: netpbm images, a binary grid container, CSV and YAML.

Pixmaps use the binary netpbm trio (P4 bitmaps, P5 graymaps, P6 pixmaps,
maxval 255).  Grids serialise to a small self-describing binary container.
Run outputs are tied together by a JSON manifest of SHA-256 digests, which
is how corruption or nondeterminism is detected -- the payload formats
themselves carry no checksums.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import yaml

from .errors import ShapeMismatchError
from .grid import BevGrid, GridSpec

GRID_MAGIC = b"BEVGRID\x00"
GRID_VERSION = 1

# ---------------------------------------------------------------------------
# netpbm


def _write_netpbm_header(fh, magic: str, width: int, height: int, maxval=255):
    fh.write(f"{magic}\n{width} {height}\n".encode("ascii"))
    if magic != "P4":
        fh.write(f"{maxval}\n".encode("ascii"))


def _read_netpbm_tokens(data: bytes, count: int):
    """First ``count`` whitespace-separated tokens, honouring '#' comments.

    Returns the tokens and the offset just past the single whitespace byte
    that terminates the header.
    """
    tokens = []
    i = 0
    while len(tokens) < count:
        if i >= len(data):
            raise ValueError("truncated netpbm header")
        b = data[i : i + 1]
        if b == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
        elif b.isspace():
            i += 1
        else:
            start = i
            while i < len(data) and not data[i : i + 1].isspace() and data[i : i + 1] != b"#":
                i += 1
            tokens.append(data[start:i])
    if i >= len(data) or not data[i : i + 1].isspace():
        raise ValueError("malformed netpbm header")
    return tokens, i + 1


def _quantise(values: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(values, dtype=float) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, image: np.ndarray):
    """(H, W, 3) floats in [0, 1] to a binary P6 file."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeMismatchError(f"expected (H, W, 3), got {image.shape}")
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        _write_netpbm_header(fh, "P6", w, h)
        fh.write(_quantise(image).tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, offset = _read_netpbm_tokens(data, 4)
    if tokens[0] != b"P6":
        raise ValueError(f"not a binary pixmap: {tokens[0]!r}")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    raster = np.frombuffer(data, dtype=np.uint8, count=h * w * 3, offset=offset)
    return raster.reshape(h, w, 3).astype(float) / maxval


def write_pgm(path, values: np.ndarray):
    """(H, W) floats in [0, 1] to a binary P5 file."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise ShapeMismatchError(f"expected (H, W), got {values.shape}")
    h, w = values.shape
    with open(path, "wb") as fh:
        _write_netpbm_header(fh, "P5", w, h)
        fh.write(_quantise(values).tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, offset = _read_netpbm_tokens(data, 4)
    if tokens[0] != b"P5":
        raise ValueError(f"not a binary graymap: {tokens[0]!r}")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    raster = np.frombuffer(data, dtype=np.uint8, count=h * w, offset=offset)
    return raster.reshape(h, w).astype(float) / maxval


def write_pbm(path, mask: np.ndarray):
    """(H, W) booleans to a binary P4 file; True pixels are black (bit 1)."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ShapeMismatchError(f"expected (H, W), got {mask.shape}")
    h, w = mask.shape
    with open(path, "wb") as fh:
        _write_netpbm_header(fh, "P4", w, h)
        fh.write(np.packbits(mask, axis=1).tobytes())


def read_pbm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, offset = _read_netpbm_tokens(data, 3)
    if tokens[0] != b"P4":
        raise ValueError(f"not a binary bitmap: {tokens[0]!r}")
    w, h = int(tokens[1]), int(tokens[2])
    row_bytes = (w + 7) // 8
    raster = np.frombuffer(data, dtype=np.uint8, count=h * row_bytes, offset=offset)
    bits = np.unpackbits(raster.reshape(h, row_bytes), axis=1)[:, :w]
    return bits.astype(bool)


# ---------------------------------------------------------------------------
# Binary grid container

_GRID_HEADER = struct.Struct("<I d d d d d I I I")


def write_grid(path, grid: BevGrid):
    """Magic, version, the grid's metric spec, then float64 cells in C order."""
    spec = grid.spec
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write(
            _GRID_HEADER.pack(
                GRID_VERSION,
                spec.resolution,
                spec.lateral_min,
                spec.lateral_max,
                spec.longitudinal_min,
                spec.longitudinal_max,
                spec.rows,
                spec.cols,
                spec.channels,
            )
        )
        fh.write(np.ascontiguousarray(grid.data, dtype=np.float64).tobytes())


def read_grid(path) -> BevGrid:
    data = Path(path).read_bytes()
    if data[: len(GRID_MAGIC)] != GRID_MAGIC:
        raise ValueError(f"{path}: not a grid container")
    header = data[len(GRID_MAGIC) : len(GRID_MAGIC) + _GRID_HEADER.size]
    if len(header) < _GRID_HEADER.size:
        raise ValueError(f"{path}: truncated header")
    version, res, lat0, lat1, lon0, lon1, rows, cols, channels = _GRID_HEADER.unpack(header)
    if version != GRID_VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    payload = data[len(GRID_MAGIC) + _GRID_HEADER.size :]
    expected = rows * cols * channels * 8
    if len(payload) != expected:
        raise ValueError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    values = np.frombuffer(payload, dtype="<f8").reshape(rows, cols, channels).copy()
    spec = GridSpec(res, lat0, lat1, lon0, lon1, rows, cols, channels)
    return BevGrid(spec, values)


# ---------------------------------------------------------------------------
# CSV / YAML / JSON manifest


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if header is not None:
            writer.writerow(header)
        writer.writerows(rows)


def read_csv(path):
    """Returns (header, rows) with every field as a string."""
    with open(path, "r", newline="") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    if not rows:
        return [], []
    return rows[0], rows[1:]


def save_yaml(path, document):
    with open(path, "w") as fh:
        yaml.safe_dump(document, fh, sort_keys=False)


def load_yaml(path):
    with open(path) as fh:
        return yaml.safe_load(fh)


def file_digest(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(path, files, base_dir=None):
    """JSON manifest of SHA-256 digests for the given files.

    Paths are stored relative to ``base_dir`` (default: the manifest's
    directory) and sorted, so identical outputs give identical manifests.
    """
    path = Path(path)
    base = Path(base_dir) if base_dir is not None else path.parent
    entries = {}
    for f in files:
        f = Path(f)
        rel = f.relative_to(base).as_posix()
        entries[rel] = {"sha256": file_digest(f), "bytes": f.stat().st_size}
    document = {"files": {k: entries[k] for k in sorted(entries)}}
    with open(path, "w") as fh:
        json.dump(document, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return document


def verify_manifest(path, base_dir=None):
    """List of problems ('missing: x' / 'digest mismatch: x'); empty when clean."""
    path = Path(path)
    base = Path(base_dir) if base_dir is not None else path.parent
    with open(path) as fh:
        document = json.load(fh)
    problems = []
    for rel, entry in document["files"].items():
        target = base / rel
        if not target.exists():
            problems.append(f"missing: {rel}")
        elif file_digest(target) != entry["sha256"]:
            problems.append(f"digest mismatch: {rel}")
    return problems
