"""Reading and writing run artifacts.

``density.txt``
    First line ``nx ny``; then ``ny`` lines of ``nx`` floats, bottom row
    first.  Values are written with ``repr`` so a read-back is bitwise equal.
``density.pgm`` / ``defects.pgm``
    Binary 8-bit grayscale (``P5 <w> <h> 255``), top row of the domain first.
``convergence.csv``
    One row per evaluated design including iteration 0.
``summary.json``
    Run summary; NaN becomes ``null``.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .fem import StructuredGrid

CONVERGENCE_COLUMNS = ("iter", "objective", "worst_case_compliance", "volume",
                       "design_change_inf", "inner_newton_iters", "inner_kkt_residual")
DEFECT_BACKGROUND = 128
MASK_THRESHOLD = 0.4


class ArtifactError(OSError):
    pass


def write_density(path, grid: StructuredGrid, rho):
    img = grid.to_image(rho)
    lines = [f"{grid.nx} {grid.ny}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in img]
    _write_text(path, "\n".join(lines) + "\n")


def read_density(path, grid: StructuredGrid | None = None):
    """Read ``density.txt``; returns ``(nx, ny, rho)`` in element order."""
    try:
        tokens = Path(path).read_text().split()
    except OSError as exc:
        raise ArtifactError(f"cannot read density file {path}: {exc}") from exc
    try:
        nx, ny = int(tokens[0]), int(tokens[1])
        values = np.array([float(t) for t in tokens[2:]])
    except (IndexError, ValueError) as exc:
        raise ValueError(f"{path}: malformed density file ({exc})") from exc
    if values.size != nx * ny:
        raise ValueError(f"{path}: header says {nx}x{ny} but holds {values.size} values")
    if grid is not None and (grid.nx, grid.ny) != (nx, ny):
        raise ValueError(f"{path}: density is {nx}x{ny} but the grid is {grid.nx}x{grid.ny}")
    rho = values.reshape(ny, nx).T.ravel()
    return nx, ny, rho


def write_pgm(path, pixels):
    """Write a binary PGM; ``pixels`` is (rows, cols) uint8 with row 0 at the top."""
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    try:
        with open(path, "wb") as fh:
            fh.write(f"P5 {w} {h} 255\n".encode("ascii"))
            fh.write(pixels.tobytes())
    except OSError as exc:
        raise ArtifactError(f"cannot write {path}: {exc}") from exc


def read_pgm(path):
    data = Path(path).read_bytes()
    header = data.split(maxsplit=4)
    if header[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = int(header[1]), int(header[2])
    return np.frombuffer(data[-w * h:], dtype=np.uint8).reshape(h, w)


def density_pixels(grid: StructuredGrid, rho):
    """0 -> white, 1 -> black."""
    img = np.clip(grid.to_image(rho), 0.0, 1.0)
    return np.rint(255.0 * (1.0 - img))[::-1].astype(np.uint8)


def defect_pixels(grid: StructuredGrid, delta, rho_phys, threshold=MASK_THRESHOLD):
    """delta 0 -> black, 1 -> white where ``rho_phys >= threshold``; gray elsewhere."""
    d = np.rint(255.0 * np.clip(grid.to_image(delta), 0.0, 1.0))
    mask = grid.to_image(rho_phys) >= threshold
    return np.where(mask, d, DEFECT_BACKGROUND)[::-1].astype(np.uint8)


def write_convergence(path, history):
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CONVERGENCE_COLUMNS)
            for rec in history:
                writer.writerow([_csv_value(rec.get(c, math.nan)) for c in CONVERGENCE_COLUMNS])
    except OSError as exc:
        raise ArtifactError(f"cannot write {path}: {exc}") from exc


def read_convergence(path):
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def _csv_value(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return None if not math.isfinite(obj) else float(obj)
    return obj


def write_summary(path, summary: dict):
    _write_text(path, json.dumps(jsonable(summary), indent=2, sort_keys=True) + "\n")


def _write_text(path, text):
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise ArtifactError(f"cannot write {path}: {exc}") from exc


def write_outputs(out_dir, grid: StructuredGrid, rho, rho_phys, history, summary, delta=None):
    """Write all artifacts of a run into ``out_dir`` (created if missing)."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ArtifactError(f"cannot create output directory {out}: {exc}") from exc
    write_density(out / "density.txt", grid, rho)
    write_pgm(out / "density.pgm", density_pixels(grid, rho_phys))
    if delta is not None:
        write_pgm(out / "defects.pgm", defect_pixels(grid, delta, rho_phys))
    if history is not None:
        write_convergence(out / "convergence.csv", history)
    write_summary(out / "summary.json", summary)
    return out
