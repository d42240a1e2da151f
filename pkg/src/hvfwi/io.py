"""File formats: FWIM velocity models, FWIR shot records, two-column CSV signals, PGM images.

All writers go through :func:`atomic_write` (temp file in the target directory, then rename).
"""

from __future__ import annotations

import csv
import io
import json
import os
import struct
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .numerics import Grid1D, Signal

MODEL_MAGIC = b"FWIM"
RECORD_MAGIC = b"FWIR"


class FormatError(ValueError):
    """Malformed or truncated input file."""


@contextmanager
def atomic_write(path, mode: str = "wb"):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- FWIM -------------------------------------------------------------------------


def write_model(path, c: np.ndarray, dx: float, dz: float) -> None:
    """Write speeds ``c`` of shape ``(nz, nx)``; data are stored z-major, then x."""
    c = np.asarray(c, dtype="<f4")
    if c.ndim != 2:
        raise ValueError("model array must be 2D (nz, nx)")
    nz, nx = c.shape
    with atomic_write(path) as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<IIff", nx, nz, dx, dz))
        fh.write(c.tobytes(order="C"))


def read_model(path):
    """Return ``(c, dx, dz)`` with ``c`` shaped ``(nz, nx)`` as float64."""
    raw = Path(path).read_bytes()
    if raw[:4] != MODEL_MAGIC:
        raise FormatError(f"{path}: missing FWIM magic")
    if len(raw) < 20:
        raise FormatError(f"{path}: truncated header")
    nx, nz, dx, dz = struct.unpack_from("<IIff", raw, 4)
    body = raw[20:]
    if len(body) != 4 * nx * nz:
        raise FormatError(f"{path}: expected {nx * nz} samples, found {len(body) // 4}")
    c = np.frombuffer(body, dtype="<f4").astype(float).reshape(nz, nx)
    return c, float(dx), float(dz)


# -- FWIR -------------------------------------------------------------------------


def write_record(path, traces: np.ndarray, dt: float) -> None:
    traces = np.asarray(traces, dtype="<f4")
    if traces.ndim != 2:
        raise ValueError("traces must be 2D (n_receivers, nt)")
    nr, nt = traces.shape
    with atomic_write(path) as fh:
        fh.write(RECORD_MAGIC)
        fh.write(struct.pack("<IIf", nr, nt, dt))
        fh.write(traces.tobytes(order="C"))


def read_record(path):
    """Return ``(traces, dt)`` with traces shaped ``(n_receivers, nt)``."""
    raw = Path(path).read_bytes()
    if raw[:4] != RECORD_MAGIC:
        raise FormatError(f"{path}: missing FWIR magic")
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header")
    nr, nt, dt = struct.unpack_from("<IIf", raw, 4)
    body = raw[16:]
    if len(body) != 4 * nr * nt:
        raise FormatError(f"{path}: expected {nr * nt} samples, found {len(body) // 4}")
    return np.frombuffer(body, dtype="<f4").astype(float).reshape(nr, nt), float(dt)


# -- CSV --------------------------------------------------------------------------


def write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    with atomic_write(path, "w") as fh:
        fh.write(buf.getvalue())


def read_signal_csv(path) -> Signal:
    """Read a two-column ``x,value`` CSV on a uniform grid of ``[0, 1]``.

    A non-numeric first row is treated as a header. The abscissae must be the
    uniform grid ``linspace(0, 1, n)`` up to 1e-6.
    """
    rows = []
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row or not "".join(row).strip():
                continue
            try:
                x, y = float(row[0]), float(row[1])
            except (ValueError, IndexError):
                if i == 0:
                    continue
                raise FormatError(f"{path}: line {i + 1} is not two numbers") from None
            rows.append((x, y))
    if len(rows) < 3:
        raise FormatError(f"{path}: need at least 3 samples")
    data = np.array(rows)
    grid = Grid1D(len(rows))
    if np.max(np.abs(data[:, 0] - grid.points)) > 1e-6:
        raise FormatError(f"{path}: abscissae must be a uniform grid on [0, 1]")
    return Signal(grid, data[:, 1])


def write_signal_csv(path, signal: Signal, name: str = "value") -> None:
    write_csv(path, ["x", name], zip(signal.x, signal.values))


def write_json(path, obj) -> None:
    with atomic_write(path, "w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


# -- PGM --------------------------------------------------------------------------


def write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary PGM with linear min-max scaling; row 0 is the top (shallowest z)."""
    a = np.asarray(image, dtype=float)
    lo, hi = float(a.min()), float(a.max())
    if hi > lo:
        pix = np.rint(255 * (a - lo) / (hi - lo))
    else:
        pix = np.full(a.shape, 128.0)
    pix = pix.astype(np.uint8)
    h, w = pix.shape
    with atomic_write(path) as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise FormatError(f"{path}: only 8-bit PGM supported")
    pos += 1
    return np.frombuffer(raw[pos : pos + w * h], dtype=np.uint8).reshape(h, w)
