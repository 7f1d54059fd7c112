"""Binary and text codecs: PMAP probability maps, PGM/PPM rasters, JSONL and CSV.

All writers produce byte-deterministic output so experiment artifacts can be
compared with ``cmp``.
"""

import csv
import io
import json
import struct
import warnings
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from boxquery._validation import PROB_ATOL, DataError
from boxquery.clickcost import Polygon

PMAP_MAGIC = b"PMAP"
PMAP_VERSION = 1
_PMAP_HEADER = struct.Struct("<4sIIII")

RESULTS_HEADER = ("iteration", "run", "strategy", "cost_a", "cost_b", "cost_p", "miou", "c_p", "c_i", "c_b", "c_c")
QUERY_KEYS = ("image_id", "row", "col", "b", "score", "strategy", "iteration")


@contextmanager
def _open(target, mode):
    if hasattr(target, "read") or hasattr(target, "write"):
        yield target
    else:
        with open(target, mode) as fh:
            yield fh


def fmt_float(x):
    """Six significant digits, locale independent."""
    return f"{float(x):.6g}"


def round6(x):
    return float(fmt_float(x))


# --- PMAP -----------------------------------------------------------------

def write_pmap(p, sink):
    p = np.asarray(p, dtype="<f4")
    if p.ndim != 3:
        raise ValueError(f"prob map must be (H, W, C), got {p.shape}")
    h, w, c = p.shape
    with _open(sink, "wb") as fh:
        fh.write(_PMAP_HEADER.pack(PMAP_MAGIC, PMAP_VERSION, h, w, c))
        fh.write(np.ascontiguousarray(p).tobytes())


def read_pmap(source, strict=True):
    """Read a PMAP file; denormalized pixels raise in strict mode and warn otherwise."""
    with _open(source, "rb") as fh:
        head = fh.read(_PMAP_HEADER.size)
        if len(head) < _PMAP_HEADER.size:
            raise DataError("truncated PMAP header")
        magic, version, h, w, c = _PMAP_HEADER.unpack(head)
        if magic != PMAP_MAGIC:
            raise DataError(f"bad PMAP magic {magic!r}")
        if version != PMAP_VERSION:
            raise DataError(f"unsupported PMAP version {version}")
        n = h * w * c * 4
        payload = fh.read(n)
        if len(payload) < n:
            raise DataError(f"truncated PMAP payload: expected {n} bytes, got {len(payload)}")
    p = np.frombuffer(payload, dtype="<f4").reshape(h, w, c).astype(np.float32)
    if h * w:
        dev = np.abs(p.sum(axis=2, dtype=np.float64) - 1.0).max()
        if dev > PROB_ATOL or not np.all(np.isfinite(p)):
            msg = f"PMAP pixels not normalized (max deviation {dev:.3g})"
            if strict:
                raise DataError(msg)
            warnings.warn(msg, stacklevel=2)
    return p


# --- PGM / PPM ------------------------------------------------------------

def _read_token(fh):
    token = b""
    while True:
        ch = fh.read(1)
        if not ch:
            break
        if ch == b"#" and not token:
            while ch not in (b"\n", b"\r", b""):
                ch = fh.read(1)
            continue
        if ch.isspace():
            if token:
                break
            continue
        token += ch
    return token


def _read_netpbm(source, expected_magic, channels, maxval):
    with _open(source, "rb") as fh:
        magic = fh.read(2)
        if magic in (b"P1", b"P2", b"P3", b"P4"):
            raise DataError(f"unsupported netpbm format {magic.decode()} (only binary P5/P6)")
        if magic != expected_magic:
            raise DataError(f"expected {expected_magic.decode()} header, got {magic!r}")
        try:
            width, height, found = (int(_read_token(fh)) for _ in range(3))
        except ValueError as exc:
            raise DataError("malformed netpbm header") from exc
        if not 0 < found < 65536:
            raise DataError(f"invalid maxval {found}")
        if maxval is not None and found != maxval:
            raise DataError(f"maxval mismatch: file has {found}, expected {maxval}")
        dtype = np.dtype(">u2") if found > 255 else np.dtype("u1")
        n = width * height * channels * dtype.itemsize
        data = fh.read(n)
        if len(data) < n:
            raise DataError("truncated netpbm payload")
    arr = np.frombuffer(data, dtype=dtype)
    if arr.size and arr.max() > found:
        raise DataError("pixel value exceeds maxval")
    shape = (height, width, channels) if channels > 1 else (height, width)
    return arr.reshape(shape).astype(np.uint16 if found > 255 else np.uint8)


def _write_netpbm(sink, arr, magic, maxval):
    arr = np.asarray(arr)
    if maxval is None:
        maxval = 255 if arr.size == 0 or arr.max() <= 255 else 65535
    if not 0 < maxval < 65536:
        raise ValueError(f"invalid maxval {maxval}")
    if arr.size and (arr.min() < 0 or arr.max() > maxval):
        raise ValueError(f"values outside [0, {maxval}]")
    dtype = ">u2" if maxval > 255 else "u1"
    h, w = arr.shape[:2]
    with _open(sink, "wb") as fh:
        fh.write(b"%s\n%d %d\n%d\n" % (magic, w, h, maxval))
        fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def read_pgm(source, maxval=None):
    return _read_netpbm(source, b"P5", 1, maxval)


def write_pgm(sink, arr, maxval=None):
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ValueError("PGM data must be 2-D")
    _write_netpbm(sink, arr, b"P5", maxval)


def read_ppm(source, maxval=None):
    return _read_netpbm(source, b"P6", 3, maxval)


def write_ppm(sink, arr, maxval=None):
    arr = np.asarray(arr)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError("PPM data must be (H, W, 3)")
    _write_netpbm(sink, arr, b"P6", maxval)


def mask_maxval(n_classes):
    """PGM maxval for a mask with ``n_classes`` classes; the maxval doubles as ignore id."""
    return 255 if n_classes <= 255 else 65535


def write_mask(sink, mask, n_classes):
    write_pgm(sink, np.asarray(mask), mask_maxval(n_classes))


def write_heatmap(sink, m):
    """Min-max scale a scalar map into an 8-bit PGM."""
    m = np.asarray(m, dtype=np.float64)
    lo, hi = (float(m.min()), float(m.max())) if m.size else (0.0, 0.0)
    scaled = np.zeros(m.shape) if hi <= lo else (m - lo) / (hi - lo)
    write_pgm(sink, np.rint(scaled * 255).astype(np.uint8), 255)


# --- polygons JSONL ---------------------------------------------------------

def polygon_to_json(poly):
    return json.dumps({
        "image_id": poly.image_id,
        "class": int(poly.cls),
        "vertices": [[round6(x), round6(y)] for x, y in poly.vertices],
    })


def write_polygons(sink, polygons):
    with _open(sink, "w") as fh:
        for poly in polygons:
            fh.write(polygon_to_json(poly) + "\n")


def read_polygons(source):
    name = getattr(source, "name", str(source))
    out = []
    with _open(source, "r") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{name}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(rec, dict):
                raise DataError(f"{name}:{lineno}: expected an object")
            for key in ("image_id", "class", "vertices"):
                if key not in rec:
                    raise DataError(f"{name}:{lineno}: missing key {key!r}")
            verts = rec["vertices"]
            if not isinstance(verts, list) or len(verts) < 3 or any(
                    not isinstance(v, list) or len(v) != 2 for v in verts):
                raise DataError(f"{name}:{lineno}: 'vertices' must be a list of >= 3 [x, y] pairs")
            try:
                out.append(Polygon(str(rec["image_id"]), int(rec["class"]),
                                   tuple((float(x), float(y)) for x, y in verts)))
            except (TypeError, ValueError) as exc:
                raise DataError(f"{name}:{lineno}: {exc}") from exc
    return out


# --- query JSONL --------------------------------------------------------------

def write_queries(sink, boxes, strategy, iteration):
    with _open(sink, "w") as fh:
        for box in boxes:
            fh.write(json.dumps({
                "image_id": box.image_id, "row": int(box.row), "col": int(box.col), "b": int(box.b),
                "score": round6(box.score), "strategy": strategy, "iteration": int(iteration),
            }) + "\n")


def read_queries(source):
    name = getattr(source, "name", str(source))
    out = []
    with _open(source, "r") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            missing = [k for k in QUERY_KEYS if k not in rec]
            if missing:
                raise DataError(f"{name}:{lineno}: missing key {missing[0]!r}")
            out.append(rec)
    return out


# --- results CSV --------------------------------------------------------------

_INT_FIELDS = {"iteration", "c_p", "c_i", "c_b", "c_c"}


def format_results(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RESULTS_HEADER)
    for row in rows:
        out = []
        for key in RESULTS_HEADER:
            v = row[key]
            if key in _INT_FIELDS and float(v) == int(float(v)):
                out.append(str(int(v)))
            elif isinstance(v, (float, np.floating)):
                out.append(fmt_float(v))
            else:
                out.append(str(v))
        writer.writerow(out)
    return buf.getvalue()


def write_results(sink, rows):
    with _open(sink, "w") as fh:
        fh.write(format_results(rows))


def read_results(source):
    name = getattr(source, "name", str(source))
    with _open(source, "r") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != RESULTS_HEADER:
            raise DataError(f"{name}: unexpected results header {header}")
        rows = []
        for lineno, rec in enumerate(reader, 2):
            if len(rec) != len(RESULTS_HEADER):
                raise DataError(f"{name}:{lineno}: expected {len(RESULTS_HEADER)} fields, got {len(rec)}")
            row = dict(zip(RESULTS_HEADER, rec))
            try:
                for key in ("cost_a", "cost_b", "cost_p", "miou"):
                    row[key] = float(row[key])
                for key in _INT_FIELDS:
                    v = float(row[key])
                    row[key] = int(v) if v == int(v) else v
            except ValueError as exc:
                raise DataError(f"{name}:{lineno}: {exc}") from exc
            rows.append(row)
    return rows


# --- key=value config ---------------------------------------------------------

def read_config(source):
    """Parse a flat ``key=value`` file; ``#`` starts a comment."""
    name = getattr(source, "name", str(source))
    out = {}
    with _open(source, "r") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"{name}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            if not key:
                raise DataError(f"{name}:{lineno}: empty key")
            out[key] = value
    return out


def write_config(sink, values):
    with _open(sink, "w") as fh:
        for key, value in values.items():
            fh.write(f"{key}={value}\n")


def read_manifest(path):
    path = Path(path)
    return [line.strip() for line in path.read_text().splitlines() if line.strip()]
