"""Binary raster and plume-tile containers, and GeoJSON output.

Raster container layout (little endian)::

    b"PKRST\\0\\0\\0"  u32 version  u32 bands  u32 rows  u32 cols  u32 dtype  u32 has_geo
    [6 x f8 geotransform]  payload (bands, rows, cols) row-major

Geospatial rasters in other formats can be brought in by reading them with
any raster library and passing the array and affine geotransform to
:func:`write_raster`.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import LoadError
from .puff_sim import PlumeInstance

RASTER_MAGIC = b"PKRST\0\0\0"
TILE_MAGIC = b"PKTILE\0\0"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1"), 3: np.dtype("<i4")}
_CODES = {v: k for k, v in _DTYPES.items()}


@dataclass(frozen=True, eq=False)
class Raster:
    data: np.ndarray  # (bands, rows, cols)
    geotransform: tuple | None = None

    def pixel_to_geo(self, row, col):
        """Affine ``(x, y)`` of a pixel centre, GDAL-style geotransform."""
        if self.geotransform is None:
            return float(col), float(row)
        return pixel_to_geo(self.geotransform, row, col)


def pixel_to_geo(gt, row, col):
    x0, dx, rx, y0, ry, dy = gt
    c, r = col + 0.5, row + 0.5
    return x0 + c * dx + r * rx, y0 + c * ry + r * dy


def _read(path):
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc


def write_raster(path, data, geotransform=None):
    arr = np.asarray(data)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError("raster data must be (bands, rows, cols)")
    dt = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
    if np.dtype(dt) not in _CODES:
        raise ValueError(f"unsupported raster dtype {arr.dtype}")
    code = _CODES[np.dtype(dt)]
    head = RASTER_MAGIC + struct.pack("<IIIIII", VERSION, *arr.shape, code,
                                      geotransform is not None)
    if geotransform is not None:
        head += struct.pack("<6d", *geotransform)
    Path(path).write_bytes(head + np.ascontiguousarray(arr, dtype=dt).tobytes())


def read_raster(path) -> Raster:
    blob = _read(path)
    if blob[:8] != RASTER_MAGIC:
        raise LoadError(f"{path}: not a raster container")
    version, nb, nr, nc, code, has_geo = struct.unpack_from("<IIIIII", blob, 8)
    if version != VERSION:
        raise LoadError(f"{path}: unsupported raster version {version}")
    if code not in _DTYPES:
        raise LoadError(f"{path}: unknown dtype code {code}")
    off = 32
    gt = None
    if has_geo:
        gt = struct.unpack_from("<6d", blob, off)
        off += 48
    dt = _DTYPES[code]
    n = nb * nr * nc
    if len(blob) != off + n * dt.itemsize:
        raise LoadError(f"{path}: payload size does not match header")
    data = np.frombuffer(blob, dtype=dt, count=n, offset=off).reshape(nb, nr, nc)
    return Raster(data.copy(), gt)


# --------------------------------------------------------------------------
# plume tiles

@dataclass(frozen=True, eq=False)
class PlumeTile:
    plumes: list
    pixel_size_m: float = 60.0
    radiance: np.ndarray | None = None  # (rows, cols, bands)
    manifest: dict | None = None


def write_tile(path, plumes: Sequence[PlumeInstance], pixel_size_m: float = 60.0,
               radiance=None, manifest: dict | None = None):
    """Persist plumes (and optionally injected radiance) to the tile container.

    Concentrations are stored as float32; a JSON manifest sidecar carries
    provenance when given.
    """
    plumes = list(plumes)
    rows, cols = plumes[0].conc.shape if plumes else np.shape(radiance)[:2]
    nb = 0 if radiance is None else np.shape(radiance)[2]
    parts = [TILE_MAGIC, struct.pack("<IIIdII", VERSION, rows, cols, pixel_size_m,
                                     len(plumes), nb)]
    for p in plumes:
        if p.conc.shape != (rows, cols):
            raise ValueError("all plumes in a tile must share a grid")
        origin = (np.nan, np.nan) if p.origin_px is None else p.origin_px
        parts.append(struct.pack("<2d2d3d", *origin, *p.emit_window_s, p.released_mol,
                                 p.active_s, p.wind_speed_mps))
        parts.append(np.ascontiguousarray(p.conc, dtype="<f4").tobytes())
        parts.append(np.packbits(p.mask.astype(bool).ravel()).tobytes())
    if radiance is not None:
        parts.append(np.ascontiguousarray(radiance, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))
    if manifest is not None:
        Path(str(path) + ".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def read_tile(path) -> PlumeTile:
    blob = _read(path)
    if blob[:8] != TILE_MAGIC:
        raise LoadError(f"{path}: not a plume tile container")
    fmt = "<IIIdII"
    version, rows, cols, px, n, nb = struct.unpack_from(fmt, blob, 8)
    if version != VERSION:
        raise LoadError(f"{path}: unsupported tile version {version}")
    off = 8 + struct.calcsize(fmt)
    npx = rows * cols
    mask_bytes = (npx + 7) // 8
    meta_fmt = "<2d2d3d"
    plumes = []
    try:
        for _ in range(n):
            r, c, t0, t1, rel, act, ws = struct.unpack_from(meta_fmt, blob, off)
            off += struct.calcsize(meta_fmt)
            conc = np.frombuffer(blob, "<f4", npx, off).reshape(rows, cols).astype(float)
            off += 4 * npx
            bits = np.frombuffer(blob, "u1", mask_bytes, off)
            off += mask_bytes
            mask = np.unpackbits(bits)[:npx].reshape(rows, cols).astype(bool)
            origin = None if np.isnan(r) else (r, c)
            plumes.append(PlumeInstance(conc, mask, origin, (t0, t1), released_mol=rel,
                                        active_s=act, wind_speed_mps=ws, pixel_size_m=px))
        radiance = None
        if nb:
            radiance = np.frombuffer(blob, "<f4", npx * nb, off).reshape(rows, cols, nb)
            radiance = radiance.astype(float)
            off += 4 * npx * nb
    except ValueError as exc:
        raise LoadError(f"{path}: truncated tile container") from exc
    if off != len(blob):
        raise LoadError(f"{path}: trailing bytes in tile container")
    side = Path(str(path) + ".json")
    manifest = json.loads(side.read_text()) if side.exists() else None
    return PlumeTile(plumes, px, radiance, manifest)


# --------------------------------------------------------------------------
# GeoJSON

def write_geojson(path, features: Sequence[dict], properties: dict | None = None):
    fc = {"type": "FeatureCollection", "features": list(features)}
    if properties:
        fc["properties"] = properties
    Path(path).write_text(json.dumps(fc, indent=1, allow_nan=False, default=_jsonable),
                          encoding="utf-8")


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o)}")
