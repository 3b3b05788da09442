"""Colored voxel grids, color-space conversions, and the on-disk formats.

A grid stores 4 channels per voxel (occupancy, R, G, B), all in [0, 1],
laid out x-major, then y, then z, then channel.
"""

import json

import numpy as np

MAGIC = b"T2SV"
FORMAT_VERSION = 1
CHANNELS = 4

# Header: magic(4) + version(u16) + dims(3 x u32) + channels(u8) + pad(1).
HEADER_SIZE = 20
MAX_VOXELS = 1 << 31


class GridFormatError(ValueError):
    """Base class for grid file format problems."""


class BadMagicError(GridFormatError):
    pass


class BadHeaderError(GridFormatError):
    pass


class TruncatedGridError(GridFormatError):
    pass


class VoxelGrid:
    """Dense (vx, vy, vz, 4) float32 grid of occupancy + RGB.

    Immutable after construction: the data buffer is frozen, so grids can
    be shared freely across threads.
    """

    def __init__(self, data):
        data = np.ascontiguousarray(data, dtype=np.float32)
        if data.ndim != 4 or data.shape[3] != CHANNELS:
            raise ValueError(f"grid data must have shape (vx, vy, vz, 4), got {data.shape}")
        if min(data.shape[:3]) < 1:
            raise ValueError(f"grid dims must all be >= 1, got {data.shape[:3]}")
        if not np.isfinite(data).all():
            raise ValueError("grid values must be finite")
        if data.min() < 0.0 or data.max() > 1.0:
            raise ValueError("grid values must lie in [0, 1]")
        data.flags.writeable = False
        self.data = data

    @property
    def dims(self):
        return self.data.shape[:3]

    @property
    def occupancy(self):
        return self.data[..., 0]

    @property
    def rgb(self):
        return self.data[..., 1:4]

    def canonicalize(self):
        """Return a grid with RGB zeroed wherever occupancy is exactly 0."""
        out = np.array(self.data)
        out[out[..., 0] == 0.0, 1:] = 0.0
        return VoxelGrid(out)

    def threshold(self, tau=0.9):
        """Binary occupancy mask: occupied iff probability > tau."""
        return self.occupancy > tau

    def __eq__(self, other):
        if not isinstance(other, VoxelGrid):
            return NotImplemented
        return self.dims == other.dims and np.array_equal(self.data, other.data)

    def __repr__(self):
        vx, vy, vz = self.dims
        return f"VoxelGrid({vx}x{vy}x{vz}, {int(np.count_nonzero(self.occupancy))} occupied)"


def new_grid(dims, fill_occupancy=0.0, fill_rgb=(0.0, 0.0, 0.0)):
    """Uniform grid with the given occupancy and color everywhere."""
    vx, vy, vz = (int(d) for d in dims)
    if min(vx, vy, vz) < 1:
        raise ValueError(f"dims must be >= 1, got {dims}")
    vals = [float(fill_occupancy), *(float(c) for c in fill_rgb)]
    if any(v < 0.0 or v > 1.0 for v in vals):
        raise ValueError(f"fill values must lie in [0, 1], got {vals}")
    data = np.empty((vx, vy, vz, CHANNELS), dtype=np.float32)
    data[:] = np.asarray(vals, dtype=np.float32)
    return VoxelGrid(data)


# ---------------------------------------------------------------------------
# Color conversions. Hue is in [0, 1) and wraps; gray inputs (saturation 0)
# get hue 0 by convention so conversions stay deterministic.

def rgb_to_hsv(rgb):
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = np.maximum(np.maximum(r, g), b)
    minc = np.minimum(np.minimum(r, g), b)
    delta = maxc - minc
    safe = np.where(delta == 0.0, 1.0, delta)
    h = np.where(
        maxc == r, (g - b) / safe,
        np.where(maxc == g, 2.0 + (b - r) / safe, 4.0 + (r - g) / safe),
    )
    h = np.where(delta == 0.0, 0.0, (h / 6.0) % 1.0)
    s = np.where(maxc == 0.0, 0.0, delta / np.where(maxc == 0.0, 1.0, maxc))
    return np.stack([h, s, maxc], axis=-1)


def hsv_to_rgb(hsv):
    hsv = np.asarray(hsv, dtype=np.float64)
    h, s, v = hsv[..., 0] % 1.0, hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(int) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def rgb_to_hsl(rgb):
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = np.maximum(np.maximum(r, g), b)
    minc = np.minimum(np.minimum(r, g), b)
    delta = maxc - minc
    ell = (maxc + minc) / 2.0
    safe = np.where(delta == 0.0, 1.0, delta)
    h = np.where(
        maxc == r, (g - b) / safe,
        np.where(maxc == g, 2.0 + (b - r) / safe, 4.0 + (r - g) / safe),
    )
    h = np.where(delta == 0.0, 0.0, (h / 6.0) % 1.0)
    denom = 1.0 - np.abs(2.0 * ell - 1.0)
    s = np.where(delta == 0.0, 0.0, delta / np.where(denom == 0.0, 1.0, denom))
    return np.stack([h, s, ell], axis=-1)


def hsl_to_rgb(hsl):
    hsl = np.asarray(hsl, dtype=np.float64)
    h, s, ell = hsl[..., 0] % 1.0, hsl[..., 1], hsl[..., 2]
    c = (1.0 - np.abs(2.0 * ell - 1.0)) * s
    hp = h * 6.0
    x = c * (1.0 - np.abs(hp % 2.0 - 1.0))
    i = np.floor(hp).astype(int) % 6
    z = np.zeros_like(c)
    r = np.choose(i, [c, x, z, z, x, c])
    g = np.choose(i, [x, c, c, x, z, z])
    b = np.choose(i, [z, z, x, c, c, x])
    m = ell - c / 2.0
    return np.stack([r + m, g + m, b + m], axis=-1)


# ---------------------------------------------------------------------------
# T2SV binary grid format.

def write_grid(grid, path):
    """Write a grid as T2SV: 20-byte header + raw little-endian float32."""
    vx, vy, vz = grid.dims
    header = bytearray()
    header += MAGIC
    header += int(FORMAT_VERSION).to_bytes(2, "little")
    for d in (vx, vy, vz):
        header += int(d).to_bytes(4, "little")
    header += bytes([CHANNELS, 0])
    with open(path, "wb") as fh:
        fh.write(bytes(header))
        fh.write(grid.data.astype("<f4", copy=False).tobytes())


def read_grid(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < HEADER_SIZE:
        raise TruncatedGridError(f"{path}: file shorter than header ({len(raw)} bytes)")
    if raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    version = int.from_bytes(raw[4:6], "little")
    if version != FORMAT_VERSION:
        raise BadHeaderError(f"{path}: unsupported format version {version}")
    dims = tuple(int.from_bytes(raw[6 + 4 * i: 10 + 4 * i], "little") for i in range(3))
    channels = raw[18]
    if channels != CHANNELS:
        raise BadHeaderError(f"{path}: expected {CHANNELS} channels, header says {channels}")
    if min(dims) < 1 or dims[0] * dims[1] * dims[2] * channels > MAX_VOXELS:
        raise BadHeaderError(f"{path}: dimension overflow {dims}")
    expected = dims[0] * dims[1] * dims[2] * channels * 4
    payload = raw[HEADER_SIZE:]
    if len(payload) != expected:
        raise TruncatedGridError(
            f"{path}: payload has {len(payload)} bytes, header declares {expected}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(*dims, channels)
    return VoxelGrid(data)


# ---------------------------------------------------------------------------
# JSONL dataset manifest: one record per shape with
# {id, category, instance_class, descriptions, voxel_path}.

MANIFEST_FIELDS = ("id", "category", "instance_class", "descriptions", "voxel_path")


def write_manifest(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            missing = [f for f in MANIFEST_FIELDS if f not in rec]
            if missing:
                raise ValueError(f"manifest record missing fields {missing}: {rec}")
            fh.write(json.dumps({f: rec[f] for f in MANIFEST_FIELDS}, sort_keys=True))
            fh.write("\n")


def read_manifest(path):
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            missing = [f for f in MANIFEST_FIELDS if f not in rec]
            if missing:
                raise ValueError(f"{path}:{line_no}: manifest record missing {missing}")
            records.append(rec)
    return records
