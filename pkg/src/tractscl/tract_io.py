"""Tractography file I/O: TrackVis TRK v2 (binary) and a line-oriented text format.

The TRK reader/writer implements the fixed 1000-byte little-endian v2 header
and per-track records of ``int32 n`` followed by ``n * (3 + n_scalars)``
float32 values and ``n_properties`` trailing floats (properties are read and
discarded; nothing downstream uses them).

The text format is one JSON object per line.  The first line is a header
declaring scalar channel names and spatial metadata; every following
non-empty line is a record ``{"points": [[x,y,z], ...], "fa": [...]}`` where
the ``fa`` list (per-point values for the single declared scalar channel) is
present iff a channel is declared.  Floats survive a round trip exactly
because they are serialized at full precision.
"""

from dataclasses import dataclass, field
import json
import struct

import numpy as np

TRK_HEADER_SIZE = 1000
_HEADER_FMT = "<6s3h3f3fh200sh200s16f444s4s4s6f2s6Biii"
assert struct.calcsize(_HEADER_FMT) == TRK_HEADER_SIZE


class TrkError(ValueError):
    """Base class for TRK parsing/writing failures."""


class BadMagic(TrkError):
    pass


class UnsupportedVersion(TrkError):
    pass


class TruncatedFile(TrkError):
    pass


class NegativeCount(TrkError):
    pass


class InvalidPointCount(TrkError):
    """A track declares fewer than 2 points."""


class TooManyScalarChannels(TrkError):
    """TRK supports at most 10 scalar channels."""


class ParseError(ValueError):
    """Text-format parse failure; carries the 1-based line number."""

    def __init__(self, line, message):
        super().__init__(f"line {line}: {message}")
        self.line = line


class LengthMismatch(ParseError):
    """Per-point scalar list length differs from the point count."""


@dataclass(eq=False)
class Streamline:
    """Ordered 3-D points (mm) with optional per-point scalar channels."""

    points: np.ndarray                 # (n, 3) float64
    scalars: np.ndarray | None = None  # (n, n_channels) float64

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"points must be (n, 3), got {self.points.shape}")
        if self.scalars is not None:
            self.scalars = np.atleast_2d(np.asarray(self.scalars, dtype=np.float64))
            if self.scalars.shape[0] != self.points.shape[0]:
                raise ValueError("scalars row count must match point count")

    def __len__(self):
        return self.points.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Streamline):
            return NotImplemented
        if not np.array_equal(self.points, other.points):
            return False
        if (self.scalars is None) != (other.scalars is None):
            return False
        return self.scalars is None or np.array_equal(self.scalars, other.scalars)


def _identity_affine():
    return np.eye(4)


@dataclass(eq=False)
class Tractogram:
    """A collection of streamlines plus spatial metadata and channel names."""

    streamlines: list = field(default_factory=list)
    scalar_names: list = field(default_factory=list)
    voxel_size: np.ndarray = None
    vox_to_ras: np.ndarray = None
    dim: np.ndarray = None

    def __post_init__(self):
        self.voxel_size = (np.ones(3) if self.voxel_size is None
                           else np.asarray(self.voxel_size, dtype=np.float64))
        self.vox_to_ras = (_identity_affine() if self.vox_to_ras is None
                           else np.asarray(self.vox_to_ras, dtype=np.float64))
        self.dim = (np.zeros(3, dtype=np.int64) if self.dim is None
                    else np.asarray(self.dim, dtype=np.int64))

    def __len__(self):
        return len(self.streamlines)

    def __eq__(self, other):
        if not isinstance(other, Tractogram):
            return NotImplemented
        return (list(self.scalar_names) == list(other.scalar_names)
                and np.array_equal(self.voxel_size, other.voxel_size)
                and np.array_equal(self.vox_to_ras, other.vox_to_ras)
                and np.array_equal(self.dim, other.dim)
                and len(self.streamlines) == len(other.streamlines)
                and all(a == b for a, b in zip(self.streamlines, other.streamlines)))

    def validate(self):
        """Check the structural invariants; raises ValueError on violation."""
        n_chan = len(self.scalar_names)
        if self.vox_to_ras.shape != (4, 4) or not np.array_equal(
                self.vox_to_ras[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError("vox_to_ras must be a 4x4 affine (last row 0,0,0,1)")
        for i, s in enumerate(self.streamlines):
            if len(s) < 2:
                raise ValueError(f"streamline {i} has fewer than 2 points")
            if not np.isfinite(s.points).all():
                raise ValueError(f"streamline {i} has non-finite coordinates")
            have = 0 if s.scalars is None else s.scalars.shape[1]
            if have != n_chan:
                raise ValueError(
                    f"streamline {i} carries {have} scalar channels, expected {n_chan}")


# ---------------------------------------------------------------------------
# TRK v2 binary format
# ---------------------------------------------------------------------------

def read_trk(data, apply_affine=False):
    """Parse TRK v2 bytes into a Tractogram.

    Coordinates are returned as stored (TRK voxel-mm space).  With
    ``apply_affine=True`` each point is divided by voxel_size and mapped
    through the header's vox_to_ras matrix.
    """
    if len(data) < TRK_HEADER_SIZE:
        raise TruncatedFile(f"file is {len(data)} bytes, header needs {TRK_HEADER_SIZE}")
    fields = struct.unpack(_HEADER_FMT, data[:TRK_HEADER_SIZE])
    (id_string, d0, d1, d2, vx, vy, vz, _ox, _oy, _oz, n_scalars, scalar_block,
     n_properties, _prop_block) = fields[:14]
    affine_flat = fields[14:30]
    n_count, version, hdr_size = fields[-3], fields[-2], fields[-1]

    if id_string[:5] != b"TRACK":
        raise BadMagic(f"bad magic {id_string[:5]!r}")
    if version != 2:
        raise UnsupportedVersion(f"TRK version {version}, only 2 supported")
    if hdr_size != TRK_HEADER_SIZE:
        raise UnsupportedVersion(f"declared header size {hdr_size} != {TRK_HEADER_SIZE}")
    if n_scalars < 0 or n_properties < 0 or n_count < 0:
        raise NegativeCount("negative count field in header")
    if n_scalars > 10 or n_properties > 10:
        raise TooManyScalarChannels("TRK allows at most 10 scalar/property channels")

    scalar_names = []
    for k in range(n_scalars):
        raw = scalar_block[20 * k:20 * (k + 1)]
        scalar_names.append(raw.split(b"\x00", 1)[0].decode("latin-1"))

    voxel_size = np.array([vx, vy, vz], dtype=np.float64)
    vox_to_ras = np.array(affine_flat, dtype=np.float64).reshape(4, 4)
    dim = np.array([d0, d1, d2], dtype=np.int64)

    streamlines = []
    pos = TRK_HEADER_SIZE
    end = len(data)
    floats_per_point = 3 + n_scalars
    track_idx = 0
    while (pos < end) if n_count == 0 else (track_idx < n_count):
        if pos + 4 > end:
            raise TruncatedFile(f"body ends inside point count of track {track_idx}")
        (n,) = struct.unpack_from("<i", data, pos)
        pos += 4
        if n < 0:
            raise NegativeCount(f"track {track_idx} declares {n} points")
        if n < 2:
            raise InvalidPointCount(f"track {track_idx} declares {n} points")
        nbytes = 4 * (n * floats_per_point + n_properties)
        if pos + nbytes > end:
            raise TruncatedFile(f"body ends inside track {track_idx}")
        vals = np.frombuffer(data, dtype="<f4", count=n * floats_per_point, offset=pos)
        vals = vals.reshape(n, floats_per_point).astype(np.float64)
        pos += nbytes  # trailing floats are per-track properties; discarded
        pts = vals[:, :3]
        if apply_affine:
            safe = np.where(voxel_size > 0, voxel_size, 1.0)
            hom = np.concatenate([pts / safe, np.ones((n, 1))], axis=1)
            pts = (hom @ vox_to_ras.T)[:, :3]
        scal = vals[:, 3:].copy() if n_scalars else None
        streamlines.append(Streamline(pts.copy(), scal))
        track_idx += 1

    return Tractogram(streamlines, scalar_names, voxel_size, vox_to_ras, dim)


def write_trk(t):
    """Serialize a Tractogram to TRK v2 bytes (deterministic layout)."""
    t.validate()
    n_scalars = len(t.scalar_names)
    if n_scalars > 10:
        raise TooManyScalarChannels(f"{n_scalars} scalar channels, TRK allows 10")

    scalar_block = b"".join(
        name.encode("latin-1")[:19].ljust(20, b"\x00") for name in t.scalar_names
    ).ljust(200, b"\x00")

    header = struct.pack(
        _HEADER_FMT,
        b"TRACK\x00",
        int(t.dim[0]), int(t.dim[1]), int(t.dim[2]),
        float(t.voxel_size[0]), float(t.voxel_size[1]), float(t.voxel_size[2]),
        0.0, 0.0, 0.0,                      # origin (unused by TrackVis)
        n_scalars,
        scalar_block,
        0,                                  # n_properties
        b"\x00" * 200,
        *[float(v) for v in t.vox_to_ras.ravel()],
        b"\x00" * 444,
        b"RAS\x00",
        b"\x00" * 4,
        0.0, 0.0, 0.0, 0.0, 0.0, 0.0,       # image_orientation_patient
        b"\x00" * 2,
        0, 0, 0, 0, 0, 0,                   # invert/swap flags
        len(t.streamlines),
        2,
        TRK_HEADER_SIZE,
    )

    chunks = [header]
    for s in t.streamlines:
        n = len(s)
        if s.scalars is not None:
            rec = np.concatenate([s.points, s.scalars], axis=1)
        else:
            rec = s.points
        chunks.append(struct.pack("<i", n))
        chunks.append(np.ascontiguousarray(rec, dtype="<f4").tobytes())
    return b"".join(chunks)


# ---------------------------------------------------------------------------
# Text format
# ---------------------------------------------------------------------------

def read_text(src):
    """Parse the line-oriented text format into a Tractogram."""
    lines = src.splitlines()
    if not lines or not lines[0].strip():
        raise ParseError(1, "missing header line")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise ParseError(1, f"invalid header JSON: {e}") from None
    if not isinstance(header, dict) or "scalar_names" not in header:
        raise ParseError(1, "header must be an object with 'scalar_names'")
    scalar_names = list(header["scalar_names"])
    if len(scalar_names) > 1:
        raise ParseError(1, "text format supports at most one scalar channel")

    voxel_size = np.asarray(header.get("voxel_size", [1.0, 1.0, 1.0]), dtype=np.float64)
    dim = np.asarray(header.get("dim", [0, 0, 0]), dtype=np.int64)
    vox_to_ras = np.asarray(header.get("vox_to_ras", np.eye(4).tolist()), dtype=np.float64)

    streamlines = []
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as e:
            raise ParseError(lineno, f"invalid record JSON: {e}") from None
        if not isinstance(rec, dict) or "points" not in rec:
            raise ParseError(lineno, "record must be an object with 'points'")
        pts = np.asarray(rec["points"], dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ParseError(lineno, "'points' must be a list of [x, y, z]")
        if pts.shape[0] < 2:
            raise ParseError(lineno, "a streamline needs at least 2 points")
        if not np.isfinite(pts).all():
            raise ParseError(lineno, "non-finite coordinate")
        fa = rec.get("fa")
        if scalar_names:
            if fa is None:
                raise ParseError(lineno, "scalar channel declared but 'fa' missing")
            fa = np.asarray(fa, dtype=np.float64)
            if fa.ndim != 1 or fa.shape[0] != pts.shape[0]:
                raise LengthMismatch(
                    lineno, f"'fa' has {fa.size} values for {pts.shape[0]} points")
            scal = fa.reshape(-1, 1)
        else:
            if fa is not None:
                raise ParseError(lineno, "'fa' present but no scalar channel declared")
            scal = None
        streamlines.append(Streamline(pts, scal))

    return Tractogram(streamlines, scalar_names, voxel_size, vox_to_ras, dim)


def write_text(t):
    """Serialize a Tractogram to the text format (inverse of read_text)."""
    t.validate()
    if len(t.scalar_names) > 1:
        raise ValueError("text format supports at most one scalar channel")
    out = [json.dumps({
        "scalar_names": list(t.scalar_names),
        "voxel_size": t.voxel_size.tolist(),
        "dim": [int(v) for v in t.dim],
        "vox_to_ras": t.vox_to_ras.tolist(),
    })]
    for s in t.streamlines:
        rec = {"points": s.points.tolist()}
        if t.scalar_names:
            rec["fa"] = s.scalars[:, 0].tolist()
        out.append(json.dumps(rec))
    return "\n".join(out) + "\n"
