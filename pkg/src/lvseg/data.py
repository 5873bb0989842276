"""Data ingestion: a defensive DICOM subset, contour text files, patient
splits, synthetic phantoms, and the canonical on-disk sample format.

The DICOM reader handles exactly what short-axis cine exports need:
little-endian explicit or implicit VR, uncompressed single-frame pixel
data, 8 or 16 bits. Everything else fails with a named error; nothing
in here is allowed to crash or hang on garbage bytes, since the import
path sees files straight off the scanner archive.

Canonical samples on disk are three files per slice id "<case>-<slice>":
  <id>.raw        16-bit little-endian grid, row-major, intensities
                  min-max scaled to the full range at save time
  <id>.mask.raw   one byte per pixel, 0 or 1
  <id>.json       {rows, cols, spacing_mm: [row_mm, col_mm], case_id, slice_id}
plus an optional <id>.contour.txt carrying the manual contour so
distance metrics can use the original polyline instead of re-tracing
the rasterized mask.
"""

from __future__ import annotations

import json
import re
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .metrics import ContourPolyline, _min_distances

__all__ = [
    "CineSample",
    "DicomFormatError",
    "DicomMagicError",
    "DicomTruncatedError",
    "DicomUnsupportedError",
    "DicomMissingTagError",
    "DicomValueError",
    "read_dicom",
    "parse_contour",
    "serialize_contour",
    "rasterize",
    "split_patients",
    "synth_phantom",
    "save_sample",
    "load_sample",
    "load_dataset",
]


@dataclass
class CineSample:
    """One slice: image grid, binary mask, physical pixel pitch and ids.

    spacing_mm is (sx, sy) = (column pitch, row pitch), the order the
    distance metrics consume. Note the JSON sidecar stores [row, col]
    like the DICOM PixelSpacing attribute; loaders convert.
    """

    image: np.ndarray
    mask: np.ndarray
    spacing_mm: tuple[float, float]
    case_id: str
    slice_id: str
    truth_contour: ContourPolyline | None = None

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float64)
        msk = np.asarray(self.mask)
        if img.ndim != 2:
            raise ValueError(f"image must be 2-D, got shape {img.shape}")
        if msk.shape != img.shape:
            raise ValueError(f"mask shape {msk.shape} != image shape {img.shape}")
        if not np.isin(msk, (0, 1)).all():
            raise ValueError("mask must be binary")
        sx, sy = self.spacing_mm
        if sx <= 0 or sy <= 0:
            raise ValueError(f"pixel spacing must be positive, got {self.spacing_mm}")
        if not (0.1 <= sx <= 10.0 and 0.1 <= sy <= 10.0):
            warnings.warn(
                f"pixel spacing {self.spacing_mm} mm is outside the plausible "
                f"0.1..10 mm range", stacklevel=2,
            )
        self.image = img
        self.mask = msk.astype(np.uint8)
        self.spacing_mm = (float(sx), float(sy))


# ---------------------------------------------------------------------------
# DICOM subset reader


class DicomFormatError(ValueError):
    """Base for every malformed-DICOM condition."""


class DicomMagicError(DicomFormatError):
    pass


class DicomTruncatedError(DicomFormatError):
    pass


class DicomUnsupportedError(DicomFormatError):
    pass


class DicomMissingTagError(DicomFormatError):
    pass


class DicomValueError(DicomFormatError):
    pass


_TS_IMPLICIT = "1.2.840.10008.1.2"
_TS_EXPLICIT = "1.2.840.10008.1.2.1"
# explicit VRs that carry a 2-byte reserved field and a 4-byte length
_LONG_VRS = (b"OB", b"OW", b"OF", b"SQ", b"UT", b"UN")

_TAG_ROWS = (0x0028, 0x0010)
_TAG_COLS = (0x0028, 0x0011)
_TAG_SPACING = (0x0028, 0x0030)
_TAG_BITS = (0x0028, 0x0100)
_TAG_PIXELREP = (0x0028, 0x0103)
_TAG_INTERCEPT = (0x0028, 0x1052)
_TAG_SLOPE = (0x0028, 0x1053)
_TAG_PIXELDATA = (0x7FE0, 0x0010)
_WANTED = {
    _TAG_ROWS, _TAG_COLS, _TAG_SPACING, _TAG_BITS, _TAG_PIXELREP,
    _TAG_INTERCEPT, _TAG_SLOPE, _TAG_PIXELDATA,
}


class _Cursor:
    __slots__ = ("blob", "pos")

    def __init__(self, blob: bytes, pos: int = 0):
        self.blob = blob
        self.pos = pos

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise DicomTruncatedError(
                f"file ends inside {what} at offset {self.pos} (need {n} bytes)"
            )
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    @property
    def done(self) -> bool:
        return self.pos >= len(self.blob)


def _read_element(cur: _Cursor, explicit: bool):
    tag = struct.unpack("<HH", cur.take(4, "element tag"))
    if explicit:
        vr = cur.take(2, "VR field")
        if not (b"AA" <= vr <= b"ZZ" and vr.isalpha()):
            raise DicomValueError(f"bad VR {vr!r} at offset {cur.pos - 2}")
        if vr in _LONG_VRS:
            cur.take(2, "reserved length bytes")
            (length,) = struct.unpack("<I", cur.take(4, "element length"))
        else:
            (length,) = struct.unpack("<H", cur.take(2, "element length"))
    else:
        vr = b""
        (length,) = struct.unpack("<I", cur.take(4, "element length"))
    if length == 0xFFFFFFFF:
        raise DicomUnsupportedError(
            f"undefined-length element {tag[0]:04x},{tag[1]:04x} (sequences are "
            f"not supported)"
        )
    value = cur.take(length, f"value of {tag[0]:04x},{tag[1]:04x}")
    return tag, vr, value


def _parse_us(value: bytes, tagname: str) -> int:
    if len(value) < 2:
        raise DicomValueError(f"{tagname}: expected a 16-bit value, got {len(value)} bytes")
    return struct.unpack("<H", value[:2])[0]


def _parse_ds(value: bytes, tagname: str) -> list[float]:
    try:
        text = value.decode("ascii").strip("\x00 ")
    except UnicodeDecodeError as e:
        raise DicomValueError(f"{tagname}: undecodable string") from e
    out = []
    for piece in text.split("\\"):
        try:
            out.append(float(piece.strip()))
        except ValueError as e:
            raise DicomValueError(f"{tagname}: bad decimal string {piece!r}") from e
    return out


def read_dicom(blob: bytes) -> tuple[np.ndarray, tuple[float, float]]:
    """Parse one uncompressed little-endian DICOM file.

    Returns (pixels, (row_mm, col_mm)): the image as float64 with the
    rescale slope/intercept applied, and the PixelSpacing pair in its
    native row-pitch-first order.
    """
    if len(blob) < 132:
        raise DicomMagicError("file shorter than the 132-byte DICOM preamble")
    if blob[128:132] != b"DICM":
        raise DicomMagicError("missing DICM magic after the 128-byte preamble")
    cur = _Cursor(blob, 132)

    # file meta group (0002) is always explicit VR little endian
    transfer_syntax = None
    while not cur.done:
        mark = cur.pos
        group = struct.unpack("<H", cur.take(2, "element tag"))[0]
        cur.pos = mark
        if group != 0x0002:
            break
        tag, _, value = _read_element(cur, explicit=True)
        if tag == (0x0002, 0x0010):
            try:
                transfer_syntax = value.decode("ascii").strip("\x00 ")
            except UnicodeDecodeError as e:
                raise DicomValueError("transfer syntax UID: undecodable") from e

    if transfer_syntax == _TS_IMPLICIT:
        explicit = False
    elif transfer_syntax == _TS_EXPLICIT:
        explicit = True
    elif transfer_syntax is not None:
        raise DicomUnsupportedError(
            f"unsupported transfer syntax {transfer_syntax!r} (compressed or "
            f"big-endian data)"
        )
    else:
        # no meta group: sniff the first dataset element's VR bytes
        if cur.pos + 6 > len(blob):
            raise DicomTruncatedError("file ends before any dataset element")
        sniff = blob[cur.pos + 4:cur.pos + 6]
        explicit = bool(b"AA" <= sniff <= b"ZZ" and sniff.isalpha())

    found: dict[tuple[int, int], bytes] = {}
    while not cur.done:
        tag, _, value = _read_element(cur, explicit)
        if tag in _WANTED:
            found[tag] = value

    def require(tag, name):
        if tag not in found:
            raise DicomMissingTagError(f"required tag {name} ({tag[0]:04x},{tag[1]:04x}) missing")
        return found[tag]

    rows = _parse_us(require(_TAG_ROWS, "Rows"), "Rows")
    cols = _parse_us(require(_TAG_COLS, "Columns"), "Columns")
    if rows < 1 or cols < 1:
        raise DicomValueError(f"degenerate image size {rows}x{cols}")
    spacing = _parse_ds(require(_TAG_SPACING, "PixelSpacing"), "PixelSpacing")
    if len(spacing) != 2:
        raise DicomValueError(f"PixelSpacing: expected 2 values, got {len(spacing)}")
    if spacing[0] <= 0 or spacing[1] <= 0:
        raise DicomValueError(f"PixelSpacing: non-positive pitch {spacing}")
    bits = _parse_us(require(_TAG_BITS, "BitsAllocated"), "BitsAllocated")
    if bits not in (8, 16):
        raise DicomUnsupportedError(f"BitsAllocated {bits} (only 8 and 16 supported)")
    signed = 0
    if _TAG_PIXELREP in found:
        signed = _parse_us(found[_TAG_PIXELREP], "PixelRepresentation")
        if signed not in (0, 1):
            raise DicomValueError(f"PixelRepresentation {signed} is not 0 or 1")
    slope = _parse_ds(found[_TAG_SLOPE], "RescaleSlope")[0] if _TAG_SLOPE in found else 1.0
    intercept = (
        _parse_ds(found[_TAG_INTERCEPT], "RescaleIntercept")[0]
        if _TAG_INTERCEPT in found else 0.0
    )
    raw = require(_TAG_PIXELDATA, "PixelData")
    need = rows * cols * (bits // 8)
    if len(raw) < need:
        raise DicomTruncatedError(
            f"PixelData holds {len(raw)} bytes, {rows}x{cols}x{bits}bit needs {need}"
        )
    dtype = {(8, 0): np.uint8, (8, 1): np.int8,
             (16, 0): "<u2", (16, 1): "<i2"}[(bits, signed)]
    pixels = np.frombuffer(raw[:need], dtype=dtype).reshape(rows, cols)
    image = pixels.astype(np.float64) * slope + intercept
    return image, (spacing[0], spacing[1])


# ---------------------------------------------------------------------------
# Contour text files: one "x y" pair per line, 0-based pixel-center
# coordinates, implicitly closed.


def parse_contour(text: str) -> ContourPolyline:
    points = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped:
            continue
        parts = stripped.split()
        if len(parts) != 2:
            raise ValueError(
                f"contour line {lineno}: expected two numbers, got {len(parts)} fields"
            )
        try:
            points.append((float(parts[0]), float(parts[1])))
        except ValueError as e:
            raise ValueError(f"contour line {lineno}: not a number: {line!r}") from e
    if len(points) < 3:
        raise ValueError(f"degenerate contour: {len(points)} points (need at least 3)")
    return ContourPolyline(np.array(points), closed=True)


def serialize_contour(poly: ContourPolyline) -> str:
    # repr of a Python float round-trips the exact value
    return "".join(f"{float(x)!r} {float(y)!r}\n" for x, y in poly.points)


def rasterize(poly: ContourPolyline, shape: tuple[int, int]) -> np.ndarray:
    """Fill a contour on the pixel-center grid with the even-odd rule.

    A center exactly on the boundary counts as inside, so an axis
    aligned square spanning x,y in [0, 4] covers the full 5x5 block.
    """
    h, w = shape
    pts = poly.points
    gx, gy = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    inside = np.zeros((h, w), dtype=bool)
    x1s, y1s = pts[:, 0], pts[:, 1]
    x2s, y2s = np.roll(x1s, -1), np.roll(y1s, -1)
    for x1, y1, x2, y2 in zip(x1s, y1s, x2s, y2s):
        crosses = (y1 > gy) != (y2 > gy)
        if crosses.any():
            xint = x1 + (gy - y1) * (x2 - x1) / (y2 - y1)
            inside ^= crosses & (gx < xint)
    # boundary override: centers within a hair of an edge are inside
    centers = np.stack([gx.ravel(), gy.ravel()], axis=1)
    d = _min_distances(centers, pts, closed=True).reshape(h, w)
    return (inside | (d <= 1e-9)).astype(np.uint8)


# ---------------------------------------------------------------------------
# Patient-level splits


def split_patients(case_ids, ratio: tuple[int, int, int] = (1, 1, 1),
                   seed: int = 0) -> tuple[list, list, list]:
    """Shuffle whole cases and cut train/validation/test.

    Sizes are floor(n * r_i / sum(r)) with leftover cases handed out
    train-first. Input order does not matter (ids are sorted before the
    seeded shuffle); a case never appears in two partitions.
    """
    ids = sorted(case_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("split_patients: duplicate case ids")
    if len(ratio) != 3 or any(r < 0 for r in ratio) or sum(ratio) == 0:
        raise ValueError(f"bad split ratio {ratio}")
    wanted_parts = sum(1 for r in ratio if r > 0)
    if len(ids) < wanted_parts:
        raise ValueError(
            f"split_patients: {len(ids)} cases cannot fill {wanted_parts} partitions"
        )
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    total = sum(ratio)
    counts = [len(ids) * r // total for r in ratio]
    leftover = len(ids) - sum(counts)
    for i in range(3):
        if leftover == 0:
            break
        if ratio[i] > 0:
            take = 1 if leftover > 0 else 0
            counts[i] += take
            leftover -= take
    train = order[:counts[0]]
    val = order[counts[0]:counts[0] + counts[1]]
    test = order[counts[0] + counts[1]:counts[0] + counts[1] + counts[2]]
    return train, val, test


# ---------------------------------------------------------------------------
# Synthetic short-axis phantoms


def _synth_one(size: int, rng: np.random.Generator, case_id: str):
    cx = size / 2 + rng.uniform(-size / 8, size / 8)
    cy = size / 2 + rng.uniform(-size / 8, size / 8)
    a = rng.uniform(size / 10, size / 6)  # cavity semi-axis along x
    b = a * rng.uniform(0.75, 1.3)
    wall = rng.uniform(size / 16, size / 10)
    pool_level = rng.uniform(0.75, 0.95)
    ring_level = rng.uniform(0.45, 0.65)
    bg_level = rng.uniform(0.05, 0.2)
    grad_amp = rng.uniform(0.0, 0.05)
    grad_dir = rng.uniform(0.0, 2.0 * np.pi)
    noise = rng.normal(0.0, 0.03, (size, size))

    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    inner = ((xs - cx) / a) ** 2 + ((ys - cy) / b) ** 2
    outer = ((xs - cx) / (a + wall)) ** 2 + ((ys - cy) / (b + wall)) ** 2
    image = np.full((size, size), bg_level)
    image[outer <= 1.0] = ring_level
    image[inner <= 1.0] = pool_level
    image += grad_amp * (
        (xs - size / 2) * np.cos(grad_dir) + (ys - size / 2) * np.sin(grad_dir)
    ) / size
    image = np.clip(image + noise, 0.0, 1.0)
    mask = (inner <= 1.0).astype(np.uint8)
    sample = CineSample(
        image=image, mask=mask, spacing_mm=(1.3, 1.3),
        case_id=case_id, slice_id="000",
    )
    return sample, {"cx": cx, "cy": cy, "a": a, "b": b}


def synth_phantom(count: int, size: int = 64, seed: int = 0) -> list[CineSample]:
    """Noise background, a brighter myocardial ring, and a brightest
    elliptical blood pool whose pixels are the mask. Geometry, levels
    and a mild intensity gradient are all randomized per sample; each
    sample is its own case so patient splits behave like the real set."""
    if size < 32:
        raise ValueError(f"phantom size must be at least 32, got {size}")
    if count < 1:
        raise ValueError(f"phantom count must be positive, got {count}")
    rng = np.random.default_rng(seed)
    return [_synth_one(size, rng, f"p{i:03d}")[0] for i in range(count)]


# ---------------------------------------------------------------------------
# Canonical on-disk samples

_ID_RE = re.compile(r"^[A-Za-z0-9_.-]+$")


def _sample_stem(sample: CineSample) -> str:
    for label, value in (("case_id", sample.case_id), ("slice_id", sample.slice_id)):
        if not _ID_RE.match(value):
            raise ValueError(f"{label} {value!r} is not filesystem-safe")
    return f"{sample.case_id}-{sample.slice_id}"


def save_sample(dir_path, sample: CineSample) -> str:
    """Write the raw/mask/json triple (plus contour text when present).
    Intensities are min-max scaled per slice and quantized to 16 bits.
    Returns the sample's file stem."""
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    stem = _sample_stem(sample)
    img = sample.image
    lo, hi = float(img.min()), float(img.max())
    if hi > lo:
        scaled = (img - lo) / (hi - lo)
    else:
        scaled = np.zeros_like(img)
    q = np.round(scaled * 65535.0).astype("<u2")
    (d / f"{stem}.raw").write_bytes(q.tobytes())
    (d / f"{stem}.mask.raw").write_bytes(sample.mask.astype(np.uint8).tobytes())
    rows, cols = img.shape
    sx, sy = sample.spacing_mm
    sidecar = {
        "rows": rows,
        "cols": cols,
        "spacing_mm": [sy, sx],  # row pitch first, like PixelSpacing
        "case_id": sample.case_id,
        "slice_id": sample.slice_id,
    }
    (d / f"{stem}.json").write_text(json.dumps(sidecar, indent=1) + "\n")
    if sample.truth_contour is not None:
        (d / f"{stem}.contour.txt").write_text(serialize_contour(sample.truth_contour))
    return stem


def load_sample(dir_path, stem: str) -> CineSample:
    d = Path(dir_path)
    try:
        sidecar = json.loads((d / f"{stem}.json").read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"{stem}.json: invalid JSON: {e}") from e
    rows, cols = int(sidecar["rows"]), int(sidecar["cols"])
    sy, sx = sidecar["spacing_mm"]
    raw = (d / f"{stem}.raw").read_bytes()
    if len(raw) != rows * cols * 2:
        raise ValueError(
            f"{stem}.raw holds {len(raw)} bytes, expected {rows * cols * 2}"
        )
    image = np.frombuffer(raw, dtype="<u2").reshape(rows, cols) / 65535.0
    mraw = (d / f"{stem}.mask.raw").read_bytes()
    if len(mraw) != rows * cols:
        raise ValueError(
            f"{stem}.mask.raw holds {len(mraw)} bytes, expected {rows * cols}"
        )
    mask = np.frombuffer(mraw, dtype=np.uint8).reshape(rows, cols)
    contour = None
    contour_path = d / f"{stem}.contour.txt"
    if contour_path.exists():
        contour = parse_contour(contour_path.read_text())
    return CineSample(
        image=image, mask=mask, spacing_mm=(float(sx), float(sy)),
        case_id=str(sidecar["case_id"]), slice_id=str(sidecar["slice_id"]),
        truth_contour=contour,
    )


def load_dataset(dir_path) -> list[CineSample]:
    """Load every canonical sample in a directory, sorted by stem."""
    d = Path(dir_path)
    stems = sorted(p.name[:-5] for p in d.glob("*.json"))
    if not stems:
        raise ValueError(f"no canonical samples found in {d}")
    return [load_sample(d, stem) for stem in stems]
