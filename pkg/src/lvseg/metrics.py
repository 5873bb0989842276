"""Segmentation quality metrics: overlap scores and contour distance.

Coordinates follow the contour-file convention everywhere: a point is
(x, y) with x the column index and y the row index of the pixel-center
grid, 0-based. Physical distances multiply x by the column pitch and y
by the row pitch before measuring, so APD comes out in millimetres.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ContourPolyline",
    "SliceRecord",
    "MetricsReport",
    "dice",
    "sensitivity",
    "extract_contour",
    "apd",
    "aggregate",
    "report_to_csv",
    "parse_report_csv",
]


@dataclass
class ContourPolyline:
    """A polyline of (x, y) vertices; closed means the last vertex
    connects back to the first by an implicit edge."""

    points: np.ndarray
    closed: bool = True

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError(f"contour points must be (M, 2), got {pts.shape}")
        if self.closed and len(pts) < 3:
            raise ValueError(f"closed contour needs at least 3 points, got {len(pts)}")
        if len(pts) >= 2:
            hops = np.diff(pts, axis=0)
            if np.any((hops == 0).all(axis=1)):
                raise ValueError("contour has consecutive duplicate points")
        if self.closed and len(pts) >= 2 and np.array_equal(pts[0], pts[-1]):
            raise ValueError("closed contour must not repeat its first point")
        self.points = pts


def _binary(mask, name):
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-D mask, got shape {arr.shape}")
    if not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} must be binary")
    return arr.astype(bool)


def dice(pred, truth) -> float:
    """2|P & T| / (|P| + |T|); two empty masks agree perfectly (1.0)."""
    p = _binary(pred, "pred")
    t = _binary(truth, "truth")
    if p.shape != t.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {t.shape}")
    total = int(p.sum()) + int(t.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & t).sum()) / total


def sensitivity(pred, truth) -> float:
    """TP / (TP + FN). Undefined (raises) when truth is empty."""
    p = _binary(pred, "pred")
    t = _binary(truth, "truth")
    if p.shape != t.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {t.shape}")
    positives = int(t.sum())
    if positives == 0:
        raise ValueError("sensitivity undefined: truth mask is empty")
    return int((p & t).sum()) / positives


# ---------------------------------------------------------------------------
# Contour extraction: marching squares at level 0.5 on the pixel-center
# grid. Binary input means every crossing lands exactly on an edge
# midpoint. The mask is zero-padded so blobs touching the border close.

# Cell corners: tl -> bit 1, tr -> bit 2, br -> bit 4, bl -> bit 8.
# Midpoints of a cell whose top-left padded pixel is (row i, col j):
#   T=(j+.5, i)  R=(j+1, i+.5)  B=(j+.5, i+1)  L=(j, i+.5)
# Segments are directed with foreground on the left, so every crossing
# has exactly one successor and loops stitch unambiguously. The two
# saddle cases treat the cell-center average (0.5, on-level) as inside,
# connecting the diagonal foreground corners.
_T, _R, _B, _L = 0, 1, 2, 3
_CASE_SEGMENTS: dict[int, list[tuple[int, int]]] = {
    1: [(_T, _L)],
    2: [(_R, _T)],
    4: [(_B, _R)],
    8: [(_L, _B)],
    3: [(_R, _L)],
    6: [(_B, _T)],
    12: [(_L, _R)],
    9: [(_T, _B)],
    7: [(_B, _L)],
    14: [(_L, _T)],
    13: [(_T, _R)],
    11: [(_R, _B)],
    5: [(_T, _R), (_B, _L)],
    10: [(_L, _T), (_R, _B)],
}


def _midpoint(which: int, i: int, j: int) -> tuple[float, float]:
    if which == _T:
        return (j + 0.5, float(i))
    if which == _R:
        return (j + 1.0, i + 0.5)
    if which == _B:
        return (j + 0.5, i + 1.0)
    return (float(j), i + 0.5)


def _shoelace(points: np.ndarray) -> float:
    x, y = points[:, 0], points[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def extract_contour(mask) -> ContourPolyline:
    """Trace the largest closed iso-contour of a binary mask.

    Vertices sit on edge midpoints between pixel centers; a single
    foreground pixel at (row, col) yields the four-point diamond
    (col+-.5, row), (col, row+-.5). When the mask has several blobs the
    loop enclosing the largest area (shoelace) is returned.
    """
    m = _binary(mask, "mask")
    if not m.any():
        raise ValueError("no contour: mask is empty")
    g = np.pad(m, 1).astype(np.int8)
    tl = g[:-1, :-1]
    tr = g[:-1, 1:]
    br = g[1:, 1:]
    bl = g[1:, :-1]
    case = tl + 2 * tr + 4 * br + 8 * bl
    iy, ix = np.nonzero((case != 0) & (case != 15))
    succ: dict[tuple[float, float], tuple[float, float]] = {}
    for i, j in zip(iy.tolist(), ix.tolist()):
        for a, b in _CASE_SEGMENTS[int(case[i, j])]:
            succ[_midpoint(a, i, j)] = _midpoint(b, i, j)
    best: list[tuple[float, float]] | None = None
    best_area = -1.0
    while succ:
        start = next(iter(succ))
        loop = [start]
        cur = succ.pop(start)
        while cur != start:
            loop.append(cur)
            cur = succ.pop(cur)
        pts = np.array(loop)
        area = abs(_shoelace(pts))
        if area > best_area:
            best_area = area
            best = loop
    pts = np.array(best) - 1.0  # undo the zero pad offset
    return ContourPolyline(pts, closed=True)


# ---------------------------------------------------------------------------
# Average perpendicular distance


def _scaled(poly: ContourPolyline, sx: float, sy: float) -> np.ndarray:
    return poly.points * np.array([sx, sy])


def _min_distances(points: np.ndarray, poly: np.ndarray, closed: bool) -> np.ndarray:
    """Distance from each point to the nearest segment of a polyline."""
    a = poly if closed else poly[:-1]
    b = np.roll(poly, -1, axis=0) if closed else poly[1:]
    ab = b - a  # (S, 2)
    denom = (ab ** 2).sum(axis=1)  # (S,)
    ap = points[:, None, :] - a[None, :, :]  # (P, S, 2)
    t = np.clip((ap * ab[None]).sum(axis=2) / denom[None], 0.0, 1.0)
    proj = a[None] + t[..., None] * ab[None]
    d = np.sqrt(((points[:, None, :] - proj) ** 2).sum(axis=2))
    return d.min(axis=1)


def apd(auto: ContourPolyline, manual: ContourPolyline,
        spacing_mm: tuple[float, float], symmetric: bool = False) -> float:
    """Mean distance from auto's vertices to manual's segments, in mm.

    spacing_mm is (sx, sy): column pitch scales x, row pitch scales y.
    The default direction matches how contouring error is usually
    reported (auto measured against the manual reference); symmetric
    averages both directions.
    """
    sx, sy = spacing_mm
    if sx <= 0 or sy <= 0:
        raise ValueError(f"pixel spacing must be positive, got {spacing_mm}")
    a = _scaled(auto, sx, sy)
    m = _scaled(manual, sx, sy)
    d = float(_min_distances(a, m, manual.closed).mean())
    if not symmetric:
        return d
    d_back = float(_min_distances(m, a, auto.closed).mean())
    return 0.5 * (d + d_back)


# ---------------------------------------------------------------------------
# Per-slice records and aggregation


@dataclass
class SliceRecord:
    case_id: str
    slice_id: str
    dice: float
    sensitivity: float | None
    apd_mm: float | None
    empty_prediction: bool = False


@dataclass
class MetricsReport:
    records: list[SliceRecord]
    dice_mean: float
    dice_std: float
    sensitivity_mean: float | None
    apd_mean_mm: float | None
    apd_excluded: int
    extra: dict[str, str] = field(default_factory=dict)


def aggregate(records: list[SliceRecord]) -> MetricsReport:
    """Pool per-slice records. Dice uses the sample standard deviation
    (ddof=1; zero for a single record). Slices without a defined
    sensitivity or APD are excluded from those means only."""
    if not records:
        raise ValueError("aggregate: no records")
    dices = np.array([r.dice for r in records])
    sens = [r.sensitivity for r in records if r.sensitivity is not None]
    apds = [r.apd_mm for r in records if r.apd_mm is not None]
    return MetricsReport(
        records=list(records),
        dice_mean=float(dices.mean()),
        dice_std=float(dices.std(ddof=1)) if len(dices) > 1 else 0.0,
        sensitivity_mean=float(np.mean(sens)) if sens else None,
        apd_mean_mm=float(np.mean(apds)) if apds else None,
        apd_excluded=sum(1 for r in records if r.apd_mm is None),
    )


_CSV_HEADER = "case,slice,dice,sensitivity,apd_mm,empty_pred"


def _fmt(v: float | None) -> str:
    return "" if v is None else repr(float(v))


def report_to_csv(report: MetricsReport) -> str:
    """Rows first, then aggregates (and any extra run metadata) as
    '#'-prefixed comment lines. Undefined per-slice values are empty."""
    lines = [_CSV_HEADER]
    for r in report.records:
        lines.append(
            f"{r.case_id},{r.slice_id},{r.dice!r},{_fmt(r.sensitivity)},"
            f"{_fmt(r.apd_mm)},{int(r.empty_prediction)}"
        )
    agg = [
        ("dice_mean", repr(report.dice_mean)),
        ("dice_std", repr(report.dice_std)),
        ("sensitivity_mean", "nan" if report.sensitivity_mean is None
         else repr(report.sensitivity_mean)),
        ("apd_mean_mm", "nan" if report.apd_mean_mm is None
         else repr(report.apd_mean_mm)),
        ("apd_excluded", str(report.apd_excluded)),
    ]
    for key, val in agg:
        lines.append(f"# {key},{val}")
    for key, val in report.extra.items():
        lines.append(f"# {key},{val}")
    return "\n".join(lines) + "\n"


def parse_report_csv(text: str) -> MetricsReport:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != _CSV_HEADER:
        raise ValueError("report CSV: missing or wrong header")
    records = []
    meta: dict[str, str] = {}
    for ln in lines[1:]:
        if ln.startswith("#"):
            body = ln[1:].strip()
            key, _, val = body.partition(",")
            meta[key.strip()] = val.strip()
            continue
        parts = ln.split(",")
        if len(parts) != 6:
            raise ValueError(f"report CSV: bad row {ln!r}")
        records.append(
            SliceRecord(
                case_id=parts[0],
                slice_id=parts[1],
                dice=float(parts[2]),
                sensitivity=float(parts[3]) if parts[3] else None,
                apd_mm=float(parts[4]) if parts[4] else None,
                empty_prediction=parts[5] == "1",
            )
        )
    report = aggregate(records)
    known = {"dice_mean", "dice_std", "sensitivity_mean", "apd_mean_mm", "apd_excluded"}
    report.extra = {k: v for k, v in meta.items() if k not in known}
    return report
