"""YOLO segmentation label text, polygon geometry and rasterization.

A label line is ``<class> x1 y1 x2 y2 ...`` with normalized coordinates.
Prediction files append one trailing confidence token to every line.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

COORD_TOL = 1e-9
CLASS_NAMES = ("Branch", "Trunk")
BRANCH, TRUNK = 0, 1


class LabelParseError(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass
class InstanceRecord:
    class_id: int
    polygon: np.ndarray  # [V, 2] normalized (x, y)
    confidence: float | None = None
    _mask_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.polygon = np.asarray(self.polygon, dtype=np.float64).reshape(-1, 2)

    @property
    def box(self) -> np.ndarray:
        """Tight axis-aligned hull as normalized (x1, y1, x2, y2)."""
        lo = self.polygon.min(axis=0)
        hi = self.polygon.max(axis=0)
        return np.array([lo[0], lo[1], hi[0], hi[1]])

    def mask(self, height: int, width: int) -> np.ndarray:
        key = (height, width)
        if key not in self._mask_cache:
            self._mask_cache[key] = rasterize(self.polygon, height, width)
        return self._mask_cache[key]


# ---------------------------------------------------------------- text format

def _parse_line(tokens: list[str], line_no: int, with_confidence: bool) -> InstanceRecord:
    try:
        cls_val = float(tokens[0])
    except ValueError:
        raise LabelParseError(line_no, f"non-numeric class token {tokens[0]!r}") from None
    if not cls_val.is_integer() or cls_val < 0:
        raise LabelParseError(line_no, f"class id must be a nonnegative integer, got {tokens[0]!r}")
    try:
        values = [float(t) for t in tokens[1:]]
    except ValueError as exc:
        raise LabelParseError(line_no, f"non-numeric token ({exc})") from None
    if not all(math.isfinite(v) for v in values):
        raise LabelParseError(line_no, "non-finite value")
    conf = None
    if with_confidence:
        if not values:
            raise LabelParseError(line_no, "missing confidence token")
        conf = values.pop()
        if not 0.0 <= conf <= 1.0:
            raise LabelParseError(line_no, f"confidence {conf} outside [0,1]")
    if len(values) % 2:
        raise LabelParseError(line_no, f"odd coordinate count {len(values)}")
    if len(values) < 6:
        raise LabelParseError(line_no, f"need at least 3 vertices, got {len(values) // 2}")
    for v in values:
        if v < -COORD_TOL or v > 1.0 + COORD_TOL:
            raise LabelParseError(line_no, f"coordinate {v} outside [0,1]")
    poly = np.clip(np.array(values).reshape(-1, 2), 0.0, 1.0)
    return InstanceRecord(int(cls_val), poly, conf)


def parse_labels(text: str, strict: bool = True, errors: list | None = None,
                 with_confidence: bool = False) -> list[InstanceRecord]:
    """Parse label text into records.

    In strict mode the first bad line raises :class:`LabelParseError`; otherwise
    bad lines are skipped and their errors appended to ``errors`` if given.
    """
    records = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        tokens = line.split()
        if not tokens:
            continue
        try:
            records.append(_parse_line(tokens, line_no, with_confidence))
        except LabelParseError as err:
            if strict:
                raise
            if errors is not None:
                errors.append(err)
    return records


def parse_predictions(text: str, strict: bool = True, errors: list | None = None) -> list[InstanceRecord]:
    return parse_labels(text, strict=strict, errors=errors, with_confidence=True)


def serialize_labels(records) -> str:
    lines = []
    for rec in records:
        coords = " ".join(f"{v:.6f}" for v in np.asarray(rec.polygon).reshape(-1))
        line = f"{int(rec.class_id)} {coords}"
        if rec.confidence is not None:
            line += f" {rec.confidence:.8f}"
        lines.append(line)
    return "".join(line + "\n" for line in lines)


def read_labels(path, strict: bool = True, errors: list | None = None) -> list[InstanceRecord]:
    with open(path, encoding="utf-8") as fh:
        return parse_labels(fh.read(), strict=strict, errors=errors)


def write_labels(path, records) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(serialize_labels(records))


# ---------------------------------------------------------------- geometry

def polygon_area(poly) -> float:
    """Signed shoelace area (positive for counterclockwise in x-right/y-up)."""
    p = np.asarray(poly, dtype=np.float64)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _segments_cross(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return 0 if abs(v) < 1e-15 else (1 if v > 0 else -1)

    def on_seg(a, b, c):
        return (min(a[0], b[0]) - 1e-15 <= c[0] <= max(a[0], b[0]) + 1e-15
                and min(a[1], b[1]) - 1e-15 <= c[1] <= max(a[1], b[1]) + 1e-15)

    o1, o2 = orient(p1, p2, q1), orient(p1, p2, q2)
    o3, o4 = orient(q1, q2, p1), orient(q1, q2, p2)
    if o1 != o2 and o3 != o4:
        return True
    if o1 == 0 and on_seg(p1, p2, q1):
        return True
    if o2 == 0 and on_seg(p1, p2, q2):
        return True
    if o3 == 0 and on_seg(q1, q2, p1):
        return True
    if o4 == 0 and on_seg(q1, q2, p2):
        return True
    return False


def is_simple_polygon(poly) -> bool:
    """True when no two non-adjacent edges touch and the area is nonzero."""
    p = np.asarray(poly, dtype=np.float64)
    n = len(p)
    if n < 3 or abs(polygon_area(p)) < 1e-15:
        return False
    edges = [(p[i], p[(i + 1) % n]) for i in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            if j == i + 1 or (i == 0 and j == n - 1):
                continue
            if _segments_cross(*edges[i], *edges[j]):
                return False
    return True


def clip_to_unit_square(poly) -> np.ndarray:
    """Sutherland-Hodgman clip against [0,1]^2; may return fewer than 3 vertices."""
    pts = [tuple(v) for v in np.asarray(poly, dtype=np.float64)]
    planes = ((0, 0.0, True), (0, 1.0, False), (1, 0.0, True), (1, 1.0, False))
    for axis, bound, keep_above in planes:
        if not pts:
            break

        def inside(pt):
            return pt[axis] >= bound if keep_above else pt[axis] <= bound

        out = []
        prev = pts[-1]
        for cur in pts:
            if inside(cur):
                if not inside(prev):
                    out.append(_intersect(prev, cur, axis, bound))
                out.append(cur)
            elif inside(prev):
                out.append(_intersect(prev, cur, axis, bound))
            prev = cur
        pts = out
    # drop consecutive duplicates
    dedup = []
    for pt in pts:
        if not dedup or abs(pt[0] - dedup[-1][0]) > 1e-12 or abs(pt[1] - dedup[-1][1]) > 1e-12:
            dedup.append(pt)
    if len(dedup) > 1 and abs(dedup[0][0] - dedup[-1][0]) <= 1e-12 and abs(dedup[0][1] - dedup[-1][1]) <= 1e-12:
        dedup.pop()
    return np.clip(np.array(dedup, dtype=np.float64).reshape(-1, 2), 0.0, 1.0)


def _intersect(a, b, axis, bound):
    t = (bound - a[axis]) / (b[axis] - a[axis])
    x = a[0] + t * (b[0] - a[0])
    y = a[1] + t * (b[1] - a[1])
    return (bound, y) if axis == 0 else (x, bound)


def rasterize(poly, height: int, width: int) -> np.ndarray:
    """Even-odd fill; pixel (r, c) is set iff its center lies inside the polygon."""
    p = np.asarray(poly, dtype=np.float64).reshape(-1, 2)
    mask = np.zeros((height, width), dtype=bool)
    if len(p) < 3 or abs(polygon_area(p)) < 1e-15:
        warnings.warn("rasterize: degenerate polygon gives an empty mask")
        return mask
    px = (np.arange(width) + 0.5) / width
    py = (np.arange(height) + 0.5) / height
    x0, y0 = p[:, 0], p[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    for k in range(len(p)):
        if y0[k] == y1[k]:
            continue
        rows = (y0[k] > py) != (y1[k] > py)
        if not rows.any():
            continue
        xint = x0[k] + (py[rows] - y0[k]) * (x1[k] - x0[k]) / (y1[k] - y0[k])
        mask[rows] ^= px[None, :] < xint[:, None]
    return mask


def mask_to_polygon(mask: np.ndarray) -> np.ndarray | None:
    """Outline of the largest 4-connected blob as a normalized polygon.

    The outline runs through the centers of the boundary cells of the mask
    upsampled 2x, which sit a quarter pixel inside the pixel edges, so
    :func:`rasterize` reproduces blobs without diagonal-only pinches exactly.
    """
    import cv2

    m = np.asarray(mask, dtype=np.uint8)
    if not m.any():
        return None
    h, w = m.shape
    n_lab, lab = cv2.connectedComponents(m, connectivity=4)
    if n_lab > 2:
        counts = np.bincount(lab.reshape(-1))[1:]
        m = (lab == 1 + int(np.argmax(counts))).astype(np.uint8)
    big = np.kron(m, np.ones((2, 2), dtype=np.uint8))
    contours, _ = cv2.findContours(big, cv2.RETR_EXTERNAL, cv2.CHAIN_APPROX_SIMPLE)
    if not contours:
        return None
    c = max(contours, key=cv2.contourArea).reshape(-1, 2).astype(np.float64)
    if len(c) < 3:
        return None
    poly = np.stack([(c[:, 0] + 0.5) / (2 * w), (c[:, 1] + 0.5) / (2 * h)], axis=1)
    return poly
