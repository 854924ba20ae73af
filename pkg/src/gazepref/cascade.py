"""Boosted stump cascades (Haar and multi-block LBP) and sliding-window detection.

Cascade files use the XML layout produced by ``opencv_traincascade``
(``stageType`` BOOST, ``featureType`` HAAR or LBP).  Only depth-1 trees and
upright Haar features are supported; anything else is rejected at parse time.
"""

from __future__ import annotations

import math
from functools import lru_cache
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence, Union

import numpy as np

from .imaging import (GrayImage, IntegralImage, Rect, crop, integral,
                      window_mean_var)


class CascadeFormatError(ValueError):
    """Malformed cascade file."""


class UnsupportedCascadeError(CascadeFormatError):
    """Well-formed cascade using a variant this module does not implement."""


@dataclass(frozen=True)
class HaarFeature:
    rects: tuple[tuple[Rect, float], ...]


@dataclass(frozen=True)
class LbpFeature:
    cell: Rect


@dataclass(frozen=True)
class Stump:
    feature: int
    left: float
    right: float
    threshold: float = 0.0
    # 256-bit category table, eight 32-bit words (LBP only)
    subset: tuple[int, ...] = ()


@dataclass(frozen=True)
class Stage:
    threshold: float
    weak: tuple[Stump, ...]


@dataclass(frozen=True)
class CascadeModel:
    feature_kind: str  # "haar" or "lbp"
    window_w: int
    window_h: int
    stages: tuple[Stage, ...]
    features: tuple[Union[HaarFeature, LbpFeature], ...]

    def __post_init__(self):
        if self.feature_kind not in ("haar", "lbp"):
            raise CascadeFormatError(f"unknown feature kind {self.feature_kind!r}")
        if not self.stages:
            raise CascadeFormatError("cascade has no stages")
        for si, st in enumerate(self.stages):
            if not st.weak:
                raise CascadeFormatError(f"stage {si} has no weak classifiers")
            for wk in st.weak:
                if not 0 <= wk.feature < len(self.features):
                    raise CascadeFormatError(
                        f"stage {si}: feature index {wk.feature} out of range")


@dataclass(frozen=True)
class Detection:
    rect: Rect
    neighbors: int = 1

    def to_line(self) -> str:
        r = self.rect
        return f"{r.x} {r.y} {r.w} {r.h} {self.neighbors}"


class Verdict(NamedTuple):
    passed: bool
    failed_stage: int | None = None


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def _text(el: ET.Element | None, what: str) -> str:
    if el is None or el.text is None:
        raise CascadeFormatError(f"missing <{what}>")
    return el.text.strip()


def _numbers(el: ET.Element | None, what: str) -> list[str]:
    return _text(el, what).split()


def parse_cascade(xml: str | bytes) -> CascadeModel:
    try:
        root = ET.fromstring(xml)
    except ET.ParseError as exc:
        raise CascadeFormatError(f"malformed XML: {exc}") from exc
    try:
        return _parse_root(root)
    except CascadeFormatError:
        raise
    except ValueError as exc:
        raise CascadeFormatError(f"bad number: {exc}") from exc


def _parse_root(root: ET.Element) -> CascadeModel:
    casc = root if root.tag == "cascade" else root.find("cascade")
    if casc is None:
        first = next(iter(root), None)
        if first is not None and first.find("stages") is not None:
            raise UnsupportedCascadeError(
                f"<{first.tag}>: old-style cascade layout is not supported")
        raise CascadeFormatError("no <cascade> element")

    stage_type = _text(casc.find("stageType"), "stageType")
    if stage_type != "BOOST":
        raise UnsupportedCascadeError(f"<stageType>: {stage_type!r}")
    ftype = _text(casc.find("featureType"), "featureType")
    if ftype not in ("HAAR", "LBP"):
        raise UnsupportedCascadeError(f"<featureType>: {ftype!r}")
    kind = ftype.lower()
    try:
        win_w = int(_text(casc.find("width"), "width"))
        win_h = int(_text(casc.find("height"), "height"))
    except ValueError as exc:
        raise CascadeFormatError(f"bad window size: {exc}") from exc

    stages_el = casc.find("stages")
    if stages_el is None:
        raise CascadeFormatError("missing <stages>")
    stages = []
    for si, st_el in enumerate(stages_el.findall("_")):
        thr = float(_text(st_el.find("stageThreshold"), "stageThreshold"))
        weak_el = st_el.find("weakClassifiers")
        if weak_el is None:
            raise CascadeFormatError(f"stage {si}: missing <weakClassifiers>")
        weak = [_parse_stump(w, kind, si, wi)
                for wi, w in enumerate(weak_el.findall("_"))]
        stages.append(Stage(thr, tuple(weak)))

    feats_el = casc.find("features")
    if feats_el is None:
        raise CascadeFormatError("missing <features>")
    features = [_parse_feature(f, kind, fi, win_w, win_h)
                for fi, f in enumerate(feats_el.findall("_"))]

    return CascadeModel(kind, win_w, win_h, tuple(stages), tuple(features))


def _parse_stump(el: ET.Element, kind: str, si: int, wi: int) -> Stump:
    where = f"stage {si} weak {wi}"
    nodes = _numbers(el.find("internalNodes"), "internalNodes")
    leaves = [float(v) for v in _numbers(el.find("leafValues"), "leafValues")]
    node_len = 4 if kind == "haar" else 11
    if len(nodes) != node_len or len(leaves) != 2:
        raise UnsupportedCascadeError(
            f"<internalNodes> at {where}: only depth-1 stumps are supported")
    if int(nodes[0]) != 0 or int(nodes[1]) != -1:
        raise UnsupportedCascadeError(f"<internalNodes> at {where}: not a stump")
    feat = int(nodes[2])
    if kind == "haar":
        return Stump(feat, leaves[0], leaves[1], threshold=float(nodes[3]))
    subset = tuple(int(v) & 0xFFFFFFFF for v in nodes[3:])
    return Stump(feat, leaves[0], leaves[1], subset=subset)


def _parse_feature(el: ET.Element, kind: str, fi: int, win_w: int, win_h: int):
    if kind == "lbp":
        vals = [int(v) for v in _numbers(el.find("rect"), "rect")]
        if len(vals) != 4:
            raise CascadeFormatError(f"feature {fi}: bad LBP <rect>")
        cell = Rect(*vals)
        if cell.x + 3 * cell.w > win_w or cell.y + 3 * cell.h > win_h:
            raise CascadeFormatError(f"feature {fi}: LBP grid exceeds window")
        return LbpFeature(cell)

    tilted = el.find("tilted")
    if tilted is not None and tilted.text and int(tilted.text.strip()) != 0:
        raise UnsupportedCascadeError(f"<tilted> in feature {fi}: tilted Haar features are not supported")
    rects_el = el.find("rects")
    if rects_el is None:
        raise CascadeFormatError(f"feature {fi}: missing <rects>")
    rects = []
    for r_el in rects_el.findall("_"):
        parts = _text(r_el, "rects/_").split()
        if len(parts) != 5:
            raise CascadeFormatError(f"feature {fi}: bad rect {parts}")
        r = Rect(*(int(p) for p in parts[:4]))
        if not r.fits(win_w, win_h):
            raise CascadeFormatError(f"feature {fi}: rect outside window")
        rects.append((r, float(parts[4])))
    if not 1 <= len(rects) <= 3:
        raise CascadeFormatError(f"feature {fi}: expected 1-3 rects, got {len(rects)}")
    return HaarFeature(tuple(rects))


def load_cascade(path) -> CascadeModel:
    with open(path, "rb") as fh:
        return parse_cascade(fh.read())


# ---------------------------------------------------------------------------
# Scaled geometry (shared by the scalar and vectorized evaluators)
# ---------------------------------------------------------------------------

def _rnd(v: float) -> int:
    return int(math.floor(v + 0.5))


def scaled_window(model: CascadeModel, scale: float) -> tuple[int, int]:
    return _rnd(model.window_w * scale), _rnd(model.window_h * scale)


def haar_norm_rect(model: CascadeModel, scale: float) -> tuple[int, int, int, int]:
    """Window inset by one base pixel; the region used for lighting normalization."""
    return (_rnd(scale), _rnd(scale),
            max(1, _rnd((model.window_w - 2) * scale)),
            max(1, _rnd((model.window_h - 2) * scale)))


def scaled_haar(feature: HaarFeature, scale: float) -> list[tuple[int, int, int, int, float]]:
    """Rects as (dx, dy, w, h, weight) offsets from the window origin.

    When the unscaled feature is balanced (weighted areas cancel), the first
    weight is corrected so that rounding at this scale keeps it balanced.
    """
    out = []
    for r, wgt in feature.rects:
        out.append((_rnd(r.x * scale), _rnd(r.y * scale),
                    max(1, _rnd(r.w * scale)), max(1, _rnd(r.h * scale)), wgt))
    balanced = abs(sum(r.area * w for r, w in feature.rects)) < 1e-9
    if balanced and len(out) > 1 and scale != 1.0:
        rest = sum(w * rw * rh for _, _, rw, rh, w in out[1:])
        x, y, rw, rh, _ = out[0]
        out[0] = (x, y, rw, rh, -rest / (rw * rh))
    return out


def scaled_lbp(feature: LbpFeature, scale: float) -> tuple[int, int, int, int]:
    """Top-left block of the 3x3 grid as (dx, dy, block_w, block_h)."""
    c = feature.cell
    return (_rnd(c.x * scale), _rnd(c.y * scale),
            max(1, _rnd(c.w * scale)), max(1, _rnd(c.h * scale)))


def feature_extent(model: CascadeModel, scale: float) -> tuple[int, int]:
    """Smallest (w, h) region that covers the window and every scaled feature."""
    ew, eh = scaled_window(model, scale)
    for f in model.features:
        if isinstance(f, LbpFeature):
            dx, dy, bw, bh = scaled_lbp(f, scale)
            ew, eh = max(ew, dx + 3 * bw), max(eh, dy + 3 * bh)
        else:
            for dx, dy, rw, rh, _ in scaled_haar(f, scale):
                ew, eh = max(ew, dx + rw), max(eh, dy + rh)
    return ew, eh


# neighbour blocks in bit order, most significant first: (row, col) in the 3x3 grid
LBP_NEIGHBORS = ((0, 0), (0, 1), (0, 2), (1, 2), (2, 2), (2, 1), (2, 0), (1, 0))


def lbp_code(block_sums: Sequence[Sequence[int]]) -> int:
    """8-bit code from a 3x3 grid of block sums; a bit is set iff neighbour >= centre."""
    center = block_sums[1][1]
    code = 0
    for r, c in LBP_NEIGHBORS:
        code = (code << 1) | (1 if block_sums[r][c] >= center else 0)
    return code


def subset_has(subset: Sequence[int], code: int) -> bool:
    return bool((subset[code >> 5] >> (code & 31)) & 1)


# ---------------------------------------------------------------------------
# Single-window evaluation
# ---------------------------------------------------------------------------

def _corner_sum(table: np.ndarray, x: int, y: int, w: int, h: int) -> int:
    return (int(table[y + h, x + w]) - int(table[y, x + w])
            - int(table[y + h, x]) + int(table[y, x]))


def _check_window(model: CascadeModel, ii: IntegralImage, origin, scale: float):
    ox, oy = origin
    ew, eh = feature_extent(model, scale)
    if ox < 0 or oy < 0 or ox + ew > ii.width or oy + eh > ii.height:
        raise IndexError(f"window at {origin} scale {scale} outside {ii.width}x{ii.height} image")


def haar_stddev(model: CascadeModel, ii: IntegralImage, origin, scale: float) -> tuple[float, int]:
    nx, ny, nw, nh = haar_norm_rect(model, scale)
    _, var = window_mean_var(ii, Rect(origin[0] + nx, origin[1] + ny, nw, nh))
    return (math.sqrt(var) if var > 0 else 1.0), nw * nh


def haar_feature_value(rects, ii: IntegralImage, origin) -> float:
    """Weighted rectangle sum for geometry from ``scaled_haar``."""
    ox, oy = origin
    val = 0.0
    for dx, dy, rw, rh, wgt in rects:
        val += wgt * _corner_sum(ii.sums, ox + dx, oy + dy, rw, rh)
    return val


def lbp_feature_code(block, ii: IntegralImage, origin) -> int:
    """LBP code for a block geometry from ``scaled_lbp``."""
    ox, oy = origin
    dx, dy, bw, bh = block
    blocks = [[_corner_sum(ii.sums, ox + dx + c * bw, oy + dy + r * bh, bw, bh)
               for c in range(3)] for r in range(3)]
    return lbp_code(blocks)


def eval_haar_window(model: CascadeModel, ii: IntegralImage, origin, scale: float = 1.0) -> Verdict:
    if model.feature_kind != "haar":
        raise ValueError("eval_haar_window needs a Haar cascade")
    _check_window(model, ii, origin, scale)
    std, area = haar_stddev(model, ii, origin, scale)
    geom = [scaled_haar(f, scale) for f in model.features]
    for si, stage in enumerate(model.stages):
        acc = 0.0
        for wk in stage.weak:
            val = haar_feature_value(geom[wk.feature], ii, origin)
            acc += wk.left if val < wk.threshold * std * area else wk.right
        if acc < stage.threshold:
            return Verdict(False, si)
    return Verdict(True)


def eval_lbp_window(model: CascadeModel, ii: IntegralImage, origin, scale: float = 1.0) -> Verdict:
    if model.feature_kind != "lbp":
        raise ValueError("eval_lbp_window needs an LBP cascade")
    _check_window(model, ii, origin, scale)
    geom = [scaled_lbp(f, scale) for f in model.features]
    for si, stage in enumerate(model.stages):
        acc = 0.0
        for wk in stage.weak:
            code = lbp_feature_code(geom[wk.feature], ii, origin)
            acc += wk.left if subset_has(wk.subset, code) else wk.right
        if acc < stage.threshold:
            return Verdict(False, si)
    return Verdict(True)


def eval_window(model: CascadeModel, ii: IntegralImage, origin, scale: float = 1.0) -> Verdict:
    if model.feature_kind == "haar":
        return eval_haar_window(model, ii, origin, scale)
    return eval_lbp_window(model, ii, origin, scale)


# ---------------------------------------------------------------------------
# Multiscale scan
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DetectParams:
    scale_factor: float = 1.1
    min_size: tuple[int, int] = (0, 0)
    max_size: tuple[int, int] | None = None
    step: float = 1.0

    def __post_init__(self):
        if not self.scale_factor > 1:
            raise ValueError("scale_factor must be > 1")
        if self.step <= 0:
            raise ValueError("step must be positive")


def scan_scales(model: CascadeModel, width: int, height: int, params: DetectParams):
    """Yield (scale, window_w, window_h, stride) for every admissible scale."""
    k = 0
    while True:
        scale = params.scale_factor ** k
        k += 1
        ww, wh = scaled_window(model, scale)
        ew, eh = feature_extent(model, scale)
        if ew > width or eh > height:
            return
        if params.max_size is not None and (ww > params.max_size[0] or wh > params.max_size[1]):
            return
        if ww < params.min_size[0] or wh < params.min_size[1]:
            continue
        yield scale, ww, wh, max(1, _rnd(params.step * scale))


def window_origins(model: CascadeModel, width: int, height: int, scale: float, stride: int):
    ew, eh = feature_extent(model, scale)
    ys = np.arange(0, height - eh + 1, stride)
    xs = np.arange(0, width - ew + 1, stride)
    return ys, xs


_DENSE_FRACTION = 0.25


@lru_cache(maxsize=None)
def _subset_table(subset: tuple[int, ...]) -> np.ndarray:
    return np.array([subset_has(subset, v) for v in range(256)])


class _Grid:
    """Corner lookups for a regular grid of window origins.

    While most windows are alive, lookups are strided slices of the summed
    area table; once the survivors thin out they switch to gathers.
    """

    def __init__(self, table: np.ndarray, ys: np.ndarray, xs: np.ndarray, stride: int):
        self.table = table
        self.ny, self.nx, self.stride = ys.size, xs.size, stride
        self.n = ys.size * xs.size
        self.alive = np.arange(self.n)
        self.dense = True
        self.oy = self.ox = None

    def point(self, dy: int, dx: int, table: np.ndarray | None = None) -> np.ndarray:
        t = self.table if table is None else table
        if self.dense:
            s = self.stride
            v = t[dy:dy + s * (self.ny - 1) + 1:s, dx:dx + s * (self.nx - 1) + 1:s].ravel()
            return v if self.alive.size == self.n else v[self.alive]
        return t[self.oy + dy, self.ox + dx]

    def box(self, x: int, y: int, w: int, h: int, table: np.ndarray | None = None) -> np.ndarray:
        return (self.point(y + h, x + w, table) - self.point(y, x + w, table)
                - self.point(y + h, x, table) + self.point(y, x, table))

    def keep(self, mask: np.ndarray) -> None:
        self.alive = self.alive[mask]
        if self.dense and self.alive.size < _DENSE_FRACTION * self.n:
            self.dense = False
        if not self.dense:
            self.oy = (self.alive // self.nx) * self.stride
            self.ox = (self.alive % self.nx) * self.stride


def _passing_windows(model: CascadeModel, ii: IntegralImage, scale: float,
                     ys: np.ndarray, xs: np.ndarray, stride: int) -> np.ndarray:
    """Flat (row-major) indices of grid origins that pass every stage."""
    sums = ii.sums.view(np.int64)
    grid = _Grid(sums, ys, xs, stride)
    if model.feature_kind == "haar":
        nx, ny, nw, nh = haar_norm_rect(model, scale)
        area = nw * nh
        s = grid.box(nx, ny, nw, nh).astype(np.float64)
        sq = grid.box(nx, ny, nw, nh, ii.sqsums.view(np.int64)).astype(np.float64)
        mean = s / area
        var = np.maximum(sq / area - mean * mean, 0.0)
        std = np.where(var > 0, np.sqrt(var), 1.0)
        geom = [scaled_haar(f, scale) for f in model.features]
    else:
        geom = [scaled_lbp(f, scale) for f in model.features]

    for stage in model.stages:
        if grid.alive.size == 0:
            break
        acc = np.zeros(grid.alive.size)
        for wk in stage.weak:
            if model.feature_kind == "haar":
                val = np.zeros(grid.alive.size)
                for dx, dy, rw, rh, wgt in geom[wk.feature]:
                    val += wgt * grid.box(dx, dy, rw, rh)
                go_left = val < wk.threshold * std * area
            else:
                dx, dy, bw, bh = geom[wk.feature]
                p = [[grid.point(dy + r * bh, dx + c * bw) for c in range(4)] for r in range(4)]
                blocks = [[p[r + 1][c + 1] - p[r][c + 1] - p[r + 1][c] + p[r][c]
                           for c in range(3)] for r in range(3)]
                center = blocks[1][1]
                code = np.zeros(grid.alive.size, dtype=np.int64)
                for r, c in LBP_NEIGHBORS:
                    code = (code << 1) | (blocks[r][c] >= center)
                go_left = _subset_table(wk.subset)[code]
            acc += np.where(go_left, wk.left, wk.right)
        mask = acc >= stage.threshold
        if model.feature_kind == "haar":
            std = std[mask]
        grid.keep(mask)
    return grid.alive


def detect_multiscale(model: CascadeModel, img: GrayImage | IntegralImage,
                      params: DetectParams = DetectParams()) -> list[Detection]:
    """Raw (ungrouped) detections, ordered by scale, then row, then column."""
    ii = img if isinstance(img, IntegralImage) else integral(img)
    out: list[Detection] = []
    for scale, ww, wh, stride in scan_scales(model, ii.width, ii.height, params):
        ys, xs = window_origins(model, ii.width, ii.height, scale, stride)
        if ys.size == 0 or xs.size == 0:
            continue
        for idx in _passing_windows(model, ii, scale, ys, xs, stride).tolist():
            y, x = divmod(idx, xs.size)
            out.append(Detection(Rect(x * stride, y * stride, ww, wh)))
    return out


# ---------------------------------------------------------------------------
# Grouping
# ---------------------------------------------------------------------------

def similar(a: Rect, b: Rect, eps: float) -> bool:
    tol = eps * (a.w + a.h + b.w + b.h) / 4.0
    return (abs(a.x - b.x) <= tol and abs(a.y - b.y) <= tol
            and abs(a.w - b.w) <= tol and abs(a.h - b.h) <= tol)


def partition(rects: Sequence[Rect], eps: float) -> list[int]:
    """Class label per rect: connected components of the similarity relation."""
    labels = [-1] * len(rects)
    n_classes = 0
    for i in range(len(rects)):
        if labels[i] >= 0:
            continue
        labels[i] = n_classes
        frontier = [i]
        while frontier:
            j = frontier.pop()
            for k in range(len(rects)):
                if labels[k] < 0 and similar(rects[j], rects[k], eps):
                    labels[k] = n_classes
                    frontier.append(k)
        n_classes += 1
    return labels


def group_rectangles(raw: Sequence[Detection], min_neighbors: int = 3,
                     eps: float = 0.2) -> list[Detection]:
    if eps < 0:
        raise ValueError("eps must be >= 0")
    rects = [d.rect for d in raw]
    labels = partition(rects, eps)
    members: dict[int, list[Rect]] = {}
    for lab, r in zip(labels, rects):
        members.setdefault(lab, []).append(r)
    out = []
    for group in members.values():
        if len(group) <= min_neighbors:
            continue
        n = len(group)
        avg = Rect(_rnd(sum(r.x for r in group) / n), _rnd(sum(r.y for r in group) / n),
                   _rnd(sum(r.w for r in group) / n), _rnd(sum(r.h for r in group) / n))
        out.append(Detection(avg, n))
    out.sort(key=lambda d: (d.rect.y, d.rect.x, d.rect.w, d.rect.h))
    return out


# ---------------------------------------------------------------------------
# Face, then eyes
# ---------------------------------------------------------------------------

EYE_REGION_FRACTION = 0.6


@dataclass(frozen=True)
class FaceLandmarks:
    face: Rect
    left_eye: Rect   # smaller x in image coordinates
    right_eye: Rect


@dataclass(frozen=True)
class Rejection:
    reason: str  # no_face | multiple_faces | eyes_not_two | eyes_overlap | ...


@dataclass(frozen=True)
class FaceEyeParams:
    face: DetectParams = field(default_factory=lambda: DetectParams(scale_factor=1.1, step=2.0))
    eye: DetectParams = field(default_factory=lambda: DetectParams(
        scale_factor=1.1, min_size=(12, 12), step=1.0))
    min_neighbors: int = 3
    eps: float = 0.2


def detect_face_then_eyes(face_model: CascadeModel, eye_model: CascadeModel,
                          img: GrayImage, params: FaceEyeParams = FaceEyeParams()):
    """Return FaceLandmarks, or a Rejection naming why the frame is unusable."""
    if face_model.feature_kind != "lbp":
        raise ValueError("face cascade must be LBP")
    if eye_model.feature_kind != "haar":
        raise ValueError("eye cascade must be Haar")

    faces = group_rectangles(detect_multiscale(face_model, img, params.face),
                             params.min_neighbors, params.eps)
    if not faces:
        return Rejection("no_face")
    if len(faces) > 1:
        return Rejection("multiple_faces")
    face = faces[0].rect

    region_h = max(1, _rnd(face.h * EYE_REGION_FRACTION))
    region = Rect(face.x, face.y, face.w, region_h)
    sub = crop(img, region)
    eye_params = params.eye
    if eye_params.max_size is None:
        eye_params = DetectParams(eye_params.scale_factor, eye_params.min_size,
                                  (face.w // 2, region_h), eye_params.step)
    eyes = group_rectangles(detect_multiscale(eye_model, sub, eye_params),
                            params.min_neighbors, params.eps)
    if len(eyes) != 2:
        return Rejection("eyes_not_two")
    a, b = (Rect(e.rect.x + region.x, e.rect.y + region.y, e.rect.w, e.rect.h) for e in eyes)
    if a.intersects(b):
        return Rejection("eyes_overlap")
    left, right = sorted((a, b), key=lambda r: (r.x + r.w / 2.0, r.y))
    # eyes must sit side by side: overlapping column spans count as overlap
    if left.right > right.x:
        return Rejection("eyes_overlap")
    return FaceLandmarks(face, left, right)
