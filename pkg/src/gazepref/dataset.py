"""Manifests, augmentation, person-disjoint folds and synthetic pair-eye data."""

from __future__ import annotations

import math
import os
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .composer import HALF_HEIGHT, PAIR_SIZE, PairEyeImage
from .imaging import GrayImage, load_pnm, rotate, save_pnm, translate

CLASSES = (0, 1, 2)
SOURCES = ("adult", "child", "synthetic")
DEFAULT_SCENES = {0: "right", 1: "left", 2: "undetermined"}


class ManifestError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class Sample:
    image_path: str
    label: int
    person_id: str
    source: str = "synthetic"
    augmented_from: str | None = None

    def __post_init__(self):
        if self.label not in CLASSES:
            raise ValueError(f"label must be one of {CLASSES}, got {self.label!r}")
        if not self.person_id:
            raise ValueError("person_id must be non-empty")
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")


@dataclass
class Manifest:
    samples: list[Sample] = field(default_factory=list)
    name: str = "unnamed"
    scenes: dict[int, str] = field(default_factory=lambda: dict(DEFAULT_SCENES))
    extra: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        for s in self.samples:
            if s.image_path in seen:
                raise ManifestError(f"duplicate image path {s.image_path!r}")
            seen.add(s.image_path)
        if 0 not in self.scenes or 1 not in self.scenes:
            raise ManifestError("class-to-scene map must cover classes 0 and 1")

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def with_samples(self, samples: Iterable[Sample]) -> Manifest:
        return Manifest(list(samples), self.name, dict(self.scenes), dict(self.extra))

    def class_counts(self) -> dict[int, int]:
        counts = {c: 0 for c in CLASSES}
        for s in self.samples:
            counts[s.label] += 1
        return counts

    def person_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for s in self.samples:
            counts[s.person_id] = counts.get(s.person_id, 0) + 1
        return counts


def load_manifest(text: str) -> Manifest:
    """Parse the TSV manifest format (``#key=value`` header, tab-separated rows)."""
    header: dict[str, str] = {}
    samples: list[Sample] = []
    seen: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if "=" in body:
                key, value = body.split("=", 1)
                header[key.strip()] = value.strip()
            continue
        cols = line.split("\t")
        if len(cols) not in (4, 5):
            raise ManifestError(f"expected 4 or 5 tab-separated columns, got {len(cols)}", lineno)
        path, label_s, person, source = cols[:4]
        if label_s not in ("0", "1", "2"):
            raise ManifestError(f"bad label {label_s!r}", lineno)
        if not person:
            raise ManifestError("empty person id", lineno)
        if source not in SOURCES:
            raise ManifestError(f"unknown source {source!r}", lineno)
        if path in seen:
            raise ManifestError(f"duplicate path {path!r} (first on line {seen[path]})", lineno)
        seen[path] = lineno
        origin = cols[4] if len(cols) == 5 and cols[4] else None
        samples.append(Sample(path, int(label_s), person, source, origin))

    scenes = {}
    extra = {}
    for key, value in header.items():
        if key.startswith("class."):
            try:
                scenes[int(key[6:])] = value
            except ValueError:
                raise ManifestError(f"bad header key {key!r}") from None
        elif key != "name":
            extra[key] = value
    if 0 not in scenes or 1 not in scenes:
        raise ManifestError("header must map class.0 and class.1 to scenes")
    return Manifest(samples, header.get("name", "unnamed"), scenes, extra)


def save_manifest(m: Manifest) -> str:
    lines = [f"#name={m.name}"]
    lines += [f"#class.{c}={m.scenes[c]}" for c in sorted(m.scenes)]
    lines += [f"#{k}={v}" for k, v in sorted(m.extra.items())]
    for s in m.samples:
        row = [s.image_path, str(s.label), s.person_id, s.source]
        if s.augmented_from:
            row.append(s.augmented_from)
        lines.append("\t".join(row))
    return "\n".join(lines) + "\n"


def read_manifest_file(path) -> Manifest:
    return load_manifest(Path(path).read_text(encoding="utf-8"))


def write_manifest_file(path, m: Manifest) -> None:
    Path(path).write_text(save_manifest(m), encoding="utf-8")


def filter_classes(m: Manifest, keep: Iterable[int]) -> Manifest:
    keep = set(keep)
    out = m.with_samples(s for s in m.samples if s.label in keep)
    if not out.samples:
        warnings.warn(f"filter_classes({sorted(keep)}) left an empty manifest", stacklevel=2)
    return out


# ---------------------------------------------------------------------------
# Images alongside a manifest
# ---------------------------------------------------------------------------

@dataclass
class LabeledImages:
    """A manifest plus its decoded 72x72 images, shape (N, 72, 72) uint8."""

    manifest: Manifest
    images: np.ndarray

    def __post_init__(self):
        if self.images.shape != (len(self.manifest), PAIR_SIZE, PAIR_SIZE):
            raise ValueError(f"images shape {self.images.shape} does not match manifest")

    def __len__(self):
        return len(self.manifest)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.manifest.samples], dtype=np.int64)

    @property
    def persons(self) -> list[str]:
        return [s.person_id for s in self.manifest.samples]

    def select(self, indices: Sequence[int]) -> LabeledImages:
        idx = np.asarray(indices, dtype=np.intp)
        samples = [self.manifest.samples[i] for i in idx]
        return LabeledImages(self.manifest.with_samples(samples), self.images[idx])

    def filter_classes(self, keep: Iterable[int]) -> LabeledImages:
        keep = set(keep)
        return self.select([i for i, s in enumerate(self.manifest.samples) if s.label in keep])

    def write(self, root) -> None:
        root = Path(root)
        for s, px in zip(self.manifest.samples, self.images):
            dest = root / s.image_path
            dest.parent.mkdir(parents=True, exist_ok=True)
            save_pnm(dest, GrayImage(px))

    @classmethod
    def from_manifest(cls, m: Manifest, root) -> LabeledImages:
        root = Path(root)
        images = np.zeros((len(m), PAIR_SIZE, PAIR_SIZE), dtype=np.uint8)
        for i, s in enumerate(m.samples):
            img = load_pnm(root / s.image_path)
            if not isinstance(img, GrayImage) or img.pixels.shape != (PAIR_SIZE, PAIR_SIZE):
                raise ManifestError(f"{s.image_path}: expected a {PAIR_SIZE}x{PAIR_SIZE} P5 image")
            images[i] = img.pixels
        return cls(m, images)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

SHIFT = 6
ANGLE = 10.0


@dataclass(frozen=True)
class Transform:
    dx: int = 0
    dy: int = 0
    degrees: float = 0.0

    def apply(self, img: GrayImage) -> GrayImage:
        out = img
        if self.dx or self.dy:
            out = translate(out, self.dx, self.dy)
        if self.degrees:
            out = rotate(out, self.degrees)
        return out


def _variants() -> tuple[Transform, ...]:
    shifts = [Transform(dx, dy) for dy in (-SHIFT, 0, SHIFT) for dx in (-SHIFT, 0, SHIFT)
              if (dx, dy) != (0, 0)]
    rotations = [Transform(degrees=ANGLE), Transform(degrees=-ANGLE)]
    composites = [Transform(dx, 0, deg) for deg in (ANGLE, -ANGLE) for dx in (SHIFT, -SHIFT)]
    return (Transform(),) + tuple(shifts) + tuple(rotations) + tuple(composites)


# identity, 8 shifts, +/-10 deg, and +/-10 deg applied after a +/-6 px horizontal shift
AUGMENT_SPEC: tuple[Transform, ...] = _variants()
assert len(AUGMENT_SPEC) == 15


def _variant_path(path: str, i: int) -> str:
    stem, ext = os.path.splitext(path)
    return f"{stem}_a{i:02d}{ext or '.pgm'}"


def augment(s: Sample, img: PairEyeImage | GrayImage) -> list[tuple[Sample, PairEyeImage]]:
    if isinstance(img, GrayImage):
        img = PairEyeImage(img, person_id=s.person_id)
    out = []
    for i, t in enumerate(AUGMENT_SPEC):
        variant = PairEyeImage(t.apply(img.image), img.frame_id, img.person_id)
        out.append((replace(s, image_path=_variant_path(s.image_path, i),
                            augmented_from=s.image_path), variant))
    return out


def augment_set(data: LabeledImages) -> LabeledImages:
    samples, images = [], []
    for s, px in zip(data.manifest.samples, data.images):
        for vs, vimg in augment(s, GrayImage(px)):
            samples.append(vs)
            images.append(vimg.pixels)
    arr = np.stack(images) if images else np.zeros((0, PAIR_SIZE, PAIR_SIZE), np.uint8)
    return LabeledImages(data.manifest.with_samples(samples), arr)


# ---------------------------------------------------------------------------
# Person-disjoint folds
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignment: dict[str, int]

    def __post_init__(self):
        used = set(self.assignment.values())
        if used != set(range(self.k)):
            raise ValueError(f"fold plan leaves folds {sorted(set(range(self.k)) - used)} empty")

    def fold_of(self, person: str) -> int:
        return self.assignment[person]

    def fold_indices(self, persons: Sequence[str], fold: int) -> tuple[np.ndarray, np.ndarray]:
        """(train, test) sample indices for ``fold``."""
        in_fold = np.array([self.assignment[p] == fold for p in persons], dtype=bool)
        return np.flatnonzero(~in_fold), np.flatnonzero(in_fold)

    def fold_sizes(self, m: Manifest) -> list[int]:
        sizes = [0] * self.k
        for s in m.samples:
            sizes[self.assignment[s.person_id]] += 1
        return sizes

    def to_tsv(self) -> str:
        return "".join(f"{p}\t{f}\n" for p, f in sorted(self.assignment.items()))

    @classmethod
    def from_tsv(cls, text: str) -> FoldPlan:
        assignment = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                person, fold = line.split("\t")
                assignment[person] = int(fold)
            except ValueError:
                raise ManifestError(f"bad fold line {line!r}", lineno) from None
        return cls(max(assignment.values(), default=-1) + 1, assignment)


def kfold_split(m: Manifest, k: int, seed: int) -> FoldPlan:
    """Assign whole persons to k folds, balancing fold image counts."""
    counts = m.person_counts()
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(counts) < k:
        raise ValueError(f"fewer persons than folds ({len(counts)} < {k})")
    rng = np.random.default_rng(seed)
    persons = sorted(counts)
    tiebreak = dict(zip(persons, rng.permutation(len(persons)).tolist()))
    order = sorted(persons, key=lambda p: (-counts[p], tiebreak[p]))

    loads = [0] * k
    members: list[list[str]] = [[] for _ in range(k)]
    for p in order:
        f = min(range(k), key=lambda i: (loads[i], i))
        loads[f] += counts[p]
        members[f].append(p)
    _rebalance(members, loads, counts)
    return FoldPlan(k, {p: f for f, ps in enumerate(members) for p in ps})


def _rebalance(members: list[list[str]], loads: list[int], counts: dict[str, int],
               max_rounds: int = 200) -> None:
    """Local search: move or swap persons between the heaviest and lightest folds."""
    k = len(loads)
    for _ in range(max_rounds):
        hi = max(range(k), key=lambda i: (loads[i], -i))
        lo = min(range(k), key=lambda i: (loads[i], i))
        gap = loads[hi] - loads[lo]
        if gap <= 0:
            return
        best = None  # (new_gap_between_pair, person_hi, person_lo)
        for p in members[hi]:
            if len(members[hi]) > 1 and counts[p] < gap:
                new = abs(gap - 2 * counts[p])
                if best is None or new < best[0]:
                    best = (new, p, None)
            for q in members[lo]:
                d = counts[p] - counts[q]
                if 0 < d < gap:
                    new = abs(gap - 2 * d)
                    if best is None or new < best[0]:
                        best = (new, p, q)
        if best is None or best[0] >= gap:
            return
        _, p, q = best
        members[hi].remove(p)
        members[lo].append(p)
        loads[hi] -= counts[p]
        loads[lo] += counts[p]
        if q is not None:
            members[lo].remove(q)
            members[hi].append(q)
            loads[lo] -= counts[q]
            loads[hi] += counts[q]


# ---------------------------------------------------------------------------
# Synthetic pair-eye generator
# ---------------------------------------------------------------------------

def _split_counts(n: int, class_mix: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of n samples over the class mix."""
    raw = [n * w for w in class_mix]
    counts = [int(math.floor(r + 1e-9)) for r in raw]
    rest = n - sum(counts)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:rest]:
        counts[i] += 1
    return counts


@dataclass(frozen=True)
class _Person:
    semi_x: float
    semi_y: float
    pupil_r: float
    skin: float
    sclera: float
    iris: float
    noise: float


def _draw_person(rng: np.random.Generator) -> _Person:
    return _Person(semi_x=rng.uniform(20, 27), semi_y=rng.uniform(9, 12.5),
                   pupil_r=rng.uniform(4.5, 6.5), skin=rng.uniform(80, 160),
                   sclera=rng.uniform(190, 245), iris=rng.uniform(15, 60),
                   noise=rng.uniform(2, 10))


def _gaze_offset(label: int, rng: np.random.Generator) -> tuple[float, float]:
    """Pupil offset as fractions of the eye's semi-axes (+x is image right)."""
    if label in (0, 1):
        u = rng.uniform(0.3, 0.6)
        return (u if label == 0 else -u), rng.uniform(-0.15, 0.15)
    if rng.random() < 0.5:
        return rng.uniform(-0.2, 0.2), rng.choice([-1.0, 1.0]) * rng.uniform(0.6, 0.9)
    return rng.choice([-1.0, 1.0]) * rng.uniform(0.85, 1.05), rng.uniform(-0.3, 0.3)


_YY, _XX = np.mgrid[0:HALF_HEIGHT, 0:PAIR_SIZE].astype(np.float64)


def _render_eye(p: _Person, off: tuple[float, float], rng: np.random.Generator) -> np.ndarray:
    cx = PAIR_SIZE / 2 - 0.5 + rng.uniform(-2, 2)
    cy = HALF_HEIGHT / 2 - 0.5 + rng.uniform(-1.5, 1.5)
    ax = p.semi_x * rng.uniform(0.95, 1.05)
    ay = p.semi_y * rng.uniform(0.95, 1.05)
    # soft-edged ellipse and pupil disk
    rho = np.sqrt(((_XX - cx) / ax) ** 2 + ((_YY - cy) / ay) ** 2)
    eye = np.clip((1.0 - rho) * min(ax, ay) + 0.5, 0.0, 1.0)
    px = cx + off[0] * (ax - p.pupil_r)
    py = cy + off[1] * (ay - p.pupil_r * 0.5)
    d = np.hypot(_XX - px, _YY - py)
    pupil = np.clip(p.pupil_r - d + 0.5, 0.0, 1.0) * eye
    shade = rng.uniform(-12, 12)
    img = (p.skin + shade) * (1 - eye) + (p.sclera + shade) * eye
    img = img * (1 - pupil) + p.iris * pupil
    img += rng.normal(0.0, p.noise, img.shape)
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)


def synth_generate(seed: int, n: int, class_mix: Sequence[float] = (0.34, 0.59, 0.07),
                   persons: int | Sequence[str] = 10, name: str = "synthetic",
                   prefix: str = "synth") -> LabeledImages:
    """Deterministic stand-in pair-eye dataset.

    Each image stacks two stylised eyes (bright ellipse, dark pupil); the pupil
    sits right of centre for class 0, left for class 1, and high/low or at the
    eye corner for class 2.  Eye geometry, brightness and noise vary by person.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if len(class_mix) != 3 or min(class_mix) < 0 or abs(sum(class_mix) - 1.0) > 1e-6:
        raise ValueError("class_mix must be three non-negative weights summing to 1")
    person_ids = ([f"P{i:03d}" for i in range(persons)] if isinstance(persons, int)
                  else list(persons))
    if not person_ids or any(not p for p in person_ids):
        raise ValueError("need at least one non-empty person id")

    rng = np.random.default_rng(seed)
    traits = {pid: _draw_person(rng) for pid in person_ids}
    labels = np.repeat(np.arange(3), _split_counts(n, class_mix))
    labels = labels[rng.permutation(n)]
    samples, images = [], np.zeros((n, PAIR_SIZE, PAIR_SIZE), dtype=np.uint8)
    for i, label in enumerate(labels.tolist()):
        pid = person_ids[i % len(person_ids)]
        off = _gaze_offset(label, rng)
        top = _render_eye(traits[pid], off, rng)
        bottom = _render_eye(traits[pid], off, rng)
        images[i] = np.vstack([top, bottom])
        samples.append(Sample(f"{prefix}/{pid}_{i:06d}_{label}.pgm", label, pid, "synthetic"))
    return LabeledImages(Manifest(samples, name), images)
