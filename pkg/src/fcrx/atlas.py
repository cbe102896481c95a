"""Anatomical region boxes per image, indicated locations and location pools."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional

from .lexicon import FFLPattern, Lexicon, default_regions, load_lexicon

EPS = 1e-6


class AtlasError(ValueError):
    """Bad annotation record or missing image."""


@dataclass(frozen=True)
class BBox:
    """Normalized top-left box. ``BBox()`` is the distinguished absent location."""

    x: float = 0.0
    y: float = 0.0
    w: float = 0.0
    h: float = 0.0

    def __post_init__(self):
        x, y, w, h = self.x, self.y, self.w, self.h
        if not (-EPS <= x <= 1 + EPS and -EPS <= y <= 1 + EPS
                and -EPS <= w <= 1 + EPS and -EPS <= h <= 1 + EPS
                and x + w <= 1 + EPS and y + h <= 1 + EPS):
            raise ValueError(f"box out of range: ({x}, {y}, {w}, {h})")

    @classmethod
    def clipped(cls, x: float, y: float, w: float, h: float) -> "BBox":
        """Clamp arbitrary coordinates into a valid box (used for model outputs)."""
        x = min(max(float(x), 0.0), 1.0)
        y = min(max(float(y), 0.0), 1.0)
        w = min(max(float(w), 0.0), 1.0 - x)
        h = min(max(float(h), 0.0), 1.0 - y)
        return cls(x, y, w, h)

    def __iter__(self):
        return iter((self.x, self.y, self.w, self.h))

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def is_zero(self) -> bool:
        return self.x == 0 and self.y == 0 and self.w == 0 and self.h == 0

    def as_list(self) -> list[float]:
        return [self.x, self.y, self.w, self.h]


ZERO_BOX = BBox()


@dataclass(frozen=True)
class UnlocatableBox(BBox):
    """Zero box returned when the anatomy of a finding cannot be found in an image."""

    reason: str = ""


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; two zero-area boxes count as a perfect match."""
    if a.area <= 0 and b.area <= 0:
        return 1.0
    iw = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    ih = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    return min(inter / union, 1.0) if union > 0 else 0.0


def union_box(boxes: Iterable[BBox]) -> BBox:
    boxes = [b for b in boxes if not b.is_zero]
    if not boxes:
        return ZERO_BOX
    x0 = min(b.x for b in boxes)
    y0 = min(b.y for b in boxes)
    x1 = max(b.x + b.w for b in boxes)
    y1 = max(b.y + b.h for b in boxes)
    return BBox.clipped(x0, y0, x1 - x0, y1 - y0)


class RegionMap:
    """image_id -> {canonical region -> BBox}. Read-only after construction."""

    def __init__(self, boxes: Mapping[str, Mapping[str, BBox]]):
        self._boxes = {img: dict(regions) for img, regions in boxes.items()}

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._boxes

    def __len__(self) -> int:
        return len(self._boxes)

    def images(self) -> list[str]:
        return list(self._boxes)

    def regions(self, image_id: str) -> dict[str, BBox]:
        if image_id not in self._boxes:
            raise AtlasError(f"image {image_id!r} not in region map")
        return dict(self._boxes[image_id])

    def lookup(self, image_id: str, region: str) -> BBox:
        try:
            return self._boxes[image_id][region]
        except KeyError:
            raise KeyError((image_id, region)) from None

    def to_json(self) -> dict:
        return {img: {r: b.as_list() for r, b in regs.items()} for img, regs in self._boxes.items()}

    @classmethod
    def from_json(cls, data: dict) -> "RegionMap":
        return cls({img: {r: BBox(*b) for r, b in regs.items()} for img, regs in data.items()})

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True, indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "RegionMap":
        return cls.from_json(json.loads(Path(path).read_text()))


def ingest_annotations(path: str | Path, lexicon: Optional[Lexicon] = None) -> RegionMap:
    """Read a JSON-lines annotation file into a normalized RegionMap.

    Records carrying ``width``/``height`` are in pixels and get normalized;
    records without them are taken as already normalized.
    """
    lexicon = lexicon or load_lexicon()
    known = set(lexicon.region_names)
    boxes: dict[str, dict[str, BBox]] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            image_id = str(rec["image_id"])
            width = float(rec.get("width", 1.0))
            height = float(rec.get("height", 1.0))
            regions = rec["regions"]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise AtlasError(f"{path}:{lineno}: malformed annotation record ({exc})") from exc
        if width <= 0 or height <= 0:
            raise AtlasError(f"{path}:{lineno}: non-positive image size for {image_id!r}")
        out = boxes.setdefault(image_id, {})
        for reg in regions:
            name = reg.get("name")
            if name not in known:
                raise AtlasError(f"{path}:{lineno}: unknown region {name!r} in record "
                                 f"{{image_id: {image_id!r}, name: {name!r}}}")
            try:
                out[name] = BBox(reg["x"] / width, reg["y"] / height,
                                 reg["w"] / width, reg["h"] / height)
            except ValueError as exc:
                raise AtlasError(f"{path}:{lineno}: {image_id!r}/{name!r}: {exc}") from exc
    return RegionMap(boxes)


def _sided(anatomy: str) -> list[str]:
    bare = anatomy[len("bilateral "):] if anatomy.startswith("bilateral ") else anatomy
    return [f"left {bare}", f"right {bare}"]


def indicated_location(p: FFLPattern, image_id: str, rm: RegionMap,
                       defaults: Optional[Mapping[str, list[str]]] = None) -> BBox:
    """Box the report claims for a finding in a given image.

    Absent findings sit at the zero box. A missing region yields an
    ``UnlocatableBox`` (geometrically the zero box).
    """
    regions = rm.regions(image_id)
    if not p.present:
        return ZERO_BOX
    if p.anatomy is None:
        names = (defaults if defaults is not None else default_regions()).get(p.core, [])
        if not names:
            return UnlocatableBox(reason=f"no default regions for {p.core!r}")
    elif p.anatomy in regions:
        return regions[p.anatomy]
    elif p.anatomy.startswith("bilateral ") or f"left {p.anatomy}" in regions:
        names = _sided(p.anatomy)
    else:
        return UnlocatableBox(reason=f"region {p.anatomy!r} missing for {image_id!r}")
    found = [regions[n] for n in names if n in regions]
    if not found:
        return UnlocatableBox(reason=f"regions {names} missing for {image_id!r}")
    return union_box(found)


def build_pools(samples) -> dict[str, tuple[BBox, ...]]:
    """Finding name -> all real present-finding boxes across ``samples``."""
    pools: dict[str, list[BBox]] = defaultdict(list)
    for sample in samples:
        for pair in sample.real_pairs:
            if pair.present and not pair.box.is_zero:
                pools[pair.core].append(pair.box)
    return {k: tuple(v) for k, v in pools.items()}
