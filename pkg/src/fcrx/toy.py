"""Planted toy corpus: jittered region annotations, ground-truth reports and
automated reports carrying one planted error each (most of the time).

Everything is generated from a single seed, so the corpus is reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from .atlas import BBox, iou

TOY_FINDINGS = (
    "atelectasis", "calcification", "cardiomegaly", "consolidation", "edema", "infiltration",
    "lung cyst", "lung opacity", "nodule", "pleural effusion", "pleural thickening", "pneumothorax",
)

_ZONES = tuple(f"{side} {level} lung zone" for side in ("right", "left")
               for level in ("upper", "mid", "lower"))

# finding -> candidate locations; None means no anatomy phrase, "both lungs" means bilateral
LOCATIONS: dict[str, tuple[Optional[str], ...]] = {
    "atelectasis": ("right lower lung zone", "left lower lung zone", "right mid lung zone",
                    "left mid lung zone"),
    "calcification": _ZONES,
    "cardiomegaly": (None,),
    "consolidation": _ZONES,
    "edema": ("both lungs", "right lung", "left lung"),
    "infiltration": _ZONES,
    "lung cyst": _ZONES,
    "lung opacity": _ZONES,
    "nodule": _ZONES,
    "pleural effusion": ("right costophrenic angle", "left costophrenic angle", "both lungs"),
    "pleural thickening": ("right apical zone", "left apical zone", "right lung", "left lung"),
    "pneumothorax": ("right apical zone", "left apical zone", "right upper lung zone",
                     "left upper lung zone"),
}

PRESENT_TEMPLATES = (
    "{F} in {r}.",
    "There is {f} in {r}.",
    "{F} is seen in {r}.",
    "{R} {f} is present.",
)
UNLOCATED_TEMPLATES = ("{F} is present.", "There is {f}.")
FILLERS = ("The osseous structures are unremarkable.", "Heart size is normal.",
           "The trachea is midline.", "Lines and tubes are unchanged.")
ERROR_KINDS = ("hallucination", "reversal", "mislocation")


@dataclass(frozen=True)
class ToyConfig:
    n_images: int = 500
    min_present: int = 1
    max_present: int = 3
    max_absent: int = 2
    error_rate: float = 0.75
    jitter: float = 0.02
    seed: int = 0


@dataclass
class Finding:
    core: str
    location: Optional[str]


@dataclass
class ToyImage:
    image_id: str
    width: int
    height: int
    regions: dict[str, BBox]
    present: list[Finding]
    absent: list[str]
    ground_truth: str = ""
    automated: str = ""
    error: dict = field(default_factory=dict)


def _layout() -> dict[str, list[float]]:
    text = resources.files("fcrx.data").joinpath("atlas_layout.json").read_text()
    return json.loads(text)


def _jittered(layout: dict, rng: np.random.Generator, jitter: float) -> dict[str, BBox]:
    dx, dy = rng.uniform(-jitter, jitter, size=2)
    scale = rng.uniform(1 - jitter, 1 + jitter)
    out = {}
    for name in sorted(layout):
        x, y, w, h = layout[name]
        out[name] = BBox.clipped(x + dx, y + dy, w * scale, h * scale)
    return out


def _sentence(f: Finding, rng: np.random.Generator) -> str:
    if f.location is None:
        t = UNLOCATED_TEMPLATES[int(rng.integers(len(UNLOCATED_TEMPLATES)))]
        return t.format(F=f.core.capitalize(), f=f.core)
    t = PRESENT_TEMPLATES[int(rng.integers(len(PRESENT_TEMPLATES)))]
    r = f.location if f.location == "both lungs" else "the " + f.location
    return t.format(F=f.core.capitalize(), f=f.core, r=r, R=f.location.capitalize())


def _negative(absent: list[str]) -> str:
    return "No " + " or ".join(absent) + "." if absent else ""


def _render(sentences: list[str]) -> str:
    return " ".join(s for s in sentences if s)


def _location_box(loc: Optional[str], regions: dict[str, BBox]) -> Optional[BBox]:
    if loc is None or loc == "both lungs":
        return None
    return regions[loc]


def _mislocations(f: Finding, regions: dict[str, BBox]) -> list[str]:
    here = _location_box(f.location, regions)
    out = []
    for cand in LOCATIONS[f.core]:
        if cand == f.location or cand is None:
            continue
        there = _location_box(cand, regions)
        if here is None or there is None or iou(here, there) <= 0.5:
            out.append(cand)
    return out


def make_image(index: int, layout: dict, config: ToyConfig, rng: np.random.Generator) -> ToyImage:
    image_id = f"toy{index:04d}"
    width, height = (int(v) for v in rng.integers(2000, 3000, size=2))
    regions = _jittered(layout, rng, config.jitter)
    k = int(rng.integers(config.min_present, config.max_present + 1))
    chosen = [str(c) for c in rng.choice(TOY_FINDINGS, size=k, replace=False)]
    present = [Finding(c, LOCATIONS[c][int(rng.integers(len(LOCATIONS[c])))]) for c in chosen]
    rest = [c for c in TOY_FINDINGS if c not in chosen]
    n_abs = int(rng.integers(0, config.max_absent + 1))
    absent = [str(c) for c in rng.choice(rest, size=n_abs, replace=False)]
    img = ToyImage(image_id, width, height, regions, present, absent)

    gt_sentences = [_sentence(f, rng) for f in present]
    filler = FILLERS[int(rng.integers(len(FILLERS)))]
    img.ground_truth = _render(gt_sentences + [_negative(absent), filler])

    auto = list(gt_sentences)
    auto_absent = list(absent)
    error: dict = {"kind": "none"}
    if rng.random() < config.error_rate:
        kind = ERROR_KINDS[int(rng.integers(len(ERROR_KINDS)))]
        if kind == "hallucination":
            pool = [c for c in rest if c not in absent]
            core = str(pool[int(rng.integers(len(pool)))])
            f = Finding(core, LOCATIONS[core][int(rng.integers(len(LOCATIONS[core])))])
            pos = int(rng.integers(len(auto) + 1))
            auto.insert(pos, _sentence(f, rng))
            error = {"kind": kind, "core": core, "location": f.location}
        elif kind == "reversal":
            i = int(rng.integers(len(present)))
            auto[i] = f"No {present[i].core}."
            error = {"kind": kind, "core": present[i].core}
        else:
            movable = [i for i, f in enumerate(present) if _mislocations(f, regions)]
            if movable:
                i = movable[int(rng.integers(len(movable)))]
                options = _mislocations(present[i], regions)
                new = options[int(rng.integers(len(options)))]
                auto[i] = _sentence(Finding(present[i].core, new), rng)
                error = {"kind": kind, "core": present[i].core, "from": present[i].location,
                         "to": new}
    img.automated = _render(auto + [_negative(auto_absent), filler])
    img.error = error
    return img


def make_corpus(config: ToyConfig = ToyConfig()) -> list[ToyImage]:
    rng = np.random.default_rng([config.seed, 101])
    layout = _layout()
    return [make_image(i, layout, config, rng) for i in range(config.n_images)]


def write_corpus(images: list[ToyImage], out_dir: str | Path) -> dict[str, Path]:
    """Write annotations (pixel space), GT reports, the A/G corpus and planted-error labels."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / f"{name}.jsonl" for name in ("annotations", "reports", "corpus", "errors")}

    def dump(path, records):
        path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))

    dump(paths["annotations"], [
        {"image_id": im.image_id, "width": im.width, "height": im.height,
         "regions": [{"name": n, "x": b.x * im.width, "y": b.y * im.height,
                      "w": b.w * im.width, "h": b.h * im.height} for n, b in im.regions.items()]}
        for im in images])
    dump(paths["reports"], [{"image_id": im.image_id, "report": im.ground_truth} for im in images])
    dump(paths["corpus"], [{"image_id": im.image_id, "automated_report": im.automated,
                            "ground_truth_report": im.ground_truth} for im in images])
    dump(paths["errors"], [{"image_id": im.image_id, **im.error} for im in images])
    return paths


def read_reports(path: str | Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            out[str(rec["image_id"])] = rec["report"]
    return out
