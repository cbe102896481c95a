"""Real/fake finding-location pairs and the three synthetic perturbations."""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .atlas import ZERO_BOX, BBox, RegionMap, UnlocatableBox, indicated_location, iou
from .lexicon import DEFAULT_TYPE, Lexicon, extract_ffl

PROVENANCES = ("real", "reversal", "relocate", "substitute")
RELOCATE_MAX_IOU = 0.5


class PerturbationSkipped(Exception):
    """A perturbation's precondition failed; the caller counts and moves on."""

    def __init__(self, kind: str, reason: str):
        super().__init__(f"{kind}: {reason}")
        self.kind = kind
        self.reason = reason


@dataclass(frozen=True)
class FLPair:
    polarity: str
    core: str
    box: BBox
    veracity: int
    provenance: str = "real"
    finding_type: str = DEFAULT_TYPE

    def __post_init__(self):
        if self.veracity not in (0, 1):
            raise ValueError(f"veracity must be 0 or 1, got {self.veracity}")
        if self.polarity == "no" and not self.box.is_zero:
            raise ValueError(f"absent finding {self.core!r} must sit at the zero box")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")

    @property
    def present(self) -> bool:
        return self.polarity == "yes"

    @property
    def key(self) -> tuple:
        return (self.polarity, self.core, tuple(self.box))

    @property
    def label(self) -> list[float]:
        """Regression target ``<x, y, w, h, E>``."""
        return [*self.box, float(self.veracity)]

    def to_json(self) -> dict:
        return {"n": self.polarity, "c": self.core, "x": self.box.x, "y": self.box.y,
                "w": self.box.w, "h": self.box.h, "e": self.veracity,
                "provenance": self.provenance}

    @classmethod
    def from_json(cls, d: dict) -> "FLPair":
        return cls(d["n"], d["c"], BBox(d["x"], d["y"], d["w"], d["h"]), int(d["e"]),
                   d.get("provenance", "real" if int(d["e"]) else "reversal"))


@dataclass
class Sample:
    image_id: str
    real_pairs: list[FLPair] = field(default_factory=list)
    fake_pairs: list[FLPair] = field(default_factory=list)

    @property
    def pairs(self) -> list[FLPair]:
        return self.real_pairs + self.fake_pairs

    @property
    def real_names(self) -> set[str]:
        return {p.core for p in self.real_pairs}

    def to_json(self) -> dict:
        return {"image_id": self.image_id, "pairs": [p.to_json() for p in self.pairs]}

    @classmethod
    def from_json(cls, d: dict) -> "Sample":
        pairs = [FLPair.from_json(p) for p in d["pairs"]]
        return cls(d["image_id"], [p for p in pairs if p.veracity == 1],
                   [p for p in pairs if p.veracity == 0])


@dataclass(frozen=True)
class GeneratorConfig:
    n_reverse: int = 1
    n_relocate: int = 2
    n_substitute: int = 1
    relocate_max_iou: float = RELOCATE_MAX_IOU


def samples_from_reports(reports: Mapping[str, str], rm: RegionMap, lexicon: Lexicon,
                         diagnostics: Optional[Counter] = None) -> list[Sample]:
    """Real FL pairs for each image: extract FFL patterns, index their regions."""
    diagnostics = diagnostics if diagnostics is not None else Counter()
    samples = []
    for image_id in sorted(reports):
        if image_id not in rm:
            diagnostics["missing_image"] += 1
            continue
        seen = set()
        pairs = []
        for p in extract_ffl(reports[image_id], lexicon):
            box = indicated_location(p, image_id, rm)
            if isinstance(box, UnlocatableBox):
                diagnostics["unlocatable"] += 1
                continue
            pair = FLPair(p.polarity, p.core, box, 1, "real", p.finding_type)
            if pair.key in seen:
                diagnostics["duplicate"] += 1
                continue
            seen.add(pair.key)
            pairs.append(pair)
        samples.append(Sample(image_id, pairs))
    return samples


def reverse(p: FLPair) -> FLPair:
    """Flip polarity; the reversed pair sits at the zero box."""
    return replace(p, polarity="no" if p.present else "yes", box=ZERO_BOX,
                   veracity=0, provenance="reversal")


def relocate(p: FLPair, pool: Sequence[BBox], rng: np.random.Generator,
             avoid: Sequence[BBox] = (), max_iou: float = RELOCATE_MAX_IOU) -> FLPair:
    """Move a present finding to another location observed for it in the dataset.

    Boxes overlapping the original (or any box in ``avoid``) by more than
    ``max_iou`` are not admissible.
    """
    if not p.present:
        raise PerturbationSkipped("relocate", f"{p.core!r} is absent")
    if len(set(pool)) < 2:
        raise PerturbationSkipped("relocate", f"pool for {p.core!r} has fewer than 2 boxes")
    blocked = [p.box, *avoid]
    candidates = [b for b in pool if all(iou(b, a) <= max_iou for a in blocked)]
    if not candidates:
        raise PerturbationSkipped("relocate", f"no admissible box for {p.core!r}")
    box = candidates[int(rng.integers(len(candidates)))]
    return replace(p, box=box, veracity=0, provenance="relocate")


def substitute(p: FLPair, sample: Sample, pools: Mapping[str, Sequence[BBox]],
               all_findings: Sequence[str], rng: np.random.Generator) -> FLPair:
    """Swap in a finding the sample does not have, at a location seen for that finding."""
    taken = sample.real_names
    candidates = [f for f in all_findings if f not in taken and pools.get(f)]
    if not candidates:
        raise PerturbationSkipped("substitute", "every pooled finding is already in the sample")
    name = candidates[int(rng.integers(len(candidates)))]
    pool = pools[name]
    box = pool[int(rng.integers(len(pool)))]
    return FLPair("yes", name, box, 0, "substitute", DEFAULT_TYPE)


def sample_rng(seed: int, image_id: str) -> np.random.Generator:
    """Independent stream per (seed, image) so generation order does not matter."""
    digest = hashlib.sha256(image_id.encode()).digest()
    return np.random.default_rng([seed, int.from_bytes(digest[:8], "little")])


def generate_dataset(samples: Sequence[Sample], pools: Mapping[str, Sequence[BBox]],
                     config: GeneratorConfig = GeneratorConfig(), seed: int = 0,
                     report: Optional[Counter] = None) -> list[Sample]:
    """Attach fake pairs to every sample; returns new Sample objects.

    ``report`` collects per-perturbation generated/skipped counts.
    """
    report = report if report is not None else Counter()
    all_findings = sorted(pools)
    out = []
    for sample in samples:
        rng = sample_rng(seed, sample.image_id)
        real_keys = {p.key for p in sample.real_pairs}
        fakes: list[FLPair] = []

        def keep(kind, make):
            try:
                fake = make()
            except PerturbationSkipped:
                report[f"skipped_{kind}"] += 1
                return
            if fake.key in real_keys:
                report[f"skipped_{kind}"] += 1
                return
            report[kind] += 1
            fakes.append(fake)

        for p in sample.real_pairs:
            same = [q.box for q in sample.real_pairs if q.core == p.core and q is not p]
            for _ in range(config.n_reverse):
                keep("reversal", lambda: reverse(p))
            for _ in range(config.n_relocate):
                keep("relocate", lambda: relocate(p, pools.get(p.core, ()), rng, same,
                                                  config.relocate_max_iou))
            for _ in range(config.n_substitute):
                keep("substitute", lambda: substitute(p, sample, pools, all_findings, rng))
        report["real"] += len(sample.real_pairs)
        out.append(Sample(sample.image_id, list(sample.real_pairs), fakes))
    return out


def write_samples(samples: Sequence[Sample], path: str | Path) -> None:
    lines = [json.dumps(s.to_json(), separators=(",", ":")) for s in samples]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_samples(path: str | Path) -> list[Sample]:
    return [Sample.from_json(json.loads(line))
            for line in Path(path).read_text().splitlines() if line.strip()]
