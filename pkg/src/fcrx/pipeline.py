"""Report checking: FFL extraction, indicated locations, model verdicts,
FC-score, explanation geometry and flagged-sentence correction.
"""

from __future__ import annotations

import json
import logging
import os
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence

from .atlas import ZERO_BOX, BBox, RegionMap, UnlocatableBox, indicated_location, iou
from .config import RewriterConfig, ScoringConfig
from .lexicon import (
    CONJUNCTIONS, STOPWORDS, FFLPattern, Lexicon, extract_ffl, serialize_ffl, split_clauses,
    split_sentences,
)
from .model import ModelCheckpoint, predict_many

log = logging.getLogger(__name__)

UNDEFINED = None  # fc-score marker for reports with nothing to score


class RewriterUnavailable(RuntimeError):
    pass


@dataclass
class FindingRecord:
    pattern: FFLPattern
    indicated: BBox
    predicted: BBox
    e_hat: float
    verdict: int
    unlocatable: bool = False
    ground_truth: Optional[BBox] = None

    @property
    def sentence(self) -> Optional[int]:
        return self.pattern.sentence

    def to_json(self) -> dict:
        out = {
            "ffl": serialize_ffl(self.pattern),
            "sentence": self.sentence,
            "spans": [list(s) for s in self.pattern.spans],
            "indicated_box": self.indicated.as_list(),
            "predicted_box": self.predicted.as_list(),
            "e_hat": round(self.e_hat, 6),
            "verdict": self.verdict,
            "unlocatable": self.unlocatable,
        }
        if self.ground_truth is not None:
            out["ground_truth_box"] = self.ground_truth.as_list()
        return out


@dataclass
class FCReport:
    image_id: str
    text: str
    records: list[FindingRecord] = field(default_factory=list)
    fc_score: Optional[float] = UNDEFINED
    corrected_text: Optional[str] = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def flagged(self) -> list[FindingRecord]:
        return [r for r in self.records if r.verdict == 0]

    def to_json(self) -> dict:
        """Explanation artifact: records plus overlay geometry for external rendering.

        Colour per role: predicted is green and indicated is yellow; a
        ground-truth box, when attached, is red.
        """
        overlays = []
        for i, r in enumerate(self.records):
            shapes = [{"role": "predicted", "color": "green", "box": r.predicted.as_list()},
                      {"role": "indicated", "color": "yellow", "box": r.indicated.as_list()}]
            if r.ground_truth is not None:
                shapes.append({"role": "ground_truth", "color": "red",
                               "box": r.ground_truth.as_list()})
            overlays.append({"record": i, "label": serialize_ffl(r.pattern), "shapes": shapes})
        out = {"image_id": self.image_id, "text": self.text,
               "records": [r.to_json() for r in self.records],
               "fc_score": self.fc_score, "overlays": overlays,
               "diagnostics": self.diagnostics}
        if self.corrected_text is not None:
            out["corrected_text"] = self.corrected_text
        return out


# --- FC-score ---------------------------------------------------------------

def fc_formula(verdicts: Sequence[int], indicated: Sequence[BBox], predicted: Sequence[BBox],
               literal_denominator: bool = False) -> Optional[float]:
    """Half the fraction of real verdicts plus half the mean halved IoU.

    With ``literal_denominator`` the first fraction divides by the number of
    real verdicts (1 whenever any verdict is real, 0 when none is).
    """
    n = len(verdicts)
    if n == 0:
        return UNDEFINED
    n_real = sum(1 for e in verdicts if e == 1)
    if literal_denominator:
        first = n_real / n_real if n_real else 0.0
    else:
        first = n_real / n
    overlap = sum(iou(a, p) / 2 for a, p in zip(indicated, predicted)) / n
    return 0.5 * (first + overlap)


def fc_score(records: Sequence[FindingRecord], literal_denominator: bool = False) -> Optional[float]:
    return fc_formula([r.verdict for r in records], [r.indicated for r in records],
                      [r.predicted for r in records], literal_denominator)


def findings_match(a: FFLPattern, g: FFLPattern) -> bool:
    """Same polarity and finding; anatomy compared only when both sides name one."""
    if (a.polarity, a.core) != (g.polarity, g.core):
        return False
    return a.anatomy is None or g.anatomy is None or a.anatomy == g.anatomy


def ground_truth_verdicts(records: Sequence[FindingRecord], gt: Sequence[tuple[FFLPattern, BBox]]):
    """Per record: (matched?, ground-truth box or the zero box)."""
    out = []
    for r in records:
        hit = next((box for g, box in gt if findings_match(r.pattern, g)), None)
        out.append((1, hit) if hit is not None else (0, ZERO_BOX))
    return out


def fc_score_against_ground_truth(records: Sequence[FindingRecord],
                                  gt: Sequence[tuple[FFLPattern, BBox]],
                                  literal_denominator: bool = False) -> Optional[float]:
    """FC-score with the model's verdicts and boxes replaced by ground truth.

    Ground-truth findings the report never mentions are ignored; a report
    with no finding in common with the ground truth is undefined.
    """
    matches = ground_truth_verdicts(records, gt)
    if not any(m for m, _ in matches):
        return UNDEFINED
    return fc_formula([m for m, _ in matches], [r.indicated for r in records],
                      [b for _, b in matches], literal_denominator)


# --- checking ------------------------------------------------------------------

def located_patterns(text: str, image_id: str, lexicon: Lexicon, rm: RegionMap):
    """FFL patterns of ``text`` with their indicated boxes."""
    diagnostics: dict = {}
    out = []
    for p in extract_ffl(text, lexicon, diagnostics):
        out.append((p, indicated_location(p, image_id, rm)))
    return out, diagnostics


def check_report(text: str, image_id: str, checkpoint: ModelCheckpoint, featurizer,
                 lexicon: Lexicon, rm: RegionMap,
                 scoring: ScoringConfig = ScoringConfig()) -> FCReport:
    located, diagnostics = located_patterns(text, image_id, lexicon, rm)
    diagnostics["unlocatable"] = sum(isinstance(b, UnlocatableBox) for _, b in located)
    claims = [(p.polarity, p.core, box) for p, box in located]
    preds = predict_many(checkpoint, featurizer, image_id, claims)
    records = []
    for (p, box), pred in zip(located, preds):
        predicted = ZERO_BOX if pred.box.area < scoring.zero_area else pred.box
        indicated = ZERO_BOX if isinstance(box, UnlocatableBox) else box
        records.append(FindingRecord(p, indicated, predicted, pred.veracity, pred.verdict,
                                     isinstance(box, UnlocatableBox)))
    report = FCReport(image_id, text, records, diagnostics=diagnostics)
    report.fc_score = fc_score(records, scoring.literal_denominator)
    return report


# --- rewriting -------------------------------------------------------------------

class Rewriter(Protocol):
    def rewrite(self, fragment: str) -> str: ...


class OfflineReformer:
    """Deterministic stand-in: trim dangling conjunctions and commas, capitalize, add a period."""

    name = "offline"

    def rewrite(self, fragment: str) -> str:
        words = fragment.replace(",", " , ").split()
        while words and (words[0] == "," or words[0].lower() in CONJUNCTIONS):
            words.pop(0)
        while words and (words[-1] in {",", "."} or words[-1].lower() in CONJUNCTIONS):
            words.pop()
        text = " ".join(words).replace(" ,", ",").rstrip(".;")
        if not text:
            return ""
        return text[0].upper() + text[1:] + "."


class HTTPRewriter:
    """POSTs ``{prompt, fragment, model, options}`` as JSON and reads ``{text}`` back."""

    name = "http"

    def __init__(self, url: str, model: Optional[str] = None, key: Optional[str] = None,
                 prompt: str = RewriterConfig.prompt, timeout: float = 30.0,
                 options: Optional[dict] = None):
        self.url, self.model, self.key = url, model, key
        self.prompt, self.timeout = prompt, timeout
        self.options = dict(options or {})

    def rewrite(self, fragment: str) -> str:
        body = json.dumps({"prompt": self.prompt, "fragment": fragment, "model": self.model,
                           "options": self.options}).encode()
        headers = {"Content-Type": "application/json"}
        if self.key:
            headers["Authorization"] = f"Bearer {self.key}"
        req = urllib.request.Request(self.url, data=body, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                reply = json.loads(resp.read().decode())
        except (urllib.error.URLError, OSError, ValueError) as exc:
            raise RewriterUnavailable(f"rewriter at {self.url} failed: {exc}") from exc
        if not isinstance(reply, dict) or not isinstance(reply.get("text"), str):
            raise RewriterUnavailable(f"rewriter at {self.url} returned no 'text' field")
        return reply["text"].strip()


def rewriter_from_env(config: RewriterConfig = RewriterConfig(), environ=None):
    """HTTP rewriter when a URL is configured (config or environment), else the offline one."""
    env = os.environ if environ is None else environ
    url = config.url or env.get("FCRX_REWRITER_URL")
    if not url:
        if config.required:
            raise RewriterUnavailable("a rewriter is required but no URL is configured")
        return OfflineReformer()
    return HTTPRewriter(url, config.model or env.get("FCRX_REWRITER_MODEL"),
                        env.get("FCRX_REWRITER_KEY"), config.prompt, config.timeout,
                        config.options)


# --- correction ------------------------------------------------------------------

def _has_content(words) -> bool:
    return any(w.text not in STOPWORDS for w in words)


def removal_plan(text: str, report: FCReport) -> dict[int, set[int]]:
    """Sentence index -> word indices to delete for the flagged findings."""
    sentences = split_sentences(text)
    flagged: dict[int, set[int]] = {}
    kept: dict[int, set[int]] = {}
    for r in report.records:
        target = flagged if r.verdict == 0 else kept
        for s, a, b in r.pattern.spans:
            target.setdefault(s, set()).update(range(a, b))
    plan = {}
    for s, words in flagged.items():
        remove = words - kept.get(s, set())
        sent = sentences[s]
        for clause in split_clauses(text, sent):
            cset = set(clause)
            if not cset & remove or cset & kept.get(s, set()):
                continue
            rest = [sent.words[i] for i in clause if i not in remove]
            if not _has_content(rest):
                remove |= cset
        plan[s] = remove
    return plan


def _fragment(text: str, sent, remove: set[int]) -> str:
    """Sentence text with the removed words cut out by character offsets."""
    pieces = []
    pos = sent.start
    i = 0
    while i < len(sent.words):
        if i not in remove:
            i += 1
            continue
        j = i
        while j + 1 < len(sent.words) and j + 1 in remove:
            j += 1
        # a run of removed words takes its inner punctuation ("left-sided") with it
        pieces.append(text[pos:sent.words[i].start])
        pos = sent.words[j].end
        i = j + 1
    pieces.append(text[pos:sent.end])
    frag = "".join(pieces)
    frag = " ".join(frag.split())
    frag = frag.replace(" ,", ",").replace(" .", ".").replace(" ;", ";")
    while ",," in frag:
        frag = frag.replace(",,", ",")
    return frag.strip(" ,;.")


def correct_report(text: str, report: FCReport, rewriter: Optional[Rewriter] = None,
                   fallback: Optional[Rewriter] = None) -> tuple[str, dict]:
    """Remove flagged findings; rewrite what is left of each touched sentence.

    Sentences without a flagged finding are copied byte for byte.
    Returns the corrected text and diagnostics.
    """
    rewriter = rewriter or OfflineReformer()
    fallback = fallback or OfflineReformer()
    diag = {"rewritten": 0, "dropped": 0, "rewriter_failures": 0, "fragments": []}
    plan = removal_plan(text, report)
    if not plan:
        return text, diag
    sentences = split_sentences(text)
    out = []
    pos = 0
    for sent in sentences:
        if sent.index not in plan:
            continue
        out.append(text[pos:sent.start])
        remaining = [w for i, w in enumerate(sent.words) if i not in plan[sent.index]]
        replacement = ""
        if _has_content(remaining):
            frag = _fragment(text, sent, plan[sent.index])
            diag["fragments"].append(frag)
            try:
                replacement = rewriter.rewrite(frag)
            except RewriterUnavailable as exc:
                log.warning("%s; using offline reformer", exc)
                diag["rewriter_failures"] += 1
                replacement = fallback.rewrite(frag)
            diag["rewritten"] += 1
        if not replacement:
            diag["dropped"] += 1
            # swallow the whitespace that separated the dropped sentence
            nxt = sent.end
            while nxt < len(text) and text[nxt].isspace():
                nxt += 1
            if out and nxt >= len(text):
                out[-1] = out[-1].rstrip()
            pos = nxt
            continue
        out.append(replacement)
        pos = sent.end
    out.append(text[pos:])
    return "".join(out), diag


def check_and_correct(text: str, image_id: str, checkpoint: ModelCheckpoint, featurizer,
                      lexicon: Lexicon, rm: RegionMap, rewriter: Optional[Rewriter] = None,
                      scoring: ScoringConfig = ScoringConfig()) -> FCReport:
    report = check_report(text, image_id, checkpoint, featurizer, lexicon, rm, scoring)
    corrected, diag = correct_report(text, report, rewriter)
    report.corrected_text = corrected
    report.diagnostics["correction"] = diag
    return report
