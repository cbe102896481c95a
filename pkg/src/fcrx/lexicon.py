"""Finding lexicon and rule-based FFL pattern extraction.

A report is split into sentences (period/semicolon), sentences into clauses
(commas and coordinating conjunctions), and each clause is matched against
the lexicon longest-phrase-first. Negation cues scope forward to the end of
their clause; list continuations such as "no A, B or C" inherit the cue.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional

POLARITIES = ("yes", "no")
DEFAULT_TYPE = "finding"
SIDES = ("left", "right")

_WORD = re.compile(r"[A-Za-z0-9]+")
_SENTENCE_END = re.compile(r"[.;](?=\s|$)")
_CLAUSE_PUNCT = re.compile(r"[,:;]")

CONJUNCTIONS = frozenset({"and", "or", "but", "nor", "with", "while", "although", "however"})
LATERALITY_WORDS = {"left": "left", "right": "right", "bilateral": "bilateral", "both": "bilateral"}
# words allowed in a bare list item ("pulmonary edema", "any focal consolidation")
LIST_FILLERS = frozenset({
    "a", "an", "the", "any", "other", "focal", "acute", "definite", "significant",
    "large", "small", "mild", "moderate", "severe", "new", "obvious", "overt",
    "or", "and", "nor", "of",
})
# words that carry no content once a finding has been removed from a clause
STOPWORDS = LIST_FILLERS | frozenset({
    "is", "are", "was", "were", "be", "been", "there", "this", "these", "that",
    "found", "seen", "noted", "present", "identified", "demonstrated", "visualized",
    "evident", "appreciated", "in", "on", "at", "to", "within", "with", "at", "by",
    "sided", "also", "again", "still", "some", "as", "well", "likely", "possible",
    "but", "while", "which", "image", "shows", "show",
})


class LexiconError(ValueError):
    """Malformed or inconsistent lexicon file."""


class FFLParseError(ValueError):
    """A serialized FFL pattern could not be parsed."""


def _norm(phrase: str) -> tuple[str, ...]:
    return tuple(w.lower() for w in _WORD.findall(phrase))


@dataclass(frozen=True)
class FindingEntry:
    canonical: str
    type: str
    synonyms: tuple[str, ...]


@dataclass(frozen=True)
class RegionEntry:
    canonical: str
    synonyms: tuple[str, ...]
    lateralized: bool

    @property
    def side(self) -> Optional[str]:
        first = self.canonical.split(" ", 1)[0]
        return first if self.lateralized and first in SIDES else None

    @property
    def base(self) -> Optional[str]:
        if self.side is None:
            return None
        return self.canonical.split(" ", 1)[1]


@dataclass(frozen=True)
class NegationCue:
    phrase: str
    scope: str = "forward"


@dataclass(frozen=True)
class Lexicon:
    findings: tuple[FindingEntry, ...]
    regions: tuple[RegionEntry, ...]
    negations: tuple[NegationCue, ...]
    finding_phrases: dict = field(default_factory=dict, repr=False, compare=False)
    anatomy_phrases: dict = field(default_factory=dict, repr=False, compare=False)
    negation_phrases: dict = field(default_factory=dict, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.findings)

    @property
    def finding_names(self) -> list[str]:
        return [f.canonical for f in self.findings]

    @property
    def region_names(self) -> list[str]:
        return [r.canonical for r in self.regions]

    def lookup(self, phrase: str) -> Optional[str]:
        """Canonical finding name for a surface phrase, or None."""
        return self.finding_phrases.get(_norm(phrase))

    def finding(self, name: str) -> FindingEntry:
        for f in self.findings:
            if f.canonical == name:
                return f
        raise KeyError(name)

    def region(self, name: str) -> RegionEntry:
        for r in self.regions:
            if r.canonical == name:
                return r
        raise KeyError(name)

    def bases(self) -> set[str]:
        return {r.base for r in self.regions if r.base}

    def is_valid_anatomy(self, anatomy: str) -> bool:
        if anatomy in self.region_names:
            return True
        bare = anatomy[len("bilateral "):] if anatomy.startswith("bilateral ") else anatomy
        return bare in self.bases()


def build_lexicon(data: dict) -> Lexicon:
    """Validate a decoded lexicon document and build its phrase indices."""
    for key in ("findings", "regions", "negations"):
        if key not in data or not isinstance(data[key], list):
            raise LexiconError(f"lexicon is missing list '{key}'")

    findings = []
    for i, entry in enumerate(data["findings"]):
        try:
            syns = tuple(entry.get("synonyms", [])) or (entry["canonical"],)
            findings.append(FindingEntry(entry["canonical"], entry.get("type", DEFAULT_TYPE), syns))
        except (KeyError, TypeError, AttributeError) as exc:
            raise LexiconError(f"finding entry {i} is malformed: {entry!r}") from exc
    regions = []
    for i, entry in enumerate(data["regions"]):
        try:
            syns = tuple(entry.get("synonyms", [])) or (entry["canonical"],)
            regions.append(RegionEntry(entry["canonical"], syns, bool(entry.get("lateralized", False))))
        except (KeyError, TypeError, AttributeError) as exc:
            raise LexiconError(f"region entry {i} is malformed: {entry!r}") from exc
    negations = []
    for entry in data["negations"]:
        if isinstance(entry, str):
            negations.append(NegationCue(entry))
        else:
            scope = entry.get("scope", "forward")
            if scope not in ("forward", "backward"):
                raise LexiconError(f"negation cue {entry!r} has unknown scope {scope!r}")
            negations.append(NegationCue(entry["phrase"], scope))

    for kind, items in (("finding", findings), ("region", regions)):
        names = [it.canonical for it in items]
        dupes = {n for n in names if names.count(n) > 1}
        if dupes:
            raise LexiconError(f"duplicate canonical {kind} name(s): {sorted(dupes)}")

    finding_phrases: dict[tuple[str, ...], str] = {}
    for f in findings:
        for syn in (f.canonical,) + f.synonyms:
            key = _norm(syn)
            prev = finding_phrases.get(key)
            if prev is not None and prev != f.canonical:
                raise LexiconError(
                    f"synonym '{syn}' maps to both '{prev}' and '{f.canonical}'")
            finding_phrases[key] = f.canonical

    # anatomy phrases map to ("region", canonical) or ("base", base name)
    anatomy_phrases: dict[tuple[str, ...], tuple[str, str]] = {}

    def _add(key, value, syn):
        prev = anatomy_phrases.get(key)
        if prev is not None and prev != value:
            raise LexiconError(f"synonym '{syn}' maps to both '{prev[1]}' and '{value[1]}'")
        anatomy_phrases[key] = value

    for r in regions:
        for syn in (r.canonical,) + r.synonyms:
            key = _norm(syn)
            if key in finding_phrases:
                raise LexiconError(
                    f"synonym '{syn}' maps to both '{finding_phrases[key]}' and '{r.canonical}'")
            _add(key, ("region", r.canonical), syn)
    for r in regions:
        if r.side is None:
            continue
        for syn in (r.canonical,) + r.synonyms:
            key = _norm(syn)
            if key and key[0] == r.side and len(key) > 1:
                base_key = key[1:]
                if base_key in anatomy_phrases and anatomy_phrases[base_key][0] == "region":
                    continue
                _add(base_key, ("base", r.base), syn)
                _add(base_key[:-1] + (base_key[-1] + "s",), ("base", r.base), syn)

    negation_phrases = {_norm(c.phrase): c for c in negations}
    return Lexicon(tuple(findings), tuple(regions), tuple(negations),
                   finding_phrases, anatomy_phrases, negation_phrases)


def load_lexicon(path: str | Path | None = None) -> Lexicon:
    """Load and validate a lexicon JSON file; None loads the shipped lexicon."""
    if path is None:
        text = resources.files("fcrx.data").joinpath("lexicon.json").read_text()
        source = "<shipped lexicon>"
    else:
        text = Path(path).read_text()
        source = str(path)
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise LexiconError(f"{source}: parse error at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise LexiconError(f"{source}: top level must be an object")
    return build_lexicon(data)


@dataclass(frozen=True)
class FFLPattern:
    """A structured finding ``T|N|C|A`` plus the word spans that produced it.

    Equality ignores spans.
    """

    polarity: str
    core: str
    anatomy: Optional[str] = None
    finding_type: str = DEFAULT_TYPE
    spans: tuple[tuple[int, int, int], ...] = field(default=(), compare=False)

    def __post_init__(self):
        if self.polarity not in POLARITIES:
            raise FFLParseError(f"bad polarity {self.polarity!r}")

    @property
    def present(self) -> bool:
        return self.polarity == "yes"

    @property
    def sentence(self) -> Optional[int]:
        return self.spans[0][0] if self.spans else None

    def __str__(self) -> str:
        return serialize_ffl(self)


def serialize_ffl(p: FFLPattern) -> str:
    fields = [p.polarity, p.core] + ([p.anatomy] if p.anatomy else [])
    if p.finding_type != DEFAULT_TYPE:
        if not p.anatomy:
            fields.append("")
        fields.insert(0, p.finding_type)
    return "|".join(fields)


def parse_ffl(s: str, lexicon: Lexicon) -> FFLPattern:
    parts = [x.strip() for x in s.split("|")]
    if len(parts) == 2:
        ftype, (pol, core), anatomy = DEFAULT_TYPE, parts, None
    elif len(parts) == 3 and parts[0].lower() in POLARITIES:
        ftype, pol, core, anatomy = DEFAULT_TYPE, *parts
    elif len(parts) == 3:
        ftype, pol, core, anatomy = *parts, None
    elif len(parts) == 4:
        ftype, pol, core, anatomy = parts
    else:
        raise FFLParseError(f"expected 2-4 '|'-separated fields, got {len(parts)}: {s!r}")
    pol = pol.lower()
    if pol not in POLARITIES:
        raise FFLParseError(f"bad polarity {pol!r} in {s!r}")
    if core not in lexicon.finding_names:
        raise FFLParseError(f"unknown core finding {core!r} in {s!r}")
    anatomy = anatomy or None
    if anatomy is not None and not lexicon.is_valid_anatomy(anatomy):
        raise FFLParseError(f"unknown anatomy {anatomy!r} in {s!r}")
    return FFLPattern(pol, core, anatomy, ftype or DEFAULT_TYPE)


# --- tokenization -----------------------------------------------------------

@dataclass(frozen=True)
class Word:
    text: str  # lowercased
    start: int  # character offsets into the report
    end: int


@dataclass(frozen=True)
class Sentence:
    index: int
    start: int
    end: int  # exclusive, includes the terminating period if any
    words: tuple[Word, ...]


def split_sentences(text: str) -> list[Sentence]:
    sentences = []
    pos = 0
    bounds = [m.end() for m in _SENTENCE_END.finditer(text)]
    if not bounds or bounds[-1] < len(text):
        bounds.append(len(text))
    for end in bounds:
        chunk = text[pos:end]
        words = tuple(Word(m.group().lower(), pos + m.start(), pos + m.end())
                      for m in _WORD.finditer(chunk))
        if words:
            lead = len(chunk) - len(chunk.lstrip())
            sentences.append(Sentence(len(sentences), pos + lead, end, words))
        pos = end
    return sentences


def split_clauses(text: str, sentence: Sentence) -> list[list[int]]:
    """Word indices of each clause; a conjunction opens the clause it precedes."""
    clauses: list[list[int]] = [[]]
    prev_end = sentence.start
    for i, w in enumerate(sentence.words):
        gap = text[prev_end:w.start]
        if clauses[-1] and (_CLAUSE_PUNCT.search(gap) or w.text in CONJUNCTIONS):
            clauses.append([])
        clauses[-1].append(i)
        prev_end = w.end
    return [c for c in clauses if c]


def _match(words: list[str], positions: list[int], phrases: dict, claimed: set[int]):
    """Longest-first phrase matching over the clause words at ``positions``."""
    found = []
    max_len = max((len(k) for k in phrases), default=0)
    for length in range(min(max_len, len(positions)), 0, -1):
        for s in range(len(positions) - length + 1):
            idx = positions[s:s + length]
            if any(i in claimed for i in idx):
                continue
            key = tuple(words[i] for i in idx)
            if key in phrases:
                found.append((idx[0], idx[-1] + 1, phrases[key]))
                claimed.update(idx)
    return sorted(found, key=lambda m: m[0])


def _load_defaults() -> dict[str, list[str]]:
    text = resources.files("fcrx.data").joinpath("default_regions.json").read_text()
    return json.loads(text)


_DEFAULT_REGIONS: Optional[dict] = None


def default_regions() -> dict[str, list[str]]:
    """Shipped table: finding name -> typical canonical regions."""
    global _DEFAULT_REGIONS
    if _DEFAULT_REGIONS is None:
        _DEFAULT_REGIONS = _load_defaults()
    return _DEFAULT_REGIONS


def _resolve_anatomy(kind: str, name: str, side: Optional[str]) -> str:
    if kind == "region":
        return name
    if side in SIDES:
        return f"{side} {name}"
    if side == "bilateral":
        return f"bilateral {name}"
    return name


def _lateral_default(core: str, side: str, lexicon: Lexicon) -> Optional[str]:
    defaults = default_regions().get(core, [])
    if side == "bilateral":
        bases = {lexicon.region(r).base for r in defaults if r in lexicon.region_names}
        return f"bilateral {bases.pop()}" if len(bases) == 1 and None not in bases else None
    picks = [r for r in defaults if r.split(" ", 1)[0] == side]
    return picks[0] if len(picks) == 1 else None


def extract_ffl(text: str, lexicon: Lexicon, diagnostics: Optional[dict] = None) -> list[FFLPattern]:
    """Extract FFL patterns from report text.

    If ``diagnostics`` is given it is filled with counts of sentences, clauses
    and skipped candidate clauses (anatomy or negation without a finding).
    """
    patterns: list[FFLPattern] = []
    skipped = 0
    n_clauses = 0
    sentences = split_sentences(text)
    for sent in sentences:
        words = [w.text for w in sent.words]
        inherited_cue: Optional[tuple[int, int]] = None
        for clause in split_clauses(text, sent):
            n_clauses += 1
            claimed: set[int] = set()
            found = _match(words, clause, lexicon.finding_phrases, claimed)
            cues = _match(words, clause, lexicon.negation_phrases, claimed)
            anatomy = _match(words, clause, lexicon.anatomy_phrases, claimed)
            lateral = []
            for i in clause:
                if i in claimed or words[i] not in LATERALITY_WORDS:
                    continue
                end = i + 1
                if end < len(words) and words[end] == "sided" and end in clause:
                    end += 1
                lateral.append((i, end, LATERALITY_WORDS[words[i]]))
                claimed.update(range(i, end))

            if not found:
                if anatomy or cues:
                    skipped += 1
                forward = [c for c in cues if c[2].scope == "forward"]
                inherited_cue = (forward[-1][0], forward[-1][1]) if forward else None
                continue

            list_item = all(i in claimed or words[i] in LIST_FILLERS for i in clause)
            carry = inherited_cue if list_item else None
            last_forward = None
            for start, end, core in found:
                cue_span = None
                for c0, c1, cue in cues:
                    if cue.scope == "forward" and c1 <= start:
                        cue_span = (c0, c1)
                    elif cue.scope == "backward" and c0 >= end:
                        cue_span = (c0, c1)
                        break
                if cue_span is None and carry is not None:
                    cue_span = carry
                spans = [(sent.index, start, end)]
                anat_name = None
                if anatomy:
                    a0, a1, (kind, name) = min(
                        anatomy, key=lambda a: min(abs(a[0] - end), abs(start - a[1])))
                    side = None
                    if kind == "base" and lateral:
                        l0, l1, side = min(lateral, key=lambda m: min(abs(m[1] - a0), abs(a1 - m[0])))
                        spans.append((sent.index, l0, l1))
                    anat_name = _resolve_anatomy(kind, name, side)
                    spans.append((sent.index, a0, a1))
                elif lateral:
                    l0, l1, side = min(lateral, key=lambda m: min(abs(m[1] - start), abs(end - m[0])))
                    anat_name = _lateral_default(core, side, lexicon)
                    if anat_name is not None:
                        spans.append((sent.index, l0, l1))
                polarity = "yes"
                if cue_span is not None:
                    polarity = "no"
                    spans.append((sent.index, cue_span[0], cue_span[1]))
                    last_forward = cue_span if cue_span[1] <= start else last_forward
                patterns.append(FFLPattern(polarity, core, anat_name,
                                           lexicon.finding(core).type,
                                           tuple(sorted(spans, key=lambda s: s[1]))))
            forward = [c for c in cues if c[2].scope == "forward"]
            if forward:
                inherited_cue = (forward[-1][0], forward[-1][1])
            elif not list_item:
                inherited_cue = None
    if diagnostics is not None:
        diagnostics.update(sentences=len(sentences), clauses=n_clauses,
                           patterns=len(patterns), skipped_candidates=skipped)
    return patterns


def span_text(text: str, span: tuple[int, int, int], sentences: Optional[list[Sentence]] = None) -> str:
    """Surface words (lowercased, space-joined) covered by a span."""
    sentences = sentences if sentences is not None else split_sentences(text)
    s, a, b = span
    return " ".join(w.text for w in sentences[s].words[a:b])


def iter_findings(patterns: Iterable[FFLPattern]) -> list[tuple[str, str]]:
    return [(p.polarity, p.core) for p in patterns]
