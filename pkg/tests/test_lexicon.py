import json

import pytest
from hypothesis import given, settings, strategies as st

from fcrx.lexicon import (
    FFLParseError, FFLPattern, LexiconError, extract_ffl, load_lexicon, parse_ffl, serialize_ffl,
    span_text, split_sentences,
)

WORKED_SENTENCE = "Left-sided pleural effusion found and the right atelectasis still remains."
NEGATED_LIST = ("The chest x ray image shows no focal consolidation, pulmonary edema, "
               "pleural effusion or pneumothorax")


def _write(tmp_path, data):
    p = tmp_path / "lex.json"
    p.write_text(json.dumps(data, indent=1))
    return p


def test_minimal_file_loads(tmp_path):
    lex = load_lexicon(_write(tmp_path, {
        "findings": [{"canonical": "edema", "type": "finding", "synonyms": ["edema"]}],
        "regions": [], "negations": ["no"]}))
    assert len(lex) == 1


def test_shipped_lexicon_size(lexicon):
    assert len(lexicon.finding_names) >= 23
    assert len(lexicon.region_names) == 36


def test_enlarged_cardiac_silhouette_normalizes(lexicon):
    assert lexicon.lookup("enlarged cardiac silhouette") == "cardiomegaly"
    assert lexicon.lookup("Enlarged  Cardiac-Silhouette") == "cardiomegaly"


def test_duplicate_synonym_names_both_targets(tmp_path):
    data = {"findings": [
        {"canonical": "edema", "type": "finding", "synonyms": ["fluid"]},
        {"canonical": "pleural effusion", "type": "finding", "synonyms": ["fluid"]}],
        "regions": [], "negations": []}
    with pytest.raises(LexiconError) as exc:
        load_lexicon(_write(tmp_path, data))
    assert "edema" in str(exc.value) and "pleural effusion" in str(exc.value)


def test_parse_error_reports_line(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "findings": [\n  oops\n]}')
    with pytest.raises(LexiconError, match="line 3"):
        load_lexicon(p)


def _ffl(text, lexicon):
    return [serialize_ffl(p) for p in extract_ffl(text, lexicon)]


def test_negated_list_extraction(lexicon):
    out = _ffl(NEGATED_LIST, lexicon)
    assert "no|pneumothorax" in out
    assert set(out) == {"no|consolidation", "no|edema", "no|pleural effusion", "no|pneumothorax"}


def test_left_sided_effusion(lexicon):
    assert _ffl("Left-sided pleural effusion found", lexicon) == ["yes|pleural effusion|left lung"]
    assert _ffl(WORKED_SENTENCE, lexicon) == ["yes|pleural effusion|left lung",
                                          "yes|atelectasis|right lung"]


def test_empty_report(lexicon):
    assert extract_ffl("", lexicon) == []


def test_backward_negation_and_bilateral(lexicon):
    assert _ffl("Pneumothorax is not seen.", lexicon) == ["no|pneumothorax"]
    assert _ffl("Bilateral pleural effusions.", lexicon) == ["yes|pleural effusion|bilateral lung"]


def test_negation_does_not_leak_past_clause(lexicon):
    out = _ffl("No pneumothorax. Edema in the right lung.", lexicon)
    assert out == ["no|pneumothorax", "yes|edema|right lung"]


def test_diagnostics_count_skipped(lexicon):
    diag = {}
    extract_ffl("The left lung is clear. No edema.", lexicon, diag)
    assert diag["skipped_candidates"] == 1
    assert diag["patterns"] == 1


def test_serialize_elides_default_type(lexicon):
    assert serialize_ffl(FFLPattern("yes", "edema")) == "yes|edema"
    p = parse_ffl("no|edema", lexicon)
    assert (p.polarity, p.core, p.anatomy) == ("no", "edema", None)


def test_parse_rejects_bad_tokens(lexicon):
    with pytest.raises(FFLParseError):
        parse_ffl("maybe|edema", lexicon)
    with pytest.raises(FFLParseError):
        parse_ffl("yes|flux capacitor", lexicon)
    with pytest.raises(FFLParseError):
        parse_ffl("yes", lexicon)


def test_device_type_round_trips(lexicon):
    p = FFLPattern("yes", "endotracheal tube", None, "device")
    assert serialize_ffl(p) == "device|yes|endotracheal tube|"
    assert parse_ffl(serialize_ffl(p), lexicon) == p


_LEX = load_lexicon()
patterns = st.builds(
    FFLPattern,
    polarity=st.sampled_from(["yes", "no"]),
    core=st.sampled_from(_LEX.finding_names),
    anatomy=st.one_of(st.none(), st.sampled_from(_LEX.region_names)),
    finding_type=st.sampled_from(["finding", "device", "disease"]),
)


@given(patterns)
def test_round_trip(p):
    q = parse_ffl(serialize_ffl(p), _LEX)
    assert (q.finding_type, q.polarity, q.core, q.anatomy) == (
        p.finding_type, p.polarity, p.core, p.anatomy)


phrases = st.sampled_from([f for f in _LEX.findings if f.canonical != "endotracheal tube"])
regions = st.sampled_from(["right lower lung zone", "left upper lung zone", "right lung",
                           "left costophrenic angle"])
cues = st.sampled_from(["No", "No evidence of", "Without", "Negative for"])


@settings(max_examples=60)
@given(phrases, regions, cues, st.data())
def test_negation_prefix_flips_polarity_only(entry, region, cue, data):
    syn = data.draw(st.sampled_from(entry.synonyms))
    clause = f"{syn} in the {region}"
    plain = extract_ffl(clause.capitalize() + ".", _LEX)
    negated = extract_ffl(f"{cue} {clause}.", _LEX)
    assert [p.core for p in plain] == [p.core for p in negated]
    assert [p.anatomy for p in plain] == [p.anatomy for p in negated]
    assert all(p.polarity == "yes" for p in plain)
    assert all(p.polarity == "no" for p in negated)


@settings(max_examples=60)
@given(phrases, regions, st.booleans(), st.data())
def test_span_fidelity(entry, region, negate, data):
    syn = data.draw(st.sampled_from(entry.synonyms))
    text = ("No " if negate else "There is ") + f"{syn} in the {region}. Heart size is normal."
    sentences = split_sentences(text)
    for p in extract_ffl(text, _LEX):
        assert p.spans
        for s, a, b in p.spans:
            assert 0 <= a < b <= len(sentences[s].words)
        surfaces = [span_text(text, sp, sentences) for sp in p.spans]
        assert _LEX.lookup(surfaces[0]) == p.core or any(
            _LEX.lookup(t) == p.core for t in surfaces)
        for t in surfaces:
            known = (_LEX.lookup(t) == p.core or t in {" ".join(k) for k in _LEX.negation_phrases}
                     or " ".join(t.split()) in {" ".join(k) for k in _LEX.anatomy_phrases}
                     or t in ("left", "right", "both", "bilateral", "left sided", "right sided"))
            assert known, t


@given(st.text(max_size=80))
def test_extraction_is_deterministic(text):
    assert extract_ffl(text, _LEX) == extract_ffl(text, _LEX)
