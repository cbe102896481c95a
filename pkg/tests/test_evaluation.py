import json
import math
from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from fcrx import pipeline
from fcrx.atlas import BBox, RegionMap
from fcrx.evaluation import (
    METRICS, CorpusRecord, EvalRun, ExternalMetricUnavailable, bleu, read_corpus, run_assessment,
    split_dataset, tokenize,
)
from fcrx.model import Prediction


def _oracle_bleu(cand, ref, max_n):
    # independent count: explicit n-gram lists, no Counter clipping helper
    c, r = tokenize(cand), tokenize(ref)
    logs = []
    for n in range(1, max_n + 1):
        cg = [tuple(c[i:i + n]) for i in range(len(c) - n + 1)]
        rg = [tuple(r[i:i + n]) for i in range(len(r) - n + 1)]
        used = [False] * len(rg)
        hits = 0
        for g in cg:
            for j, h in enumerate(rg):
                if not used[j] and h == g:
                    used[j] = True
                    hits += 1
                    break
        if hits == 0:
            if n == 1:
                return 0.0
            logs.append(math.log(1 / (len(cg) + 1)))
        else:
            logs.append(math.log(hits / len(cg)))
    bp = 1.0 if len(c) > len(r) else math.exp(1 - len(r) / len(c))
    return bp * math.exp(sum(logs) / max_n)


def test_tokenize():
    assert tokenize("Left-sided effusion, 2cm.") == ["left", "-", "sided", "effusion", ",", "2cm", "."]


def test_bleu_hand_case():
    # [DERIVED] unigram 3/4, bigram 2/3, no brevity penalty: sqrt(1/2)
    assert bleu("a b c d", "a b c e", max_n=2) == pytest.approx(math.sqrt(0.5), abs=1e-12)


def test_bleu_identity_and_disjoint():
    assert bleu("No pneumothorax.", "No pneumothorax.") == pytest.approx(1.0)
    assert bleu("alpha beta", "gamma delta") == 0.0
    assert bleu("", "gamma") == 0.0


def test_bleu_brevity_penalty():
    # [DERIVED] all n-grams match, bp = exp(1 - 6/3)
    assert bleu("a b c", "a b c d e f", max_n=1) == pytest.approx(math.exp(-1.0))


words = st.lists(st.sampled_from(["no", "edema", "left", "lung", "effusion", ".", "the", "mild"]),
                 max_size=12).map(" ".join)


@given(words, words)
def test_bleu_matches_oracle(cand, ref):
    assert bleu(cand, ref) == pytest.approx(_oracle_bleu(cand, ref, 4), abs=1e-12) \
        if tokenize(cand) and tokenize(ref) else bleu(cand, ref) == 0.0


@given(words, words)
def test_bleu_range(cand, ref):
    assert 0.0 <= bleu(cand, ref) <= 1.0 + 1e-12


@given(words.filter(lambda s: s.strip()))
def test_bleu_self_is_one(x):
    assert bleu(x, x) == pytest.approx(1.0)


def test_external_metric_slots():
    with pytest.raises(ExternalMetricUnavailable, match="external model not configured"):
        METRICS["chexbert"]("a", "b")
    with pytest.raises(ExternalMetricUnavailable):
        METRICS["radgraph_f1"]("a", "b")


# --- splits ------------------------------------------------------------------------------

def test_ten_items_split_7_1_2():
    s = split_dataset(range(10), seed=0)
    assert (len(s.train), len(s.val), len(s.test)) == (7, 1, 2)


@given(st.integers(0, 300), st.integers(0, 2**32 - 1))
def test_split_is_partition(n, seed):
    s = split_dataset(range(n), seed=seed)
    combined = s.train + s.val + s.test
    assert sorted(combined) == list(range(n))
    assert split_dataset(range(n), seed=seed) == s


def test_split_seed_changes_assignment():
    assert split_dataset(range(100), seed=1) != split_dataset(range(100), seed=2)


@settings(max_examples=25)
@given(st.integers(10, 200), st.integers(2, 10), st.integers(0, 1000))
def test_folds_have_disjoint_tests(n, k, seed):
    tests = []
    for fold in range(k):
        s = split_dataset(range(n), folds=k, fold=fold, seed=seed)
        assert sorted(s.train + s.val + s.test) == list(range(n))
        tests += s.test
    assert sorted(tests) == list(range(n))


def test_fold_out_of_range():
    with pytest.raises(ValueError):
        split_dataset(range(10), folds=5, fold=5)


# --- assessment -------------------------------------------------------------------------

RM = RegionMap({"a": {"left lung": BBox(0.55, 0.1, 0.35, 0.7), "right lung": BBox(0.1, 0.15, 0.3, 0.6)},
                "b": {"left lung": BBox(0.5, 0.1, 0.35, 0.7), "right lung": BBox(0.1, 0.1, 0.3, 0.6)}})


def _echo(truth):
    def predict(checkpoint, featurizer, image_id, claims):
        return [Prediction(0.9 if (n, c) in truth else 0.1, box) for n, c, box in claims]
    return predict


def test_identical_corpus_has_no_improvement(monkeypatch, lexicon):
    monkeypatch.setattr(pipeline, "predict_many", _echo({("no", "pneumothorax"), ("yes", "edema")}))
    corpus = [CorpusRecord("a", "No pneumothorax.", "No pneumothorax."),
              CorpusRecord("b", "Edema in the right lung.", "Edema in the right lung.")]
    run = run_assessment(corpus, None, None, lexicon, RM)
    assert run.mean("bleu_ag") == pytest.approx(1.0)
    assert run.improvement == 0.0
    assert run.concordance == pytest.approx(0.0)


def test_correction_improves_planted_error(monkeypatch, lexicon, tmp_path):
    monkeypatch.setattr(pipeline, "predict_many", _echo({("no", "pneumothorax")}))
    corpus = [CorpusRecord("a", "No pneumothorax. Edema in the right lung.", "No pneumothorax.")]
    run = run_assessment(corpus, None, None, lexicon, RM)
    row = run.rows[0]
    assert row["corrected"] == "No pneumothorax."
    assert row["bleu_cg"] > row["bleu_ag"] and run.improvement > 0
    # [DERIVED] FC(A,G): pneumothorax matched (E=1, both zero boxes, IoU 1); edema unmatched
    # (E=0, IoU(box, zero) 0): 0.5 * (1/2 + 1/4)
    assert row["fc_ag"] == pytest.approx(0.375)
    paths = run.write(tmp_path)
    summary = json.loads(paths["summary_json"].read_text())
    assert summary["reports"] == 1 and summary["improvement"] == pytest.approx(run.improvement, abs=1e-6)
    assert paths["reports_csv"].read_text().splitlines()[0].startswith("image_id,")


def test_assessment_is_deterministic(monkeypatch, lexicon):
    monkeypatch.setattr(pipeline, "predict_many", _echo({("yes", "atelectasis")}))
    text = "Left-sided pleural effusion found and the right atelectasis still remains."
    corpus = [CorpusRecord("a", text, "Atelectasis in the right lung.")]
    a = run_assessment(corpus, None, None, lexicon, RM)
    b = run_assessment(corpus, None, None, lexicon, RM)
    assert a.rows == b.rows


def test_undefined_scores_are_counted(monkeypatch, lexicon):
    monkeypatch.setattr(pipeline, "predict_many", _echo(set()))
    corpus = [CorpusRecord("a", "Heart size is normal.", "No edema.")]
    run = run_assessment(corpus, None, None, lexicon, RM)
    s = run.summary()
    assert s["fc_undefined_ap"] == 1 and s["fc_undefined_ag"] == 1
    assert math.isnan(run.concordance)


def test_unknown_metric_rejected(lexicon):
    with pytest.raises(ValueError):
        run_assessment([], None, None, lexicon, RM, metrics=("rouge",))


def test_read_corpus(tmp_path):
    p = tmp_path / "c.jsonl"
    p.write_text(json.dumps({"image_id": 1, "automated_report": "x", "ground_truth_report": "y"})
                 + "\n\n")
    assert read_corpus(p) == [CorpusRecord("1", "x", "y")]
    p.write_text('{"image_id": 1}\n')
    with pytest.raises(ValueError, match=":1:"):
        read_corpus(p)
