from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fcrx.atlas import ZERO_BOX, BBox, iou
from fcrx.synth import (
    FLPair, GeneratorConfig, PerturbationSkipped, Sample, generate_dataset, read_samples, relocate,
    reverse, substitute, write_samples,
)

ORIGINAL_BOX = BBox(0.14, 0.13, 0.72, 0.56)
ORIGINAL = FLPair("yes", "edema", ORIGINAL_BOX, 1)
RELOCATED_BOX = BBox(0.85, 0.74, 0.10, 0.21)
CYST_BOX = BBox(0.02, 0.48, 0.10, 0.14)


def test_reversal_of_present_edema():
    r = reverse(ORIGINAL)
    assert (r.polarity, r.core, tuple(r.box), r.veracity) == ("no", "edema", (0, 0, 0, 0), 0)


def test_reversal_of_absent_finding():
    r = reverse(FLPair("no", "pneumothorax", ZERO_BOX, 1))
    assert (r.polarity, r.box, r.veracity) == ("yes", ZERO_BOX, 0)


def test_reverse_twice_restores_finding():
    rr = reverse(reverse(ORIGINAL))
    assert (rr.polarity, rr.core) == (ORIGINAL.polarity, ORIGINAL.core)


def test_relocation_draws_from_pool():
    r = relocate(ORIGINAL, [ORIGINAL_BOX, RELOCATED_BOX], np.random.default_rng(0))
    assert (r.polarity, r.core, r.box, r.veracity) == ("yes", "edema", RELOCATED_BOX, 0)


def test_relocate_skips():
    rng = np.random.default_rng(0)
    with pytest.raises(PerturbationSkipped):
        relocate(ORIGINAL, [ORIGINAL_BOX], rng)
    with pytest.raises(PerturbationSkipped):
        relocate(ORIGINAL, [ORIGINAL_BOX, BBox(0.15, 0.13, 0.72, 0.56)], rng)
    with pytest.raises(PerturbationSkipped):
        relocate(reverse(ORIGINAL), [ORIGINAL_BOX, RELOCATED_BOX], rng)


def test_substitution_of_missing_finding():
    sample = Sample("a", [ORIGINAL])
    s = substitute(ORIGINAL, sample, {"edema": (ORIGINAL_BOX,), "lung cyst": (CYST_BOX,)},
                   ["edema", "lung cyst"], np.random.default_rng(0))
    assert (s.polarity, s.core, s.box, s.veracity) == ("yes", "lung cyst", CYST_BOX, 0)


def test_substitute_skips_when_sample_has_everything():
    with pytest.raises(PerturbationSkipped):
        substitute(ORIGINAL, Sample("a", [ORIGINAL]), {"edema": (ORIGINAL_BOX,)}, ["edema"],
                   np.random.default_rng(0))


def test_one_real_pair_yields_four_fakes():
    pools = {"edema": (ORIGINAL_BOX, RELOCATED_BOX, BBox(0.6, 0.1, 0.2, 0.2)),
             "lung cyst": (CYST_BOX,)}
    out = generate_dataset([Sample("a", [ORIGINAL])], pools, GeneratorConfig(1, 2, 1), seed=0)
    kinds = Counter(p.provenance for p in out[0].fake_pairs)
    assert kinds == {"reversal": 1, "relocate": 2, "substitute": 1}
    assert len(out[0].pairs) == 5


def test_fake_pair_validation():
    with pytest.raises(ValueError):
        FLPair("no", "edema", ORIGINAL_BOX, 1)
    with pytest.raises(ValueError):
        FLPair("yes", "edema", ORIGINAL_BOX, 2)


def test_thousand_draws_have_no_violations(small_toy):
    pools = small_toy["pools"]
    findings = sorted(pools)
    violations = 0
    draws = 0
    rng = np.random.default_rng(123)
    real = [s for s in small_toy["real"] if s.real_pairs]
    while draws < 1000:
        s = real[int(rng.integers(len(real)))]
        p = s.real_pairs[int(rng.integers(len(s.real_pairs)))]
        try:
            r = relocate(p, pools.get(p.core, ()), rng)
            violations += r.box not in pools[p.core] or iou(r.box, p.box) > 0.5
        except PerturbationSkipped:
            pass
        try:
            q = substitute(p, s, pools, findings, rng)
            violations += q.core in s.real_names or q.box not in pools[q.core]
        except PerturbationSkipped:
            pass
        draws += 1
    assert violations == 0


def test_generated_dataset_invariants(small_toy):
    pools = small_toy["pools"]
    for s in small_toy["samples"]:
        real_keys = {p.key for p in s.real_pairs}
        assert all(p.veracity == 1 and p.provenance == "real" for p in s.real_pairs)
        for f in s.fake_pairs:
            assert f.veracity == 0 and f.key not in real_keys
            if f.provenance in ("relocate", "substitute"):
                assert f.box in pools[f.core]
            if f.polarity == "no":
                assert f.box == ZERO_BOX


def test_fake_ratio_matches_config(small_toy):
    report = Counter()
    generate_dataset(small_toy["real"], small_toy["pools"], GeneratorConfig(), 3, report)
    per_real = 1 + 2 + 1
    generated = report["reversal"] + report["relocate"] + report["substitute"]
    skipped = sum(v for k, v in report.items() if k.startswith("skipped_"))
    assert generated + skipped == per_real * report["real"]


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 2**31 - 1))
def test_seeds_change_draws_not_counts(small_toy, seed_a, seed_b):
    ra, rb = Counter(), Counter()
    generate_dataset(small_toy["real"], small_toy["pools"], GeneratorConfig(), seed_a, ra)
    generate_dataset(small_toy["real"], small_toy["pools"], GeneratorConfig(), seed_b, rb)
    assert ra == rb


def test_determinism_and_round_trip(small_toy, tmp_path):
    a = generate_dataset(small_toy["real"], small_toy["pools"], GeneratorConfig(), 11)
    b = generate_dataset(small_toy["real"], small_toy["pools"], GeneratorConfig(), 11)
    write_samples(a, tmp_path / "a.jsonl")
    write_samples(b, tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    back = read_samples(tmp_path / "a.jsonl")
    assert [s.to_json() for s in back] == [s.to_json() for s in a]
