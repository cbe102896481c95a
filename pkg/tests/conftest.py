from collections import Counter

import pytest

from fcrx.atlas import BBox, RegionMap, build_pools
from fcrx.lexicon import load_lexicon
from fcrx.synth import GeneratorConfig, generate_dataset, samples_from_reports
from fcrx.toy import ToyConfig, make_corpus


@pytest.fixture(scope="session")
def lexicon():
    return load_lexicon()


@pytest.fixture(scope="session")
def small_toy():
    """60-image toy corpus with its region map and generated samples."""
    images = make_corpus(ToyConfig(n_images=60, seed=3))
    rm = RegionMap({im.image_id: im.regions for im in images})
    lex = load_lexicon()
    real = samples_from_reports({im.image_id: im.ground_truth for im in images}, rm, lex)
    pools = build_pools(real)
    data = generate_dataset(real, pools, GeneratorConfig(), seed=3)
    return {"images": images, "region_map": rm, "real": real, "pools": pools, "samples": data}


def box(*v):
    return BBox(*v)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
