import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fcrx.atlas import ZERO_BOX, BBox
from fcrx.config import ModelConfig
from fcrx.diffcore import Param
from fcrx.evaluation import split_dataset
from fcrx.model import (
    BOX_FEATURES, Batch, MissingEmbedding, ModelCheckpoint, NumericalError, PlantedSignalFeaturizer,
    Prediction, PrecomputedFeaturizer, box_features, evaluate, forward, init_params, loss_and_grads,
    predict_many, score_pairs, train,
)
from fcrx.synth import FLPair, Sample

from fd import numeric_grad, rel_error

SMALL = ModelConfig(image_dim=96, text_dim=64, proj_dim=32, hidden=32, epochs=3, batch_size=8,
                    warmup_steps=2, max_lr=5e-3)


def _with(config, **kw):
    return ModelConfig(**{**config.__dict__, **kw})


@pytest.fixture(scope="module")
def toy(small_toy, lexicon):
    feat = PlantedSignalFeaturizer.from_samples(small_toy["samples"], lexicon.finding_names,
                                                SMALL.image_dim, SMALL.text_dim, seed=0)
    split = split_dataset(small_toy["samples"], seed=0)
    return {"featurizer": feat, "split": split}


@pytest.fixture(scope="module")
def trained(toy):
    return train(toy["split"].train, SMALL, toy["featurizer"], seed=5)


# --- featurizers ----------------------------------------------------------------------

def test_box_features_unit_norm():
    v = box_features(BBox(0.1, 0.2, 0.3, 0.4))
    assert v.shape == (BOX_FEATURES,)
    assert np.linalg.norm(v) == pytest.approx(1.0)


def test_featurizer_is_deterministic(toy, small_toy, lexicon):
    image_id = small_toy["samples"][0].image_id
    feat = toy["featurizer"]
    again = PlantedSignalFeaturizer.from_samples(small_toy["samples"], lexicon.finding_names,
                                                 SMALL.image_dim, SMALL.text_dim, seed=0)
    assert np.array_equal(feat.featurize_image(image_id), again.featurize_image(image_id))
    assert np.array_equal(feat.featurize_finding("yes", "edema", BBox(.1, .1, .2, .2)),
                          again.featurize_finding("yes", "edema", BBox(.1, .1, .2, .2)))
    assert feat.featurize_image(image_id).shape == (SMALL.image_dim,)


def test_featurizer_missing_inputs(toy):
    with pytest.raises(MissingEmbedding):
        toy["featurizer"].featurize_image("no-such-image")
    with pytest.raises(MissingEmbedding):
        toy["featurizer"].featurize_finding("yes", "flux capacitor")


def _cos(a, b):
    return float(a @ b / np.linalg.norm(a) / np.linalg.norm(b))


def test_planted_similarity_tracks_finding_sets(lexicon):
    # [DERIVED] statistical oracle over 100 seeded draws
    rng = np.random.default_rng(0)
    names = lexicon.finding_names
    same, disjoint = [], []
    for draw in range(100):
        picks = rng.choice(len(names), size=6, replace=False)
        a = [(names[i], BBox(0.2, 0.2, 0.3, 0.3)) for i in picks[:3]]
        b = [(names[i], BBox(0.2, 0.2, 0.3, 0.3)) for i in picks[3:]]
        feat = PlantedSignalFeaturizer({"a1": a, "a2": a, "b": b}, names, 128, 64, 0.05, seed=draw)
        same.append(_cos(feat.featurize_image("a1"), feat.featurize_image("a2")))
        disjoint.append(_cos(feat.featurize_image("a1"), feat.featurize_image("b")))
    assert np.mean(disjoint) < np.mean(same)


def test_precomputed_store(tmp_path):
    path = tmp_path / "emb.jsonl"
    recs = [{"kind": "image", "key": "img1", "vector": [0.1, 0.2, 0.3]},
            {"kind": "finding", "key": "yes|edema", "vector": [1.0, 0.0]}]
    path.write_text("\n".join(json.dumps(r) for r in recs))
    feat = PrecomputedFeaturizer.load(path)
    assert feat.featurize_image("img1").tolist() == [0.1, 0.2, 0.3]
    assert feat.featurize_finding("yes", "edema").shape == (2,)
    with pytest.raises(MissingEmbedding):
        feat.featurize_image("img2")
    with pytest.raises(MissingEmbedding):
        feat.featurize_finding("no", "edema")


# --- network ---------------------------------------------------------------------

def test_layer_shapes():
    params = init_params(SMALL, np.random.default_rng(0))
    assert params["reg1_W"].value.shape[0] == 2 * SMALL.proj_dim
    assert params["reg2_W"].value.shape[1] == 5


def _small_batch(rng, config):
    images = rng.normal(size=(3, config.image_dim))
    texts = rng.normal(size=(9, config.text_dim))
    owner = np.repeat(np.arange(3), 3)
    targets = np.zeros((9, 5))
    is_real = np.tile([True, False, False], 3)
    targets[is_real, :4] = [0.2, 0.3, 0.25, 0.3]
    targets[is_real, 4] = 1.0
    targets[5, :4] = [0.5, 0.1, 0.3, 0.2]
    return Batch(images, texts, owner, targets), is_real


@pytest.mark.parametrize("variant", ["comb", "bce_encoder", "frozen_encoder", "dual_head"])
def test_full_model_gradient(variant):
    config = _with(SMALL, dropout=0.0, variant=variant, image_dim=12, text_dim=10, proj_dim=6,
                   hidden=8)
    rng = np.random.default_rng(1)
    params = init_params(config, rng)
    batch, is_real = _small_batch(rng, config)
    loss_and_grads(params, config, batch, is_real, rng)
    analytic = {k: p.grad.copy() for k, p in params.items()}
    f = lambda: loss_and_grads(params, config, batch, is_real, rng)["total"]
    for name in ("img_W", "txt_W", "reg1_W", "reg2_b"):
        numeric = numeric_grad(f, params[name].value)
        if variant == "frozen_encoder" and name in ("img_W", "txt_W"):
            assert np.all(analytic[name] == 0)
        else:
            assert rel_error(analytic[name], numeric) < 1e-4, name


def test_one_step_changes_parameters(toy):
    config = _with(SMALL, epochs=1)
    batch = toy["split"].train[:8]
    ck = train(batch, config, toy["featurizer"], seed=0)
    init = init_params(config, np.random.default_rng(0))
    delta = sum(np.linalg.norm(ck.params[k] - init[k].value) for k in init)
    assert delta > 0


def test_training_is_deterministic(toy, trained):
    again = train(toy["split"].train, SMALL, toy["featurizer"], seed=5)
    assert again.hash() == trained.hash()
    other = train(toy["split"].train, SMALL, toy["featurizer"], seed=6)
    assert other.hash() != trained.hash()


def test_frozen_encoder_keeps_encoder_weights(toy):
    config = _with(SMALL, variant="frozen_encoder", epochs=1)
    ck = train(toy["split"].train, config, toy["featurizer"], seed=0)
    init = init_params(config, np.random.default_rng(0))
    assert np.array_equal(ck.params["img_W"], init["img_W"].value)
    assert not np.array_equal(ck.params["reg1_W"], init["reg1_W"].value)


def test_empty_dataset_rejected(toy):
    with pytest.raises(ValueError):
        train([], SMALL, toy["featurizer"])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises(toy):
    with pytest.raises(NumericalError):
        train(toy["split"].train, _with(SMALL, max_lr=1e100, epochs=3), toy["featurizer"], seed=0)


def test_loss_falls_during_training(toy):
    ck = train(toy["split"].train, _with(SMALL, epochs=20), toy["featurizer"], seed=0)
    totals = [e["total"] for e in ck.log]
    assert np.mean(totals[-5:]) < np.mean(totals[:5])
    assert [e["epoch"] for e in ck.log] == list(range(20))


@pytest.mark.parametrize("variant", ["comb", "bce_encoder", "frozen_encoder", "dual_head"])
def test_all_variants_smoke(small_toy, toy, variant):
    samples = small_toy["samples"][:50]
    ck = train(samples, _with(SMALL, variant=variant, epochs=2), toy["featurizer"], seed=0)
    m = evaluate(ck, toy["featurizer"], samples)
    assert 0 <= m.accuracy <= 1 and 0 <= m.miou <= 1 and m.n_pairs > 0


# --- checkpoint and inference --------------------------------------------------------------

def _claims(samples):
    return [(s.image_id, [(p.polarity, p.core, p.box) for p in s.pairs]) for s in samples]


def test_checkpoint_round_trip(tmp_path, toy, trained):
    path = tmp_path / "ck.npz"
    trained.save(path)
    loaded = ModelCheckpoint.load(path)
    assert loaded.hash() == trained.hash()
    for image_id, claims in _claims(toy["split"].test):
        assert predict_many(trained, toy["featurizer"], image_id, claims) == \
            predict_many(loaded, toy["featurizer"], image_id, claims)
    trained.save(tmp_path / "again.npz")
    assert path.read_bytes() == (tmp_path / "again.npz").read_bytes()


def test_prediction_is_pure(toy, trained):
    image_id, claims = _claims(toy["split"].test)[0]
    first = predict_many(trained, toy["featurizer"], image_id, claims)
    predict_many(trained, toy["featurizer"], _claims(toy["split"].test)[1][0], claims)
    assert predict_many(trained, toy["featurizer"], image_id, claims) == first


@settings(max_examples=20, deadline=None)
@given(st.floats(0.01, 100))
def test_scale_invariance(trained_small, scale):
    params, config, images, texts, owner = trained_small
    out, _ = forward(params, config, images, texts, owner)
    scaled = {k: Param(p.value * (scale if k in ("img_W", "img_b", "txt_W", "txt_b") else 1.0))
              for k, p in params.items()}
    out2, _ = forward(scaled, config, images, texts, owner)
    assert np.array_equal(out[:, 4] >= 0.5, out2[:, 4] >= 0.5)
    assert np.allclose(out, out2, atol=1e-9)


@pytest.fixture(scope="module")
def trained_small(trained, toy):
    s = toy["split"].test[0]
    feat = toy["featurizer"]
    images = feat.featurize_image(s.image_id)[None]
    texts = np.stack([feat.featurize_finding(p.polarity, p.core, p.box) for p in s.pairs])
    return ({k: Param(v) for k, v in trained.params.items()}, trained.model_config, images, texts,
            np.zeros(len(texts), dtype=np.int64))


def test_untrained_model_is_at_chance(toy):
    config = _with(SMALL, epochs=0)
    ck = ModelCheckpoint({k: p.value for k, p in init_params(config, np.random.default_rng(0)).items()},
                         config.__dict__)
    preds, pairs = [], []
    for s in toy["split"].train + toy["split"].test:
        reals, fakes = s.real_pairs, s.fake_pairs[:len(s.real_pairs)]
        chosen = reals[:len(fakes)] + fakes
        preds += predict_many(ck, toy["featurizer"], s.image_id,
                              [(p.polarity, p.core, p.box) for p in chosen])
        pairs += chosen
    assert sum(p.veracity for p in pairs) * 2 == len(pairs)
    assert abs(score_pairs(preds, pairs).accuracy - 0.5) <= 0.1


def test_score_pairs_perfect_and_constant():
    b = BBox(0.1, 0.1, 0.3, 0.3)
    pairs = [FLPair("yes", "edema", b, 1), FLPair("no", "edema", ZERO_BOX, 0)]
    perfect = score_pairs([Prediction(0.9, b), Prediction(0.1, ZERO_BOX)], pairs)
    assert perfect.accuracy == 1.0 and perfect.miou == 1.0 and perfect.auc == 1.0
    assert perfect.n_iou == 1 and perfect.n_zero_excluded == 1
    constant = score_pairs([Prediction(1.0, b), Prediction(1.0, b)], pairs)
    assert constant.accuracy == 0.5 and constant.auc == 0.5
