"""The fact-checking network: featurizers, projections, contrastive head and
the five-output regressor, with training, checkpointing and evaluation.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .atlas import ZERO_BOX, BBox, iou
from .config import FeaturizerConfig, ModelConfig
from .diffcore import (
    PROB_EPS, CosineWarmup, OptimizerState, Param, adamw_step, bce_with_logits, dropout,
    dropout_backward, l2_normalize, l2_normalize_backward, linear_backward, linear_forward,
    regression_loss, relu, relu_backward, sigmoid, sigmoid_backward, supcon_loss,
)
from .synth import FLPair, Sample

CHECKPOINT_VERSION = 1


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


class MissingEmbedding(KeyError):
    pass


# --- featurizers ------------------------------------------------------------

BOX_FREQUENCIES = (1.0, 2.0, 4.0, 8.0)
BOX_FEATURES = 4 * 2 * len(BOX_FREQUENCIES)


def box_features(box: BBox) -> np.ndarray:
    """Unit-norm Fourier encoding of (centre x, centre y, w, h).

    Nearby boxes get nearly parallel encodings; distant boxes nearly orthogonal ones.
    """
    v = np.array([box.x + box.w / 2, box.y + box.h / 2, box.w, box.h])
    angles = np.pi * np.outer(v, BOX_FREQUENCIES).ravel()
    return np.concatenate([np.sin(angles), np.cos(angles)]) / math.sqrt(len(angles))


SLOT = 1 + BOX_FEATURES


class PlantedSignalFeaturizer:
    """Synthetic stand-in for a pretrained image/text encoder pair.

    Every vocabulary finding owns a latent slot ``[presence, box features]``.
    An image's latent sums the slots of its true present findings; the claim
    text for ``(N, C, box)`` fills slot C with +1/-1 and the claimed box.
    Both latents go through fixed seeded random matrices, and images get
    seeded Gaussian noise per image id.
    """

    kind = "planted"

    def __init__(self, truth: Mapping[str, Sequence[tuple[str, BBox]]], vocabulary: Sequence[str],
                 image_dim: int, text_dim: int, noise: float = 0.05, seed: int = 0):
        self.truth = {k: tuple(v) for k, v in truth.items()}
        self.vocabulary = list(vocabulary)
        self._index = {name: i for i, name in enumerate(self.vocabulary)}
        self.image_dim, self.text_dim = image_dim, text_dim
        self.noise, self.seed = noise, seed
        latent = SLOT * len(self.vocabulary)
        rng = np.random.default_rng([seed, 11])
        self._img_proj = rng.normal(size=(latent, image_dim)) / math.sqrt(image_dim)
        self._txt_proj = rng.normal(size=(latent, text_dim)) / math.sqrt(text_dim)
        self._cache: dict[str, np.ndarray] = {}

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], vocabulary: Sequence[str],
                     image_dim: int, text_dim: int, noise: float = 0.05, seed: int = 0):
        truth = {s.image_id: [(p.core, p.box) for p in s.real_pairs if p.present and not p.box.is_zero]
                 for s in samples}
        return cls(truth, vocabulary, image_dim, text_dim, noise, seed)

    def _slot(self, core: str) -> slice:
        if core not in self._index:
            raise MissingEmbedding(f"finding {core!r} is not in the featurizer vocabulary")
        i = self._index[core] * SLOT
        return slice(i, i + SLOT)

    def featurize_image(self, image_id: str) -> np.ndarray:
        if image_id in self._cache:
            return self._cache[image_id]
        if image_id not in self.truth:
            raise MissingEmbedding(f"no planted signal for image {image_id!r}")
        z = np.zeros(SLOT * len(self.vocabulary))
        for core, box in self.truth[image_id]:
            z[self._slot(core)] += np.concatenate([[1.0], box_features(box)])
        digest = hashlib.sha256(image_id.encode()).digest()
        rng = np.random.default_rng([self.seed, 17, int.from_bytes(digest[:8], "little")])
        vec = z @ self._img_proj + self.noise * rng.normal(size=self.image_dim) / math.sqrt(self.image_dim)
        self._cache[image_id] = vec
        return vec

    def featurize_finding(self, polarity: str, core: str, box: BBox = ZERO_BOX) -> np.ndarray:
        z = np.zeros(SLOT * len(self.vocabulary))
        sign = 1.0 if polarity == "yes" else -1.0
        z[self._slot(core)] = np.concatenate([[sign], box_features(box)])
        return z @ self._txt_proj

    def config(self) -> dict:
        return {"kind": self.kind, "noise": self.noise, "seed": self.seed,
                "vocabulary": self.vocabulary}


class PrecomputedFeaturizer:
    """Embeddings read from a JSON-lines store of ``{kind, key, vector}`` records.

    Finding keys are ``"yes|edema"``-style; the claimed box is added through a
    fixed seeded linear encoding.
    """

    kind = "precomputed"

    def __init__(self, images: Mapping[str, np.ndarray], findings: Mapping[str, np.ndarray],
                 seed: int = 0, source: Optional[str] = None):
        self.images = {k: np.asarray(v, dtype=np.float64) for k, v in images.items()}
        self.findings = {k: np.asarray(v, dtype=np.float64) for k, v in findings.items()}
        if not self.images or not self.findings:
            raise ValueError("embedding store needs both image and finding vectors")
        self.image_dim = len(next(iter(self.images.values())))
        self.text_dim = len(next(iter(self.findings.values())))
        self.seed, self.source = seed, source
        rng = np.random.default_rng([seed, 23])
        self._box_proj = rng.normal(size=(BOX_FEATURES, self.text_dim)) / math.sqrt(self.text_dim)

    @classmethod
    def load(cls, path: str | Path, seed: int = 0) -> "PrecomputedFeaturizer":
        images, findings = {}, {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            target = {"image": images, "finding": findings}.get(rec.get("kind"))
            if target is None:
                raise ValueError(f"{path}:{lineno}: kind must be 'image' or 'finding'")
            target[rec["key"]] = rec["vector"]
        return cls(images, findings, seed, str(path))

    def featurize_image(self, image_id: str) -> np.ndarray:
        try:
            return self.images[image_id]
        except KeyError:
            raise MissingEmbedding(f"no embedding for image {image_id!r}") from None

    def featurize_finding(self, polarity: str, core: str, box: BBox = ZERO_BOX) -> np.ndarray:
        key = f"{polarity}|{core}"
        try:
            vec = self.findings[key]
        except KeyError:
            raise MissingEmbedding(f"no embedding for finding {key!r}") from None
        return vec + box_features(box) @ self._box_proj

    def config(self) -> dict:
        return {"kind": self.kind, "seed": self.seed, "embeddings": self.source}


def build_featurizer(fconfig: FeaturizerConfig, mconfig: ModelConfig, samples: Sequence[Sample],
                     vocabulary: Sequence[str]):
    if fconfig.kind == "precomputed":
        if not fconfig.embeddings:
            raise ValueError("precomputed featurizer needs featurizer.embeddings")
        return PrecomputedFeaturizer.load(fconfig.embeddings, fconfig.seed)
    return PlantedSignalFeaturizer.from_samples(samples, vocabulary, mconfig.image_dim,
                                                mconfig.text_dim, fconfig.noise, fconfig.seed)


# --- network ----------------------------------------------------------------

def init_params(config: ModelConfig, rng: np.random.Generator) -> dict[str, Param]:
    def weight(n_in, n_out, gain=1.0):
        return Param(rng.normal(size=(n_in, n_out)) * math.sqrt(gain / n_in))

    def bias(n):
        return Param(np.zeros(n), decay=False)

    p, d = config.proj_dim, config.hidden
    params = {
        "img_W": weight(config.image_dim, p), "img_b": bias(p),
        "txt_W": weight(config.text_dim, p), "txt_b": bias(p),
        "reg1_W": weight(2 * p, d, 2.0), "reg1_b": bias(d),
    }
    if config.variant == "dual_head":
        params.update({"reg2_W": weight(d, 4), "reg2_b": bias(4),
                       "cls1_W": weight(2 * p, d, 2.0), "cls1_b": bias(d),
                       "cls2_W": weight(d, 1), "cls2_b": bias(1)})
    else:
        params.update({"reg2_W": weight(d, 5), "reg2_b": bias(5)})
    return params


ENCODER_PARAMS = ("img_W", "img_b", "txt_W", "txt_b")


@dataclass
class Batch:
    images: np.ndarray  # (B, image_dim)
    texts: np.ndarray  # (P, text_dim)
    owner: np.ndarray  # (P,) index of each pair's image in ``images``
    targets: np.ndarray  # (P, 5)


def _head(h0: np.ndarray, W1: Param, b1: Param, W2: Param, b2: Param, p: float,
          rng, training: bool):
    a1 = linear_forward(h0, W1.value, b1.value)
    r1 = relu(a1)
    r1d, m1 = dropout(r1, p, rng, training)
    out = sigmoid(linear_forward(r1d, W2.value, b2.value))
    return out, (a1, r1d, m1, out)


def _head_backward(dout: np.ndarray, h0: np.ndarray, cache, W1: Param, b1: Param,
                   W2: Param, b2: Param) -> np.ndarray:
    a1, r1d, m1, out = cache
    da2 = sigmoid_backward(dout, out)
    dr1d, dW2, db2 = linear_backward(da2, r1d, W2.value)
    W2.grad += dW2
    b2.grad += db2
    da1 = relu_backward(dropout_backward(dr1d, m1), a1)
    dh0, dW1, db1 = linear_backward(da1, h0, W1.value)
    W1.grad += dW1
    b1.grad += db1
    return dh0


def forward(params: dict[str, Param], config: ModelConfig, images: np.ndarray, texts: np.ndarray,
            owner: np.ndarray, rng=None, training: bool = False):
    """Returns (outputs (P, 5), cache)."""
    u = linear_forward(images, params["img_W"].value, params["img_b"].value)
    zi, ni = l2_normalize(u)
    v = linear_forward(texts, params["txt_W"].value, params["txt_b"].value)
    zt, nt = l2_normalize(v)
    h0 = np.concatenate([zi[owner], zt], axis=1)
    h0d, m0 = dropout(h0, config.dropout, rng, training)
    reg_out, reg_cache = _head(h0d, params["reg1_W"], params["reg1_b"], params["reg2_W"],
                               params["reg2_b"], config.dropout, rng, training)
    cls_cache = None
    if config.variant == "dual_head":
        cls_out, cls_cache = _head(h0d, params["cls1_W"], params["cls1_b"], params["cls2_W"],
                                   params["cls2_b"], config.dropout, rng, training)
        out = np.concatenate([reg_out, cls_out], axis=1)
    else:
        out = reg_out
    cache = dict(u=u, zi=zi, ni=ni, v=v, zt=zt, nt=nt, h0d=h0d, m0=m0,
                 reg=reg_cache, cls=cls_cache)
    return out, cache


def loss_and_grads(params: dict[str, Param], config: ModelConfig, batch: Batch,
                   is_real: np.ndarray, rng, contrastive_only: bool = False) -> dict:
    """Forward + backward for one batch; fills ``Param.grad`` and returns loss parts."""
    for p in params.values():
        p.zero_grad()
    variant = config.variant
    out, c = forward(params, config, batch.images, batch.texts, batch.owner, rng, training=True)
    out = out.copy()
    out[:, 4] = np.clip(out[:, 4], PROB_EPS, 1 - PROB_EPS)
    zi, zt = c["zi"], c["zt"]
    dzi = np.zeros_like(zi)
    dzt = np.zeros_like(zt)
    parts = {"contrastive": 0.0, "regression": 0.0}

    # encoder head
    if variant in ("comb", "dual_head"):
        groups = [np.flatnonzero(batch.owner == b) for b in range(len(zi))]
        usable = [(b, g) for b, g in enumerate(groups)
                  if is_real[g].any() and (~is_real[g]).any()]
        for b, g in usable:
            reals, fakes = g[is_real[g]], g[~is_real[g]]
            loss, gr = supcon_loss(zi[b], zt[reals], zt[fakes], config.tau, config.include_positive)
            k = 1.0 / len(usable)
            parts["contrastive"] += loss * k
            dzi[b] += gr.image * k
            dzt[reals] += gr.real * k
            dzt[fakes] += gr.fake * k
    elif variant == "bce_encoder":
        sims = np.sum(zi[batch.owner] * zt, axis=1) / config.tau
        loss, dlogit = bce_with_logits(sims, is_real.astype(float))
        parts["contrastive"] = loss
        dpair = dlogit[:, None] / config.tau
        np.add.at(dzi, batch.owner, dpair * zt)
        dzt += dpair * zi[batch.owner]

    # regression head
    if not contrastive_only:
        if variant == "dual_head":
            lb, dYb, pb = regression_loss(out, batch.targets, veracity_terms=False)
            lc, dYc, pc = regression_loss(out, batch.targets, box_terms=False)
            loss, dY = lb + lc, dYb + dYc
            parts.update({k: pb[k] + pc[k] for k in pb})
        else:
            loss, dY, p = regression_loss(out, batch.targets)
            parts.update(p)
        parts["regression"] = loss
        h0d = c["h0d"]
        dh0d = _head_backward(dY[:, :5] if variant != "dual_head" else dY[:, :4], h0d, c["reg"],
                              params["reg1_W"], params["reg1_b"], params["reg2_W"], params["reg2_b"])
        if variant == "dual_head":
            dh0d += _head_backward(dY[:, 4:5], h0d, c["cls"], params["cls1_W"], params["cls1_b"],
                                   params["cls2_W"], params["cls2_b"])
        dh0 = dropout_backward(dh0d, c["m0"])
        p_dim = zi.shape[1]
        np.add.at(dzi, batch.owner, dh0[:, :p_dim])
        dzt += dh0[:, p_dim:]

    if variant != "frozen_encoder":
        du = l2_normalize_backward(dzi, zi, c["ni"])
        dx, dW, db = linear_backward(du, batch.images, params["img_W"].value)
        params["img_W"].grad += dW
        params["img_b"].grad += db
        dv = l2_normalize_backward(dzt, zt, c["nt"])
        dx, dW, db = linear_backward(dv, batch.texts, params["txt_W"].value)
        params["txt_W"].grad += dW
        params["txt_b"].grad += db
    parts["total"] = parts["contrastive"] + parts["regression"]
    return parts


# --- checkpoint ---------------------------------------------------------------

@dataclass
class ModelCheckpoint:
    params: dict[str, np.ndarray]
    config: dict
    featurizer: dict = field(default_factory=dict)
    optimizer: dict = field(default_factory=dict)  # {"step": int, "m": {...}, "v": {...}}
    rng_state: dict = field(default_factory=dict)
    seed: int = 0
    log: list = field(default_factory=list)
    version: int = CHECKPOINT_VERSION

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.config)

    def param_objects(self) -> dict[str, Param]:
        return {k: Param(v.copy()) for k, v in self.params.items()}

    def meta(self) -> dict:
        return {"version": self.version, "config": self.config, "featurizer": self.featurizer,
                "step": self.optimizer.get("step", 0), "rng_state": self.rng_state,
                "seed": self.seed, "log": self.log}

    def hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name]).tobytes())
        h.update(json.dumps(self.meta(), sort_keys=True).encode())
        return h.hexdigest()

    def save(self, path: str | Path) -> None:
        arrays = {f"param/{k}": v for k, v in self.params.items()}
        for kind in ("m", "v"):
            arrays.update({f"adam_{kind}/{k}": v for k, v in self.optimizer.get(kind, {}).items()})
        arrays["meta"] = np.array(json.dumps(self.meta(), sort_keys=True))
        # npz layout with fixed member timestamps so identical checkpoints are identical files
        with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
            for name in sorted(arrays):
                buf = io.BytesIO()
                np.lib.format.write_array(buf, np.asarray(arrays[name]), allow_pickle=False)
                zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)),
                            buf.getvalue())

    @classmethod
    def load(cls, path: str | Path) -> "ModelCheckpoint":
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["meta"]))
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
            params, m, v = {}, {}, {}
            for key in data.files:
                group, _, name = key.partition("/")
                target = {"param": params, "adam_m": m, "adam_v": v}.get(group)
                if target is not None:
                    target[name] = data[key].copy()
        return cls(params, meta["config"], meta["featurizer"],
                   {"step": meta["step"], "m": m, "v": v}, meta["rng_state"], meta["seed"],
                   meta["log"], meta["version"])


# --- training -------------------------------------------------------------------

def _encode_samples(samples: Sequence[Sample], featurizer):
    images = np.stack([featurizer.featurize_image(s.image_id) for s in samples])
    texts, owner, targets, real = [], [], [], []
    for i, s in enumerate(samples):
        for p in s.pairs:
            texts.append(featurizer.featurize_finding(p.polarity, p.core, p.box))
            owner.append(i)
            targets.append(p.label)
            real.append(p.veracity == 1)
    return (images, np.array(texts), np.array(owner, dtype=np.int64),
            np.array(targets, dtype=np.float64), np.array(real, dtype=bool))


def train(samples: Sequence[Sample], config: ModelConfig, featurizer, seed: int = 0,
          progress: Optional[Callable[[dict], None]] = None) -> ModelCheckpoint:
    """Train end to end with AdamW and warmup + cosine decay; deterministic under ``seed``."""
    samples = [s for s in samples if s.pairs]
    if not samples:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(seed)
    params = init_params(config, rng)
    images, texts, owner, targets, real = _encode_samples(samples, featurizer)
    pair_groups = [np.flatnonzero(owner == i) for i in range(len(samples))]

    steps_per_epoch = math.ceil(len(samples) / config.batch_size)
    schedule = CosineWarmup(config.max_lr, config.warmup_steps, config.epochs * steps_per_epoch)
    state = OptimizerState(schedule, config.weight_decay)
    trainable = [k for k in params if config.variant != "frozen_encoder" or k not in ENCODER_PARAMS]
    log = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(samples))
        sums = {}
        for start in range(0, len(order), config.batch_size):
            chosen = order[start:start + config.batch_size]
            idx = np.concatenate([pair_groups[i] for i in chosen])
            remap = np.empty(len(samples), dtype=np.int64)
            remap[chosen] = np.arange(len(chosen))
            batch = Batch(images[chosen], texts[idx], remap[owner[idx]], targets[idx])
            parts = loss_and_grads(params, config, batch, real[idx], rng,
                                   contrastive_only=epoch < config.contrastive_warmup_epochs)
            if not all(math.isfinite(v) for v in parts.values()) or not all(
                    np.all(np.isfinite(params[k].grad)) for k in trainable):
                raise NumericalError(f"non-finite loss at epoch {epoch} step {state.step}")
            lr = adamw_step(params, state, trainable)
            if not all(np.all(np.isfinite(params[k].value)) for k in trainable):
                raise NumericalError(f"non-finite parameters after step {state.step} (lr {lr:g})")
            for k, val in parts.items():
                sums[k] = sums.get(k, 0.0) + val
            sums["lr"] = lr
        entry = {"epoch": epoch, "lr": sums.pop("lr")}
        entry.update({k: v / steps_per_epoch for k, v in sums.items()})
        log.append(entry)
        if progress:
            progress(entry)
    return ModelCheckpoint(
        params={k: p.value for k, p in params.items()}, config=asdict(config),
        featurizer=featurizer.config(),
        optimizer={"step": state.step, "m": state.m, "v": state.v},
        rng_state=rng.bit_generator.state, seed=seed, log=log)


# --- inference ------------------------------------------------------------------

@dataclass(frozen=True)
class Prediction:
    veracity: float
    box: BBox

    @property
    def verdict(self) -> int:
        return int(self.veracity >= 0.5)


def predict_many(checkpoint: ModelCheckpoint, featurizer, image_id: str,
                 claims: Sequence[tuple[str, str, BBox]]) -> list[Prediction]:
    """Predictions for several ``(polarity, core, claimed box)`` claims about one image."""
    if not claims:
        return []
    params = {k: Param(v) for k, v in checkpoint.params.items()}
    config = checkpoint.model_config
    image = featurizer.featurize_image(image_id)[None, :]
    texts = np.stack([featurizer.featurize_finding(n, c, b) for n, c, b in claims])
    out, _ = forward(params, config, image, texts, np.zeros(len(claims), dtype=np.int64))
    return [Prediction(float(o[4]), BBox.clipped(*o[:4])) for o in out]


def predict(checkpoint: ModelCheckpoint, featurizer, image_id: str, polarity: str, core: str,
            box: BBox = ZERO_BOX) -> Prediction:
    return predict_many(checkpoint, featurizer, image_id, [(polarity, core, box)])[0]


@dataclass
class Metrics:
    accuracy: float
    miou: float
    n_pairs: int
    n_iou: int
    n_zero_excluded: int
    auc: float
    roc: list = field(default_factory=list)  # (threshold, fpr, tpr)
    mean_reversal_area: float = float("nan")

    def to_dict(self) -> dict:
        return asdict(self)


def roc_points(scores: np.ndarray, labels: np.ndarray) -> tuple[list, float]:
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order].astype(bool)
    pos, neg = max(y.sum(), 1), max((~y).sum(), 1)
    points = [(float("inf"), 0.0, 0.0)]
    tp = fp = 0
    for i in range(len(s)):
        tp += y[i]
        fp += not y[i]
        if i + 1 == len(s) or s[i + 1] != s[i]:
            points.append((float(s[i]), fp / neg, tp / pos))
    fpr = np.array([p[1] for p in points])
    tpr = np.array([p[2] for p in points])
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
    return points, auc


def score_pairs(predictions: Sequence[Prediction], pairs: Sequence[FLPair]) -> Metrics:
    e_hat = np.array([p.veracity for p in predictions])
    labels = np.array([p.veracity for p in pairs])
    accuracy = float(np.mean((e_hat >= 0.5) == (labels == 1))) if len(labels) else float("nan")
    ious = [iou(pr.box, pa.box) for pr, pa in zip(predictions, pairs) if not pa.box.is_zero]
    rev = [pr.box.area for pr, pa in zip(predictions, pairs)
           if pa.provenance == "reversal" and pa.box.is_zero]
    roc, auc = roc_points(e_hat, labels) if len(labels) else ([], float("nan"))
    return Metrics(accuracy, float(np.mean(ious)) if ious else float("nan"), len(pairs),
                   len(ious), len(pairs) - len(ious), auc, roc,
                   float(np.mean(rev)) if rev else float("nan"))


def evaluate(checkpoint: ModelCheckpoint, featurizer, samples: Sequence[Sample]) -> Metrics:
    """Accuracy over all pairs; mIoU over pairs whose target box is non-zero."""
    preds, pairs = [], []
    for s in samples:
        claims = [(p.polarity, p.core, p.box) for p in s.pairs]
        preds.extend(predict_many(checkpoint, featurizer, s.image_id, claims))
        pairs.extend(s.pairs)
    return score_pairs(preds, pairs)
