"""Glue shared by the CLI and the acceptance suite: data preparation, the
toy preset, training/evaluation runs and the end-to-end demo.
"""

from __future__ import annotations

import csv
import json
import platform
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .atlas import RegionMap, build_pools, ingest_annotations
from .config import Config, ModelConfig
from .evaluation import EvalRun, Split, read_corpus, run_assessment, split_dataset
from .lexicon import Lexicon, load_lexicon
from .model import Metrics, ModelCheckpoint, build_featurizer, evaluate, train
from .pipeline import check_and_correct, rewriter_from_env
from .synth import GeneratorConfig, Sample, generate_dataset, samples_from_reports, write_samples
from .toy import ToyConfig, make_corpus, read_reports, write_corpus


def toy_config(seed: int = 0) -> Config:
    """Toy preset: full recipe (100 epochs, batch 32, warmup 50) at smaller widths and a larger lr."""
    return Config(seed=seed, model=ModelConfig(image_dim=768, text_dim=512, proj_dim=256,
                                               hidden=256, max_lr=5e-3)).validate()


def generator_config(config: Config) -> GeneratorConfig:
    g = config.generator
    return GeneratorConfig(g.n_reverse, g.n_relocate, g.n_substitute, g.relocate_max_iou)


@dataclass
class Prepared:
    lexicon: Lexicon
    region_map: RegionMap
    samples: list[Sample]  # all samples with fakes attached
    generation: Counter = field(default_factory=Counter)
    diagnostics: Counter = field(default_factory=Counter)

    def split(self, config: Config, folds: Optional[int] = None, fold: int = 0) -> Split:
        return split_dataset(self.samples, config.split, folds, fold, config.seed)


def prepare(config: Config, annotations: str | Path, reports: str | Path,
            lexicon: Optional[Lexicon] = None) -> Prepared:
    lexicon = lexicon or load_lexicon(config.paths.lexicon)
    rm = ingest_annotations(annotations, lexicon)
    diag: Counter = Counter()
    real = samples_from_reports(read_reports(reports), rm, lexicon, diag)
    gen: Counter = Counter()
    data = generate_dataset(real, build_pools(real), generator_config(config), config.seed, gen)
    return Prepared(lexicon, rm, data, gen, diag)


def featurizer_for(config: Config, samples: Sequence[Sample], lexicon: Lexicon):
    return build_featurizer(config.featurizer, config.model, samples, lexicon.finding_names)


@dataclass
class TrainResult:
    checkpoint: ModelCheckpoint
    metrics: Metrics
    featurizer: object


def train_and_evaluate(prepared: Prepared, config: Config, seed: Optional[int] = None,
                       variant: Optional[str] = None) -> TrainResult:
    """Train on the train split, evaluate on the test split."""
    mconfig = ModelConfig(**{**config.model.__dict__, **({"variant": variant} if variant else {})})
    split = prepared.split(config)
    featurizer = featurizer_for(config, prepared.samples, prepared.lexicon)
    ck = train(split.train, mconfig, featurizer, config.seed if seed is None else seed)
    return TrainResult(ck, evaluate(ck, featurizer, split.test), featurizer)


def assess(prepared: Prepared, config: Config, result: TrainResult, corpus_path: str | Path,
           image_ids: Optional[set] = None, rewriter=None) -> EvalRun:
    corpus = read_corpus(corpus_path)
    if image_ids is not None:
        corpus = [r for r in corpus if r.image_id in image_ids]
    rewriter = rewriter or rewriter_from_env(config.rewriter)
    return run_assessment(corpus, result.checkpoint, result.featurizer, prepared.lexicon,
                          prepared.region_map, rewriter, config.scoring,
                          corpus_id=Path(corpus_path).name)


# --- output helpers ----------------------------------------------------------------

def dump_json(obj, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def write_rows(rows: Sequence[dict], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        if rows:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: f"{v:.6f}" if isinstance(v, float) else v for k, v in r.items()})
    return path


def manifest(config: Config, command: str, outputs: Sequence[str | Path] = ()) -> dict:
    """Run manifest; deterministic for a fixed config (no timestamps)."""
    import matplotlib
    import yaml
    return {
        "command": command,
        "config": config.to_dict(),
        "config_hash": config.hash(),
        "seed": config.seed,
        "outputs": sorted(str(Path(p).name) for p in outputs),
        "versions": {"fcrx": __version__, "numpy": np.__version__,
                     "matplotlib": matplotlib.__version__, "pyyaml": yaml.__version__,
                     "python": platform.python_version()},
    }


def metrics_record(m: Metrics) -> dict:
    return {"accuracy": m.accuracy, "miou": m.miou, "auc": m.auc, "pairs": m.n_pairs,
            "iou_pairs": m.n_iou, "zero_box_excluded": m.n_zero_excluded,
            "mean_reversal_area": m.mean_reversal_area}


def rounded(d: dict, digits: int = 6) -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, float):
            out[k] = None if v != v else round(v, digits)
        elif isinstance(v, dict):
            out[k] = rounded(v, digits)
        else:
            out[k] = v
    return out


def run_demo(out_dir: str | Path, seed: int = 7, config: Optional[Config] = None,
             progress=None) -> dict:
    """Toy pipeline end to end: corpus -> generate -> train -> check -> correct -> eval."""
    from . import plotting

    config = config or toy_config(seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = write_corpus(make_corpus(ToyConfig(seed=config.seed)), out / "corpus")
    prepared = prepare(config, paths["annotations"], paths["reports"])
    prepared.region_map.save(out / "regions.json")
    write_samples(prepared.samples, out / "samples.jsonl")
    dump_json(dict(sorted(prepared.generation.items())), out / "generation.json")

    split = prepared.split(config)
    featurizer = featurizer_for(config, prepared.samples, prepared.lexicon)
    ck = train(split.train, config.model, featurizer, config.seed, progress)
    ck.save(out / "checkpoint.npz")
    write_rows(ck.log, out / "train_log.csv")
    metrics = evaluate(ck, featurizer, split.test)
    write_rows([{"threshold": t, "fpr": f, "tpr": r} for t, f, r in metrics.roc], out / "roc.csv")

    result = TrainResult(ck, metrics, featurizer)
    test_ids = {s.image_id for s in split.test}
    run = assess(prepared, config, result, paths["corpus"], test_ids)
    run.write(out)
    corpus = {r.image_id: r for r in read_corpus(paths["corpus"])}
    explanations = out / "explanations.jsonl"
    with open(explanations, "w") as fh:
        for image_id in sorted(test_ids):
            rep = check_and_correct(corpus[image_id].automated, image_id, ck, featurizer,
                                    prepared.lexicon, prepared.region_map,
                                    scoring=config.scoring)
            fh.write(json.dumps(rep.to_json(), sort_keys=True) + "\n")

    summary = run.summary()
    record = rounded({"model": metrics_record(metrics), "assessment": summary,
                      "checkpoint_sha256": ck.hash()})
    dump_json(record, out / "metrics.json")
    plotting.roc_figure(metrics.roc, metrics.auc, out / "roc.png")
    plotting.loss_figure(ck.log, out / "loss.png")
    plotting.concordance_figure(run.rows, out / "concordance.png")
    plotting.metric_bars(summary, run.metrics, out / "bleu.png")
    outputs = sorted(p.name for p in out.iterdir() if p.is_file())
    dump_json(manifest(config, "demo", outputs), out / "manifest.json")
    return record
