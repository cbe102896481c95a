"""Command-line entry point: ``fcrx <command> ...``.

Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure,
4 rewriter required but unavailable.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_REWRITER = 0, 1, 2, 3, 4

log = logging.getLogger("fcrx")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- helpers -----------------------------------------------------------------------

def _config(args):
    from .config import ConfigError, load_config, override
    if args.config is not None and not Path(args.config).is_file():
        raise UsageError(f"config file not found: {args.config}")
    try:
        config = load_config(args.config)
        flags = {"seed": getattr(args, "seed", None),
                 "model.epochs": getattr(args, "epochs", None),
                 "model.max_lr": getattr(args, "max_lr", None),
                 "model.variant": getattr(args, "variant", None)}
        return override(config, flags)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc


def _need(path: Optional[str], what: str) -> Path:
    if not path:
        raise UsageError(f"missing required path: {what}")
    p = Path(path)
    if not p.exists():
        raise DataError(f"{what} not found: {p}")
    return p


def _finish(out_dir: Path, config, command: str, outputs: Sequence[Path], started: float) -> None:
    from .workflow import dump_json, manifest
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_json(manifest(config, command, outputs), out_dir / "manifest.json")
    dump_json({"started": started, "finished": time.time()}, out_dir / "timestamps.json")


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _load_data(args, config):
    """Samples (with fakes) plus the lexicon; region map when annotations are given."""
    from .atlas import RegionMap, ingest_annotations
    from .lexicon import load_lexicon
    from .synth import read_samples
    lexicon = load_lexicon(args.lexicon or config.paths.lexicon)
    samples = read_samples(_need(args.data or config.paths.samples, "--data"))
    rm = None
    annotations = getattr(args, "annotations", None) or config.paths.annotations
    if annotations:
        p = _need(annotations, "--annotations")
        rm = RegionMap.load(p) if p.suffix == ".json" else ingest_annotations(p, lexicon)
    return lexicon, samples, rm


# --- commands ------------------------------------------------------------------------

def cmd_lexicon_validate(args):
    from .lexicon import load_lexicon
    lex = load_lexicon(_need(args.path, "lexicon"))
    _print({"findings": len(lex.finding_names), "regions": len(lex.region_names),
            "negations": len(lex.negations)})


def cmd_atlas_ingest(args):
    from .atlas import ingest_annotations
    from .lexicon import load_lexicon
    rm = ingest_annotations(_need(args.path, "annotations"), load_lexicon(args.lexicon))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rm.save(out)
    _print({"images": len(rm), "out": str(out)})
    from .config import Config
    return Config(), out.parent, [out]


def cmd_synth_generate(args):
    from .workflow import dump_json, prepare
    from .synth import write_samples
    config = _config(args)
    prepared = prepare(config, _need(args.annotations, "--annotations"),
                       _need(args.reports, "--reports"))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_samples(prepared.samples, out)
    report = {"generated": dict(sorted(prepared.generation.items())),
              "extraction": dict(sorted(prepared.diagnostics.items()))}
    dump_json(report, out.with_suffix(".report.json"))
    _print(report)
    return config, out.parent, [out, out.with_suffix(".report.json")]


def _split(samples, config):
    from .evaluation import split_dataset
    return split_dataset(samples, config.split, seed=config.seed)


def cmd_model_train(args):
    from . import plotting
    from .model import train
    from .workflow import featurizer_for, write_rows
    config = _config(args)
    lexicon, samples, _ = _load_data(args, config)
    split = _split(samples, config)
    featurizer = featurizer_for(config, samples, lexicon)
    ck = train(split.train, config.model, featurizer, config.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ck.save(out / "checkpoint.npz")
    write_rows(ck.log, out / "train_log.csv")
    plotting.loss_figure(ck.log, out / "loss.png")
    _print({"checkpoint": str(out / "checkpoint.npz"), "sha256": ck.hash(),
            "final": ck.log[-1]})
    return config, out, [out / "checkpoint.npz", out / "train_log.csv", out / "loss.png"]


def _eval_outputs(metrics, out: Path, stem: str):
    from . import plotting
    from .workflow import dump_json, metrics_record, rounded, write_rows
    out.mkdir(parents=True, exist_ok=True)
    files = [dump_json(rounded(metrics_record(metrics)), out / f"{stem}.json"),
             write_rows([{"threshold": t, "fpr": f, "tpr": r} for t, f, r in metrics.roc],
                        out / f"{stem}_roc.csv")]
    if metrics.roc:
        files.append(plotting.roc_figure(metrics.roc, metrics.auc, out / f"{stem}_roc.png"))
    return files


def cmd_model_eval(args):
    from .model import ModelCheckpoint, evaluate
    from .workflow import featurizer_for, metrics_record, rounded
    config = _config(args)
    lexicon, samples, _ = _load_data(args, config)
    ck = ModelCheckpoint.load(_need(args.checkpoint, "--checkpoint"))
    split = _split(samples, config)
    subset = {"train": split.train, "val": split.val, "test": split.test, "all": samples}[args.split]
    metrics = evaluate(ck, featurizer_for(config, samples, lexicon), subset)
    out = Path(args.out)
    files = _eval_outputs(metrics, out, "metrics")
    _print(rounded(metrics_record(metrics)))
    return config, out, files


def cmd_model_ablate(args):
    from .model import evaluate, train
    from .workflow import featurizer_for, write_rows
    from dataclasses import replace
    config = _config(args)
    lexicon, samples, _ = _load_data(args, config)
    split = _split(samples, config)
    featurizer = featurizer_for(config, samples, lexicon)
    rows = []
    for variant in args.variants:
        for seed in args.seeds:
            ck = train(split.train, replace(config.model, variant=variant), featurizer, seed)
            m = evaluate(ck, featurizer, split.test)
            rows.append({"variant": variant, "seed": seed, "accuracy": m.accuracy,
                         "miou": m.miou, "auc": m.auc})
            log.info("%s seed %d: accuracy %.4f mIoU %.4f", variant, seed, m.accuracy, m.miou)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = write_rows(rows, out / "ablation.csv")
    _print(rows)
    return config, out, [path]


def _report_text(args) -> str:
    if args.text is not None:
        return args.text
    return _need(args.report, "--report").read_text()


def _checked(args, config):
    from .model import ModelCheckpoint
    from .pipeline import check_report
    from .workflow import featurizer_for
    lexicon, samples, rm = _load_data(args, config)
    if rm is None:
        raise UsageError("--annotations is required")
    ck = ModelCheckpoint.load(_need(args.checkpoint, "--checkpoint"))
    featurizer = featurizer_for(config, samples, lexicon)
    text = _report_text(args)
    return text, check_report(text, args.image_id, ck, featurizer, lexicon, rm, config.scoring)


def cmd_check(args):
    from .workflow import dump_json
    config = _config(args)
    _, report = _checked(args, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = dump_json(report.to_json(), out / "explanation.json")
    _print({"fc_score": report.fc_score, "flagged": [str(r.pattern) for r in report.flagged]})
    return config, out, [path]


def cmd_correct(args):
    from .pipeline import correct_report, rewriter_from_env
    from .workflow import dump_json
    config = _config(args)
    if args.require_rewriter:
        config.rewriter.required = True
    rewriter = rewriter_from_env(config.rewriter)
    text, report = _checked(args, config)
    corrected, diag = correct_report(text, report, rewriter)
    if config.rewriter.required and diag["rewriter_failures"]:
        from .pipeline import RewriterUnavailable
        raise RewriterUnavailable("required rewriter failed; offline fallback was not accepted")
    report.corrected_text = corrected
    report.diagnostics["correction"] = diag
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = [dump_json(report.to_json(), out / "explanation.json")]
    (out / "corrected.txt").write_text(corrected + "\n")
    files.append(out / "corrected.txt")
    print(corrected)
    return config, out, files


def cmd_eval_run(args):
    from . import plotting
    from .evaluation import read_corpus, run_assessment
    from .model import ModelCheckpoint
    from .pipeline import rewriter_from_env
    from .workflow import featurizer_for
    config = _config(args)
    lexicon, samples, rm = _load_data(args, config)
    if rm is None:
        raise UsageError("--annotations is required")
    ck = ModelCheckpoint.load(_need(args.checkpoint, "--checkpoint"))
    corpus_path = _need(args.corpus, "--corpus")
    corpus = read_corpus(corpus_path)
    if args.split != "all":
        split = _split(samples, config)
        ids = {s.image_id for s in getattr(split, args.split)}
        corpus = [r for r in corpus if r.image_id in ids]
    run = run_assessment(corpus, ck, featurizer_for(config, samples, lexicon), lexicon, rm,
                         rewriter_from_env(config.rewriter), config.scoring,
                         corpus_id=corpus_path.name)
    out = Path(args.out)
    files = list(run.write(out).values())
    files.append(plotting.concordance_figure(run.rows, out / "concordance.png"))
    files.append(plotting.metric_bars(run.summary(), run.metrics, out / "bleu.png"))
    _print(run.summary())
    return config, out, files


def cmd_demo(args):
    from .workflow import run_demo, toy_config
    config = _config(args) if args.config else toy_config(args.seed if args.seed is not None else 7)
    if args.seed is not None:
        config.seed = args.seed
    if args.epochs is not None:
        config.model.epochs = args.epochs
    record = run_demo(args.out, config.seed, config.validate(),
                      progress=lambda e: log.info("epoch %d total %.4f", e["epoch"], e["total"]))
    _print(record)
    return None


# --- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fcrx", description="Anatomically grounded fact checking of radiology findings")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, data=True, out=True):
        sp.add_argument("--config", help="YAML config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--lexicon")
        if data:
            sp.add_argument("--data", help="samples JSON lines from 'synth generate'")
        if out:
            sp.add_argument("--out", required=True)

    lex = sub.add_parser("lexicon").add_subparsers(dest="action", parser_class=_Parser)
    sp = lex.add_parser("validate")
    sp.add_argument("path")
    sp.set_defaults(func=cmd_lexicon_validate)

    atlas = sub.add_parser("atlas").add_subparsers(dest="action", parser_class=_Parser)
    sp = atlas.add_parser("ingest")
    sp.add_argument("path")
    sp.add_argument("--out", required=True)
    sp.add_argument("--lexicon")
    sp.set_defaults(func=cmd_atlas_ingest)

    synth = sub.add_parser("synth").add_subparsers(dest="action", parser_class=_Parser)
    sp = synth.add_parser("generate")
    common(sp, data=False)
    sp.add_argument("--annotations", required=True)
    sp.add_argument("--reports", required=True)
    sp.set_defaults(func=cmd_synth_generate)

    model = sub.add_parser("model").add_subparsers(dest="action", parser_class=_Parser)
    sp = model.add_parser("train")
    common(sp)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--max-lr", type=float, dest="max_lr")
    sp.add_argument("--variant")
    sp.set_defaults(func=cmd_model_train)
    sp = model.add_parser("eval")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    sp.set_defaults(func=cmd_model_eval)
    sp = model.add_parser("ablate")
    common(sp)
    sp.add_argument("--variant", dest="variants", action="append",
                    help="repeatable; default: all four variants")
    sp.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    sp.add_argument("--epochs", type=int)
    sp.set_defaults(func=cmd_model_ablate)

    for name, fn in (("check", cmd_check), ("correct", cmd_correct)):
        sp = sub.add_parser(name)
        common(sp)
        sp.add_argument("--annotations", help="annotation JSON lines or an ingested region store")
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--image-id", required=True, dest="image_id")
        src = sp.add_mutually_exclusive_group(required=True)
        src.add_argument("--report", help="file holding the report text")
        src.add_argument("--text", help="report text")
        if name == "correct":
            sp.add_argument("--require-rewriter", action="store_true", dest="require_rewriter")
        sp.set_defaults(func=fn)

    ev = sub.add_parser("eval").add_subparsers(dest="action", parser_class=_Parser)
    sp = ev.add_parser("run")
    common(sp)
    sp.add_argument("--annotations")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", choices=("train", "val", "test", "all"), default="all")
    sp.set_defaults(func=cmd_eval_run)

    sp = sub.add_parser("demo")
    sp.add_argument("--config")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--out", default="demo_out")
    sp.set_defaults(func=cmd_demo)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    from .atlas import AtlasError
    from .lexicon import FFLParseError, LexiconError
    from .model import MissingEmbedding, NumericalError
    from .pipeline import RewriterUnavailable

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not hasattr(args, "func"):
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    if getattr(args, "variants", None) is None and args.func is cmd_model_ablate:
        args.variants = ["comb", "bce_encoder", "frozen_encoder", "dual_head"]
    started = time.time()
    try:
        result = args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"fcrx: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"fcrx: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except RewriterUnavailable as exc:
        print(f"fcrx: {exc}", file=sys.stderr)
        return EXIT_REWRITER
    except (DataError, AtlasError, LexiconError, FFLParseError, MissingEmbedding, ValueError,
            KeyError, OSError) as exc:
        print(f"fcrx: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    if isinstance(result, tuple):
        config, out_dir, outputs = result
        _finish(Path(out_dir), config, f"{args.command} {getattr(args, 'action', '')}".strip(),
                outputs, started)
    elif args.func is cmd_demo:
        from .workflow import dump_json
        dump_json({"started": started, "finished": time.time()}, Path(args.out) / "timestamps.json")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
