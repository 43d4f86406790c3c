"""Command-line entry point: ``mmel <subcommand> [--config FILE] [--seed N] ...``.

Every failure is reported as one JSON object on stderr with a nonzero exit
code; argument errors exit with 2 and the usage text.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from mmel.attributes import (
    FixtureAttributeProvider,
    check_objects,
    filter_identities,
    identity_prompts_by_object,
    render_face_prompt,
)
from mmel.datamodel import DatasetError, compute_stats, load_entities, load_samples, save_entities, validate_dataset
from mmel.encoders import encode_text
from mmel.featurestore import FeatureStoreError, read_feature_store, write_feature_store
from mmel.harness.checkpoint import CheckpointError, load_checkpoint
from mmel.harness.config import PATH_KEYS, ConfigError, RunConfig, load_config
from mmel.harness.features import (
    FeatureView,
    MissingFeatureError,
    entity_key,
    face_key,
    identity_key,
    mention_key,
    text_key,
)

log = logging.getLogger("mmel")

EXIT_ERROR = 1


class MissingArtifactError(RuntimeError):
    def __init__(self, artifact: str, what: str):
        self.artifact = artifact
        super().__init__(f"{what} not found: {artifact}")


# -- helpers ---------------------------------------------------------------

def _resolve_config(args) -> RunConfig:
    if args.config is not None:
        if not Path(args.config).exists():
            raise MissingArtifactError(args.config, "config file")
        config = load_config(args.config)
    else:
        config = RunConfig()
    # environment overrides are limited to paths
    changes = {}
    for key in PATH_KEYS:
        value = os.environ.get(f"MMEL_{key.upper()}")
        if value:
            changes[key] = value
    if args.seed is not None:
        changes["seed"] = args.seed
    return config.replace(**changes) if changes else config


def _need(value: Optional[str], name: str) -> str:
    if not value:
        raise ConfigError(f"no {name} given (set it in the config file or on the command line)")
    return value


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingArtifactError(str(p), what)
    return p


def _load_store(path: Optional[str]) -> dict[str, np.ndarray]:
    if path and Path(path).exists():
        return read_feature_store(path)
    return {}


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


def _sample_files(args, config: RunConfig) -> list[str]:
    if args.samples:
        return args.samples
    files = [p for p in (config.train_samples, config.dev_samples, config.test_samples) if p]
    if not files:
        raise ConfigError("no sample files given")
    return files


def _load_all_samples(files: Sequence[str]):
    out = []
    for f in files:
        out.extend(load_samples(_existing(f, "sample file")))
    return out


# -- subcommands -----------------------------------------------------------

def cmd_prepare(args, config: RunConfig) -> int:
    """Validate the dataset and materialize attribute prompts into the feature store."""
    samples = _load_all_samples(_sample_files(args, config))
    entities = load_entities(_existing(_need(args.entities or config.entities, "entity file"), "entity file"))
    report = validate_dataset(samples, entities)
    stats = compute_stats(samples, entities)
    features = _need(args.features or config.features, "feature store path")
    store = _load_store(features)
    if args.visual:
        store.update(read_feature_store(_existing(args.visual, "visual feature store")))

    attributes = args.attributes or config.attributes
    written, issues = 0, []
    if attributes:
        provider = FixtureAttributeProvider.from_file(_existing(attributes, "attribute fixture"))
        view = FeatureView(store)
        for s in samples:
            if s.image_ref is None:
                continue
            faces, guesses = provider.fetch(s.image_ref)
            n_objects = view.n_objects(s.image_ref)
            problems = check_objects(faces, guesses, n_objects)
            issues.extend(f"{s.sample_id}: {p}" for p in problems)
            for f in faces:
                if f.object_index < n_objects:
                    store[face_key(s.sample_id, f.object_index)] = encode_text(
                        render_face_prompt(s.mention, f), config.encoder_seed, config.d)
                    written += 1
            for idx, prompt in identity_prompts_by_object(s.mention, filter_identities(guesses)).items():
                if idx < n_objects:
                    store[identity_key(s.sample_id, idx)] = encode_text(prompt, config.encoder_seed, config.d)
                    written += 1
    if store:
        write_feature_store(store, features)
    _emit({
        "validation": report.counts,
        "flagged_entities": report.empty_er,
        "stats": {"samples": stats.samples, "entities": stats.entities, "mentions": stats.mentions,
                  "mean_text_len": stats.mean_text_len},
        "prompt_vectors": written,
        "attribute_issues": issues,
        "features": features,
    })
    return 0


def cmd_encode(args, config: RunConfig) -> int:
    """Toy-encode mentions, sentences and entity representations into the feature store."""
    features = _need(args.features or config.features, "feature store path")
    store = _load_store(features)
    counts = {"mention": 0, "text": 0, "entity": 0, "skipped_entities": 0}
    if args.what in ("samples", "all"):
        for s in _load_all_samples(_sample_files(args, config)):
            store[mention_key(s.sample_id)] = encode_text(s.mention, config.encoder_seed, config.d)
            store[text_key(s.sample_id)] = encode_text(s.text, config.encoder_seed, config.d)
            counts["mention"] += 1
            counts["text"] += 1
    if args.what in ("entities", "all"):
        entities = load_entities(_existing(_need(args.entities or config.entities, "entity file"), "entity file"))
        for e in entities:
            if not e.er_text.strip():
                counts["skipped_entities"] += 1
                continue
            store[entity_key(e.qid)] = encode_text(e.er_text, config.encoder_seed, config.d)
            counts["entity"] += 1
    write_feature_store(store, features)
    _emit({"features": features, "written": counts, "dim": config.d})
    return 0


def cmd_enhance_er(args, config: RunConfig) -> int:
    from mmel.erpipeline import (
        ChatCompletionClient,
        ERCache,
        ERPipeline,
        FixtureKBClient,
        FixtureLLMClient,
        RefusalDetector,
        WikipediaClient,
        report_enhancement,
        apply_builds,
    )

    entities = load_entities(_existing(_need(args.entities or config.entities, "entity file"), "entity file"))
    kb = FixtureKBClient.from_file(_existing(args.kb_fixture, "KB fixture")) if args.kb_fixture \
        else WikipediaClient(args.kb_endpoint)
    llm = None
    if args.mode == "dynamic":
        if args.llm_fixture:
            llm = FixtureLLMClient.from_file(_existing(args.llm_fixture, "LLM fixture"))
        elif args.llm_base_url and args.llm_model:
            llm = ChatCompletionClient(args.llm_base_url, args.llm_model)
        else:
            raise ConfigError("dynamic mode needs --llm-fixture or both --llm-base-url and --llm-model")
    detector = RefusalDetector.from_file(_existing(args.patterns, "pattern file")) if args.patterns \
        else RefusalDetector.default()
    pipeline = ERPipeline(kb, llm, detector, ERCache(args.cache) if args.cache else None, args.max_tokens,
                          args.workers)
    builds = pipeline.run(entities, args.mode)
    save_entities(apply_builds(entities, builds), args.out)
    if args.builds:
        with open(args.builds, "w", encoding="utf-8") as fh:
            for b in builds:
                fh.write(json.dumps(b.to_json(pipeline.version), ensure_ascii=False) + "\n")
    _emit({"out": args.out, "version": pipeline.version, "report": report_enhancement(builds)})
    return 0


def cmd_train(args, config: RunConfig) -> int:
    from mmel.harness.training import train

    if args.out_dir:
        config = config.replace(out_dir=args.out_dir)
    if args.max_steps is not None:
        config = config.replace(max_steps=args.max_steps)
    out_dir = _need(config.out_dir, "output directory")
    train_samples = load_samples(_existing(_need(config.train_samples, "training samples"), "training samples"))
    dev = load_samples(_existing(config.dev_samples, "dev samples")) if config.dev_samples else []
    entities = load_entities(_existing(_need(config.entities, "entity file"), "entity file"))
    store = read_feature_store(_existing(_need(config.features, "feature store"), "feature store"))
    result = train(config, train_samples, entities, store, dev, out_dir)
    _emit({
        "out_dir": out_dir,
        "steps": result.final.step,
        "best_step": result.best.step,
        "best_dev": {f"T@{k}": v for k, v in result.best.metrics.items()},
        "final_loss": result.log[-1]["loss"] if result.log else None,
        "config_hash": config.model_hash(),
    })
    return 0


def _checkpoint_path(args, config: RunConfig) -> Path:
    if args.checkpoint:
        return _existing(args.checkpoint, "checkpoint")
    if not config.out_dir:
        raise MissingArtifactError("best.ckpt", "checkpoint (no --checkpoint and no out_dir configured)")
    return _existing(str(Path(config.out_dir) / "best.ckpt"), "checkpoint")


def _split_path(config: RunConfig, split: str) -> str:
    return _need({"train": config.train_samples, "dev": config.dev_samples, "test": config.test_samples}[split],
                 f"{split} samples")


def _linking_setup(args, config: RunConfig):
    from mmel.harness.evaluation import LinkingContext

    ckpt = load_checkpoint(_checkpoint_path(args, config), expect=config if args.config else None)
    model = ckpt.build_model()
    entities = load_entities(_existing(_need(config.entities, "entity file"), "entity file"))
    store = read_feature_store(_existing(_need(config.features, "feature store"), "feature store"))
    return ckpt, model, LinkingContext.build(entities, store)


def cmd_eval(args, config: RunConfig) -> int:
    from mmel.harness.evaluation import evaluate_model, format_table, metrics_row

    ckpt, model, ctx = _linking_setup(args, config)
    samples = load_samples(_existing(_split_path(config, args.split), f"{args.split} samples"))
    lam = args.lam or config.lam
    metrics, _ = evaluate_model(model, samples, ctx, lam, config.typed_retrieval, workers=args.workers or
                                config.eval_workers, chunk=config.eval_chunk)
    row = metrics_row(metrics, config.dataset, args.split, lam, ckpt.config_hash, len(samples))
    row["step"] = ckpt.step
    if args.out:
        Path(args.out).write_text(json.dumps(row, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(row, sort_keys=True) if args.json else format_table([row]))
    return 0


def cmd_link(args, config: RunConfig) -> int:
    from mmel.harness.evaluation import link

    _, model, ctx = _linking_setup(args, config)
    samples = load_samples(_existing(_split_path(config, args.split), f"{args.split} samples"))
    match = [s for s in samples if s.sample_id == args.sample_id]
    if not match:
        raise MissingArtifactError(args.sample_id, f"sample in the {args.split} split")
    result, listing = link(model, match[0], ctx, args.lam or config.lam, config.typed_retrieval, args.k)
    print(f"{match[0].mention} ({match[0].sample_id}), gold {match[0].gold_qid}, gold rank "
          f"{result.gold_rank if result.gold_rank is not None else 'absent'}")
    print(listing)
    return 0


def cmd_report(args, config: RunConfig) -> int:
    from mmel.harness.evaluation import format_table

    rows = []
    for path in args.inputs:
        text = _existing(path, "eval output").read_text(encoding="utf-8")
        for line in text.splitlines():
            if line.strip():
                rows.append(json.loads(line))
    if args.out:
        Path(args.out).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows), encoding="utf-8")
    print(json.dumps(rows, sort_keys=True) if args.json else format_table(rows))
    return 0


def cmd_make_synthetic(args, config: RunConfig) -> int:
    from mmel.synthetic import make_benchmark

    out = Path(args.out)
    bench = make_benchmark(n_entities=args.entities_count, d=args.d, n_train=args.n_train, n_dev=args.n_dev,
                           n_test=args.n_test, paired=args.paired, seed=config.seed)
    paths = bench.write(out)
    cfg = {
        "d": args.d, "heads": 2, "lr": 1e-3, "eval_every": args.eval_every, "max_steps": args.max_steps,
        "lam": 20, "dataset": "synthetic", "seed": config.seed,
        **{k: p.name for k, p in paths.items()}, "out_dir": "run",
    }
    (out / "config.yaml").write_text(yaml.safe_dump(cfg, sort_keys=True), encoding="utf-8")
    _emit({"out": str(out), "config": str(out / "config.yaml"), "entities": len(bench.entities),
           "train": len(bench.train), "dev": len(bench.dev), "test": len(bench.test)})
    return 0


# -- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat YAML run configuration")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="mmel", description="Multimodal entity linking toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("prepare", parents=[common], help="validate data and write attribute prompt vectors")
    p.add_argument("--samples", action="append", help="sample JSONL (repeatable; default: config splits)")
    p.add_argument("--entities")
    p.add_argument("--attributes", help="recorded attribute fixture (JSONL)")
    p.add_argument("--visual", help="feature store with image/object vectors to merge")
    p.add_argument("--features", help="feature store to update")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("encode", parents=[common], help="toy-encode mentions, sentences and entities")
    p.add_argument("--samples", action="append")
    p.add_argument("--entities")
    p.add_argument("--features")
    p.add_argument("--what", choices=("samples", "entities", "all"), default="all")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("enhance-er", parents=[common], help="build static or dynamic entity representations")
    p.add_argument("--mode", choices=("static", "dynamic"), required=True)
    p.add_argument("--entities")
    p.add_argument("--out", required=True, help="entity JSONL with the new representations")
    p.add_argument("--builds", help="optional JSONL of per-entity build records")
    p.add_argument("--kb-fixture", help="recorded page extracts instead of the live API")
    p.add_argument("--kb-endpoint", default="https://en.wikipedia.org/w/api.php")
    p.add_argument("--llm-fixture", help="recorded chat responses instead of a live endpoint")
    p.add_argument("--llm-base-url")
    p.add_argument("--llm-model")
    p.add_argument("--patterns", help="refusal pattern file (one per line)")
    p.add_argument("--cache", help="cache directory; cached entities are skipped")
    p.add_argument("--max-tokens", type=int, default=256)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_enhance_er)

    p = sub.add_parser("train", parents=[common], help="train and keep the best dev checkpoint")
    p.add_argument("--out-dir")
    p.add_argument("--max-steps", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="top-k accuracy of a checkpoint on a split")
    p.add_argument("--checkpoint")
    p.add_argument("--split", choices=("train", "dev", "test"), default="test")
    p.add_argument("--lam", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="write the metrics row as JSON")
    p.add_argument("--json", action="store_true", help="print JSON instead of a table")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("link", parents=[common], help="rank the candidates of one sample")
    p.add_argument("--checkpoint")
    p.add_argument("--sample-id", required=True)
    p.add_argument("--split", choices=("train", "dev", "test"), default="test")
    p.add_argument("--lam", type=int)
    p.add_argument("-k", type=int, default=5)
    p.set_defaults(func=cmd_link)

    p = sub.add_parser("report", parents=[common], help="merge eval outputs into one table")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", help="write merged rows as JSON lines")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("make-synthetic", parents=[common], help="write a synthetic benchmark and config")
    p.add_argument("--out", required=True)
    p.add_argument("--entities-count", type=int, default=200)
    p.add_argument("--d", type=int, default=32)
    p.add_argument("--n-train", type=int, default=1600)
    p.add_argument("--n-dev", type=int, default=200)
    p.add_argument("--n-test", type=int, default=400)
    p.add_argument("--eval-every", type=int, default=250)
    p.add_argument("--max-steps", type=int, default=2000)
    p.add_argument("--paired", action="store_true")
    p.set_defaults(func=cmd_make_synthetic)
    return parser


def _error(exc: BaseException) -> dict:
    err = {"error": type(exc).__name__, "message": str(exc)}
    for attr in ("artifact", "key", "code", "line", "field", "record_index"):
        value = getattr(exc, attr, None)
        if value is not None:
            err[attr] = value
    return err


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s %(message)s", stream=sys.stderr)
    try:
        config = _resolve_config(args)
        return args.func(args, config)
    except (ConfigError, DatasetError, FeatureStoreError, CheckpointError, MissingArtifactError,
            MissingFeatureError, OSError, ValueError, RuntimeError, KeyError) as exc:
        print(json.dumps(_error(exc), sort_keys=True), file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
