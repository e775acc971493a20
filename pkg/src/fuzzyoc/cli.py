"""Command-line entry point.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical divergence.
``FUZZYOC_DATA_ROOT`` and ``FUZZYOC_SEED`` provide defaults for ``--data`` and
``--seed``; an explicit flag wins.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .data import ConfigError, DataError, load_manifest
from .evaluator import FileJudgments, ProxyJudgments, consistency_score, evaluate_model
from .network import CheckpointError, file_digest, forward_heads, load_checkpoint
from .trainer import DivergenceError, fit, load_state, run_phase, finalize, init_state

logger = logging.getLogger("fuzzyoc")

EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 2, 3, 4


def _data_dir(args):
    value = args.data or os.environ.get("FUZZYOC_DATA_ROOT")
    if not value:
        raise ConfigError("--data: no dataset directory given (flag or FUZZYOC_DATA_ROOT)")
    return Path(value)


def _seed(args, default=0):
    if args.seed is not None:
        return args.seed
    env = os.environ.get("FUZZYOC_SEED")
    if env is None:
        return default
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"FUZZYOC_SEED: not an integer: {env!r}") from None


def _manifest(args, data, subset=None):
    if getattr(args, "manifest", None):
        return Path(args.manifest)
    return data / f"manifest_{subset or args.subset}.csv"


def cmd_gen_synce(args):
    from .synce import build_synce

    out = Path(args.out)
    build = build_synce(out, certain_count=args.certain, fuzzy_count=args.fuzzy,
                        image_size=args.size, seed=_seed(args))
    counts = build.counts()
    for split in ("train", "val", "unlabeled"):
        print(f"{split:10s} certain={counts.get((split, 'certain'), 0):5d} "
              f"fuzzy={counts.get((split, 'fuzzy'), 0):5d}")
    for kind, path in build.manifests.items():
        print(f"manifest {kind}: {path}")
    print(f"meta: {build.meta}")
    return 0


def cmd_train(args):
    from .config import config_from_mapping, config_to_mapping, load_config, save_config

    data = _data_dir(args)
    out = Path(args.out)
    config_path = args.config
    if config_path is None and args.resume and (out / "config.yaml").is_file():
        config_path = out / "config.yaml"
    cfg = load_config(config_path) if config_path else config_from_mapping({})
    overrides = {}
    if args.mode:
        overrides["mode"] = args.mode
    if args.seed is not None or os.environ.get("FUZZYOC_SEED") is not None:
        overrides["seed"] = _seed(args)
    if overrides:
        mapping = config_to_mapping(cfg)
        if overrides.get("mode") == "foc-light" and cfg.mode != "foc-light":
            mapping.update(lambda_u=0.0, repetitions=1, heads_per_type=1)
            mapping["epochs.warmup"] = 0
        mapping.update(overrides)
        cfg = config_from_mapping(mapping)

    split = load_manifest(data, _manifest(args, data), seed=cfg.seed)
    k_gt = split.num_classes
    out.mkdir(parents=True, exist_ok=True)
    state_path = out / "state.pt"
    if args.resume and state_path.is_file():
        state = load_state(state_path, cfg)
        logger.info("resuming at phase %s epoch %d", state.phase, state.epoch)
    else:
        if args.resume:
            logger.warning("--resume given but %s does not exist; starting fresh", state_path)
        save_config(cfg, out / "config.yaml")
        state = init_state(cfg, split, k_gt)

    if args.stop_after_epochs is not None:
        budget = args.stop_after_epochs
        for phase in cfg.phases():
            if phase in state.done:
                continue
            before = state.epoch if state.phase == phase else 0
            run_phase(state, phase, split, cfg, out_dir=out, max_epochs=budget)
            budget -= state.epoch - before
            if budget <= 0 and phase not in state.done:
                print(f"stopped after {args.stop_after_epochs} epochs at {phase} epoch {state.epoch}")
                return 0
    else:
        fit(cfg, split, k_gt=k_gt, out_dir=out, state=state)
    best = finalize(state, out)
    print(f"phases: {' '.join(state.done)}")
    print(f"best checkpoint: {best} (val macro-F1 {state.best_f1:.4f})")
    return 0


def _load_for_eval(args):
    data = _data_dir(args)
    try:
        model, payload = load_checkpoint(args.checkpoint)
    except CheckpointError as exc:
        raise DataError(str(exc)) from None
    return data, model


def _split_samples(split, name):
    pools = {"unlabeled": split.unlabeled, "val": split.validation, "train": split.labeled}
    if name not in pools:
        raise ConfigError(f"--split: unknown split {name!r}")
    if not pools[name]:
        raise DataError(f"split {name!r} is empty")
    return pools[name]


def cmd_eval(args):
    data, model = _load_for_eval(args)
    split = load_manifest(data, _manifest(args, data))
    target = _split_samples(split, args.split)
    mapping = _split_samples(split, args.mapping_split)
    val_split = split if args.val_subset in (None, args.subset) else load_manifest(
        data, _manifest(args, data, args.val_subset))
    judgments = FileJudgments(args.judgments) if args.judgments else None
    report = evaluate_model(model, target, mapping_source=mapping,
                            validation=val_split.validation or None,
                            judgments=judgments, target_name=args.split)
    report.update(_provenance(args, data))
    _write_report(report, args.report)
    b = report["best"]
    print(f"normal head {b['normal']['head']}: macro-F1 {b['normal']['macro_f1']:.4f} "
          f"accuracy {b['normal']['accuracy']:.4f}")
    print(f"overcluster head {b['overcluster']['head']}: macro-F1 {b['overcluster']['macro_f1']:.4f} "
          f"accuracy {b['overcluster']['accuracy']:.4f}")
    print(f"consistency ({report['consistency']['judgments']}): {report['consistency']['overall']:.4f}")
    return 0


def cmd_consistency(args):
    data, model = _load_for_eval(args)
    split = load_manifest(data, _manifest(args, data))
    target = _split_samples(split, args.split)
    import numpy as np

    _, over = forward_heads(model, np.stack([s.image for s in target]))
    head = args.head
    if head is None:
        head = 0
        if args.from_report:
            head = json.loads(Path(args.from_report).read_text())["best"]["overcluster"]["head"]
    clusters = over[head].argmax(axis=1)
    paths = [s.path for s in target]
    if args.judgments:
        source = FileJudgments(args.judgments)
    else:
        from .data import hard_labels
        source = ProxyJudgments(hard_labels(target), model.cfg.k_gt)
    rep = consistency_score(clusters, source.judge(paths, clusters, model.cfg.k))
    report = {"split": args.split, "head": int(head),
              "consistency": {"judgments": source.name, **rep.as_dict()}}
    report.update(_provenance(args, data))
    _write_report(report, args.report)
    print(f"consistency ({source.name}): overall {rep.overall:.4f}, "
          f"per cluster {rep.mean:.4f} +- {rep.std:.4f} over {len(rep.per_cluster)} clusters")
    return 0


def cmd_plot(args):
    from .plots import plot_cluster_grid, plot_f1_bars, plot_losses, read_metrics

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if args.metrics:
        rows = read_metrics(args.metrics)
        if not rows:
            raise DataError(f"{args.metrics}: no metric rows")
        plot_losses(rows, out / "losses.png")
        written.append(out / "losses.png")
    if args.report:
        report = json.loads(Path(args.report).read_text(encoding="utf-8"))
        if "best" in report:
            plot_f1_bars(report, out / "per_class_f1.png")
            written.append(out / "per_class_f1.png")
            data = args.data or report.get("data_dir")
            if data and plot_cluster_grid(report, data, out / "clusters.png"):
                written.append(out / "clusters.png")
    if not written:
        raise ConfigError("plot: pass --metrics and/or --report")
    for p in written:
        print(p)
    return 0


def _provenance(args, data):
    return {"checkpoint": str(args.checkpoint), "checkpoint_sha256": file_digest(args.checkpoint),
            "data_dir": str(data)}


def _write_report(report, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def build_parser():
    p = argparse.ArgumentParser(prog="fuzzyoc", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synce", help="render the synthetic circles/ellipses dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--certain", type=int, default=1800, help="certain images per split")
    g.add_argument("--fuzzy", type=int, default=1000, help="fuzzy images per split")
    g.add_argument("--size", type=int, default=32, help="image side in pixels")
    g.set_defaults(func=cmd_gen_synce)

    t = sub.add_parser("train", help="run the training phases")
    t.add_argument("--config")
    t.add_argument("--data")
    t.add_argument("--subset", default="fuzzy", choices=("ideal", "real", "fuzzy"))
    t.add_argument("--manifest", help="manifest path overriding --subset")
    t.add_argument("--out", required=True)
    t.add_argument("--mode", choices=("foc", "foc-light", "warmup-only"))
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", action="store_true")
    t.add_argument("--stop-after-epochs", type=int, help=argparse.SUPPRESS)
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "score a checkpoint"),
                                 ("consistency", cmd_consistency, "cluster consistency of a checkpoint")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--data")
        e.add_argument("--subset", default="fuzzy", choices=("ideal", "real", "fuzzy"))
        e.add_argument("--manifest")
        e.add_argument("--split", default="unlabeled", choices=("unlabeled", "val", "train"))
        e.add_argument("--judgments", help="expert CSV path,cluster,consistent (default: proxy)")
        e.add_argument("--report", required=True)
        if name == "eval":
            e.add_argument("--mapping-split", default="unlabeled", choices=("unlabeled", "val", "train"))
            e.add_argument("--val-subset", choices=("ideal", "real", "fuzzy"),
                           help="subset whose validation split selects the best heads")
        else:
            e.add_argument("--head", type=int)
            e.add_argument("--from-report", help="take the overclustering head from an eval report")
        e.set_defaults(func=func)

    pl = sub.add_parser("plot", help="write figures from metrics and reports")
    pl.add_argument("--metrics")
    pl.add_argument("--report")
    pl.add_argument("--data")
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
