"""``rskt`` command line: train, eval, bench-speed, vocab-overlap, viz-cost, ablate, make-fixtures.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import ablation, plotting
from .bench import (
    BenchmarkReport,
    DatasetManifest,
    evaluate_manifest,
    ground_truth_predictor,
    model_predictor,
    speed_benchmark,
    vocab_overlap,
)
from .config import ConfigError, load_config
from .foundation import ClassVocabulary, float64
from .schema import validate
from .synthetic import make_samples, to_sample, write_fixture_dataset
from .training import NonFiniteLossError, TrainConfig, train
from .transfer import RSKTSeg, load_checkpoint

log = logging.getLogger("rsktseg")

EXIT_USAGE = 2
EXIT_NUMERIC = 3
STAGES = ("clip", "dino", "fused", "aggregated")

FIXTURE_VOCABS = {
    "dlrsd_fixture": ["building", "tree", "water", "road"],
    "isaid_fixture": ["ship", "plane", "harbor"],
    "vaihingen_fixture": ["impervious surfaces", "building", "tree", "car"],
    "potsdam_fixture": ["building", "tree", "car", "clutter"],
}


class UsageError(Exception):
    pass


def _write_json(doc: dict, path, schema: str) -> None:
    validate(doc, schema)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=False) + "\n")


def _load_manifest(path, check_files=True) -> DatasetManifest:
    try:
        doc = json.loads(Path(path).read_text())
        validate(doc, "dataset_manifest")
        return DatasetManifest.load(path, check_files=check_files)
    except FileNotFoundError as e:
        raise UsageError(f"manifest {path}: {e}") from None
    except (ValueError, KeyError) as e:
        raise UsageError(f"manifest {path}: {e}") from None
    except Exception as e:  # jsonschema.ValidationError and friends
        raise UsageError(f"manifest {path}: {getattr(e, 'message', e)}") from None


def _load_model(path) -> RSKTSeg:
    try:
        return load_checkpoint(path)
    except (OSError, ValueError, KeyError) as e:
        raise UsageError(f"checkpoint {path}: {e}") from None


def _precision(name: str):
    return float64() if name == "float64" else contextlib.nullcontext()


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set, args.seed)
    if not cfg.data.manifest:
        raise ConfigError("data.manifest", "no training manifest given")
    manifest = _load_manifest(cfg.data.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = cfg.render()
    log.info("resolved config:\n%s", resolved)
    (out / "resolved_config.ini").write_text(resolved)
    with _precision(cfg.precision):
        torch.manual_seed(cfg.train.seed)
        samples = list(manifest.samples())
        model = RSKTSeg(cfg.model)
        vocab = model.vocabulary(manifest.classes)
        result = train(model, samples, vocab, cfg.train, out_dir=out)
    validate(result.manifest, "checkpoint_manifest")
    plotting.loss_curve(result.history, out / "loss.png")
    print(f"trained {len(result.history)} steps, final loss {result.history[-1]:.6f}" if result.history else "no steps")
    print(f"checkpoint: {out / 'checkpoint'}")
    return 0


def cmd_eval(args) -> int:
    manifests = [_load_manifest(p) for p in args.manifests]
    if args.predictor == "gt-copy":
        predict, templates = ground_truth_predictor, None
    else:
        if not args.checkpoint:
            raise UsageError("--checkpoint is required unless --predictor gt-copy")
        model = _load_model(args.checkpoint)
        model.eval()
        predict, templates = model_predictor(model), model.cfg.templates
    per = {}
    for m in manifests:
        per[m.name] = evaluate_manifest(predict, m, templates)
        log.info("%s: mIoU %.4f mACC %.4f", m.name, per[m.name].miou, per[m.name].macc)
    report = BenchmarkReport.from_reports(per)
    doc = report.to_dict()
    _write_json(doc, args.json, "benchmark_report")
    out = Path(args.out) if args.out else Path(args.json).parent
    table = report.markdown()
    (out / "benchmark.md").write_text(table + "\n")
    plotting.benchmark_bars(doc, out / "benchmark.png")
    print(table)
    return 0


def cmd_bench_speed(args) -> int:
    if args.iters < 1:
        raise UsageError("--iters must be >= 1")
    if args.warmup < 0:
        raise UsageError("--warmup must be >= 0")
    manifests = [_load_manifest(p) for p in args.manifests]
    model = _load_model(args.checkpoint)
    model.eval()
    datasets = {m.name: (list(m.samples()), model.vocabulary(m.classes)) for m in manifests}
    report = speed_benchmark(model_predictor(model), datasets, warmup=args.warmup, iters=args.iters)
    doc = report.to_dict()
    _write_json(doc, args.json, "speed_report")
    out = Path(args.out) if args.out else Path(args.json).parent
    table = report.markdown()
    (out / "speed.md").write_text(table + "\n")
    plotting.speed_bars(doc, out / "speed.png")
    print(table)
    return 0


def cmd_vocab_overlap(args) -> int:
    train_m = _load_manifest(args.train, check_files=False)
    rows = []
    for p in args.tests:
        m = _load_manifest(p, check_files=False)
        rows.append({"dataset": m.name, "num_classes": len(m.classes), "overlap": vocab_overlap(train_m.classes, m.classes)})
    doc = {"train": train_m.name, "rows": rows}
    if args.json:
        _write_json(doc, args.json, "vocab_overlap")
    print(f"| Test dataset | classes | overlap with {train_m.name} |")
    print("|---|---|---|")
    for r in rows:
        print(f"| {r['dataset']} | {r['num_classes']} | {r['overlap']} |")
    return 0


def stage_planes(model: RSKTSeg, image: torch.Tensor, names, stage: str) -> np.ndarray:
    """Per-class ``N_t x h x w`` planes for one pipeline stage."""
    vocab = model.vocabulary(names)
    with torch.no_grad():
        st = model.stages(image, vocab)
        if stage == "aggregated":
            planes = model.head(st["aggregated"])
        else:
            planes = st[stage].mean(dim=-1).permute(2, 0, 1)
    return planes.detach().cpu().double().numpy()


def cmd_viz_cost(args) -> int:
    from PIL import Image

    if args.stage not in STAGES:
        raise UsageError(f"unknown stage {args.stage!r}")
    model = _load_model(args.checkpoint)
    model.eval()
    if args.classes:
        names = [c.strip() for c in args.classes.split(",") if c.strip()]
    elif args.manifest:
        names = _load_manifest(args.manifest, check_files=False).classes
    else:
        raise UsageError("give --classes or --manifest")
    try:
        img = np.asarray(Image.open(args.image).convert("RGB"))
    except OSError as e:
        raise UsageError(f"image {args.image}: {e}") from None
    planes = stage_planes(model, to_sample(img, None).image, names, args.stage)
    paths = plotting.write_heatmaps(planes, names, args.stage, args.out)
    if args.panel:
        plotting.cost_panel(planes, names, args.stage, Path(args.out) / "panels" / f"{args.stage}.png")
    for p in paths:
        print(p)
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, args.set, args.seed)
    with _precision(cfg.precision):
        if args.manifest:
            m = _load_manifest(args.manifest)
            samples, names = list(m.samples()), m.classes
        else:
            samples, names = make_samples(args.images, 3, seed=cfg.train.seed), ["building", "tree", "water"]
        tcfg = TrainConfig(**{**cfg.train.__dict__, "max_iters": args.iters})
        vocab = ClassVocabulary(names, cfg.model.templates)
        rows = ablation.run_ablation(samples, vocab, cfg.model, tcfg)
    out = Path(args.out)
    _write_json({"rows": rows}, out / "ablation.json", "ablation")
    table = ablation.markdown(rows)
    (out / "ablation.md").write_text(table + "\n")
    plotting.ablation_lines(rows, out / "ablation.png")
    print(table)
    return 0


def cmd_make_fixtures(args) -> int:
    out = Path(args.out)
    for i, (name, classes) in enumerate(FIXTURE_VOCABS.items()):
        split = "train" if name == "dlrsd_fixture" else "val"
        path = write_fixture_dataset(out, name, classes, num_images=args.images, seed=i + 1, split=split)
        print(path)
    cfg = load_config(None, [f"data.manifest={out / 'dlrsd_fixture' / 'manifest.json'}", "train.batch_size=4"])
    (out / "train.ini").write_text(cfg.render())
    print(out / "train.ini")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rskt", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def config_args(sp):
        sp.add_argument("--config", help="INI file with model/fusion/decoder/train/data/run sections")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--seed", type=int, help="overrides train.seed and RSKT_SEED")

    sp = sub.add_parser("train", help="train on one manifest, write checkpoint + loss.csv")
    config_args(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="cross-dataset evaluation")
    sp.add_argument("--checkpoint")
    sp.add_argument("manifests", nargs="+")
    sp.add_argument("--json", required=True)
    sp.add_argument("--out", help="directory for the markdown table and figure (default: next to --json)")
    sp.add_argument("--predictor", choices=("model", "gt-copy"), default="model")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bench-speed", help="inference latency and FPS")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("manifests", nargs="+")
    sp.add_argument("--warmup", type=int, default=2)
    sp.add_argument("--iters", type=int, default=5)
    sp.add_argument("--json", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_bench_speed)

    sp = sub.add_parser("vocab-overlap", help="class-name overlap between a training set and test sets")
    sp.add_argument("train")
    sp.add_argument("tests", nargs="+")
    sp.add_argument("--json")
    sp.set_defaults(func=cmd_vocab_overlap)

    sp = sub.add_parser("viz-cost", help="per-class cost heatmaps at one pipeline stage")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--classes", help="comma-separated class names")
    sp.add_argument("--manifest", help="take class names from this manifest")
    sp.add_argument("--stage", default="fused")
    sp.add_argument("--out", required=True)
    sp.add_argument("--panel", action="store_true", help="also render a matplotlib panel of all classes")
    sp.set_defaults(func=cmd_viz_cost)

    sp = sub.add_parser("ablate", help="fusion-strategy and layer-count sweep on a fixture set")
    config_args(sp)
    sp.add_argument("--manifest")
    sp.add_argument("--images", type=int, default=4)
    sp.add_argument("--iters", type=int, default=20)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("make-fixtures", help="write synthetic fixture datasets and a starter config")
    sp.add_argument("--out", required=True)
    sp.add_argument("--images", type=int, default=4)
    sp.set_defaults(func=cmd_make_fixtures)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"rskt: config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except UsageError as e:
        print(f"rskt: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLossError as e:
        print(f"rskt: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
