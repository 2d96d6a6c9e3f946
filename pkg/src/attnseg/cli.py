"""Command-line entry points.

Subcommands mirror the pipeline stages: build prompts, fabricate
fixtures, generate masks, swap in self-training pseudo labels, score, and
sweep hyperparameter grids. Path flags may also come from ATTNSEG_*
environment variables (paths only; numeric knobs must be explicit).
"""

from __future__ import annotations

import argparse
import itertools
import json
import os
import sys
from pathlib import Path

from . import fixtures as fx
from . import prompts as pr
from .errors import AttnSegError, ConfigError
from .evaluate import format_iou_table, miou
from .masks import adopt_pseudo_labels, read_mask, write_mask
from .pipeline import (
    PipelineConfig,
    find_containers,
    format_ablation_table,
    run_ablation,
    run_generate,
    score_against_gt,
)


def _path_arg(value, env_name: str, flag: str) -> Path:
    if value is not None:
        return Path(value)
    env = os.environ.get(env_name)
    if env:
        return Path(env)
    raise ConfigError(f"{flag} not given and {env_name} not set")


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    overrides = {}
    for name in (
        "tau",
        "alpha",
        "beta",
        "cross_scale",
        "self_scale",
        "top_k",
        "workers",
    ):
        val = getattr(args, name, None)
        if val is not None:
            overrides[name] = val
    if getattr(args, "timesteps", None):
        lo, hi = args.timesteps.split(":")
        overrides["timestep_range"] = (int(lo), int(hi))
    if getattr(args, "no_normalize", False):
        overrides["normalize_objectness"] = False
    if getattr(args, "decide_at_grid", False):
        overrides["decide_at_grid"] = True
    if overrides:
        cfg = PipelineConfig.from_json({**cfg.to_json(), **overrides})
    return cfg.validate()


def _cmd_prompts_build(args) -> int:
    vocab = pr.ClassVocabulary.load(args.vocab)
    rows = pr.load_captions(args.captions, vocab)
    pool = pr.build_prompt_pool(rows, vocab, top_k=args.limit)
    required = None if args.allow_missing else vocab.ids
    plan = pr.plan_dataset(
        pool, args.per_class, args.seed, required_class_ids=required
    )
    out = _path_arg(args.out, "ATTNSEG_OUT", "--out")
    pr.write_plan(plan, vocab, out)
    total = sum(plan.per_class_counts.values())
    print(
        f"plan: {len(plan.items)} items, {total} class incidences, "
        f"target {plan.target_per_class}/class -> {out}"
    )
    return 0


def _cmd_fixtures_make(args) -> int:
    with open(args.spec, encoding="utf-8") as fh:
        obj = json.load(fh)
    out = _path_arg(args.out, "ATTNSEG_OUT", "--out")
    scenes = []
    if "scenes" in obj:
        scenes.extend(fx.SceneSpec.from_json(s) for s in obj["scenes"])
    if "random" in obj:
        r = dict(obj["random"])
        count = int(r.pop("count"))
        start = int(r.pop("seed", 0))
        if "canvas" in r:
            r["canvas"] = tuple(r["canvas"])
        if "grids" in r:
            r["grids"] = tuple(r["grids"])
        scenes.extend(fx.random_scene(start + i, **r) for i in range(count))
    if not scenes:
        raise ConfigError("fixture spec declares neither 'scenes' nor 'random'")
    for i, spec in enumerate(scenes):
        fx.materialize_scene(spec, out / f"scene_{i:05d}")
    print(f"wrote {len(scenes)} fixture scenes under {out}")
    return 0


def _cmd_masks_generate(args) -> int:
    cfg = _load_config(args)
    roots = args.containers or [
        os.environ.get("ATTNSEG_CONTAINERS") or _missing("--containers")
    ]
    dirs = []
    for root in roots:
        dirs.extend(find_containers(root))
    out = _path_arg(args.out, "ATTNSEG_OUT", "--out")
    report = run_generate(cfg, dirs, out)
    s = report["summary"]
    print(f"masks: {s['total'] - s['failed']}/{s['total']} ok -> {out}")
    for row in report["images"]:
        if row["status"] == "failed":
            print(f"  failed {row['container']}: {row['error']}", file=sys.stderr)
    return 0 if s["failed"] == 0 else 1


def _missing(flag: str):
    raise ConfigError(f"{flag} not given and no environment fallback set")


def _cmd_masks_adopt(args) -> int:
    original = _path_arg(args.original, "ATTNSEG_ORIGINAL", "--original")
    predicted = _path_arg(args.predicted, "ATTNSEG_PREDICTED", "--predicted")
    out = _path_arg(args.out, "ATTNSEG_OUT", "--out")
    out.mkdir(parents=True, exist_ok=True)
    allowed = None
    if args.vocab:
        allowed = pr.ClassVocabulary.load(args.vocab).ids
    n = 0
    for opath in sorted(original.glob("*.png")):
        ppath = predicted / opath.name
        if not ppath.is_file():
            print(f"  no prediction for {opath.name}, skipped", file=sys.stderr)
            continue
        adopted = adopt_pseudo_labels(
            read_mask(opath), read_mask(ppath), allowed_ids=allowed
        )
        write_mask(adopted, out / opath.name)
        n += 1
    print(f"adopted {n} pseudo-label masks -> {out}")
    return 0


def _cmd_eval_miou(args) -> int:
    vocab = pr.ClassVocabulary.load(args.classes)
    k = max(vocab.ids)
    pred_dir = _path_arg(args.pred, "ATTNSEG_PRED", "--pred")
    gt_dir = _path_arg(args.gt, "ATTNSEG_GT", "--gt")
    pooled = None
    pairs = 0
    for gpath in sorted(gt_dir.glob("*.png")):
        ppath = pred_dir / gpath.name
        if not ppath.is_file():
            print(f"  no prediction for {gpath.name}, skipped", file=sys.stderr)
            continue
        cm = score_against_gt(read_mask(ppath), read_mask(gpath), k)
        pooled = cm if pooled is None else pooled + cm
        pairs += 1
    if pooled is None:
        raise ConfigError(f"no prediction/ground-truth pairs under {gt_dir}")
    per_class, mean = miou(pooled, include_background=not args.no_background)
    names = {0: "background", **{c: vocab.name(c) for c in vocab.ids}}
    print(format_iou_table(per_class, mean, names))
    payload = {
        "pairs": pairs,
        "per_class": {str(c): v for c, v in sorted(per_class.items())},
        "mean": mean,
        "include_background": not args.no_background,
    }
    out = Path(args.out) if args.out else pred_dir / "miou.json"
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return 0


def _grid_cells(obj: dict) -> list[dict]:
    if "cells" in obj:
        return list(obj["cells"])
    axes = sorted(obj.items())
    cells = []
    for combo in itertools.product(*(vals for _, vals in axes)):
        cells.append({key: val for (key, _), val in zip(axes, combo)})
    return cells


def _cmd_ablate(args) -> int:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    with open(args.grid, encoding="utf-8") as fh:
        cells = _grid_cells(json.load(fh))
    fixture_root = _path_arg(args.fixtures, "ATTNSEG_FIXTURES", "--fixtures")
    dirs = find_containers(fixture_root)
    if not dirs:
        raise ConfigError(f"no fixture containers under {fixture_root}")
    k = max(fx.FIXTURE_CLASS_NAMES)
    if args.classes:
        k = max(pr.ClassVocabulary.load(args.classes).ids)
    result = run_ablation(cfg, cells, dirs, num_classes=k)
    print(format_ablation_table(result))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(result, fh, indent=1, sort_keys=True)
            fh.write("\n")
    return 0


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="pipeline config JSON; flags override it")
    p.add_argument("--tau", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--cross-scale", dest="cross_scale", type=int)
    p.add_argument("--self-scale", dest="self_scale", type=int)
    p.add_argument("--timesteps", help="inclusive timestep range LO:HI")
    p.add_argument("--top-k", dest="top_k", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--no-normalize", action="store_true")
    p.add_argument("--decide-at-grid", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="attnseg",
        description="Attention dumps to segmentation masks, end to end.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    prompts = sub.add_parser("prompts", help="prompt construction").add_subparsers(
        dest="subcommand", required=True
    )
    build = prompts.add_parser("build", help="build a generation plan")
    build.add_argument("--captions", required=True)
    build.add_argument("--vocab", required=True)
    build.add_argument("--per-class", dest="per_class", type=int, required=True)
    build.add_argument("--limit", type=int, default=3)
    build.add_argument("--seed", type=int, default=0)
    build.add_argument("--out")
    build.add_argument(
        "--allow-missing",
        action="store_true",
        help="plan only classes the captions cover",
    )
    build.set_defaults(func=_cmd_prompts_build)

    fixtures = sub.add_parser("fixtures", help="synthetic scenes").add_subparsers(
        dest="subcommand", required=True
    )
    make = fixtures.add_parser("make", help="fabricate scenes from a spec file")
    make.add_argument("--spec", required=True)
    make.add_argument("--out")
    make.set_defaults(func=_cmd_fixtures_make)

    masks = sub.add_parser("masks", help="mask generation").add_subparsers(
        dest="subcommand", required=True
    )
    gen = masks.add_parser("generate", help="containers -> mask PNGs + report")
    gen.add_argument(
        "--containers",
        nargs="+",
        help="container dirs or parents of container dirs",
    )
    gen.add_argument("--out")
    _add_config_flags(gen)
    gen.set_defaults(func=_cmd_masks_generate)

    adopt = masks.add_parser("adopt", help="swap in self-training pseudo labels")
    adopt.add_argument("--original")
    adopt.add_argument("--predicted")
    adopt.add_argument("--out")
    adopt.add_argument("--vocab")
    adopt.set_defaults(func=_cmd_masks_adopt)

    ev = sub.add_parser("eval", help="scoring").add_subparsers(
        dest="subcommand", required=True
    )
    ev_miou = ev.add_parser("miou", help="per-class IoU table")
    ev_miou.add_argument("--pred")
    ev_miou.add_argument("--gt")
    ev_miou.add_argument("--classes", required=True)
    ev_miou.add_argument("--no-background", action="store_true")
    ev_miou.add_argument("--out")
    ev_miou.set_defaults(func=_cmd_eval_miou)

    ablate = sub.add_parser("ablate", help="hyperparameter sweep over fixtures")
    ablate.add_argument("--grid", required=True)
    ablate.add_argument("--fixtures")
    ablate.add_argument("--out")
    ablate.add_argument("--config")
    ablate.add_argument("--classes")
    ablate.set_defaults(func=_cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except AttnSegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
