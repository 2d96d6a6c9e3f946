"""sd-attn-dump: run a generation plan and dump attention containers."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .backends import DryRunBackend, ExportJob
from .container import ExportError
from .plan import read_plan


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="sd-attn-dump",
        description="Capture self/cross attention for every item of a "
        "generation plan into attnseg containers.",
    )
    p.add_argument("--plan", required=True, help="plan JSON from 'attnseg prompts build'")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--steps", type=int, default=100)
    p.add_argument(
        "--scales",
        default="16,32",
        help="comma-separated attention grid sizes to capture",
    )
    p.add_argument(
        "--backend",
        choices=("dryrun", "diffusers"),
        default="dryrun",
    )
    p.add_argument("--layers", type=int, default=16, help="dry-run layer count")
    p.add_argument(
        "--image-size", type=int, default=64, help="dry-run image side length"
    )
    p.add_argument("--model", default="stabilityai/stable-diffusion-2-1-base")
    p.add_argument("--device", default="cpu")
    p.add_argument("--limit", type=int, help="export only the first N plan items")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    scales = tuple(int(s) for s in args.scales.split(","))
    if args.backend == "dryrun":
        backend = DryRunBackend(
            layers=args.layers, image_size=(args.image_size, args.image_size)
        )
    else:
        from .diffusers_backend import DiffusersBackend

        backend = DiffusersBackend(model_id=args.model, device=args.device)

    try:
        items = read_plan(args.plan)
    except (OSError, KeyError, ValueError) as exc:
        print(f"error: cannot read plan: {exc}", file=sys.stderr)
        return 2
    if args.limit is not None:
        items = items[: args.limit]
    out_root = Path(args.out)
    failures = 0
    for i, item in enumerate(items):
        job = ExportJob(
            prompt=item.prompt,
            class_prompt=item.class_prompt,
            classes=item.classes,
            seed=item.seed,
            steps=args.steps,
            scales=scales,
            out_dir=out_root / f"item_{i:05d}",
            image_id=f"item_{i:05d}_{item.seed}",
        )
        try:
            result = backend.run(job)
            print(f"exported {job.image_id} -> {result.container_dir}")
        except ExportError as exc:
            failures += 1
            print(f"error: item {i}: {exc}", file=sys.stderr)
    return 0 if failures == 0 else 1


if __name__ == "__main__":
    sys.exit(main())
