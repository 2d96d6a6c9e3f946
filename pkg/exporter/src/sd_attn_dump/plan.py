"""Reader for attnseg generation-plan files."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path


@dataclass(frozen=True)
class PlanItem:
    prompt: str
    class_prompt: str
    seed: int
    classes: list[tuple[int, str]]  # (class_id, name) in prompt order


def read_plan(path: Path | str) -> list[PlanItem]:
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    names = {int(k): v for k, v in obj.get("class_names", {}).items()}
    items = []
    for it in obj["items"]:
        spec = it["spec"]
        classes = [(int(c), names.get(int(c), f"class-{c}")) for c in spec["class_ids"]]
        items.append(
            PlanItem(
                prompt=spec["prompt"],
                class_prompt=spec["class_prompt"],
                seed=int(it["seed"]),
                classes=classes,
            )
        )
    return items
