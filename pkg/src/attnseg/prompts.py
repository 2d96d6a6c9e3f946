"""Prompt construction and generation planning.

Captions rarely name every target class (and often use near-synonyms), so
class names are appended verbatim after the caption instead of rewriting
it. A frequency-based limiter keeps crowded prompts workable and spills
the remaining classes into single-class fallback prompts.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from .errors import ConfigError, PlanningError, VocabularyError

SEPARATOR = "; "
FALLBACK_TEMPLATE = "a photo of a {name}"

BACKGROUND_ID = 0
UNCERTAIN_VALUE = 255


class Provenance(enum.Enum):
    PROVIDED_CAPTION = "provided_caption"
    GENERATED_CAPTION = "generated_caption"
    SIMPLE_FALLBACK = "simple_fallback"


@dataclass(frozen=True)
class ClassEntry:
    class_id: int
    name: str
    synonyms: tuple[str, ...] = ()


class ClassVocabulary:
    """Ordered class list with id/name/synonym lookup.

    Id 0 is reserved for background and 255 for the uncertainty value, so
    class ids live in [1, 254]. Synonym mapping is data, not code: a
    caption saying "bike" resolves to "bicycle" only if the vocabulary
    says so.
    """

    def __init__(self, entries: Sequence[ClassEntry]):
        self.entries = list(entries)
        self._by_id: dict[int, ClassEntry] = {}
        self._by_name: dict[str, int] = {}
        for e in self.entries:
            if not (1 <= e.class_id <= 254):
                raise VocabularyError(
                    f"class id {e.class_id} outside [1, 254] "
                    f"(0 = background, 255 = uncertain)"
                )
            if e.class_id in self._by_id:
                raise VocabularyError(f"duplicate class id {e.class_id}")
            if e.name in self._by_name:
                raise VocabularyError(f"duplicate class name {e.name!r}")
            self._by_id[e.class_id] = e
            self._by_name[e.name] = e.class_id
        for e in self.entries:
            for syn in e.synonyms:
                self._by_name.setdefault(syn, e.class_id)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def ids(self) -> list[int]:
        return [e.class_id for e in self.entries]

    def name(self, class_id: int) -> str:
        try:
            return self._by_id[class_id].name
        except KeyError:
            raise VocabularyError(f"unknown class id {class_id}") from None

    def resolve(self, name_or_id) -> int:
        if isinstance(name_or_id, int):
            if name_or_id not in self._by_id:
                raise VocabularyError(f"unknown class id {name_or_id}")
            return name_or_id
        if name_or_id in self._by_name:
            return self._by_name[name_or_id]
        raise VocabularyError(f"unknown class name {name_or_id!r}")

    def to_json(self) -> dict:
        return {
            "classes": [
                {"id": e.class_id, "name": e.name, "synonyms": list(e.synonyms)}
                for e in self.entries
            ]
        }

    @staticmethod
    def from_json(obj: dict) -> "ClassVocabulary":
        return ClassVocabulary(
            [
                ClassEntry(
                    class_id=int(c["id"]),
                    name=c["name"],
                    synonyms=tuple(c.get("synonyms", ())),
                )
                for c in obj["classes"]
            ]
        )

    @staticmethod
    def load(path: Path | str) -> "ClassVocabulary":
        with open(path, encoding="utf-8") as fh:
            return ClassVocabulary.from_json(json.load(fh))

    def save(self, path: Path | str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)
            fh.write("\n")


@dataclass(frozen=True)
class PromptSpec:
    """A generation prompt and its class-only companion."""

    caption: str
    class_ids: tuple[int, ...]
    prompt: str
    class_prompt: str
    provenance: Provenance = Provenance.PROVIDED_CAPTION

    def to_json(self) -> dict:
        return {
            "caption": self.caption,
            "class_ids": list(self.class_ids),
            "prompt": self.prompt,
            "class_prompt": self.class_prompt,
            "provenance": self.provenance.value,
        }

    @staticmethod
    def from_json(obj: dict) -> "PromptSpec":
        return PromptSpec(
            caption=obj["caption"],
            class_ids=tuple(int(c) for c in obj["class_ids"]),
            prompt=obj["prompt"],
            class_prompt=obj["class_prompt"],
            provenance=Provenance(obj["provenance"]),
        )


def _dedupe(class_ids: Iterable[int]) -> list[int]:
    seen: set[int] = set()
    out = []
    for c in class_ids:
        if c not in seen:
            seen.add(c)
            out.append(c)
    return out


def append_classes(
    caption: str,
    class_ids: Sequence[int],
    vocab: ClassVocabulary,
    provenance: Provenance = Provenance.PROVIDED_CAPTION,
) -> PromptSpec:
    """Append canonical class names to a caption.

    The full prompt is ``caption + "; " + names``; the class-only prompt
    is just the space-joined names. Duplicate ids keep their first
    occurrence.
    """
    ids = _dedupe(class_ids)
    if not ids:
        raise VocabularyError("class_ids must be non-empty")
    names = [vocab.name(c) for c in ids]
    class_part = " ".join(names)
    return PromptSpec(
        caption=caption,
        class_ids=tuple(ids),
        prompt=f"{caption}{SEPARATOR}{class_part}",
        class_prompt=class_part,
        provenance=provenance,
    )


def simple_fallback(class_id: int, vocab: ClassVocabulary) -> PromptSpec:
    """Single-class prompt of the form "a photo of a X; X"."""
    name = vocab.name(class_id)
    return append_classes(
        FALLBACK_TEMPLATE.format(name=name),
        [class_id],
        vocab,
        provenance=Provenance.SIMPLE_FALLBACK,
    )


def limit_classes(
    class_ids: Sequence[int],
    class_frequencies: Mapping[int, int],
    k: int,
    vocab: ClassVocabulary,
) -> tuple[list[int], list[PromptSpec]]:
    """Cap the classes mentioned in one prompt at k.

    Keeps the top-k classes by frequency (descending, ties broken by
    ascending class id) and returns one fallback PromptSpec per dropped
    class, least frequent first.
    """
    if k < 1:
        raise ConfigError(f"class limit k must be >= 1, got {k}")
    ids = _dedupe(class_ids)
    for c in ids:
        if c not in class_frequencies:
            raise PlanningError(f"no frequency entry for class {vocab.name(c)!r}")
    if len(ids) <= k:
        return ids, []
    ranked = sorted(ids, key=lambda c: (-class_frequencies[c], c))
    kept = ranked[:k]
    dropped = sorted(ranked[k:], key=lambda c: (class_frequencies[c], c))
    return kept, [simple_fallback(c, vocab) for c in dropped]


@dataclass
class GenerationPlan:
    """Deterministic schedule of (prompt, seed) generation items."""

    items: list[tuple[PromptSpec, int]]
    per_class_counts: dict[int, int]
    target_per_class: int

    def to_json(self) -> dict:
        return {
            "target_per_class": self.target_per_class,
            "per_class_counts": {
                str(c): n for c, n in sorted(self.per_class_counts.items())
            },
            "items": [
                {"seed": seed, "spec": spec.to_json()} for spec, seed in self.items
            ],
        }

    @staticmethod
    def from_json(obj: dict) -> "GenerationPlan":
        return GenerationPlan(
            items=[
                (PromptSpec.from_json(it["spec"]), int(it["seed"]))
                for it in obj["items"]
            ],
            per_class_counts={
                int(c): int(n) for c, n in obj["per_class_counts"].items()
            },
            target_per_class=int(obj["target_per_class"]),
        )


def plan_dataset(
    specs: Sequence[PromptSpec],
    target_per_class: int,
    base_seed: int,
    required_class_ids: Optional[Sequence[int]] = None,
) -> GenerationPlan:
    """Expand prompts into a class-balanced generation schedule.

    Prompts are cycled in order; an item counts toward every class its
    prompt contains, and seeds increment per emitted item starting at
    ``base_seed``. Prompts are replayed with fresh seeds until every class
    reaches the target, making the plan a pure function of its inputs.
    """
    if target_per_class < 1:
        raise ConfigError(f"target_per_class must be >= 1, got {target_per_class}")
    covered: set[int] = set()
    for spec in specs:
        covered.update(spec.class_ids)
    if required_class_ids is not None:
        missing = sorted(set(required_class_ids) - covered)
        if missing:
            raise PlanningError(
                f"classes with no prompt and no fallback: {missing}"
            )
    if not covered:
        raise PlanningError("no prompts cover any class")

    counts = {c: 0 for c in sorted(covered)}
    items: list[tuple[PromptSpec, int]] = []
    seed = base_seed
    while any(n < target_per_class for n in counts.values()):
        progressed = False
        for spec in specs:
            if any(counts[c] < target_per_class for c in spec.class_ids):
                items.append((spec, seed))
                seed += 1
                for c in spec.class_ids:
                    counts[c] += 1
                progressed = True
        if not progressed:  # pragma: no cover - covered is derived from specs
            raise PlanningError("planning stalled; no prompt makes progress")
    return GenerationPlan(
        items=items, per_class_counts=counts, target_per_class=target_per_class
    )


def write_plan(plan: GenerationPlan, vocab: ClassVocabulary, path: Path | str) -> None:
    """Serialize a plan, with a class-name map for downstream consumers."""
    obj = plan.to_json()
    used = sorted({c for spec, _ in plan.items for c in spec.class_ids})
    obj["class_names"] = {str(c): vocab.name(c) for c in used}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_plan(path: Path | str) -> GenerationPlan:
    with open(path, encoding="utf-8") as fh:
        return GenerationPlan.from_json(json.load(fh))


def load_captions(path: Path | str, vocab: ClassVocabulary) -> list[dict]:
    """Read a captions file: a JSON list of {"caption": str, "classes":
    [name-or-id, ...]} rows (or an object with a "captions" key). Class
    references are resolved through the vocabulary, synonyms included; an
    optional "provenance" field marks machine-generated captions."""
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    rows = obj["captions"] if isinstance(obj, dict) else obj
    out = []
    for row in rows:
        ids = _dedupe(vocab.resolve(c) for c in row["classes"])
        out.append(
            {
                "caption": row["caption"],
                "class_ids": ids,
                "provenance": Provenance(
                    row.get("provenance", Provenance.PROVIDED_CAPTION.value)
                ),
            }
        )
    return out


def build_prompt_pool(
    caption_rows: Sequence[dict],
    vocab: ClassVocabulary,
    top_k: int,
) -> list[PromptSpec]:
    """Turn caption rows into the prompt pool fed to plan_dataset.

    Class frequencies are counted over the caption rows themselves.
    Fallback prompts spilled by the limiter are deduplicated (one per
    class) and appended after the caption-derived prompts.
    """
    freq: dict[int, int] = {c: 0 for c in vocab.ids}
    for row in caption_rows:
        for c in row["class_ids"]:
            freq[c] += 1
    pool: list[PromptSpec] = []
    spilled: dict[int, PromptSpec] = {}
    for row in caption_rows:
        if not row["class_ids"]:
            continue
        kept, spill = limit_classes(row["class_ids"], freq, top_k, vocab)
        provenance = row.get("provenance", Provenance.PROVIDED_CAPTION)
        pool.append(append_classes(row["caption"], kept, vocab, provenance))
        for spec in spill:
            spilled.setdefault(spec.class_ids[0], spec)
    pool.extend(spilled[c] for c in sorted(spilled))
    return pool
