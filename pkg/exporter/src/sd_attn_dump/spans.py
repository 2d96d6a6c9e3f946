"""Token-span bookkeeping for class-only prompts.

The container manifest locates each class on the cross-attention token
axis. Spans are computed by tokenizing the class names in class-prompt
order behind whatever tokenizer the backend uses, so compound names like
"dining table" cover every one of their tokens.
"""

from __future__ import annotations

import logging
from typing import Callable, Sequence

log = logging.getLogger(__name__)


def whitespace_token_count(name: str) -> int:
    """Dry-run tokenizer: one token per whitespace-separated word."""
    return len(name.split())


def class_token_spans(
    class_names: Sequence[str],
    token_count_fn: Callable[[str], int] = whitespace_token_count,
    prefix_tokens: int = 1,
) -> tuple[list[tuple[int, int]], int]:
    """Half-open [start, end) spans for each class, plus the total token
    count of the class prompt (prefix + names + one trailing token).

    ``prefix_tokens`` accounts for start-of-text style markers before the
    first word; a single end-of-text slot is reserved after the last.
    """
    spans = []
    cursor = prefix_tokens
    for name in class_names:
        n = token_count_fn(name)
        if n < 1:
            raise ValueError(f"class name {name!r} produced no tokens")
        words = len(name.split())
        if n != words:
            log.warning(
                "class %r split into %d tokens (%d words); span recorded anyway",
                name, n, words,
            )
        spans.append((cursor, cursor + n))
        cursor += n
    return spans, cursor + 1
