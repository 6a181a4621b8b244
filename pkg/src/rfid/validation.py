"""Input validation for the estimator API."""

from __future__ import annotations

from typing import Optional, Sequence

from .data import QAExample


def check_corpus(X, K: Optional[int] = None, *, allow_empty: bool = False) -> list[QAExample]:
    """Return ``X`` as a list of QAExample, checking type and a common passage count.

    Raises TypeError for foreign objects and ValueError for empty input or
    inconsistent K.
    """
    if isinstance(X, QAExample):
        raise TypeError("expected a sequence of QAExample, got a single example")
    try:
        examples = list(X)
    except TypeError:
        raise TypeError(f"expected a sequence of QAExample, got {type(X).__name__}") from None
    if not examples and not allow_empty:
        raise ValueError("empty corpus")
    for i, ex in enumerate(examples):
        if not isinstance(ex, QAExample):
            raise TypeError(f"item {i} is {type(ex).__name__}, not QAExample")
    ks = {ex.K for ex in examples}
    if len(ks) > 1:
        raise ValueError(f"examples disagree on passage count: {sorted(ks)}")
    if K is not None and ks and ks != {K}:
        raise ValueError(f"estimator was fitted with K={K} passages per question, got K={ks.pop()}")
    return examples


def check_answers(y, n: int) -> Optional[list[list[str]]]:
    if y is None:
        return None
    y = [[a] if isinstance(a, str) else list(a) for a in y]
    if len(y) != n:
        raise ValueError(f"got {len(y)} answer lists for {n} examples")
    if any(not a for a in y):
        raise ValueError("every example needs at least one answer")
    return y


def unique_ids(examples: Sequence[QAExample]) -> None:
    seen = set()
    for ex in examples:
        if ex.id in seen:
            raise ValueError(f"duplicate example id {ex.id!r}")
        seen.add(ex.id)
