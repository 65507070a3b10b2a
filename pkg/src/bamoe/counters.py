"""Process-wide execution counters used by tests to assert which graphs ran."""

from collections import Counter

calls: Counter = Counter()


def bump(name: str) -> None:
    calls[name] += 1


def reset() -> None:
    calls.clear()
