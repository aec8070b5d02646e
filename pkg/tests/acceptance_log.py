"""Collects one verdict per acceptance criterion for the end-of-session summary."""

from __future__ import annotations

RESULTS: dict[int, tuple[str, bool, str]] = {}


def record(number: int, title: str, ok: bool, detail: str = "") -> bool:
    RESULTS[number] = (title, bool(ok), detail)
    return bool(ok)


def summary_lines() -> list[str]:
    lines = []
    for n in sorted(RESULTS):
        title, ok, detail = RESULTS[n]
        line = f"{'PASS' if ok else 'FAIL'} criterion {n:2d}: {title}"
        lines.append(line + (f" -- {detail}" if detail else ""))
    return lines
