"""Half-metric group matching with precision, recall and F1."""

from __future__ import annotations

from typing import AbstractSet, Iterable, List, Optional, Sequence, Tuple

from rich.console import Console
from rich.table import Table

from ..models import MatchResult
from .errors import ValidationFailure

console = Console()


def overlap_ratio(det: AbstractSet[int], gt: AbstractSet[int]) -> float:
    if not det or not gt:
        raise ValidationFailure("groups must be non-empty", code="empty_group")
    return len(det & gt) / max(len(det), len(gt))


def half_match(det: AbstractSet[int], gt: AbstractSet[int]) -> bool:
    """True when the groups share strictly more than half of the larger one."""
    return overlap_ratio(det, gt) > 0.5


def _metrics(matched: int, detected: int, truth: int) -> Tuple[float, float, float]:
    if detected == 0 and truth == 0:
        return 1.0, 1.0, 1.0
    precision = matched / detected if detected else 0.0
    recall = matched / truth if truth else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def score(dets: Sequence[AbstractSet[int]], gts: Sequence[AbstractSet[int]]) -> MatchResult:
    """Greedy one-to-one matching by descending overlap ratio.

    Candidate pairs must pass ``half_match``; ties keep the smaller detected
    index first, then the smaller ground-truth index.
    """
    candidates = []
    for i, det in enumerate(dets):
        for j, gt in enumerate(gts):
            ratio = overlap_ratio(det, gt)
            if ratio > 0.5:
                candidates.append((-ratio, i, j))
    candidates.sort()
    used_det, used_gt = set(), set()
    matched: List[Tuple[int, int]] = []
    for _, i, j in candidates:
        if i in used_det or j in used_gt:
            continue
        used_det.add(i)
        used_gt.add(j)
        matched.append((i, j))
    precision, recall, f1 = _metrics(len(matched), len(dets), len(gts))
    return MatchResult(
        matched=sorted(matched),
        detected=len(dets),
        ground_truth=len(gts),
        precision=precision,
        recall=recall,
        f1=f1,
    )


def aggregate(results: Iterable[MatchResult]) -> MatchResult:
    """Micro-average: pooled match, detection and ground-truth counts."""
    results = list(results)
    matched = sum(len(r.matched) for r in results)
    detected = sum(r.detected for r in results)
    truth = sum(r.ground_truth for r in results)
    precision, recall, f1 = _metrics(matched, detected, truth)
    return MatchResult(detected=detected, ground_truth=truth, precision=precision, recall=recall, f1=f1)


def format_line(label: str, result: MatchResult) -> str:
    return f"{label} P={result.precision:.4f} R={result.recall:.4f} F1={result.f1:.4f}"


def format_report(
    results: Sequence[Tuple[str, MatchResult]],
    total: Optional[MatchResult] = None,
) -> str:
    """``scene=<id> P= R= F1=`` per scene, then an ``aggregate`` line."""
    lines = [format_line(f"scene={scene_id}", result) for scene_id, result in results]
    total = total or aggregate(result for _, result in results)
    lines.append(format_line("aggregate", total))
    return "\n".join(lines) + "\n"


def display_results_table(results: Sequence[Tuple[str, MatchResult]]) -> None:
    table = Table(title="Group Detection")
    table.add_column("Scene", style="cyan")
    table.add_column("Matched", justify="right")
    table.add_column("Detected", justify="right")
    table.add_column("Ground truth", justify="right")
    table.add_column("P", justify="right", style="green")
    table.add_column("R", justify="right", style="green")
    table.add_column("F1", justify="right", style="bold green")
    for scene_id, result in results:
        table.add_row(
            str(scene_id),
            str(len(result.matched)),
            str(result.detected),
            str(result.ground_truth),
            f"{result.precision:.4f}",
            f"{result.recall:.4f}",
            f"{result.f1:.4f}",
        )
    console.print(table)
