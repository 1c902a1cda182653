"""Ranking metrics: trapezoidal average precision with junk handling,
precision@k, the easy/medium/hard relabeling, and report assembly.

AP follows the classic benchmark recurrence: junk entries are removed (ranks
close up), and each positive hit at retained rank r adds
(previous_precision + hits/r) / 2 * (1 / |positives in database|), where
previous_precision starts at 1.0 and is updated at positive hits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

from .ranking import RankedList
from .tensor_io import GroundTruth, QueryGroundTruth

PROTOCOLS = ("classic", "easy", "medium", "hard")


@dataclass(frozen=True)
class EvalReport:
    """Scores for one evaluation run; fractions in [0, 1] internally,
    percentages (2 decimals) in serialized form."""

    protocol: str
    per_query: dict[str, float]
    mean_ap: float
    mp5: float
    mp10: float
    n_queries: int
    excluded: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "map": round(100.0 * self.mean_ap, 2),
            "mp5": round(100.0 * self.mp5, 2),
            "mp10": round(100.0 * self.mp10, 2),
            "n_queries": self.n_queries,
            "excluded": list(self.excluded),
            "per_query": {name: round(100.0 * ap, 2) for name, ap in self.per_query.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def format_table(self) -> str:
        d = self.to_dict()
        header = f"{'protocol':<10} {'mAP':>8} {'mp@5':>8} {'mp@10':>8} {'queries':>8}"
        row = (
            f"{d['protocol']:<10} {d['map']:>8.2f} {d['mp5']:>8.2f} "
            f"{d['mp10']:>8.2f} {d['n_queries']:>8d}"
        )
        lines = [header, "-" * len(header), row]
        if self.excluded:
            lines.append(f"excluded: {', '.join(self.excluded)}")
        return "\n".join(lines)


def _ranked_names(ranked: RankedList | Sequence[str]) -> Sequence[str]:
    return ranked.names if isinstance(ranked, RankedList) else ranked


def average_precision(
    ranked: RankedList | Sequence[str],
    positive: Iterable[str],
    junk: Iterable[str] = (),
    database: Iterable[str] | None = None,
    trapezoidal: bool = True,
) -> float:
    """Average precision of one ranking after junk removal.

    The recall step counts only positives present in the database (defaulting
    to the ranked names); positives missing from the ranking contribute
    nothing. trapezoidal=False gives plain AP (mean precision at hits).
    """
    names = _ranked_names(ranked)
    positive = set(positive)
    junk = set(junk)
    if not positive:
        raise ValueError("positive set is empty")
    if positive & junk:
        raise ValueError("positive and junk sets overlap")
    universe = set(names) if database is None else set(database)
    effective = positive & universe
    if not effective:
        raise ValueError("no positives present in the database")
    step = 1.0 / len(effective)
    ap = 0.0
    hits = 0
    rank = 0
    prev_precision = 1.0
    for name in names:
        if name in junk:
            continue
        rank += 1
        if name in effective:
            hits += 1
            precision = hits / rank
            if trapezoidal:
                ap += (prev_precision + precision) / 2.0 * step
            else:
                ap += precision * step
            prev_precision = precision
    return ap


def precision_at_k(
    ranked: RankedList | Sequence[str],
    positive: Iterable[str],
    junk: Iterable[str] = (),
    k: int = 10,
    remove_junk: bool = True,
) -> float:
    """Fraction of the first k entries (after junk removal) that are positive.

    The denominator is always k, even when fewer entries remain.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    names = _ranked_names(ranked)
    positive = set(positive)
    junk = set(junk)
    if remove_junk:
        names = [n for n in names if n not in junk]
    top = names[:k]
    return sum(1 for n in top if n in positive) / k


def revisited_setup(
    gt: GroundTruth, label: str
) -> tuple[dict[str, tuple[frozenset[str], frozenset[str]]], list[str]]:
    """Per-query (positive, junk) sets under an easy/medium/hard label.

    easy: positives=easy, junk=junk+hard; medium: positives=easy+hard,
    junk=junk; hard: positives=hard, junk=junk+easy. Queries whose positive
    set comes out empty are excluded and reported.
    """
    if label not in ("easy", "medium", "hard"):
        raise ValueError(f"unknown protocol label {label!r}")
    setups: dict[str, tuple[frozenset[str], frozenset[str]]] = {}
    excluded: list[str] = []
    for q in gt.queries:
        if not q.revisited:
            raise ValueError(
                f"query {q.name!r} has no easy/hard labels; protocol {label!r} unavailable"
            )
        easy = q.easy or frozenset()
        hard = q.hard or frozenset()
        if label == "easy":
            positive, junk = easy, q.junk | hard
        elif label == "medium":
            positive, junk = easy | hard, q.junk
        else:
            positive, junk = hard, q.junk | easy
        if positive:
            setups[q.name] = (positive, junk)
        else:
            excluded.append(q.name)
    return setups, excluded


def evaluate(
    rankings: Sequence[RankedList],
    gt: GroundTruth,
    protocol: str = "classic",
    trapezoidal: bool = True,
    mpk_remove_junk: bool = True,
) -> EvalReport:
    """Score rankings against ground truth under one protocol.

    A ranked query image that is not among its own positives is treated as
    junk, so self-retrieval never skews the metrics. Queries whose positive
    set is empty (or disjoint from the database) are excluded and reported.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}")
    by_name: dict[str, QueryGroundTruth] = {q.name: q for q in gt.queries}
    if protocol == "classic":
        setups = {q.name: (q.positive, q.junk) for q in gt.queries}
    else:
        setups, _ = revisited_setup(gt, protocol)
    db_names = set(gt.database)
    per_query: dict[str, float] = {}
    p5: dict[str, float] = {}
    p10: dict[str, float] = {}
    excluded: list[str] = []
    for ranking in rankings:
        name = ranking.query
        if name not in by_name:
            raise ValueError(f"query {name!r} missing from ground truth")
        setup = setups.get(name)
        if setup is None or not setup[0] or not setup[0] & db_names:
            excluded.append(name)
            continue
        positive, junk = setup
        if name not in positive:
            junk = junk | {name}
        per_query[name] = average_precision(
            ranking, positive, junk, database=db_names, trapezoidal=trapezoidal
        )
        p5[name] = precision_at_k(ranking, positive, junk, k=5, remove_junk=mpk_remove_junk)
        p10[name] = precision_at_k(ranking, positive, junk, k=10, remove_junk=mpk_remove_junk)
    n = len(per_query)
    return EvalReport(
        protocol=protocol,
        per_query=per_query,
        mean_ap=sum(per_query.values()) / n if n else 0.0,
        mp5=sum(p5.values()) / n if n else 0.0,
        mp10=sum(p10.values()) / n if n else 0.0,
        n_queries=n,
        excluded=tuple(excluded),
    )
