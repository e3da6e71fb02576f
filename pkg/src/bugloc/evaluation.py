"""Ranking metrics, significance tests and corpus/difficulty analyses."""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
import re
import statistics
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from .corpus import BugRecord
from .localizer import RankedResult
from .tokenization import TokenDistribution

EASY_MAX_RANK = 7
HARD_MIN_RANK = 11
EXACT_LIMIT = 16

_FRAME = re.compile(r"^\s*at\s+[\w$]+(?:\.[\w$<>]+)+\([\w$]+\.java:\d+\)\s*$")
_CAUSED_BY = re.compile(r"^\s*Caused by:")


def _ranks_of_relevant(result: RankedResult) -> list[int]:
    if not result.relevant:
        raise ValueError(f"bug {result.bug_id} has no relevant file")
    ranks = [i + 1 for i, (path, _) in enumerate(result.ranking) if path in result.relevant]
    if len(ranks) != len(result.relevant):
        raise ValueError(f"bug {result.bug_id}: relevant file absent from ranking")
    return ranks


def first_relevant_rank(result: RankedResult) -> int:
    return _ranks_of_relevant(result)[0]


def reciprocal_rank(result: RankedResult) -> float:
    return 1.0 / first_relevant_rank(result)


def average_precision(result: RankedResult) -> float:
    ranks = _ranks_of_relevant(result)
    return sum((hit + 1) / rank for hit, rank in enumerate(ranks)) / len(ranks)


def mrr(results: Sequence[RankedResult]) -> float:
    if not results:
        raise ValueError("no results to average")
    return float(np.mean([reciprocal_rank(r) for r in results]))


def mean_average_precision(results: Sequence[RankedResult]) -> float:
    if not results:
        raise ValueError("no results to average")
    return float(np.mean([average_precision(r) for r in results]))


def random_rank_baseline(pool_size: int, relevant: int = 1) -> float:
    """Expected reciprocal rank of the first of ``relevant`` files in a uniformly shuffled pool."""
    if not 1 <= relevant <= pool_size:
        raise ValueError("need 1 <= relevant <= pool_size")
    total = math.comb(pool_size, relevant)
    # the first relevant file sits at rank k when the other relevant - 1 land below it
    return sum(math.comb(pool_size - k, relevant - 1) / k for k in range(1, pool_size - relevant + 2)) / total


@dataclass
class MetricReport:
    per_project: dict[str, dict]
    overall: dict

    def to_json(self) -> str:
        return json.dumps({"per_project": self.per_project, "overall": self.overall}, indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["project", "mrr", "map", "n_bugs"])
        for project, row in sorted(self.per_project.items()):
            writer.writerow([project, repr(row["mrr"]), repr(row["map"]), row["n_bugs"]])
        writer.writerow(["Overall", repr(self.overall["mrr"]), repr(self.overall["map"]), self.overall["n_bugs"]])
        return buf.getvalue()


def metric_report(results: Sequence[RankedResult]) -> MetricReport:
    """Per-project MRR/MAP plus an overall micro-average over bugs."""
    groups: dict[str, list[RankedResult]] = {}
    for r in results:
        groups.setdefault(r.project_id, []).append(r)
    per_project = {
        p: {"mrr": mrr(rs), "map": mean_average_precision(rs), "n_bugs": len(rs)} for p, rs in sorted(groups.items())
    }
    overall = {"mrr": mrr(results), "map": mean_average_precision(results), "n_bugs": len(results)}
    return MetricReport(per_project, overall)


@dataclass(frozen=True)
class SignificanceResult:
    pair: tuple[str, str]
    u_statistic: float
    p_value: float
    alpha_corrected: float
    significant: bool
    method: str = "exact"


def bonferroni(alpha: float, comparisons: int) -> float:
    if comparisons < 1:
        raise ValueError("at least one comparison required")
    return alpha / comparisons


def midranks(values: Sequence[float]) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def mann_whitney_u(
    a: Sequence[float],
    b: Sequence[float],
    alpha: float = 0.05,
    comparisons: int = 1,
    labels: tuple[str, str] = ("a", "b"),
) -> SignificanceResult:
    """Two-sided Mann-Whitney U test of ``a`` against ``b``.

    U is reported for ``a``. With at most 16 observations the p-value comes
    from enumerating every relabelling of the pooled midranks; beyond that a
    tie- and continuity-corrected normal approximation is used.
    """
    n1, n2 = len(a), len(b)
    if n1 == 0 or n2 == 0:
        raise ValueError("both groups need at least one observation")
    ranks = midranks(list(a) + list(b))
    u = float(ranks[:n1].sum() - n1 * (n1 + 1) / 2)
    mean_u = n1 * n2 / 2
    if n1 + n2 <= EXACT_LIMIT:
        p, method = _exact_p(ranks, n1, u, mean_u), "exact"
    else:
        p, method = _normal_p(ranks, n1, n2, u, mean_u), "normal"
    alpha_c = bonferroni(alpha, comparisons)
    return SignificanceResult(tuple(labels), u, p, alpha_c, p < alpha_c, method)


def _exact_p(ranks, n1, u, mean_u) -> float:
    n = len(ranks)
    offset = n1 * (n1 + 1) / 2
    combos = np.array(list(itertools.combinations(range(n), n1)))
    us = ranks[combos].sum(axis=1) - offset
    observed = abs(u - mean_u)
    # tolerance absorbs half-integer midrank sums
    extreme = np.abs(us - mean_u) >= observed - 1e-9
    return float(extreme.mean())


def _normal_p(ranks, n1, n2, u, mean_u) -> float:
    n = n1 + n2
    _, tie_counts = np.unique(ranks, return_counts=True)
    tie_term = float((tie_counts**3 - tie_counts).sum()) / (n * (n - 1))
    var = n1 * n2 / 12 * ((n + 1) - tie_term)
    if var <= 0:
        return 1.0
    z = max(0.0, abs(u - mean_u) - 0.5) / math.sqrt(var)
    return min(1.0, math.erfc(z / math.sqrt(2)))


def pairwise_significance(
    samples: Mapping[str, Sequence[float]], alpha: float = 0.05
) -> list[SignificanceResult]:
    labels = list(samples)
    pairs = list(itertools.combinations(labels, 2))
    return [mann_whitney_u(samples[x], samples[y], alpha, len(pairs), (x, y)) for x, y in pairs]


@dataclass
class DivergenceReport:
    per_project: dict[str, float]
    common_token_count: dict[str, int]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def kl_divergence(p: TokenDistribution, q: TokenDistribution) -> tuple[float, int]:
    """KL(p || q) in nats over the tokens both distributions contain, renormalized."""
    common = sorted(set(p.counts) & set(q.counts))
    common = [t for t in common if p.counts[t] > 0 and q.counts[t] > 0]
    if not common:
        raise ValueError("distributions share no token")
    pc = np.array([p.counts[t] for t in common], dtype=float)
    qc = np.array([q.counts[t] for t in common], dtype=float)
    pn, qn = pc / pc.sum(), qc / qc.sum()
    kl = float(np.sum(pn * np.log(pn / qn)))
    return max(kl, 0.0), len(common)


def divergence_report(projects: Mapping[str, TokenDistribution], reference: TokenDistribution) -> DivergenceReport:
    per, counts = {}, {}
    for project, dist in sorted(projects.items()):
        per[project], counts[project] = kl_divergence(dist, reference)
    return DivergenceReport(per, counts)


def stack_trace_fraction(description: str) -> float:
    """Share of characters sitting on Java stack-frame or ``Caused by:`` lines."""
    lines = description.splitlines()
    total = sum(len(line) for line in lines)
    if total == 0:
        return 0.0
    trace = sum(len(line) for line in lines if _FRAME.match(line) or _CAUSED_BY.match(line))
    return trace / total


@dataclass
class DifficultyReport:
    easy: set[str]
    hard: set[str]
    easy_median_desc_len: int
    hard_median_desc_len: int
    easy_stack_fraction: float
    hard_stack_fraction: float

    def to_json(self) -> str:
        obj = asdict(self)
        obj["easy"], obj["hard"] = sorted(self.easy), sorted(self.hard)
        return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def difficulty_report(
    per_model_rankings: Mapping[str, Sequence[RankedResult]], bugs: Mapping[str, BugRecord]
) -> DifficultyReport:
    """Easy bugs rank in the top 7 under every model; hard ones below 10th under every model."""
    if not per_model_rankings:
        raise ValueError("no model rankings given")
    ranks: dict[str, dict[str, int]] = {}
    for model, results in per_model_rankings.items():
        ranks[model] = {r.bug_id: first_relevant_rank(r) for r in results}
    bug_sets = {frozenset(v) for v in ranks.values()}
    if len(bug_sets) != 1:
        raise ValueError("models rank different bug sets")
    bug_ids = sorted(next(iter(bug_sets)))
    easy = {b for b in bug_ids if all(m[b] <= EASY_MAX_RANK for m in ranks.values())}
    hard = {b for b in bug_ids if all(m[b] >= HARD_MIN_RANK for m in ranks.values())}

    def profile(group):
        if not group:
            return 0, 0.0
        descs = [bugs[b].description for b in sorted(group)]
        return int(statistics.median_low(len(d) for d in descs)), float(np.mean([stack_trace_fraction(d) for d in descs]))

    easy_len, easy_frac = profile(easy)
    hard_len, hard_frac = profile(hard)
    return DifficultyReport(easy, hard, easy_len, hard_len, easy_frac, hard_frac)
