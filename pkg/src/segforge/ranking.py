"""Challenge ranking: rank-then-aggregate leaderboards, Wilcoxon
signed-rank comparisons, and bootstrap ranking stability."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .metrics import MetricRecord

METRIC_NAMES = ("dsc", "nsd", "runtime")
# runtime ranks ascending (faster is better); accuracy metrics descending
_ASCENDING = {"dsc": False, "nsd": False, "runtime": True}


@dataclass
class Leaderboard:
    """Per-cell ranks, aggregated mean ranks, and the final ordering."""

    algorithms: list[str]
    column_ranks: dict[str, dict[str, float]]  # "modality/metric" -> algo -> rank
    mean_ranks: dict[str, float]
    mean_dsc: dict[str, float]
    ordering: list[str]  # best first
    final_positions: dict[str, int]  # algo -> 1-based position
    bootstrap: dict[str, list[int]] | None = None  # algo -> freq per rank (index 0 = rank 1)
    wilcoxon_dsc_p: dict[str, float] = field(default_factory=dict)  # "a|b" -> p

    def to_json_dict(self) -> dict:
        out = {
            "algorithms": self.algorithms,
            "column_ranks": self.column_ranks,
            "mean_ranks": self.mean_ranks,
            "mean_dsc": self.mean_dsc,
            "ordering": self.ordering,
            "final_positions": self.final_positions,
        }
        if self.bootstrap is not None:
            out["bootstrap_rank_frequencies"] = self.bootstrap
        if self.wilcoxon_dsc_p:
            out["wilcoxon_dsc_p"] = self.wilcoxon_dsc_p
        return out


def tied_ranks(values) -> np.ndarray:
    """1-based ranks of values ascending, ties receiving their average rank."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


@dataclass
class _CaseStats:
    """Per-(algorithm, modality, case) aggregates for fast resampling."""

    dsc_sum: float = 0.0
    nsd_sum: float = 0.0
    n_targets: int = 0
    runtime: float = 0.0


def _aggregate(tables: dict[str, list[MetricRecord]]):
    """Group records into per-algorithm {modality: {case: _CaseStats}}."""
    stats: dict[str, dict[str, dict[str, _CaseStats]]] = {}
    case_sets: dict[str, set[str]] = {}
    for algo, records in tables.items():
        per_mod: dict[str, dict[str, _CaseStats]] = {}
        cases = set()
        for r in records:
            cell = per_mod.setdefault(r.modality, {}).setdefault(r.case, _CaseStats())
            cell.dsc_sum += r.dsc
            cell.nsd_sum += r.nsd
            cell.n_targets += 1
            # runtime repeats per target; keep the case-level value once
            cell.runtime = r.runtime_s
            cases.add(r.case)
        stats[algo] = per_mod
        case_sets[algo] = cases
    return stats, case_sets


def _column_means(stats, algorithms, counts: dict[str, int] | None):
    """Mean metric per (algorithm, modality); cases weighted by resample counts."""
    modalities = sorted({m for algo in algorithms for m in stats[algo]})
    means: dict[tuple[str, str, str], float] = {}
    populated: dict[str, set[str]] = {m: set() for m in modalities}
    for algo in algorithms:
        for modality in modalities:
            cells = stats[algo].get(modality, {})
            dsc_total = nsd_total = runtime_total = 0.0
            n_targets = n_cases = 0
            for case, cell in cells.items():
                c = 1 if counts is None else counts.get(case, 0)
                if c == 0:
                    continue
                dsc_total += c * cell.dsc_sum
                nsd_total += c * cell.nsd_sum
                runtime_total += c * cell.runtime
                n_targets += c * cell.n_targets
                n_cases += c
            if n_cases == 0:
                continue
            populated[modality].add(algo)
            means[(algo, modality, "dsc")] = dsc_total / n_targets
            means[(algo, modality, "nsd")] = nsd_total / n_targets
            means[(algo, modality, "runtime")] = runtime_total / n_cases
    return modalities, means, populated


def _per_case_ranks(stats, algorithms, modality, metric, counts):
    """Per-case ranking variant: rank algorithms on each case, then average."""
    cases = sorted(stats[algorithms[0]].get(modality, {}))
    sums = {a: 0.0 for a in algorithms}
    total = 0
    for case in cases:
        c = 1 if counts is None else counts.get(case, 0)
        if c == 0:
            continue
        values = []
        for algo in algorithms:
            cell = stats[algo][modality][case]
            if metric == "dsc":
                values.append(cell.dsc_sum / cell.n_targets)
            elif metric == "nsd":
                values.append(cell.nsd_sum / cell.n_targets)
            else:
                values.append(cell.runtime)
        ranks = tied_ranks(values) if _ASCENDING[metric] else tied_ranks([-v for v in values])
        for algo, rank in zip(algorithms, ranks):
            sums[algo] += c * rank
        total += c
    return {a: sums[a] / total for a in algorithms} if total else None


def rank_then_aggregate(
    tables: dict[str, list[MetricRecord]],
    per_case: bool = False,
    _counts: dict[str, int] | None = None,
) -> Leaderboard:
    """Rank algorithms per (modality, metric), then average ranks.

    Default ranks modality-mean scores; ``per_case`` ranks each case and
    averages the per-case ranks instead. Final ordering is ascending mean
    rank with ties broken by overall mean DSC, then algorithm id.
    """
    if len(tables) < 2:
        raise ValidationError("need at least 2 algorithms to rank")
    algorithms = sorted(tables)
    stats, case_sets = _aggregate(tables)
    reference_cases = case_sets[algorithms[0]]
    for algo in algorithms[1:]:
        if case_sets[algo] != reference_cases:
            raise ValidationError(
                f"algorithms must share a case set; {algo!r} differs from {algorithms[0]!r}"
            )

    modalities, means, populated = _column_means(stats, algorithms, _counts)
    column_ranks: dict[str, dict[str, float]] = {}
    rank_sums = {a: 0.0 for a in algorithms}
    rank_cells = {a: 0 for a in algorithms}
    for modality in modalities:
        algos_here = sorted(populated[modality])
        if not algos_here:
            continue
        for metric in METRIC_NAMES:
            if per_case:
                ranks_map = _per_case_ranks(stats, algos_here, modality, metric, _counts)
                if ranks_map is None:
                    continue
            else:
                values = [means[(a, modality, metric)] for a in algos_here]
                signed = values if _ASCENDING[metric] else [-v for v in values]
                ranks = tied_ranks(signed)
                ranks_map = dict(zip(algos_here, ranks))
            column_ranks[f"{modality}/{metric}"] = {a: float(r) for a, r in ranks_map.items()}
            for a, r in ranks_map.items():
                rank_sums[a] += r
                rank_cells[a] += 1

    mean_ranks = {a: rank_sums[a] / rank_cells[a] for a in algorithms if rank_cells[a]}
    if set(mean_ranks) != set(algorithms):
        raise ValidationError("every algorithm must appear in at least one ranked cell")

    mean_dsc = {}
    for algo in algorithms:
        total = n = 0.0
        for per_mod in stats[algo].values():
            for case, cell in per_mod.items():
                c = 1 if _counts is None else _counts.get(case, 0)
                total += c * cell.dsc_sum
                n += c * cell.n_targets
        mean_dsc[algo] = total / n if n else 0.0

    ordering = sorted(algorithms, key=lambda a: (mean_ranks[a], -mean_dsc[a], a))
    final_positions = {a: i + 1 for i, a in enumerate(ordering)}
    return Leaderboard(
        algorithms=algorithms,
        column_ranks=column_ranks,
        mean_ranks=mean_ranks,
        mean_dsc=mean_dsc,
        ordering=ordering,
        final_positions=final_positions,
    )


def wilcoxon_signed_rank(a, b) -> tuple[float, float]:
    """Two-sided Wilcoxon signed-rank test on paired scores.

    Zero differences are discarded; |differences| get average-tied ranks;
    W = min(W+, W-). Exact p by enumerating all 2^n sign assignments for
    effective n <= 12, else a normal approximation with tie and
    continuity corrections. All-zero differences give p = 1 by convention.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValidationError("paired samples must be 1D and equal length")
    if a.size < 1:
        raise ValidationError("need at least one pair")
    diffs = a - b
    diffs = diffs[diffs != 0.0]
    n = diffs.size
    if n == 0:
        return 0.0, 1.0
    ranks = tied_ranks(np.abs(diffs))
    w_plus = float(ranks[diffs > 0].sum())
    w_minus = float(ranks[diffs < 0].sum())
    w = min(w_plus, w_minus)

    if n <= 12:
        # doubled ranks are integers, so the enumeration is exact
        doubled = np.rint(2.0 * ranks).astype(np.int64)
        w2 = int(round(2.0 * w))
        signs = np.arange(2**n, dtype=np.uint32)[:, None] >> np.arange(n)[None, :] & 1
        totals = signs @ doubled
        count = int(np.count_nonzero(totals <= w2))
        p = min(1.0, 2.0 * count / float(2**n))
        return w, p

    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    tie_term = float(((tie_counts**3 - tie_counts).sum())) / 48.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term
    if var <= 0:
        return w, 1.0
    # continuity correction toward the mean; W = min(W+, W-) <= mean
    z = (w - mean + 0.5) / math.sqrt(var)
    p = min(1.0, 2.0 * 0.5 * math.erfc(-z / math.sqrt(2.0)))
    return w, p


def pairwise_wilcoxon_dsc(tables: dict[str, list[MetricRecord]]) -> dict[str, float]:
    """Wilcoxon p-values on per-case mean DSC for every algorithm pair."""
    per_algo: dict[str, dict[str, list[float]]] = {}
    for algo, records in tables.items():
        cases: dict[str, list[float]] = {}
        for r in records:
            cases.setdefault(r.case, []).append(r.dsc)
        per_algo[algo] = cases
    algorithms = sorted(tables)
    out = {}
    for i, a in enumerate(algorithms):
        for b in algorithms[i + 1 :]:
            shared = sorted(set(per_algo[a]) & set(per_algo[b]))
            xs = [float(np.mean(per_algo[a][c])) for c in shared]
            ys = [float(np.mean(per_algo[b][c])) for c in shared]
            out[f"{a}|{b}"] = wilcoxon_signed_rank(xs, ys)[1]
    return out


def bootstrap_stability(
    tables: dict[str, list[MetricRecord]],
    n_boot: int = 1000,
    seed: int = 0,
    per_case: bool = False,
) -> dict[str, list[int]]:
    """Resample cases with replacement and tally final rank frequencies.

    Replicate r uses an rng seeded by (seed, r) so results are
    reproducible and order-independent. Returns, per algorithm, the count
    of replicates at each final position (index 0 = rank 1).
    """
    board = rank_then_aggregate(tables, per_case=per_case)
    cases = sorted({r.case for records in tables.values() for r in records})
    n_algos = len(board.algorithms)
    freq = {a: [0] * n_algos for a in board.algorithms}
    for rep in range(n_boot):
        rng = np.random.default_rng((seed, rep))
        sampled = rng.integers(0, len(cases), size=len(cases))
        counts: dict[str, int] = {}
        for idx in sampled:
            case = cases[idx]
            counts[case] = counts.get(case, 0) + 1
        replicate = rank_then_aggregate(tables, per_case=per_case, _counts=counts)
        for algo, pos in replicate.final_positions.items():
            freq[algo][pos - 1] += 1
    return freq
