"""Streamer-influence analyses over a tripartite graph.

Two instruments: a Monte Carlo estimate of purchase probability when users
face items inside (S1) versus outside (S2) the catalogs of their followed
streamers, and quantile summaries of purchase-set similarity for entity pairs
that do or do not share a streamer.

Sampling is chunked; chunk c draws from ``default_rng(seed + c)``, so a
parallel execution that merges chunk results by summation reproduces the
single-threaded run exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AnalysisError, ArgumentError, ContractError
from .graph import TripartiteGraph

SAMPLE_CHUNK = 1 << 18
PAIR_CHUNK = 1 << 16
MAX_REJECT_ROUNDS = 200
PAIR_OVERSAMPLE_LIMIT = 50  # give up when a cohort accepts < ~2% of pairs

DEFAULT_USER_LEVELS = (0.5, 0.75, 0.9, 0.99)
DEFAULT_ITEM_LEVELS = (0.98, 0.99, 0.999, 0.9999)


@dataclass
class ProbEstimate:
    setting: str
    n_samples: int
    positives: int
    probability: float
    resample_attempts: int = 0
    users_without_follows: int = 0


@dataclass
class QuantileSummary:
    levels: tuple[float, ...]
    values: list[float]
    mean: float
    n_pairs: int
    metric: str
    mode: str = ""
    cohort: str = ""


def _in_sorted(sorted_arr: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Membership mask of `values` in an ascending array."""
    if sorted_arr.size == 0:
        return np.zeros(values.shape, dtype=bool)
    pos = np.searchsorted(sorted_arr, values)
    pos_clip = np.minimum(pos, sorted_arr.size - 1)
    return (pos < sorted_arr.size) & (sorted_arr[pos_clip] == values)


def _count_common(a: np.ndarray, b: np.ndarray) -> int:
    if a.size > b.size:
        a, b = b, a
    return int(_in_sorted(b, a).sum())


class CatalogIndex:
    """Per-user views used by the Monte Carlo simulation, built lazily.

    union(u) is the set of items sold by any streamer u follows; unions are
    recomputed on demand (only their sizes are cached) to keep memory flat on
    large graphs.
    """

    def __init__(self, graph: TripartiteGraph):
        self.graph = graph
        self._union_sizes: np.ndarray | None = None

    def followed(self, u: int) -> np.ndarray:
        return self.graph.follow.forward.row(u)

    def bought(self, u: int) -> np.ndarray:
        return self.graph.buy.forward.row(u)

    def union(self, u: int) -> np.ndarray:
        streamers = self.followed(u)
        if streamers.size == 0:
            return np.empty(0, dtype=np.int64)
        rows = [self.graph.sell.forward.row(s) for s in streamers]
        return np.unique(np.concatenate(rows))

    def union_sizes(self) -> np.ndarray:
        if self._union_sizes is None:
            sizes = np.empty(self.graph.n_users, dtype=np.int64)
            for u in range(self.graph.n_users):
                sizes[u] = self.union(u).size
            self._union_sizes = sizes
        return self._union_sizes


def purchase_probability_sim(graph: TripartiteGraph, setting: str, n_mc: int,
                             seed: int, index: CatalogIndex | None = None) -> ProbEstimate:
    """Monte Carlo purchase probability under setting S1 or S2.

    Each trial samples a uniform user, then a uniform item from the union of
    the user's followed-streamer catalogs (S1) or from its complement (S2),
    and scores 1 iff the buy edge exists. Users with an empty eligible item
    set for the requested setting are re-sampled; re-draws are counted in
    `resample_attempts`. Users who follow nobody are S2-eligible with the
    full catalog.
    """
    if setting not in ("S1", "S2"):
        raise ArgumentError(f"setting must be 'S1' or 'S2', got {setting!r}")
    if n_mc <= 0:
        raise ArgumentError("n_mc must be positive")
    idx = index if index is not None else CatalogIndex(graph)
    sizes = idx.union_sizes()
    if setting == "S1":
        eligible = sizes > 0
    else:
        eligible = sizes < graph.n_items
    if not eligible.any():
        raise AnalysisError(f"no eligible (user, item) pairs for setting {setting}")

    positives = 0
    attempts = 0
    n_chunks = (n_mc + SAMPLE_CHUNK - 1) // SAMPLE_CHUNK
    for c in range(n_chunks):
        size = min(SAMPLE_CHUNK, n_mc - c * SAMPLE_CHUNK)
        rng = np.random.default_rng(seed + c)
        users = rng.integers(0, graph.n_users, size=size)
        while True:
            bad = ~eligible[users]
            n_bad = int(bad.sum())
            if n_bad == 0:
                break
            attempts += n_bad
            users[bad] = rng.integers(0, graph.n_users, size=n_bad)

        order = np.argsort(users, kind="stable")
        uniq, starts, counts = np.unique(users[order], return_index=True, return_counts=True)
        for u, k in zip(uniq, counts):
            union = idx.union(int(u))
            if setting == "S1":
                items = union[rng.integers(0, union.size, size=int(k))]
            else:
                items = rng.integers(0, graph.n_items, size=int(k))
                rounds = 0
                while True:
                    bad = _in_sorted(union, items)
                    n_bad = int(bad.sum())
                    if n_bad == 0:
                        break
                    attempts += n_bad
                    rounds += 1
                    if rounds > MAX_REJECT_ROUNDS:
                        complement = np.setdiff1d(np.arange(graph.n_items), union)
                        items[bad] = complement[rng.integers(0, complement.size, size=n_bad)]
                        break
                    items[bad] = rng.integers(0, graph.n_items, size=n_bad)
            positives += int(_in_sorted(idx.bought(int(u)), items).sum())

    return ProbEstimate(
        setting=setting,
        n_samples=n_mc,
        positives=positives,
        probability=positives / n_mc,
        resample_attempts=attempts,
        users_without_follows=int((graph.follow.forward.degrees() == 0).sum()),
    )


def default_n_mc(graph: TripartiteGraph, multiplier: int = 10) -> int:
    """Default Monte Carlo budget: a multiple of the buy-edge count."""
    return max(1, multiplier * graph.buy.n_edges)


def _pair_stats(graph: TripartiteGraph, mode: str, cohort: str,
                n_pairs: int, seed: int):
    """Sample cohort pairs and return (|A∩B|, |A|, |B|) over purchase sets.

    The cohort predicate tests the *streamer* sets (followed streamers for
    users, selling streamers for items); the similarity sets are the purchase
    sets (items bought / buying users).
    """
    if n_pairs <= 0:
        raise ArgumentError("n_pairs must be positive")
    if mode == "user_pairs":
        n_entities = graph.n_users
        streamer_row = graph.follow.forward.row
        purchase_row = graph.buy.forward.row
    elif mode == "item_pairs":
        n_entities = graph.n_items
        streamer_row = graph.sell.reverse.row
        purchase_row = graph.buy.reverse.row
    else:
        raise ArgumentError(f"mode must be 'user_pairs' or 'item_pairs', got {mode!r}")
    if cohort not in ("shared_streamer", "no_shared_streamer"):
        raise ArgumentError(f"unknown cohort {cohort!r}")
    if n_entities < 2:
        raise AnalysisError(f"{mode} needs at least two entities")
    want_shared = cohort == "shared_streamer"

    inter = np.empty(n_pairs, dtype=np.int64)
    size_a = np.empty(n_pairs, dtype=np.int64)
    size_b = np.empty(n_pairs, dtype=np.int64)
    accepted = 0
    max_chunks = (PAIR_OVERSAMPLE_LIMIT * n_pairs) // PAIR_CHUNK + 4
    for c in range(int(max_chunks)):
        if accepted >= n_pairs:
            break
        rng = np.random.default_rng(seed + c)
        cand = rng.integers(0, n_entities, size=(PAIR_CHUNK, 2))
        cand = cand[cand[:, 0] != cand[:, 1]]
        for a, b in cand:
            shared = _count_common(streamer_row(int(a)), streamer_row(int(b))) > 0
            if shared != want_shared:
                continue
            pa, pb = purchase_row(int(a)), purchase_row(int(b))
            inter[accepted] = _count_common(pa, pb)
            size_a[accepted] = pa.size
            size_b[accepted] = pb.size
            accepted += 1
            if accepted >= n_pairs:
                break
    if accepted < n_pairs:
        raise AnalysisError(
            f"cohort {cohort} for {mode} too rare: {accepted}/{n_pairs} pairs "
            f"after {PAIR_OVERSAMPLE_LIMIT}x oversampling"
        )
    return inter, size_a, size_b


def similarity_values(inter: np.ndarray, size_a: np.ndarray, size_b: np.ndarray,
                      metric: str) -> np.ndarray:
    """Cosine or Jaccard on binary sets; empty sets score 0."""
    nonzero = (size_a > 0) & (size_b > 0)
    out = np.zeros(inter.shape, dtype=np.float64)
    if metric == "cosine":
        denom = np.sqrt(size_a[nonzero] * size_b[nonzero]).astype(np.float64)
        out[nonzero] = inter[nonzero] / denom
    elif metric == "jaccard":
        union = size_a[nonzero] + size_b[nonzero] - inter[nonzero]
        out[nonzero] = inter[nonzero] / union
    else:
        raise ArgumentError(f"metric must be 'cosine' or 'jaccard', got {metric!r}")
    return out


def nearest_rank_quantiles(values: np.ndarray, levels) -> list[float]:
    """Value at rank ceil(level * n) of the ascending sample, per level."""
    for lv in levels:
        if not 0.0 < lv < 1.0:
            raise ArgumentError(f"quantile levels must be in (0, 1), got {lv}")
    srt = np.sort(values)
    n = srt.size
    if n == 0:
        raise ContractError("quantiles of an empty sample")
    return [float(srt[min(n - 1, int(np.ceil(lv * n)) - 1)]) for lv in levels]


def pair_similarity(graph: TripartiteGraph, mode: str, cohort: str, metric: str,
                    n_pairs: int, levels, seed: int) -> QuantileSummary:
    """Quantiles and mean of pairwise purchase-set similarity in a cohort.

    Pairs are rejection-sampled until n_pairs satisfy the cohort predicate
    (sharing, or not sharing, at least one streamer). The same seed draws the
    same pairs regardless of metric.
    """
    inter, size_a, size_b = _pair_stats(graph, mode, cohort, n_pairs, seed)
    vals = similarity_values(inter, size_a, size_b, metric)
    return QuantileSummary(
        levels=tuple(levels),
        values=nearest_rank_quantiles(vals, levels),
        mean=float(vals.mean()),
        n_pairs=n_pairs,
        metric=metric,
        mode=mode,
        cohort=cohort,
    )


# ---------------------------------------------------------------------------
# Combined report
# ---------------------------------------------------------------------------


def analysis_report(graph: TripartiteGraph, n_mc: int | None = None,
                    n_pairs: int = 100_000, seed: int = 0,
                    settings=("S1", "S2"),
                    user_levels=DEFAULT_USER_LEVELS,
                    item_levels=DEFAULT_ITEM_LEVELS) -> dict:
    """Full influence report: S1/S2 probabilities plus pair-similarity tables."""
    if n_mc is None:
        n_mc = default_n_mc(graph)
    index = CatalogIndex(graph)
    report: dict = {
        "settings": {},
        "user_pairs": {},
        "item_pairs": {},
        "params": {"n_mc": n_mc, "n_pairs": n_pairs, "seed": seed},
    }
    for s in settings:
        est = purchase_probability_sim(graph, s, n_mc, seed, index=index)
        report["settings"][s] = {
            "n_samples": est.n_samples,
            "positives": est.positives,
            "probability": est.probability,
            "resample_attempts": est.resample_attempts,
            "users_without_follows": est.users_without_follows,
        }
    if "S1" in report["settings"] and "S2" in report["settings"]:
        p1 = report["settings"]["S1"]["probability"]
        p2 = report["settings"]["S2"]["probability"]
        report["probability_ratio"] = p1 / p2 if p2 > 0 else None

    for mode, levels in (("user_pairs", user_levels), ("item_pairs", item_levels)):
        report[mode] = {}
        for cohort in ("shared_streamer", "no_shared_streamer"):
            stats = _pair_stats(graph, mode, cohort, n_pairs, seed)
            entry = {}
            for metric in ("cosine", "jaccard"):
                vals = similarity_values(*stats, metric)
                entry[metric] = {
                    "levels": list(levels),
                    "quantiles": nearest_rank_quantiles(vals, levels),
                    "mean": float(vals.mean()),
                    "n_pairs": n_pairs,
                }
            report[mode][cohort] = entry
    return report


def format_report(report: dict) -> str:
    """Aligned text tables for a report produced by `analysis_report`."""
    lines: list[str] = []
    lines.append("Purchase-probability simulation")
    lines.append(f"{'setting':<10}{'probability':>14}{'positives':>12}{'samples':>12}")
    for s, entry in report["settings"].items():
        lines.append(
            f"{s:<10}{entry['probability']:>14.4e}{entry['positives']:>12}{entry['n_samples']:>12}"
        )
    ratio = report.get("probability_ratio")
    if ratio is not None:
        lines.append(f"S1/S2 ratio: {ratio:.3f}")
    for mode, title in (("user_pairs", "User-pair similarity"),
                        ("item_pairs", "Item-pair similarity")):
        if not report.get(mode):
            continue
        lines.append("")
        lines.append(title)
        some = next(iter(report[mode].values()))
        levels = some["cosine"]["levels"]
        header = f"{'metric / cohort':<34}" + "".join(f"{lv:>10.4g}" for lv in levels) + f"{'mean':>12}"
        lines.append(header)
        for metric in ("cosine", "jaccard"):
            for cohort, entry in report[mode].items():
                row = entry[metric]
                cells = "".join(f"{v:>10.4f}" for v in row["quantiles"])
                lines.append(f"{metric + ' / ' + cohort:<34}{cells}{row['mean']:>12.6f}")
    return "\n".join(lines) + "\n"
