"""Synthetic tripartite interaction data with controllable streamer influence.

The generator mirrors the three mediation patterns the recommender exploits:
streamers sell catalogs of items, users follow streamers, and a tunable share
of each user's purchases is drawn from the catalogs of their followed
streamers. With influence_strength = 0, purchases are independent of the
follow structure, which gives the analysis module a clean negative control.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from . import graph as G

# Fixed internal exponent for the global item-popularity law (non-influenced
# purchases); catalog sizes have their own configurable exponent.
ITEM_POPULARITY_EXPONENT = 1.0
CATALOG_SIZE_SCALE_MIN = 1


@dataclass
class GenConfig:
    n_users: int = 2000
    n_items: int = 1000
    n_streamers: int = 100
    influence_strength: float = 0.8
    buys_per_user: float = 15.0
    follows_per_user: float = 8.0
    catalog_exponent: float = 1.5
    seed: int = 0

    def validate(self) -> "GenConfig":
        if not 0.0 <= self.influence_strength <= 1.0:
            raise ConfigError(f"influence_strength must be in [0, 1], got {self.influence_strength}")
        for name in ("n_users", "n_items", "n_streamers"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.buys_per_user < 1 or self.follows_per_user < 1:
            raise ConfigError("mean interaction counts must be >= 1")
        if self.catalog_exponent <= 1.0:
            raise ConfigError("catalog_exponent must exceed 1")
        return self


@dataclass
class SplitSpec:
    train_frac: float = 0.8
    val_frac: float = 0.1
    test_frac: float = 0.1

    def validate(self) -> "SplitSpec":
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if any(f <= 0 for f in fracs):
            raise ConfigError("all split fractions must be positive")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must sum to 1, got {sum(fracs)}")
        return self


@dataclass
class SplitResult:
    train: G.TripartiteGraph
    val_edges: np.ndarray   # (n, 2) buy positives held out for validation
    test_edges: np.ndarray
    report: dict = field(default_factory=dict)


def _power_law_sizes(rng: np.random.Generator, n: int, max_size: int, exponent: float) -> np.ndarray:
    """Catalog sizes ~ P(k) proportional to k^(-exponent) on 1..max_size."""
    ks = np.arange(1, max_size + 1, dtype=np.float64)
    w = ks ** (-exponent)
    w /= w.sum()
    return rng.choice(np.arange(1, max_size + 1), size=n, p=w)


def generate(config: GenConfig) -> G.TripartiteGraph:
    """Deterministic synthetic tripartite graph; buy edges carry timestamps.

    Streamer catalogs are power-law sized uniform item subsets; follows are
    popularity-proportional (weight = catalog size); each purchase event comes
    from the union of the user's followed catalogs with probability
    influence_strength, otherwise from a global Zipf item-popularity law.
    Timestamps are the global purchase-event counter.
    """
    cfg = config.validate()
    rng = np.random.default_rng([cfg.seed, 0xD47A])

    # 1. catalogs: uniform membership so that catalog inclusion carries no
    # popularity signal (keeps the influence_strength=0 control unbiased)
    sizes = _power_law_sizes(rng, cfg.n_streamers, cfg.n_items, cfg.catalog_exponent)
    catalogs = [np.sort(rng.choice(cfg.n_items, size=int(s), replace=False)) for s in sizes]
    sell_edges = np.array(
        [(s, i) for s in range(cfg.n_streamers) for i in catalogs[s]], dtype=np.int64
    )

    # 2. follows: count ~ Poisson clipped to >= 1, streamers weighted by
    # catalog size, sampled without replacement
    weight = sizes.astype(np.float64)
    weight /= weight.sum()
    follow_pairs = []
    followed: list[np.ndarray] = []
    for u in range(cfg.n_users):
        k = max(1, int(rng.poisson(cfg.follows_per_user)))
        k = min(k, cfg.n_streamers)
        chosen = np.sort(rng.choice(cfg.n_streamers, size=k, replace=False, p=weight))
        followed.append(chosen)
        follow_pairs.extend((u, s) for s in chosen)
    follow_edges = np.array(follow_pairs, dtype=np.int64)

    # 3. buys: a globally ordered event stream; the event index is the timestamp
    unions = [
        np.unique(np.concatenate([catalogs[s] for s in followed[u]]))
        for u in range(cfg.n_users)
    ]
    pop = (np.arange(1, cfg.n_items + 1, dtype=np.float64)) ** (-ITEM_POPULARITY_EXPONENT)
    pop /= pop.sum()
    counts = np.maximum(1, rng.poisson(cfg.buys_per_user, size=cfg.n_users))
    event_users = rng.permutation(np.repeat(np.arange(cfg.n_users), counts))
    n_events = event_users.size
    influenced = rng.random(n_events) < cfg.influence_strength
    global_items = rng.choice(cfg.n_items, size=n_events, p=pop)
    union_picks = rng.random(n_events)

    first_ts: dict[tuple[int, int], int] = {}
    for t in range(n_events):
        u = int(event_users[t])
        if influenced[t] and unions[u].size:
            item = int(unions[u][int(union_picks[t] * unions[u].size)])
        else:
            item = int(global_items[t])
        key = (u, item)
        if key not in first_ts:
            first_ts[key] = t

    buy_edges = np.array(list(first_ts.keys()), dtype=np.int64).reshape(-1, 2)
    buy_ts = np.array(list(first_ts.values()), dtype=np.int64)

    id_maps = {
        G.USER: G.IdMap.from_raw_ids([f"u{n}" for n in range(cfg.n_users)]),
        G.ITEM: G.IdMap.from_raw_ids([f"i{n}" for n in range(cfg.n_items)]),
        G.STREAMER: G.IdMap.from_raw_ids([f"s{n}" for n in range(cfg.n_streamers)]),
    }
    return G.build_tripartite(cfg.n_users, cfg.n_items, cfg.n_streamers,
                              buy_edges, follow_edges, sell_edges,
                              buy_timestamps=buy_ts, id_maps=id_maps)


def chronological_split(graph: G.TripartiteGraph, spec: SplitSpec) -> SplitResult:
    """Split buy edges by timestamp; follow/sell go wholly to training.

    Buy edges are ordered by timestamp (ties broken by stable forward-CSR
    order); the first train_frac form the training graph, the next val_frac
    the validation positives, the rest the test positives. Validation/test
    edges whose user or item has zero degree in the training graph are
    dropped and counted in the report.
    """
    spec.validate()
    if graph.buy.timestamps is None:
        raise ContractError("chronological_split needs timestamps on buy edges")
    edges = graph.buy.forward_edges()
    ts = graph.buy.timestamps
    order = np.argsort(ts, kind="stable")
    edges = edges[order]
    ts = ts[order]
    n = edges.shape[0]
    b1 = int(np.floor(n * spec.train_frac))
    b2 = int(np.floor(n * (spec.train_frac + spec.val_frac)))
    train_e, train_ts = edges[:b1], ts[:b1]
    val_e, test_e = edges[b1:b2], edges[b2:]

    train = G.build_tripartite(
        graph.n_users, graph.n_items, graph.n_streamers,
        train_e, graph.follow.forward_edges(), graph.sell.forward_edges(),
        buy_timestamps=train_ts, id_maps=graph.id_maps,
    )

    user_seen = (train.buy.forward.degrees() > 0) | (train.follow.forward.degrees() > 0)
    item_seen = (train.buy.reverse.degrees() > 0) | (train.sell.reverse.degrees() > 0)

    def keep(e: np.ndarray) -> np.ndarray:
        if e.size == 0:
            return np.zeros(0, dtype=bool)
        return user_seen[e[:, 0]] & item_seen[e[:, 1]]

    val_mask, test_mask = keep(val_e), keep(test_e)
    dropped = int((~val_mask).sum() + (~test_mask).sum())
    val_e, test_e = val_e[val_mask], test_e[test_mask]
    report = {
        "train_count": int(b1),
        "val_count": int(val_e.shape[0]),
        "test_count": int(test_e.shape[0]),
        "dropped_count": dropped,
    }
    return SplitResult(train, val_e, test_e, report)


def write_tsv(graph: G.TripartiteGraph, out_dir: str) -> None:
    """Emit buy.tsv / follow.tsv / sell.tsv in the ingestion layout."""
    os.makedirs(out_dir, exist_ok=True)
    maps = graph.id_maps
    if maps is None:
        raise ContractError("graph carries no raw id maps; cannot emit TSV")

    def raw(kind: str, idx: int) -> str:
        return maps[kind].decode(idx)

    specs = [
        ("buy.tsv", graph.buy, G.USER, G.ITEM),
        ("follow.tsv", graph.follow, G.USER, G.STREAMER),
        ("sell.tsv", graph.sell, G.STREAMER, G.ITEM),
    ]
    for fname, g, lk, rk in specs:
        edges = g.forward_edges()
        with open(os.path.join(out_dir, fname), "w", encoding="utf-8") as fh:
            for j in range(edges.shape[0]):
                l, r = edges[j]
                if g.timestamps is not None:
                    fh.write(f"{raw(lk, l)}\t{raw(rk, r)}\t{g.timestamps[j]}\n")
                else:
                    fh.write(f"{raw(lk, l)}\t{raw(rk, r)}\n")


def write_split(split: SplitResult, out_dir: str) -> None:
    """Emit the training graph TSVs plus val/test buy lists and a manifest."""
    os.makedirs(out_dir, exist_ok=True)
    write_tsv(split.train, os.path.join(out_dir, "train"))
    maps = split.train.id_maps

    def dump(edges: np.ndarray, fname: str) -> None:
        with open(os.path.join(out_dir, fname), "w", encoding="utf-8") as fh:
            for u, i in edges:
                fh.write(f"{maps[G.USER].decode(u)}\t{maps[G.ITEM].decode(i)}\n")

    dump(split.val_edges, "val.tsv")
    dump(split.test_edges, "test.tsv")
    with open(os.path.join(out_dir, "split_manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(split.report, fh, indent=2, sort_keys=True)
        fh.write("\n")
