"""Mini-batch construction: negative sampling and layered neighbor sampling.

A batch holds positive/negative task edges plus, per bipartite graph, a chain
of layer blocks. Blocks are built outside-in from the shared per-kind seed
sets (all endpoints of the batch's task edges), so the three bipartite
expansions overlap on as many nodes as possible. `blocks[0]` is the widest
(consumed first by the encoder); the destination ids of every block are a
prefix of its source ids, and the final block's destinations are exactly the
seed list.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .errors import ArgumentError, ContractError
from .graph import RELATION_KINDS, BipartiteGraph, TripartiteGraph, degree_quantile

FULL_FANOUT = 1 << 30
MAX_RESAMPLE_ROUNDS = 1000


@dataclass
class FanoutPlan:
    """Per (relation, direction) neighbor cap used at every layer."""

    fanouts: dict[int, tuple[int, int]]  # rel -> (forward cap, reverse cap)

    def cap(self, rel: int, direction: str) -> int:
        fwd, rev = self.fanouts[rel]
        return fwd if direction == "forward" else rev

    @classmethod
    def from_quantile(cls, graph: TripartiteGraph, p: float = 0.9,
                      relations=(0, 1, 2)) -> "FanoutPlan":
        fanouts = {}
        for rel in relations:
            g = graph.relation(rel)
            fanouts[rel] = (
                degree_quantile(g, "forward", p),
                degree_quantile(g, "reverse", p),
            )
        return cls(fanouts)

    @classmethod
    def full(cls, relations=(0, 1, 2)) -> "FanoutPlan":
        return cls({rel: (FULL_FANOUT, FULL_FANOUT) for rel in relations})


@dataclass
class LayerBlock:
    """One sampled propagation layer of a bipartite graph.

    Node ids live in the union space (left nodes first, then right nodes
    offset by left_count). `dst_ids` is a prefix of `src_ids`; `adj` is the
    0/1 sampled sub-adjacency (|dst| x |src|, no self loops). Degree vectors
    carry full-graph union degrees for normalization.
    """

    src_ids: np.ndarray
    dst_ids: np.ndarray
    adj: sparse.csr_array
    src_degree: np.ndarray
    dst_degree: np.ndarray
    _norm_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def norm_adjacency(self, self_loops: bool) -> sparse.csr_array:
        """Symmetric-normalized sampled sub-adjacency, full-graph degrees.

        With self loops the degrees are shifted by one and a diagonal block
        (dst x dst prefix of src) is added; without, isolated nodes get
        all-zero rows.
        """
        if self_loops in self._norm_cache:
            return self._norm_cache[self_loops]
        coo = self.adj.tocoo()
        rows, cols = coo.row, coo.col
        if self_loops:
            d_dst = self.dst_degree + 1.0
            d_src = self.src_degree + 1.0
            rows = np.concatenate([rows, np.arange(self.dst_ids.size)])
            cols = np.concatenate([cols, np.arange(self.dst_ids.size)])
        else:
            d_dst = self.dst_degree
            d_src = self.src_degree
        with np.errstate(divide="ignore"):
            inv_dst = np.where(d_dst > 0, 1.0 / np.sqrt(d_dst), 0.0)
            inv_src = np.where(d_src > 0, 1.0 / np.sqrt(d_src), 0.0)
        vals = inv_dst[rows] * inv_src[cols]
        mat = sparse.csr_array((vals, (rows, cols)),
                               shape=(self.dst_ids.size, self.src_ids.size))
        self._norm_cache[self_loops] = mat
        return mat


@dataclass
class MiniBatch:
    """Task edges plus sampled blocks for one optimization step."""

    task_edges: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]]  # task -> (left, right, label)
    seed_nodes: dict[str, np.ndarray]  # kind -> ascending unique ids
    blocks: dict[int, list[LayerBlock]]  # relation -> outside-in chain
    skipped_negative_sources: dict[int, int] = field(default_factory=dict)


class KnownPositiveSet:
    """Observed (left, right) pairs of one relation, packed for O(log n) lookup.

    Pairs are encoded as left * right_count + right and kept sorted, so a
    whole batch of candidate negatives is screened with one searchsorted.
    """

    def __init__(self, edges: np.ndarray, left_count: int, right_count: int):
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        self.right_count = right_count
        self.keys = np.sort(edges[:, 0] * right_count + edges[:, 1])
        self.left_degree = np.bincount(edges[:, 0], minlength=left_count)

    @classmethod
    def from_bipartite(cls, graph: BipartiteGraph) -> "KnownPositiveSet":
        return cls(graph.forward_edges(), graph.left_count, graph.right_count)

    def contains(self, lefts: np.ndarray, rights: np.ndarray) -> np.ndarray:
        q = lefts * self.right_count + rights
        pos = np.searchsorted(self.keys, q)
        pos_c = np.minimum(pos, self.keys.size - 1)
        return (pos < self.keys.size) & (self.keys[pos_c] == q)


def sample_negatives(positives: np.ndarray, known: KnownPositiveSet, right_count: int,
                     ratio: int, seed) -> tuple[np.ndarray, int]:
    """Draw `ratio` uniform unobserved right ids per positive edge.

    Draws colliding with the observed set are re-drawn. Left nodes whose
    observed set exhausts the right side are skipped and counted. Returns
    ((m, 2) negatives, skipped source count).
    """
    if ratio < 1:
        raise ArgumentError(f"negative ratio must be >= 1, got {ratio}")
    if right_count != known.right_count:
        raise ContractError("right_count disagrees with the known-positive set")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    positives = np.asarray(positives, dtype=np.int64).reshape(-1, 2)
    if positives.size == 0:
        return np.empty((0, 2), dtype=np.int64), 0

    saturated_mask = known.left_degree[positives[:, 0]] >= right_count
    n_skipped = int(np.unique(positives[saturated_mask, 0]).size)
    kept = positives[~saturated_mask]

    lefts = np.repeat(kept[:, 0], ratio)
    rights = rng.integers(0, right_count, size=lefts.size)
    for _ in range(MAX_RESAMPLE_ROUNDS):
        bad = known.contains(lefts, rights)
        n_bad = int(bad.sum())
        if n_bad == 0:
            break
        rights[bad] = rng.integers(0, right_count, size=n_bad)
    else:
        raise ContractError("negative sampling failed to converge")
    negatives = np.column_stack([lefts, rights])
    return negatives, n_skipped


def _gather_rows_capped(csr, local_rows: np.ndarray, positions: np.ndarray, cap: int,
                        offset: int, rng: np.random.Generator,
                        out_rows: list, out_cols: list) -> None:
    """Append (frontier position, neighbor union id) pairs, sampling rows over cap."""
    if local_rows.size == 0:
        return
    deg = csr.indptr[local_rows + 1] - csr.indptr[local_rows]
    light = deg <= cap
    counts = deg[light]
    total = int(counts.sum())
    if total:
        starts = csr.indptr[local_rows[light]]
        shift = np.repeat(starts - np.concatenate([[0], np.cumsum(counts)[:-1]]), counts)
        out_rows.append(np.repeat(positions[light], counts))
        out_cols.append(csr.indices[shift + np.arange(total)] + offset)
    for p, r in zip(positions[~light], local_rows[~light]):
        row = csr.indices[csr.indptr[r]:csr.indptr[r + 1]]
        take = np.sort(rng.permutation(row.size)[:cap])
        out_rows.append(np.full(cap, p, dtype=np.int64))
        out_cols.append(row[take] + offset)


def _expand_layer(graph: BipartiteGraph, frontier: np.ndarray,
                  fwd_cap: int, rev_cap: int, rng: np.random.Generator) -> LayerBlock:
    """Sample up to cap neighbors (without replacement) for each frontier node."""
    lc = graph.left_count
    positions = np.arange(frontier.size, dtype=np.int64)
    is_left = frontier < lc
    out_rows: list[np.ndarray] = []
    out_cols: list[np.ndarray] = []
    _gather_rows_capped(graph.forward, frontier[is_left], positions[is_left],
                        fwd_cap, lc, rng, out_rows, out_cols)
    _gather_rows_capped(graph.reverse, frontier[~is_left] - lc, positions[~is_left],
                        rev_cap, 0, rng, out_rows, out_cols)
    if out_rows:
        rows = np.concatenate(out_rows)
        cols_gid = np.concatenate(out_cols)
    else:
        rows = np.empty(0, dtype=np.int64)
        cols_gid = np.empty(0, dtype=np.int64)

    lut = np.full(graph.union_count(), -1, dtype=np.int64)
    lut[frontier] = positions
    uniq = np.unique(cols_gid)
    extra = uniq[lut[uniq] < 0]
    src_ids = np.concatenate([frontier, extra])
    lut[extra] = np.arange(frontier.size, src_ids.size)
    adj = sparse.csr_array(
        (np.ones(rows.size), (rows, lut[cols_gid])),
        shape=(frontier.size, src_ids.size),
    )
    deg = graph.union_degrees()
    return LayerBlock(
        src_ids=src_ids,
        dst_ids=frontier.copy(),
        adj=adj,
        src_degree=deg[src_ids],
        dst_degree=deg[frontier],
    )


def make_full_blocks(graph: BipartiteGraph, n_layers: int) -> list[LayerBlock]:
    """No-sampling block chain over the whole union-node set.

    All layers share one block whose source and destination are every node,
    so encoder output over these blocks equals the full-graph computation.
    """
    ids = np.arange(graph.union_count(), dtype=np.int64)
    deg = graph.union_degrees()
    edges = graph.forward_edges()
    rows = np.concatenate([edges[:, 0], edges[:, 1] + graph.left_count])
    cols = np.concatenate([edges[:, 1] + graph.left_count, edges[:, 0]])
    adj = sparse.csr_array(
        (np.ones(rows.size), (rows, cols)), shape=(ids.size, ids.size)
    )
    block = LayerBlock(src_ids=ids, dst_ids=ids, adj=adj,
                       src_degree=deg, dst_degree=deg)
    return [block] * n_layers


def relation_seed_union(graph: BipartiteGraph, seeds: dict[str, np.ndarray]) -> np.ndarray:
    """Seed list in union space: left-kind seeds then offset right-kind seeds."""
    left = seeds.get(graph.left_kind, np.empty(0, dtype=np.int64))
    right = seeds.get(graph.right_kind, np.empty(0, dtype=np.int64))
    return np.concatenate([left, right + graph.left_count])


def build_blocks(graph: TripartiteGraph, seed_nodes: dict[str, np.ndarray],
                 fanout: FanoutPlan, n_layers: int, seed,
                 relations=(0, 1, 2)) -> dict[int, list[LayerBlock]]:
    """Layered sampled blocks for each requested bipartite graph.

    Expansion runs outside-in: the last block's destinations are the seed
    union; each step appends sampled neighbors to form the next frontier.
    Deterministic for a given seed.
    """
    if n_layers < 1:
        raise ArgumentError("n_layers must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out: dict[int, list[LayerBlock]] = {}
    for rel in sorted(relations):
        g = graph.relation(rel)
        frontier = relation_seed_union(g, seed_nodes)
        chain: list[LayerBlock] = []
        for _ in range(n_layers):
            block = _expand_layer(g, frontier, fanout.cap(rel, "forward"),
                                  fanout.cap(rel, "reverse"), rng)
            chain.append(block)
            frontier = block.src_ids
        chain.reverse()
        out[rel] = chain
    return out


def make_minibatch(graph: TripartiteGraph, task_positives: dict[int, np.ndarray],
                   known_positives: dict[int, KnownPositiveSet], negative_ratio: int,
                   fanout: FanoutPlan, n_layers: int, seed,
                   relations=(0, 1, 2)) -> MiniBatch:
    """Assemble one batch: negatives, shared seeds, blocks.

    `task_positives` maps task id (0 = buy, 1 = follow) to its positive edge
    array; `known_positives[task]` holds the observed edges used for
    negative-collision rejection.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    task_edges: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
    skipped: dict[int, int] = {}
    seeds_by_kind: dict[str, list[np.ndarray]] = {}
    task_relation = {0: 0, 1: 1}  # buy pairs live in relation 0, follow in 1
    for task in sorted(task_positives):
        pos = np.asarray(task_positives[task], dtype=np.int64).reshape(-1, 2)
        if pos.shape[0] == 0:
            raise ContractError(f"task {task} has an empty positive batch")
        rel = task_relation[task]
        left_kind, right_kind = RELATION_KINDS[rel]
        right_count = graph.count(right_kind)
        neg, n_skip = sample_negatives(pos, known_positives[task], right_count,
                                       negative_ratio, rng)
        skipped[task] = n_skip
        lefts = np.concatenate([pos[:, 0], neg[:, 0]])
        rights = np.concatenate([pos[:, 1], neg[:, 1]])
        labels = np.concatenate([np.ones(pos.shape[0]), np.zeros(neg.shape[0])])
        task_edges[task] = (lefts, rights, labels)
        seeds_by_kind.setdefault(left_kind, []).append(lefts)
        seeds_by_kind.setdefault(right_kind, []).append(rights)
    seed_nodes = {
        kind: np.unique(np.concatenate(parts)) for kind, parts in seeds_by_kind.items()
    }
    blocks = build_blocks(graph, seed_nodes, fanout, n_layers, rng, relations)
    return MiniBatch(task_edges=task_edges, seed_nodes=seed_nodes, blocks=blocks,
                     skipped_negative_sources=skipped)
