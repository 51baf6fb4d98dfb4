"""Heterogeneous tripartite interaction graph.

Three binarized bipartite graphs (buy: user-item, follow: user-streamer,
sell: streamer-item), each stored with dual-direction CSR adjacency so both
endpoints can expand neighborhoods cheaply. Graphs are immutable once built;
duplicate interactions collapse to a single edge at ingestion time, keeping
the earliest timestamp.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .errors import ArgumentError, ContractError, GraphIndexError, ParseError

USER = "user"
ITEM = "item"
STREAMER = "streamer"
KINDS = (USER, ITEM, STREAMER)

# relation id -> (left kind, right kind); ids 0/1/2 = buy/follow/sell
RELATION_KINDS = {0: (USER, ITEM), 1: (USER, STREAMER), 2: (STREAMER, ITEM)}
RELATION_NAMES = {0: "buy", 1: "follow", 2: "sell"}
RELATION_IDS = {v: k for k, v in RELATION_NAMES.items()}

_SNAPSHOT_MAGIC = b"LSECGRPH"
_SNAPSHOT_VERSION = 1


class IdMap:
    """Bijection between raw string ids and dense 0-based indices."""

    def __init__(self) -> None:
        self._to_index: dict[str, int] = {}
        self._to_raw: list[str] = []

    def __len__(self) -> int:
        return len(self._to_raw)

    def encode(self, raw: str) -> int:
        idx = self._to_index.get(raw)
        if idx is None:
            idx = len(self._to_raw)
            self._to_index[raw] = idx
            self._to_raw.append(raw)
        return idx

    def decode(self, index: int) -> str:
        return self._to_raw[index]

    def raw_ids(self) -> list[str]:
        return list(self._to_raw)

    @classmethod
    def from_raw_ids(cls, raw_ids: list[str]) -> "IdMap":
        m = cls()
        for r in raw_ids:
            m.encode(r)
        return m


@dataclass
class Csr:
    """Row-compressed adjacency structure (no edge values)."""

    n_rows: int
    n_cols: int
    indptr: np.ndarray
    indices: np.ndarray

    def row(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    @property
    def nnz(self) -> int:
        return int(self.indptr[-1])

    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)


@dataclass
class BipartiteGraph:
    """Binarized bipartite interactions with both CSR orientations.

    `forward` is left->right, `reverse` right->left; they hold the same edge
    multiset. `timestamps`, when present, aligns with forward edge order.
    """

    left_kind: str
    right_kind: str
    left_count: int
    right_count: int
    forward: Csr
    reverse: Csr
    timestamps: np.ndarray | None = None
    _union_degrees: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def n_edges(self) -> int:
        return self.forward.nnz

    def union_count(self) -> int:
        return self.left_count + self.right_count

    def union_degrees(self) -> np.ndarray:
        """Degrees over the (left + right) node union, cached."""
        if self._union_degrees is None:
            self._union_degrees = np.concatenate(
                [self.forward.degrees(), self.reverse.degrees()]
            ).astype(np.float64)
        return self._union_degrees

    def forward_edges(self) -> np.ndarray:
        """(n_edges, 2) array of (left, right) pairs in forward CSR order."""
        left = np.repeat(np.arange(self.left_count), self.forward.degrees())
        return np.column_stack([left, self.forward.indices])


@dataclass
class TripartiteGraph:
    n_users: int
    n_items: int
    n_streamers: int
    buy: BipartiteGraph
    follow: BipartiteGraph
    sell: BipartiteGraph
    id_maps: dict[str, IdMap] | None = None

    def relation(self, rel: int) -> BipartiteGraph:
        try:
            return (self.buy, self.follow, self.sell)[rel]
        except IndexError:
            raise ArgumentError(f"unknown relation id {rel}") from None

    def count(self, kind: str) -> int:
        return {USER: self.n_users, ITEM: self.n_items, STREAMER: self.n_streamers}[kind]

    def counts(self) -> dict[str, int]:
        return {USER: self.n_users, ITEM: self.n_items, STREAMER: self.n_streamers}


def _parse_tsv(path: str, want_ts: bool | None = None):
    """Yield (left_raw, right_raw, ts_or_None); column arity must be uniform."""
    arity = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) not in (2, 3):
                raise ParseError(f"{path}:{lineno}: expected 2 or 3 tab-separated fields")
            if arity is None:
                arity = len(parts)
            elif len(parts) != arity:
                raise ParseError(f"{path}:{lineno}: inconsistent column count")
            ts = None
            if len(parts) == 3:
                try:
                    ts = int(parts[2])
                except ValueError:
                    raise ParseError(f"{path}:{lineno}: timestamp {parts[2]!r} is not an integer") from None
            yield parts[0], parts[1], ts


class TsvLoader:
    """Loads the three-file TSV layout with persistent per-kind id maps.

    The same loader instance must be used for all files of one dataset so that
    e.g. a user id seen in the buy file maps to the same index in the follow
    file.
    """

    def __init__(self) -> None:
        self.maps: dict[str, IdMap] = {k: IdMap() for k in KINDS}

    def load_edges(self, path: str, schema: str):
        """Read one TSV; returns (edges (n,2) int64, timestamps or None).

        Duplicate (left, right) lines collapse to one edge keeping the
        earliest timestamp (first occurrence when untimed).
        """
        if schema not in RELATION_IDS:
            raise ArgumentError(f"unknown schema {schema!r}")
        left_kind, right_kind = RELATION_KINDS[RELATION_IDS[schema]]
        lmap, rmap = self.maps[left_kind], self.maps[right_kind]
        seen: dict[tuple[int, int], int | None] = {}
        order: list[tuple[int, int]] = []
        has_ts = False
        for lraw, rraw, ts in _parse_tsv(path):
            key = (lmap.encode(lraw), rmap.encode(rraw))
            if ts is not None:
                has_ts = True
            if key not in seen:
                seen[key] = ts
                order.append(key)
            elif ts is not None and (seen[key] is None or ts < seen[key]):
                seen[key] = ts
        edges = np.array(order, dtype=np.int64).reshape(-1, 2)
        if not has_ts:
            return edges, None
        stamps = np.array([seen[k] for k in order], dtype=np.int64)
        return edges, stamps

    def load_tripartite(self, buy_path: str, follow_path: str, sell_path: str) -> TripartiteGraph:
        buy_e, buy_ts = self.load_edges(buy_path, "buy")
        follow_e, _ = self.load_edges(follow_path, "follow")
        sell_e, _ = self.load_edges(sell_path, "sell")
        n_users = len(self.maps[USER])
        n_items = len(self.maps[ITEM])
        n_streamers = len(self.maps[STREAMER])
        return TripartiteGraph(
            n_users=n_users, n_items=n_items, n_streamers=n_streamers,
            buy=build_bipartite(buy_e, n_users, n_items, USER, ITEM, buy_ts),
            follow=build_bipartite(follow_e, n_users, n_streamers, USER, STREAMER),
            sell=build_bipartite(sell_e, n_streamers, n_items, STREAMER, ITEM),
            id_maps=self.maps,
        )


def load_tripartite_dir(path: str) -> TripartiteGraph:
    """Load `buy.tsv`, `follow.tsv`, `sell.tsv` from a directory."""
    import os

    return TsvLoader().load_tripartite(
        os.path.join(path, "buy.tsv"),
        os.path.join(path, "follow.tsv"),
        os.path.join(path, "sell.tsv"),
    )


def _csr_from_sorted(edges: np.ndarray, n_rows: int, n_cols: int) -> Csr:
    counts = np.bincount(edges[:, 0], minlength=n_rows)
    indptr = np.zeros(n_rows + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    return Csr(n_rows, n_cols, indptr, edges[:, 1].copy())


def build_bipartite(edges: np.ndarray, left_count: int, right_count: int,
                    left_kind: str = USER, right_kind: str = ITEM,
                    timestamps: np.ndarray | None = None) -> BipartiteGraph:
    """Build both CSR orientations from an edge list.

    Edges must be unique (dedup happens at ingestion); endpoints are range
    checked. Forward rows come out sorted; timestamps are permuted alongside.
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.size:
        bad = np.flatnonzero(
            (edges[:, 0] < 0) | (edges[:, 0] >= left_count)
            | (edges[:, 1] < 0) | (edges[:, 1] >= right_count)
        )
        if bad.size:
            l, r = edges[bad[0]]
            raise GraphIndexError(
                f"edge ({l}, {r}) outside counts {left_count}x{right_count}"
            )
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    edges = edges[order]
    if edges.shape[0] > 1 and np.any(np.all(edges[1:] == edges[:-1], axis=1)):
        dup = np.flatnonzero(np.all(edges[1:] == edges[:-1], axis=1))[0]
        raise ContractError(f"duplicate edge ({edges[dup][0]}, {edges[dup][1]})")
    ts = None
    if timestamps is not None:
        ts = np.asarray(timestamps, dtype=np.int64)[order]
    forward = _csr_from_sorted(edges, left_count, right_count)
    rev_order = np.lexsort((edges[:, 0], edges[:, 1]))
    rev_edges = edges[rev_order][:, ::-1]
    reverse = _csr_from_sorted(rev_edges, right_count, left_count)
    return BipartiteGraph(left_kind, right_kind, left_count, right_count,
                          forward, reverse, ts)


def build_tripartite(n_users: int, n_items: int, n_streamers: int,
                     buy_edges: np.ndarray, follow_edges: np.ndarray,
                     sell_edges: np.ndarray, buy_timestamps: np.ndarray | None = None,
                     id_maps: dict[str, IdMap] | None = None) -> TripartiteGraph:
    return TripartiteGraph(
        n_users, n_items, n_streamers,
        buy=build_bipartite(buy_edges, n_users, n_items, USER, ITEM, buy_timestamps),
        follow=build_bipartite(follow_edges, n_users, n_streamers, USER, STREAMER),
        sell=build_bipartite(sell_edges, n_streamers, n_items, STREAMER, ITEM),
        id_maps=id_maps,
    )


def degree_quantile(graph: BipartiteGraph, direction: str, p: float) -> int:
    """Nearest-rank quantile of source-side degrees; never below 1.

    The value at rank ceil(p*n) of the ascending degree multiset, where the
    source side is left nodes for "forward" and right nodes for "reverse".
    """
    if not 0.0 < p <= 1.0:
        raise ArgumentError(f"quantile fraction must be in (0, 1], got {p}")
    if direction == "forward":
        degs = graph.forward.degrees()
    elif direction == "reverse":
        degs = graph.reverse.degrees()
    else:
        raise ArgumentError(f"unknown direction {direction!r}")
    if degs.size == 0:
        raise ContractError("degree_quantile on a graph with no source nodes")
    rank = int(np.ceil(p * degs.size))
    value = int(np.sort(degs)[rank - 1])
    return max(1, value)


def normalized_blocks(graph: BipartiteGraph, self_loops: bool) -> sparse.csr_array:
    """Symmetric-normalized block adjacency over the (left + right) union.

    Returns D^{-1/2} (A [+ I]) D^{-1/2} where A is [[0, A_lr], [A_lr^T, 0]].
    Without self loops, rows/columns of isolated nodes are identically zero
    (their normalization term is defined as 0 rather than dividing by zero).
    """
    n = graph.union_count()
    edges = graph.forward_edges()
    rows = np.concatenate([edges[:, 0], edges[:, 1] + graph.left_count])
    cols = np.concatenate([edges[:, 1] + graph.left_count, edges[:, 0]])
    deg = graph.union_degrees().copy()
    if self_loops:
        deg += 1.0
        rows = np.concatenate([rows, np.arange(n)])
        cols = np.concatenate([cols, np.arange(n)])
    with np.errstate(divide="ignore"):
        dinv = np.where(deg > 0, 1.0 / np.sqrt(deg), 0.0)
    vals = dinv[rows] * dinv[cols]
    mat = sparse.csr_array((vals, (rows, cols)), shape=(n, n))
    mat.sort_indices()
    return mat


# ---------------------------------------------------------------------------
# Binary snapshot (fast reload of a built graph)
# ---------------------------------------------------------------------------


def _write_array(fh, arr: np.ndarray) -> None:
    a = np.ascontiguousarray(arr, dtype="<i8")
    fh.write(struct.pack("<Q", a.size))
    fh.write(a.tobytes())


def _read_array(fh) -> np.ndarray:
    (size,) = struct.unpack("<Q", fh.read(8))
    return np.frombuffer(fh.read(8 * size), dtype="<i8").astype(np.int64)


def _write_strings(fh, items: list[str]) -> None:
    fh.write(struct.pack("<Q", len(items)))
    for s in items:
        b = s.encode("utf-8")
        fh.write(struct.pack("<I", len(b)))
        fh.write(b)


def _read_strings(fh) -> list[str]:
    (count,) = struct.unpack("<Q", fh.read(8))
    out = []
    for _ in range(count):
        (n,) = struct.unpack("<I", fh.read(4))
        out.append(fh.read(n).decode("utf-8"))
    return out


def save_snapshot(graph: TripartiteGraph, path: str) -> None:
    """Versioned little-endian snapshot: counts, CSR arrays, optional ids."""
    with open(path, "wb") as fh:
        fh.write(_SNAPSHOT_MAGIC)
        fh.write(struct.pack("<I", _SNAPSHOT_VERSION))
        fh.write(struct.pack("<QQQ", graph.n_users, graph.n_items, graph.n_streamers))
        for rel in (0, 1, 2):
            g = graph.relation(rel)
            _write_array(fh, g.forward.indptr)
            _write_array(fh, g.forward.indices)
            _write_array(fh, g.reverse.indptr)
            _write_array(fh, g.reverse.indices)
            fh.write(struct.pack("<B", 1 if g.timestamps is not None else 0))
            if g.timestamps is not None:
                _write_array(fh, g.timestamps)
        fh.write(struct.pack("<B", 1 if graph.id_maps is not None else 0))
        if graph.id_maps is not None:
            for kind in KINDS:
                _write_strings(fh, graph.id_maps[kind].raw_ids())


def load_snapshot(path: str) -> TripartiteGraph:
    with open(path, "rb") as fh:
        if fh.read(8) != _SNAPSHOT_MAGIC:
            raise ParseError(f"{path}: not a graph snapshot")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _SNAPSHOT_VERSION:
            raise ParseError(f"{path}: unsupported snapshot version {version}")
        n_users, n_items, n_streamers = struct.unpack("<QQQ", fh.read(24))
        counts = {USER: n_users, ITEM: n_items, STREAMER: n_streamers}
        graphs = []
        for rel in (0, 1, 2):
            lk, rk = RELATION_KINDS[rel]
            fwd = Csr(counts[lk], counts[rk], _read_array(fh), _read_array(fh))
            rev = Csr(counts[rk], counts[lk], _read_array(fh), _read_array(fh))
            (has_ts,) = struct.unpack("<B", fh.read(1))
            ts = _read_array(fh) if has_ts else None
            graphs.append(BipartiteGraph(lk, rk, counts[lk], counts[rk], fwd, rev, ts))
        (has_ids,) = struct.unpack("<B", fh.read(1))
        id_maps = None
        if has_ids:
            id_maps = {kind: IdMap.from_raw_ids(_read_strings(fh)) for kind in KINDS}
    return TripartiteGraph(n_users, n_items, n_streamers, *graphs, id_maps=id_maps)
