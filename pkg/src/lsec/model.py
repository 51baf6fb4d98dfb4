"""Tripartite recommender network.

One shared embedding table per entity kind feeds per-bipartite-graph encoders
(GCN with layer weights and LeakyReLU, LightGCN layer-mean with a shared
linear projection, or a no-graph passthrough). A node's final representation
concatenates its encoder outputs across the bipartite graphs it belongs to,
in ascending relation-id order; pair scores come from a per-task two-layer
MLP over the concatenated endpoint representations, trained with a weighted
sum of buy and follow binary cross-entropies.

All forward passes return backward closures; gradients accumulate into
ParamTensor.grad so embeddings shared across encoders sum their
contributions.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field, asdict

import numpy as np

from . import numkit as nk
from .errors import ConfigError, ContractError, ParseError, ShapeError
from .graph import ITEM, KINDS, RELATION_KINDS, STREAMER, USER, TripartiteGraph
from .sampler import LayerBlock, MiniBatch

AGGREGATORS = ("gcn", "lightgcn", "none")
TASK_KINDS = {0: (USER, ITEM), 1: (USER, STREAMER)}

_CKPT_MAGIC = b"LSECCKPT"
_CKPT_VERSION = 1


@dataclass
class ModelConfig:
    embed_dim: int = 200
    layer_dims: tuple[int, ...] = (128, 64)
    aggregator: str = "gcn"
    relations: tuple[int, ...] = (0, 1, 2)
    tasks: tuple[int, ...] = (0, 1)
    alpha: float = 0.5
    mlp_hidden: int = 128
    negative_ratio: int = 4

    def validate(self) -> "ModelConfig":
        if self.aggregator not in AGGREGATORS:
            raise ConfigError(f"aggregator must be one of {AGGREGATORS}, got {self.aggregator!r}")
        if not self.tasks:
            raise ConfigError("at least one task is required")
        if not set(self.tasks) <= {0, 1}:
            raise ConfigError(f"unknown task ids in {self.tasks}")
        if not self.relations or not set(self.relations) <= {0, 1, 2}:
            raise ConfigError(f"relations must be a nonempty subset of {{0,1,2}}, got {self.relations}")
        if 0 in self.tasks and 0 not in self.relations:
            raise ConfigError("the buy task requires the buy relation (0)")
        if 1 in self.tasks and 1 not in self.relations:
            raise ConfigError("the follow task requires the follow relation (1)")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.embed_dim <= 0 or self.mlp_hidden <= 0 or self.negative_ratio < 1:
            raise ConfigError("dimensions and negative_ratio must be positive")
        if self.aggregator != "none" and (not self.layer_dims or any(d <= 0 for d in self.layer_dims)):
            raise ConfigError("layer_dims must be nonempty positive for graph aggregators")
        return self

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) if self.aggregator != "none" else 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer_dims"] = list(self.layer_dims)
        d["relations"] = list(self.relations)
        d["tasks"] = list(self.tasks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("layer_dims", "relations", "tasks"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d).validate()


def kind_relations(config: ModelConfig, kind: str) -> list[int]:
    """Active relations a kind participates in, ascending id order."""
    return [r for r in sorted(config.relations) if kind in RELATION_KINDS[r]]


def part_width(config: ModelConfig) -> int:
    """Width one bipartite-graph encoder contributes to a node."""
    return config.embed_dim if config.aggregator == "none" else config.layer_dims[-1]


def kind_width(config: ModelConfig, kind: str) -> int:
    return part_width(config) * len(kind_relations(config, kind))


def task_input_width(config: ModelConfig, task: int) -> int:
    lk, rk = TASK_KINDS[task]
    return kind_width(config, lk) + kind_width(config, rk)


@dataclass
class TaskMlp:
    w1: nk.ParamTensor
    b1: nk.ParamTensor
    w2: nk.ParamTensor
    b2: nk.ParamTensor

    def tensors(self) -> list[nk.ParamTensor]:
        return [self.w1, self.b1, self.w2, self.b2]


class ModelParams:
    """All trainable state, with a canonical parameter ordering."""

    def __init__(self, config: ModelConfig, counts: dict[str, int], seed: int):
        config.validate()
        self.config = config
        self.counts = dict(counts)
        self.embed: dict[str, nk.ParamTensor] = {}
        self.conv: dict[int, list[nk.ParamTensor]] = {}
        self.light_proj: nk.ParamTensor | None = None
        self.mlp: dict[int, TaskMlp] = {}

        def make(name: str, rows: int, cols: int, zero: bool = False) -> nk.ParamTensor:
            if zero:
                return nk.ParamTensor(name, np.zeros((rows, cols)))
            rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
            return nk.ParamTensor(name, nk.glorot_init(rows, cols, rng))

        for kind in KINDS:
            self.embed[kind] = make(f"embed_{kind}", counts[kind], config.embed_dim)
        if config.aggregator == "gcn":
            dims = (config.embed_dim,) + tuple(config.layer_dims)
            for rel in sorted(config.relations):
                self.conv[rel] = [
                    make(f"conv_r{rel}_l{l}", dims[l], dims[l + 1])
                    for l in range(len(config.layer_dims))
                ]
        elif config.aggregator == "lightgcn":
            self.light_proj = make("light_proj", config.embed_dim, config.layer_dims[-1])
        for task in sorted(config.tasks):
            width = task_input_width(config, task)
            if width <= 0:
                raise ConfigError(f"task {task} endpoints have no active relations")
            self.mlp[task] = TaskMlp(
                w1=make(f"mlp_t{task}_w1", width, config.mlp_hidden),
                b1=make(f"mlp_t{task}_b1", 1, config.mlp_hidden, zero=True),
                w2=make(f"mlp_t{task}_w2", config.mlp_hidden, 1),
                b2=make(f"mlp_t{task}_b2", 1, 1, zero=True),
            )

    def all_params(self) -> list[nk.ParamTensor]:
        out = [self.embed[k] for k in KINDS]
        for rel in sorted(self.conv):
            out.extend(self.conv[rel])
        if self.light_proj is not None:
            out.append(self.light_proj)
        for task in sorted(self.mlp):
            out.extend(self.mlp[task].tensors())
        return out

    def zero_grads(self) -> None:
        for p in self.all_params():
            p.zero_grad()

    def copy_values(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self.all_params()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for p in self.all_params():
            if p.name not in values:
                raise ContractError(f"missing parameter {p.name} in checkpoint")
            v = values[p.name]
            if v.shape != p.value.shape:
                raise ShapeError(f"{p.name}: checkpoint shape {v.shape} != {p.value.shape}")
            p.value[:] = v


def init_model(config: ModelConfig, graph: TripartiteGraph, seed: int) -> ModelParams:
    """Glorot-initialized parameters; one embedding table per entity kind."""
    return ModelParams(config, graph.counts(), seed)


# ---------------------------------------------------------------------------
# Encoders
# ---------------------------------------------------------------------------


def _gather_rows(params: ModelParams, rel: int, union_ids: np.ndarray) -> np.ndarray:
    lk, rk = RELATION_KINDS[rel]
    lc = params.counts[lk]
    out = np.empty((union_ids.size, params.config.embed_dim))
    left = union_ids < lc
    out[left] = params.embed[lk].value[union_ids[left]]
    out[~left] = params.embed[rk].value[union_ids[~left] - lc]
    return out


def _scatter_rows(params: ModelParams, rel: int, union_ids: np.ndarray, g: np.ndarray) -> None:
    lk, rk = RELATION_KINDS[rel]
    lc = params.counts[lk]
    left = union_ids < lc
    nk.scatter_add_rows(params.embed[lk].grad, union_ids[left], g[left])
    nk.scatter_add_rows(params.embed[rk].grad, union_ids[~left] - lc, g[~left])


def encode_bipartite(params: ModelParams, relation: int, blocks: list[LayerBlock],
                     aggregator: str | None = None):
    """Final-layer representations for the last block's destination nodes.

    GCN: H <- LeakyReLU(N_hat H W) per layer with self-loop normalization.
    LightGCN: plain-normalized propagation, final representation is the mean
    of all layer outputs at the target nodes followed by the shared linear
    projection. None: raw embedding rows. Returns (output, backward) where
    backward scatters into the embedding tables and weight grads.
    """
    cfg = params.config
    agg = aggregator if aggregator is not None else cfg.aggregator

    if agg == "none":
        seed_ids = blocks[-1].dst_ids
        out = _gather_rows(params, relation, seed_ids)

        def backward_none(g: np.ndarray) -> None:
            _scatter_rows(params, relation, seed_ids, g)

        return out, backward_none

    if agg == "gcn":
        h = _gather_rows(params, relation, blocks[0].src_ids)
        tape = []
        for l, blk in enumerate(blocks):
            a = blk.norm_adjacency(self_loops=True)
            z, back_spmm = nk.spmm(a, h)
            y, back_w = nk.matmul_param(z, params.conv[relation][l])
            h, back_act = nk.activation(y, "leaky_relu")
            tape.append((back_spmm, back_w, back_act))

        def backward_gcn(g: np.ndarray) -> None:
            for back_spmm, back_w, back_act in reversed(tape):
                g = back_spmm(back_w(back_act(g)))
            _scatter_rows(params, relation, blocks[0].src_ids, g)

        return h, backward_gcn

    if agg == "lightgcn":
        n_seed = blocks[-1].dst_ids.size
        h = _gather_rows(params, relation, blocks[0].src_ids)
        acc = h[:n_seed].copy()
        spmm_backs = []
        for blk in blocks:
            a = blk.norm_adjacency(self_loops=False)
            h, back = nk.spmm(a, h)
            spmm_backs.append(back)
            acc += h[:n_seed]
        n_hops = len(blocks) + 1
        mean = acc / n_hops
        out, back_proj = nk.matmul_param(mean, params.light_proj)

        def backward_light(g: np.ndarray) -> None:
            gmean = back_proj(g) / n_hops
            gl = gmean.copy()
            for back in reversed(spmm_backs):
                gl = back(gl)
                gl[:n_seed] += gmean
            _scatter_rows(params, relation, blocks[0].src_ids, gl)

        return out, backward_light

    raise ConfigError(f"unknown aggregator {agg!r}")


# ---------------------------------------------------------------------------
# Unified embeddings, prediction, loss
# ---------------------------------------------------------------------------


def _relation_kind_slice(graph_counts: dict[str, int], batch_seeds: dict[str, np.ndarray],
                         rel: int, kind: str) -> slice:
    """Row range of `kind` inside a relation encoder's output for a batch."""
    lk, rk = RELATION_KINDS[rel]
    n_left = batch_seeds.get(lk, np.empty(0)).size
    if kind == lk:
        return slice(0, n_left)
    if kind == rk:
        return slice(n_left, None)
    raise ContractError(f"kind {kind} does not belong to relation {rel}")


def unify_embeddings(config: ModelConfig, kind: str, rel_outputs: dict[int, np.ndarray],
                     rel_slices: dict[int, slice]) -> np.ndarray:
    """Concatenate a kind's per-relation outputs in ascending relation order."""
    rels = kind_relations(config, kind)
    if not rels:
        raise ContractError(f"kind {kind} participates in no active relation")
    return np.hstack([rel_outputs[r][rel_slices[r]] for r in rels])


def predict_pairs(params: ModelParams, task: int, v: np.ndarray):
    """Two-layer MLP logits for concatenated endpoint representations.

    The output sigmoid lives in the loss (logits form) and in
    `predict_proba`; ranking uses raw logits (monotone either way).
    """
    mlp = params.mlp[task]
    if v.shape[1] != mlp.w1.value.shape[0]:
        raise ShapeError(
            f"task {task} expects input width {mlp.w1.value.shape[0]}, got {v.shape[1]}"
        )
    h, back_a1 = nk.affine(v, mlp.w1, mlp.b1)
    a, back_act = nk.activation(h, "relu")
    z, back_a2 = nk.affine(a, mlp.w2, mlp.b2)
    logits = z[:, 0]

    def backward(dlogits: np.ndarray) -> np.ndarray:
        return back_a1(back_act(back_a2(dlogits[:, None])))

    return logits, backward


def predict_proba(params: ModelParams, task: int, v: np.ndarray) -> np.ndarray:
    logits, _ = predict_pairs(params, task, v)
    return nk.stable_sigmoid(logits)


def compute_loss(logits: dict[int, np.ndarray], labels: dict[int, np.ndarray],
                 alpha: float):
    """Weighted multi-task BCE.

    Both tasks active: alpha * L_buy + (1 - alpha) * L_follow; a single
    active task contributes its plain mean BCE (alpha ignored). Returns
    (total, per-task losses, per-task dlogits).
    """
    tasks = sorted(logits)
    if not tasks:
        raise ContractError("compute_loss with no tasks")
    if set(tasks) == {0, 1}:
        weights = {0: alpha, 1: 1.0 - alpha}
    else:
        weights = {tasks[0]: 1.0}
    total = 0.0
    per_task: dict[int, float] = {}
    dlogits: dict[int, np.ndarray] = {}
    for t in tasks:
        loss_t, back_t = nk.bce_with_logits(logits[t], labels[t])
        per_task[t] = loss_t
        total += weights[t] * loss_t
        dlogits[t] = back_t(weights[t])
    return total, per_task, dlogits


def batch_forward_backward(params: ModelParams, batch: MiniBatch,
                           with_grads: bool = True):
    """Loss over one mini-batch; accumulates all parameter grads when asked.

    Returns (total loss, per-task losses).
    """
    cfg = params.config
    rels = sorted(cfg.relations)
    outs: dict[int, np.ndarray] = {}
    backs = {}
    for rel in rels:
        outs[rel], backs[rel] = encode_bipartite(params, rel, batch.blocks[rel])

    pw = part_width(cfg)
    slices = {
        (rel, kind): _relation_kind_slice(params.counts, batch.seed_nodes, rel, kind)
        for rel in rels for kind in RELATION_KINDS[rel]
    }
    unified: dict[str, np.ndarray] = {}
    for kind in KINDS:
        if kind not in batch.seed_nodes or not kind_relations(cfg, kind):
            continue
        mat = np.empty((batch.seed_nodes[kind].size, kind_width(cfg, kind)))
        for j, rel in enumerate(kind_relations(cfg, kind)):
            mat[:, j * pw:(j + 1) * pw] = outs[rel][slices[(rel, kind)]]
        unified[kind] = mat

    logits: dict[int, np.ndarray] = {}
    labels: dict[int, np.ndarray] = {}
    pair_rows: dict[int, tuple] = {}
    mlp_backs = {}
    for task in sorted(cfg.tasks):
        if task not in batch.task_edges:
            raise ContractError(f"batch lacks edges for active task {task}")
        lefts, rights, y = batch.task_edges[task]
        lk, rk = TASK_KINDS[task]
        lpos = np.searchsorted(batch.seed_nodes[lk], lefts)
        rpos = np.searchsorted(batch.seed_nodes[rk], rights)
        wl = kind_width(cfg, lk)
        v = np.empty((lefts.size, wl + kind_width(cfg, rk)))
        v[:, :wl] = unified[lk][lpos]
        v[:, wl:] = unified[rk][rpos]
        logits[task], mlp_backs[task] = predict_pairs(params, task, v)
        labels[task] = y
        pair_rows[task] = (lk, rk, lpos, rpos)

    total, per_task, dlogits = compute_loss(logits, labels, cfg.alpha)
    if not with_grads:
        return total, per_task

    grad_unified = {kind: np.zeros_like(mat) for kind, mat in unified.items()}
    for task in sorted(cfg.tasks):
        dv = mlp_backs[task](dlogits[task])
        lk, rk, lpos, rpos = pair_rows[task]
        wl = kind_width(cfg, lk)
        nk.scatter_add_rows(grad_unified[lk], lpos, dv[:, :wl])
        nk.scatter_add_rows(grad_unified[rk], rpos, dv[:, wl:])

    for rel in rels:
        lk, rk = RELATION_KINDS[rel]
        n_left = batch.seed_nodes.get(lk, np.empty(0)).size
        n_right = batch.seed_nodes.get(rk, np.empty(0)).size
        g_rel = np.zeros((n_left + n_right, pw))
        for kind, row_slice in ((lk, slice(0, n_left)), (rk, slice(n_left, None))):
            if kind in grad_unified:
                col = kind_relations(cfg, kind).index(rel) * pw
                g_rel[row_slice] = grad_unified[kind][:, col:col + pw]
        backs[rel](g_rel)
    return total, per_task


# ---------------------------------------------------------------------------
# Full-graph inference
# ---------------------------------------------------------------------------


def full_unified_embeddings(params: ModelParams, graph: TripartiteGraph,
                            full_blocks: dict[int, list[LayerBlock]] | None = None
                            ) -> dict[str, np.ndarray]:
    """Exact (no-sampling) unified embeddings for every node of each kind."""
    from .sampler import make_full_blocks

    cfg = params.config
    rels = sorted(cfg.relations)
    if full_blocks is None:
        full_blocks = {rel: make_full_blocks(graph.relation(rel), cfg.n_layers) for rel in rels}
    outs = {rel: encode_bipartite(params, rel, full_blocks[rel])[0] for rel in rels}
    unified: dict[str, np.ndarray] = {}
    for kind in KINDS:
        rels_k = kind_relations(cfg, kind)
        if not rels_k:
            continue
        parts = []
        for rel in rels_k:
            bip = graph.relation(rel)
            if kind == bip.left_kind:
                parts.append(outs[rel][:bip.left_count])
            else:
                parts.append(outs[rel][bip.left_count:])
        unified[kind] = np.hstack(parts)
    return unified


# ---------------------------------------------------------------------------
# Checkpoints and embedding export
# ---------------------------------------------------------------------------


def save_checkpoint(params: ModelParams, path: str) -> None:
    """Versioned binary checkpoint: config JSON then parameter values (LE)."""
    header = json.dumps(
        {"config": params.config.to_dict(), "counts": params.counts},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", _CKPT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        tensors = params.all_params()
        fh.write(struct.pack("<Q", len(tensors)))
        for p in tensors:
            name = p.name.encode("utf-8")
            fh.write(struct.pack("<I", len(name)))
            fh.write(name)
            fh.write(struct.pack("<QQ", *p.value.shape))
            fh.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> ModelParams:
    with open(path, "rb") as fh:
        if fh.read(8) != _CKPT_MAGIC:
            raise ParseError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _CKPT_VERSION:
            raise ParseError(f"{path}: unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        params = ModelParams(config, header["counts"], seed=0)
        (n_tensors,) = struct.unpack("<Q", fh.read(8))
        values = {}
        for _ in range(n_tensors):
            (nlen,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nlen).decode("utf-8")
            rows, cols = struct.unpack("<QQ", fh.read(16))
            data = np.frombuffer(fh.read(8 * rows * cols), dtype="<f8")
            values[name] = data.reshape(rows, cols).astype(np.float64)
        params.load_values(values)
    return params


def export_embeddings(params: ModelParams, graph: TripartiteGraph, path: str) -> None:
    """TSV export `kind, raw_id, v1,...,vd, label` of unified embeddings.

    The label is the lowest-index interacting streamer (followed for users,
    selling for items, itself for streamers), empty when there is none; it
    supports coloring external projections by streamer attachment.
    """
    unified = full_unified_embeddings(params, graph)
    maps = graph.id_maps

    def raw(kind: str, idx: int) -> str:
        return maps[kind].decode(idx) if maps else str(idx)

    def streamer_label(kind: str, idx: int) -> str:
        if kind == STREAMER:
            return raw(STREAMER, idx)
        row = graph.follow.forward.row(idx) if kind == USER else graph.sell.reverse.row(idx)
        return raw(STREAMER, int(row[0])) if row.size else ""

    with open(path, "w", encoding="utf-8") as fh:
        for kind in KINDS:
            if kind not in unified:
                continue
            mat = unified[kind]
            for idx in range(mat.shape[0]):
                vec = ",".join(repr(float(x)) for x in mat[idx])
                fh.write(f"{kind}\t{raw(kind, idx)}\t{vec}\t{streamer_label(kind, idx)}\n")
