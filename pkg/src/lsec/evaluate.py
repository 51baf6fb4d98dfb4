"""Full-ranking top-N evaluation: AUC, MRR, NDCG@K, Recall@K.

Every non-masked item is scored for each evaluated user (mask = the user's
known positives from earlier splits), metrics are macro-averaged over users.
Score ties are broken by ascending item id for the ranked list; AUC counts
tied pairs as half-correct.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError
from .graph import ITEM, USER, TripartiteGraph
from .model import ModelParams, full_unified_embeddings, kind_width
from .sampler import LayerBlock

DEFAULT_KS = (10, 50)


@dataclass
class RankingMetrics:
    auc: float
    mrr: float
    ndcg: dict[int, float]
    recall: dict[int, float]
    n_users_evaluated: int
    n_users_skipped: int = 0

    def to_dict(self) -> dict:
        return {
            "auc": self.auc,
            "mrr": self.mrr,
            "ndcg": {str(k): v for k, v in sorted(self.ndcg.items())},
            "recall": {str(k): v for k, v in sorted(self.recall.items())},
            "n_users_evaluated": self.n_users_evaluated,
            "n_users_skipped": self.n_users_skipped,
        }


class Ranker:
    """Factorized buy-task scorer over all items.

    The first MLP layer splits into a user part and an item part, so item
    projections are computed once and each user costs one broadcast add;
    scores are bit-identical to `predict_pairs` on individual pairs.
    """

    def __init__(self, params: ModelParams, unified: dict[str, np.ndarray] | None = None,
                 graph: TripartiteGraph | None = None,
                 full_blocks: dict[int, list[LayerBlock]] | None = None):
        if unified is None:
            if graph is None:
                raise ContractError("Ranker needs unified embeddings or a graph")
            unified = full_unified_embeddings(params, graph, full_blocks)
        mlp = params.mlp[0]
        wu = kind_width(params.config, USER)
        self.user_proj = unified[USER] @ mlp.w1.value[:wu]
        self.item_proj = unified[ITEM] @ mlp.w1.value[wu:]
        self.b1 = mlp.b1.value[0]
        self.w2 = mlp.w2.value
        self.b2 = float(mlp.b2.value[0, 0])
        self.n_items = unified[ITEM].shape[0]

    def scores_for_user(self, user: int) -> np.ndarray:
        hidden = np.maximum(self.user_proj[user] + self.item_proj + self.b1, 0.0)
        return hidden @ self.w2[:, 0] + self.b2

    def scores_for_users(self, users: np.ndarray) -> np.ndarray:
        """(len(users), n_items) score matrix; identical to per-user scoring."""
        hidden = self.user_proj[users][:, None, :] + (self.item_proj + self.b1)[None, :, :]
        np.maximum(hidden, 0.0, out=hidden)
        return hidden @ self.w2[:, 0] + self.b2


def rank_items(ranker: Ranker, user: int, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Scores for all items minus the masked ones.

    Returns (candidate item ids, scores); candidates keep ascending-id order,
    ranking happens in the metric computation.
    """
    scores = ranker.scores_for_user(user)
    if mask is None or len(mask) == 0:
        ids = np.arange(ranker.n_items)
        return ids, scores
    keep = np.ones(ranker.n_items, dtype=bool)
    keep[np.asarray(mask, dtype=np.int64)] = False
    ids = np.flatnonzero(keep)
    return ids, scores[ids]


def _user_metrics(cand_ids: np.ndarray, scores: np.ndarray, positives: np.ndarray,
                  ks) -> dict:
    pos_sorted = np.sort(positives)
    if pos_sorted.size == 0:
        raise ContractError("evaluated user has no positives")
    idx = np.searchsorted(pos_sorted, cand_ids)
    idx_c = np.minimum(idx, pos_sorted.size - 1)
    is_pos = (idx < pos_sorted.size) & (pos_sorted[idx_c] == cand_ids)
    n_pos = int(is_pos.sum())
    n_neg = cand_ids.size - n_pos
    if n_pos == 0:
        raise ContractError("evaluated user has no positive among candidates")

    # ties count half: rank-sum AUC on ascending average ranks
    if n_neg == 0:
        auc = 1.0
    else:
        ranks = rankdata(scores)
        auc = (float(ranks[is_pos].sum()) - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)

    order = np.lexsort((cand_ids, -scores))
    pos_ranks = np.flatnonzero(is_pos[order]) + 1  # 1-based ranks of positives
    mrr = 1.0 / float(pos_ranks[0])
    out = {"auc": float(auc), "mrr": mrr, "ndcg": {}, "recall": {}}
    for k in ks:
        hits = pos_ranks[pos_ranks <= k]
        out["recall"][k] = hits.size / n_pos
        dcg = float(np.sum(1.0 / np.log2(hits + 1.0)))
        ideal = np.arange(1, min(n_pos, k) + 1)
        idcg = float(np.sum(1.0 / np.log2(ideal + 1.0)))
        out["ndcg"][k] = dcg / idcg
    return out


def compute_metrics(ranked: dict[int, tuple[np.ndarray, np.ndarray]],
                    positives: dict[int, np.ndarray],
                    ks=DEFAULT_KS) -> RankingMetrics:
    """Macro-averaged metrics over users.

    `ranked` maps user -> (candidate ids, scores); `positives` maps user ->
    held-out positive item ids. Users with an empty candidate list are
    skipped and counted.
    """
    sums = {"auc": 0.0, "mrr": 0.0}
    ndcg = {k: 0.0 for k in ks}
    recall = {k: 0.0 for k in ks}
    n_eval = 0
    n_skip = 0
    for user in sorted(ranked):
        cand_ids, scores = ranked[user]
        if cand_ids.size == 0:
            n_skip += 1
            continue
        pos = np.asarray(positives[user], dtype=np.int64)
        if pos.size == 0:
            raise ContractError(f"user {user} has no test positives")
        m = _user_metrics(np.asarray(cand_ids), np.asarray(scores, dtype=np.float64), pos, ks)
        sums["auc"] += m["auc"]
        sums["mrr"] += m["mrr"]
        for k in ks:
            ndcg[k] += m["ndcg"][k]
            recall[k] += m["recall"][k]
        n_eval += 1
    if n_eval == 0:
        raise ContractError("no users evaluated")
    return RankingMetrics(
        auc=sums["auc"] / n_eval,
        mrr=sums["mrr"] / n_eval,
        ndcg={k: v / n_eval for k, v in ndcg.items()},
        recall={k: v / n_eval for k, v in recall.items()},
        n_users_evaluated=n_eval,
        n_users_skipped=n_skip,
    )


def evaluate_split(params: ModelParams, graph: TripartiteGraph,
                   eval_edges: np.ndarray, mask_rows: dict[int, np.ndarray] | None,
                   ks=DEFAULT_KS,
                   full_blocks: dict[int, list[LayerBlock]] | None = None) -> RankingMetrics:
    """Rank the full catalog for each user holding an eval positive.

    `mask_rows` maps user -> item ids to exclude from the candidate list
    (their training, and for test evaluation also validation, positives).
    """
    eval_edges = np.asarray(eval_edges, dtype=np.int64).reshape(-1, 2)
    if eval_edges.shape[0] == 0:
        raise ContractError("evaluation split is empty")
    ranker = Ranker(params, graph=graph, full_blocks=full_blocks)
    by_user: dict[int, list[int]] = {}
    for u, i in eval_edges:
        by_user.setdefault(int(u), []).append(int(i))
    users = np.array(sorted(by_user), dtype=np.int64)
    ranked = {}
    positives = {}
    chunk = max(1, (8 << 20) // (8 * ranker.n_items * ranker.w2.shape[0]))
    for s in range(0, users.size, chunk):
        batch_users = users[s:s + chunk]
        score_rows = ranker.scores_for_users(batch_users)
        for row, user in enumerate(batch_users):
            user = int(user)
            mask = mask_rows.get(user, np.empty(0, dtype=np.int64)) if mask_rows else None
            scores = score_rows[row]
            if mask is None or len(mask) == 0:
                ids = np.arange(ranker.n_items)
            else:
                keep = np.ones(ranker.n_items, dtype=bool)
                keep[np.asarray(mask, dtype=np.int64)] = False
                ids = np.flatnonzero(keep)
                scores = scores[ids]
            ranked[user] = (ids, scores)
            positives[user] = np.unique(np.asarray(by_user[user], dtype=np.int64))
    return compute_metrics(ranked, positives, ks)


def per_user_csv(ranked, positives, ks=DEFAULT_KS) -> str:
    """CSV lines `user_id,auc,mrr,ndcg10,ndcg50,recall10,recall50`."""
    header = "user_id,auc,mrr," + ",".join(f"ndcg{k}" for k in ks) + "," + ",".join(
        f"recall{k}" for k in ks
    )
    lines = [header]
    for user in sorted(ranked):
        cand_ids, scores = ranked[user]
        if cand_ids.size == 0:
            continue
        m = _user_metrics(cand_ids, scores, np.asarray(positives[user]), ks)
        cells = [str(user), f"{m['auc']:.6f}", f"{m['mrr']:.6f}"]
        cells += [f"{m['ndcg'][k]:.6f}" for k in ks]
        cells += [f"{m['recall'][k]:.6f}" for k in ks]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"
