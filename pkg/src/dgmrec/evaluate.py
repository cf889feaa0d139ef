"""Top-K ranking metrics, missing-level breakdowns, cross-modal retrieval, disentanglement trends."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datagen import InteractionDataset, MissingPlan, ModalityTable


@dataclass
class RankingResult:
    users: np.ndarray  # evaluated user ids
    topk: np.ndarray  # (len(users), K) item ids, best first

    @property
    def depth(self) -> int:
        return self.topk.shape[1]


def _exclusion_pairs(ds: InteractionDataset, split: str) -> np.ndarray:
    if split == "test":
        return np.concatenate([ds.train, ds.valid])
    return ds.train


def rank_items(scores: np.ndarray, exclude_pairs: np.ndarray, K: int,
               users: np.ndarray | None = None) -> RankingResult:
    """Top-K items per user after masking excluded (user, item) pairs.

    Ties are broken towards the lower item id, matching a stable full sort.
    """
    scores = np.array(scores, dtype=np.float64, copy=True)
    n_users, n_items = scores.shape
    if K > n_items:
        raise ValueError(f"K={K} exceeds the number of items")
    if len(exclude_pairs):
        scores[exclude_pairs[:, 0], exclude_pairs[:, 1]] = -np.inf
    users = np.arange(n_users) if users is None else np.asarray(users)
    scores = scores[users]
    part = np.argpartition(-scores, K - 1, axis=1)[:, :K]
    part_scores = np.take_along_axis(scores, part, axis=1)
    order = np.lexsort((part, -part_scores), axis=1)
    top = np.take_along_axis(part, order, axis=1)
    # rows where the K-th score is tied with an item left outside need the exact rule
    kth = np.take_along_axis(scores, top[:, -1:], axis=1)
    tied = (scores == kth).sum(axis=1) > (np.take_along_axis(scores, top, axis=1) == kth).sum(axis=1)
    for r in np.flatnonzero(tied):
        top[r] = np.lexsort((np.arange(n_items), -scores[r]))[:K]
    return RankingResult(users, top)


def rank_items_bruteforce(scores: np.ndarray, exclude_pairs: np.ndarray, K: int) -> RankingResult:
    excluded = {(int(u), int(i)) for u, i in exclude_pairs}
    rows = []
    for u, row in enumerate(scores):
        items = sorted((i for i in range(len(row)) if (u, i) not in excluded),
                       key=lambda i: (-row[i], i))
        rows.append(items[:K])
    return RankingResult(np.arange(len(scores)), np.array(rows))


def _relevant(pairs: np.ndarray) -> dict[int, set[int]]:
    out: dict[int, set[int]] = {}
    for u, i in pairs:
        out.setdefault(int(u), set()).add(int(i))
    return out


def _per_user(result: RankingResult, test_pairs: np.ndarray, K: int, fn) -> float:
    if K > result.depth:
        raise ValueError(f"K={K} exceeds ranked depth {result.depth}")
    rel = _relevant(test_pairs)
    vals = [fn(row[:K], rel[int(u)]) for u, row in zip(result.users, result.topk) if int(u) in rel]
    return float(np.mean(vals)) if vals else float("nan")


def recall_at_k(result: RankingResult, test_pairs: np.ndarray, K: int) -> float:
    return _per_user(result, test_pairs, K,
                     lambda top, rel: sum(int(i) in rel for i in top) / len(rel))


def _ndcg(top, rel) -> float:
    dcg = sum(1.0 / np.log2(r + 2) for r, i in enumerate(top) if int(i) in rel)
    idcg = sum(1.0 / np.log2(r + 2) for r in range(min(len(rel), len(top))))
    return dcg / idcg


def ndcg_at_k(result: RankingResult, test_pairs: np.ndarray, K: int) -> float:
    return _per_user(result, test_pairs, K, _ndcg)


def evaluate_scores(scores: np.ndarray, ds: InteractionDataset, split: str,
                    ks=(20, 50)) -> dict[str, float]:
    pairs = ds.split(split)
    if len(pairs) == 0:
        return {}
    users = np.unique(pairs[:, 0])
    result = rank_items(scores, _exclusion_pairs(ds, split), max(ks), users=users)
    out = {}
    for K in ks:
        out[f"recall@{K}"] = recall_at_k(result, pairs, K)
        out[f"ndcg@{K}"] = ndcg_at_k(result, pairs, K)
    return out


def eval_by_missing_level(scores: np.ndarray, ds: InteractionDataset, plan: MissingPlan,
                          ks=(20,), split: str = "test") -> dict[int, dict[str, float]]:
    """Metrics restricted to test pairs whose item has a given number of missing modalities.

    Empty buckets are absent from the result.
    """
    pairs = ds.split(split)
    counts = plan.missing_count()
    users = np.unique(pairs[:, 0])
    result = rank_items(scores, _exclusion_pairs(ds, split), max(ks), users=users)
    out = {}
    for level in range(plan.num_modalities + 1):
        bucket = pairs[counts[pairs[:, 1]] == level]
        if len(bucket) == 0:
            continue
        out[level] = {"pairs": float(len(bucket))}
        for K in ks:
            out[level][f"recall@{K}"] = recall_at_k(result, bucket, K)
            out[level][f"ndcg@{K}"] = ndcg_at_k(result, bucket, K)
    return out


def _unit(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(n == 0, 1.0, n)


def retrieval_ranks(queries: np.ndarray, candidates: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """1-based rank of each target row among all candidates by cosine to its query.

    Ties count against the target (pessimistic).
    """
    sims = _unit(queries) @ _unit(candidates).T
    own = sims[np.arange(len(targets)), targets]
    return (sims > own[:, None]).sum(axis=1) + 1


def cross_modal_hit(plan: MissingPlan, truth: list[ModalityTable], ks=(10, 20),
                    generated: list[np.ndarray] | None = None,
                    projected: list[np.ndarray] | None = None) -> dict[int, dict[str, float]]:
    """Hit@K per missing-count group for every missing (item, modality) entry.

    DGMRec mode (``generated``): query = generated raw row, candidates = every
    item's true row of that modality.  NN mode (``projected``): rows already
    mapped to a shared space per modality; query = mean of the item's
    available modalities, candidates = the target modality's projected true
    rows.  NN mode skips items with every modality missing.
    """
    if (generated is None) == (projected is None):
        raise ValueError("pass exactly one of generated / projected")
    counts = plan.missing_count()
    hits: dict[int, list[np.ndarray]] = {}
    for m in range(plan.num_modalities):
        items = np.flatnonzero(plan.missing[:, m])
        if len(items) == 0:
            continue
        if generated is not None:
            queries = generated[m][items]
            cands = truth[m].features
        else:
            avail = ~plan.missing[items]
            keep = avail.any(axis=1)
            items, avail = items[keep], avail[keep]
            if len(items) == 0:
                continue
            stack = np.stack([projected[mm][items] for mm in range(plan.num_modalities)], axis=1)
            queries = (stack * avail[:, :, None]).sum(axis=1) / avail.sum(axis=1, keepdims=True)
            cands = projected[m]
        ranks = retrieval_ranks(queries, cands, items)
        for level in np.unique(counts[items]):
            hits.setdefault(int(level), []).append(ranks[counts[items] == level])
    out = {}
    for level, parts in sorted(hits.items()):
        ranks = np.concatenate(parts)
        out[level] = {f"hit@{K}": float((ranks <= K).mean()) for K in ks}
        out[level]["entries"] = float(len(ranks))
    return out


def mean_cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float((_unit(a) * _unit(b)).sum(axis=-1).mean())


def linear_probe_r2(features: np.ndarray, target: np.ndarray) -> float:
    """R² of an ordinary least-squares fit (with intercept) of target on features."""
    X = np.hstack([np.asarray(features, np.float64), np.ones((len(features), 1))])
    coef, *_ = np.linalg.lstsq(X, target, rcond=None)
    resid = target - X @ coef
    return float(1.0 - (resid ** 2).sum() / ((target - target.mean(axis=0)) ** 2).sum())


def disentangle_diagnostics(general: list[np.ndarray], specific: list[np.ndarray],
                            shared_latent: np.ndarray | None = None) -> dict[str, float]:
    """Within-modality cos(general, specific) and cross-modality cos(general, general)."""
    M = len(general)
    out = {
        "cos_general_specific": float(np.mean([mean_cosine(general[m], specific[m]) for m in range(M)])),
        "cos_general_general": float(np.mean(
            [mean_cosine(general[a], general[b]) for a in range(M) for b in range(a + 1, M)]
        )),
    }
    if shared_latent is not None:
        out["probe_r2"] = float(np.mean([linear_probe_r2(g, shared_latent) for g in general]))
    return out
