"""Per-modality top-k item-item graphs: build, normalize, propagate, refine.

Row ``i`` of a graph lists the neighbours whose features flow *into* item
``i`` during propagation, so ``propagate`` computes ``S @ E``.  An edge
``j -> i`` is stored at ``(row=i, col=j)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import sparse

MIN_WEIGHT = 1e-6


@dataclass
class SparseItemGraph:
    matrix: sparse.csr_matrix  # (num_items, num_items), row = destination
    # rows whose features had zero norm and got uniform random neighbours
    flagged: np.ndarray = field(default=None)

    def __post_init__(self):
        self.matrix = sparse.csr_matrix(self.matrix, dtype=np.float64)
        self.matrix.sort_indices()
        if self.flagged is None:
            self.flagged = np.zeros(self.num_items, dtype=bool)

    @property
    def num_items(self) -> int:
        return self.matrix.shape[0]

    def neighbors(self, i: int) -> np.ndarray:
        m = self.matrix
        return m.indices[m.indptr[i]:m.indptr[i + 1]]

    def weights(self, i: int) -> np.ndarray:
        m = self.matrix
        return m.data[m.indptr[i]:m.indptr[i + 1]]

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.matrix.sum(axis=1)).ravel()

    def copy(self) -> "SparseItemGraph":
        return SparseItemGraph(self.matrix.copy(), self.flagged.copy())

    def to_torch(self, dtype=torch.float32) -> torch.Tensor:
        coo = self.matrix.tocoo()
        idx = torch.from_numpy(np.vstack([coo.row, coo.col]).astype(np.int64))
        vals = torch.from_numpy(coo.data).to(dtype)
        return torch.sparse_coo_tensor(idx, vals, coo.shape, check_invariants=False).coalesce()

    def edges(self):
        coo = self.matrix.tocoo()
        order = np.lexsort((coo.col, coo.row))
        for r, c, w in zip(coo.row[order], coo.col[order], coo.data[order]):
            yield int(c), int(r), float(w)

    def dump(self, path: str | Path) -> None:
        with open(path, "w") as f:
            for src, dst, w in self.edges():
                f.write(f"{src}\t{dst}\t{w!r}\n")


def build_knn_graph(X: np.ndarray, k: int, candidates: np.ndarray | None = None,
                    rows: np.ndarray | None = None, seed: int = 0) -> SparseItemGraph:
    """Top-k cosine neighbours of each requested row among the candidate sources.

    ``candidates`` masks which items may act as neighbours (default: all);
    ``rows`` masks which items receive neighbours (default: all).  Self-edges
    are excluded and ties go to the lower item id.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if not np.isfinite(X).all():
        raise ValueError("feature rows must be finite")
    if k >= n:
        raise ValueError(f"k={k} must be smaller than the number of items ({n})")
    cand = np.ones(n, dtype=bool) if candidates is None else np.asarray(candidates, dtype=bool)
    row_mask = np.ones(n, dtype=bool) if rows is None else np.asarray(rows, dtype=bool)
    cand_ids = np.flatnonzero(cand)
    row_ids = np.flatnonzero(row_mask)
    norms = np.linalg.norm(X, axis=1)
    zero = norms == 0
    Xn = X / np.where(zero, 1.0, norms)[:, None]
    sim = Xn[row_ids] @ Xn[cand_ids].T
    # self-ban
    sim[row_ids[:, None] == cand_ids[None, :]] = -np.inf
    rng = np.random.default_rng(seed)
    flagged = np.zeros(n, dtype=bool)
    r_idx, c_idx, vals = [], [], []
    for pos, i in enumerate(row_ids):
        usable = np.flatnonzero(cand_ids != i)
        kk = min(k, len(usable))
        if kk == 0:
            continue
        if zero[i]:
            flagged[i] = True
            picks = np.sort(rng.choice(usable, kk, replace=False))
            w = np.ones(kk)
        else:
            # stable sort over ascending candidate ids keeps the lower id on ties
            picks = np.argsort(-sim[pos], kind="stable")[:kk]
            w = np.maximum(sim[pos, picks], MIN_WEIGHT)
        r_idx.append(np.full(kk, i))
        c_idx.append(cand_ids[picks])
        vals.append(w)
    if r_idx:
        mat = sparse.csr_matrix(
            (np.concatenate(vals), (np.concatenate(r_idx), np.concatenate(c_idx))), shape=(n, n)
        )
    else:
        mat = sparse.csr_matrix((n, n))
    return SparseItemGraph(mat, flagged)


def normalize(g: SparseItemGraph) -> SparseItemGraph:
    """Row-stochastic rescaling; rows without neighbours stay empty."""
    m = g.matrix.copy()
    sums = g.row_sums()
    nnz_rows = np.diff(m.indptr) > 0
    if np.any(nnz_rows & (sums <= 0)):
        raise ValueError("graph has a row with zero total weight")
    scale = np.ones_like(sums)
    scale[nnz_rows] = 1.0 / sums[nnz_rows]
    m = sparse.diags(scale) @ m
    return SparseItemGraph(m, g.flagged.copy())


def propagate(g: SparseItemGraph | torch.Tensor, E: torch.Tensor, L: int) -> torch.Tensor:
    """Apply ``L`` rounds of ``E <- S @ E`` and return the last layer only."""
    if L < 0:
        raise ValueError("L must be >= 0")
    S = g.to_torch(E.dtype) if isinstance(g, SparseItemGraph) else g
    if S.shape[1] != E.shape[0]:
        raise ValueError(f"graph has {S.shape[1]} columns but E has {E.shape[0]} rows")
    for _ in range(L):
        E = torch.sparse.mm(S, E)
    return E


def refine(S: SparseItemGraph, S_hat: SparseItemGraph, alpha: float,
           missing_items) -> SparseItemGraph:
    """Blend ``alpha * S + (1 - alpha) * S_hat`` on the rows of missing items only.

    ``S_hat`` must only hold edges from available items into missing items.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    n = S.num_items
    missing = np.zeros(n, dtype=bool)
    missing[np.asarray(sorted(missing_items), dtype=np.int64)] = True
    hat = S_hat.matrix.tocoo()
    if hat.nnz and (not missing[hat.row].all() or missing[hat.col].any()):
        raise ValueError("refinement edges must run from available items to missing items")
    if alpha == 1.0 or not missing.any():
        return S.copy()
    only = sparse.diags(missing.astype(np.float64))
    mixed = (only @ (alpha * S.matrix + (1.0 - alpha) * S_hat.matrix)).tocsr()
    mixed.eliminate_zeros()
    renorm = normalize(SparseItemGraph(mixed))
    # untouched rows are copied over verbatim so they stay bit-identical
    return _restore_rows(renorm, S, ~missing)


def _restore_rows(g: SparseItemGraph, src: SparseItemGraph, rows: np.ndarray) -> SparseItemGraph:
    a, b = g.matrix, src.matrix
    indptr, indices, data = [0], [], []
    for i in range(g.num_items):
        m = b if rows[i] else a
        lo, hi = m.indptr[i], m.indptr[i + 1]
        indices.append(m.indices[lo:hi])
        data.append(m.data[lo:hi])
        indptr.append(indptr[-1] + hi - lo)
    mat = sparse.csr_matrix(
        (np.concatenate(data), np.concatenate(indices), np.array(indptr)), shape=a.shape
    )
    return SparseItemGraph(mat, src.flagged.copy())


def build_refinement_graph(X_generated: np.ndarray, available: np.ndarray, k: int) -> SparseItemGraph:
    """Graph from generated rows: edges only from available items into missing ones."""
    available = np.asarray(available, dtype=bool)
    return normalize(build_knn_graph(X_generated, k, candidates=available, rows=~available))
