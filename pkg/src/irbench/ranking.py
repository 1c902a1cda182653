"""Retrieval pipelines: global cosine search composed with average query
expansion (AQE), database augmentation (DBA), and graph diffusion (DFS).

Pipeline strings follow the benchmark-table headers ("G", "G+AQE", ...,
"G+DBA+AQE+DFS"); execution order is always DBA -> G -> AQE -> DFS. Every
ranking is a complete, deterministic permutation of the database with ties
broken by ascending name.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence, TypeVar

import numpy as np
import scipy.sparse as sp

from .postprocess import WhiteningModel, l2_normalize, post_process
from .tensor_io import DescriptorSet

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

STAGE_ORDER = ("DBA", "G", "AQE", "DFS")

DEFAULT_AQE_N = 10
DEFAULT_AQE_N_WITH_DBA = 1
DEFAULT_DBA_N = 20
DEFAULT_DFS_K = 50
DEFAULT_DFS_KQ = 10
DEFAULT_DFS_ALPHA = 0.99
DEFAULT_DFS_GAMMA = 3.0
DEFAULT_DFS_TOL = 1e-6
DEFAULT_DFS_MAX_ITER = 100


@dataclass(frozen=True)
class RankedList:
    """Full database ordering for one query, scores non-increasing."""

    query: str
    names: tuple[str, ...]
    scores: np.ndarray

    def __post_init__(self) -> None:
        names = tuple(self.names)
        scores = np.ascontiguousarray(self.scores, dtype=np.float64)
        if scores.ndim != 1 or scores.shape[0] != len(names):
            raise ValueError("scores and names must have equal length")
        if len(set(names)) != len(names):
            raise ValueError("ranked names must be unique")
        if scores.size and np.any(np.diff(scores) > 0):
            raise ValueError("scores must be non-increasing")
        scores.flags.writeable = False
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "scores", scores)

    def __len__(self) -> int:
        return len(self.names)


@dataclass(frozen=True)
class DiffusionGraph:
    """Symmetrically normalized mutual-kNN affinity operator over a database."""

    names: tuple[str, ...]
    operator: sp.csr_matrix
    k: int
    gamma: float


@dataclass(frozen=True)
class PipelineSpec:
    """One retrieval configuration: stage set plus stage parameters."""

    stages: tuple[str, ...]
    aqe_n: int = DEFAULT_AQE_N
    dba_n: int = DEFAULT_DBA_N
    dba_weighted: bool = False
    dfs_k: int = DEFAULT_DFS_K
    dfs_kq: int = DEFAULT_DFS_KQ
    dfs_alpha: float = DEFAULT_DFS_ALPHA
    dfs_gamma: float = DEFAULT_DFS_GAMMA
    dfs_tol: float = DEFAULT_DFS_TOL
    dfs_max_iter: int = DEFAULT_DFS_MAX_ITER
    dfs_mutual: bool = True
    dfs_on_original: bool = False

    def __post_init__(self) -> None:
        stages = tuple(s.upper() for s in self.stages)
        unknown = set(stages) - set(STAGE_ORDER)
        if unknown:
            raise ValueError(f"unknown pipeline stages {sorted(unknown)}")
        if stages.count("G") != 1:
            raise ValueError("pipeline must contain stage G exactly once")
        if len(set(stages)) != len(stages):
            raise ValueError("pipeline stages must be unique")
        canonical = tuple(s for s in STAGE_ORDER if s in stages)
        object.__setattr__(self, "stages", canonical)

    @property
    def label(self) -> str:
        """Table-header style name, e.g. G+DBA+AQE+DFS."""
        return "+".join(s for s in ("G", "DBA", "AQE", "DFS") if s in self.stages)


def parse_pipeline(text: str, **overrides) -> PipelineSpec:
    """Parse a pipeline string such as "G+DBA+AQE+DFS" (case-insensitive).

    AQE defaults to N=10, or N=1 when DBA is also present; keyword overrides
    (aqe_n, dba_n, dfs_k, ...) win over the defaults.
    """
    tokens = [tok.strip().upper() for tok in text.split("+") if tok.strip()]
    if not tokens:
        raise ValueError(f"empty pipeline spec {text!r}")
    if "AQE" in tokens and "DBA" in tokens and overrides.get("aqe_n") is None:
        overrides["aqe_n"] = DEFAULT_AQE_N_WITH_DBA
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return PipelineSpec(stages=tuple(tokens), **overrides)


def _rank(query: str, names: Sequence[str], scores: np.ndarray) -> RankedList:
    scores = np.asarray(scores, dtype=np.float64)
    names_arr = np.asarray(names, dtype=object)
    order = np.lexsort((names_arr, -scores))
    return RankedList(query, tuple(names_arr[order]), scores[order])


def _top_indices(scores: np.ndarray, names: Sequence[str], k: int) -> np.ndarray:
    """Indices of the k best scores, ties broken by ascending name."""
    order = np.lexsort((np.asarray(names, dtype=object), -np.asarray(scores)))
    return order[:k]


def _map_in_order(fn: Callable[[T], R], items: Sequence[T], threads: int) -> list[R]:
    """Apply fn to each item, preserving order; threads only change scheduling,
    never the per-item computation, so results are thread-count invariant."""
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def global_search(queries: DescriptorSet, db: DescriptorSet) -> list[RankedList]:
    """Rank the database by dot product (cosine for unit-norm descriptors)."""
    if queries.dim != db.dim:
        raise ValueError(f"query dim {queries.dim} != database dim {db.dim}")
    sims = np.asarray(queries.matrix, dtype=np.float64) @ np.asarray(db.matrix, dtype=np.float64).T
    return [_rank(q, db.names, sims[i]) for i, q in enumerate(queries.names)]


def aqe(
    query: np.ndarray,
    db: DescriptorSet,
    ranked: RankedList,
    n: int,
) -> np.ndarray:
    """Average query expansion: normalized mean of the query and its top-n
    ranked database descriptors (one round)."""
    if n < 0:
        raise ValueError(f"aqe neighbor count must be >= 0, got {n}")
    if n > len(db):
        raise ValueError(f"aqe neighbor count {n} exceeds database size {len(db)}")
    index = db.name_index()
    rows = [np.asarray(query, dtype=np.float64)]
    for name in ranked.names[:n]:
        rows.append(np.asarray(db.matrix[index[name]], dtype=np.float64))
    return l2_normalize(np.mean(rows, axis=0))


def dba(db: DescriptorSet, n: int, weighted: bool = False) -> DescriptorSet:
    """Database augmentation: replace each descriptor by the normalized mean
    of itself and its n nearest neighbors (self excluded), all neighborhoods
    computed from the original set. The weighted variant scales neighbor r
    (1-based) by (n + 1 - r) / (n + 1)."""
    if n < 0:
        raise ValueError(f"dba neighbor count must be >= 0, got {n}")
    if n >= len(db):
        raise ValueError(f"dba neighbor count {n} must be < database size {len(db)}")
    x = np.asarray(db.matrix, dtype=np.float64)
    sims = x @ x.T
    np.fill_diagonal(sims, -np.inf)
    names_arr = np.asarray(db.names, dtype=object)
    out = np.empty_like(x)
    for i in range(len(db)):
        neighbors = _top_indices(sims[i], names_arr, n)
        if weighted and n > 0:
            weights = (n + 1 - np.arange(1, n + 1)) / (n + 1)
            stacked = x[i] + weights @ x[neighbors]
            out[i] = stacked / (1.0 + weights.sum())
        else:
            out[i] = (x[i] + x[neighbors].sum(axis=0)) / (n + 1.0)
        norm = np.linalg.norm(out[i])
        if norm > 0.0:
            out[i] /= norm
    return db.with_matrix(out, (f"dba-{n}",))


def build_diffusion_graph(
    db: DescriptorSet,
    k: int,
    gamma: float = DEFAULT_DFS_GAMMA,
    mutual: bool = True,
) -> DiffusionGraph:
    """Build S = D^(-1/2) A D^(-1/2) over the kNN affinity graph.

    Affinities are max(0, s_ij)^gamma, kept only on (by default mutual) kNN
    edges, symmetrized, with a zero diagonal. Rows of isolated nodes are zero.
    """
    n = len(db)
    if not 1 <= k < n:
        raise ValueError(f"k={k} out of range for database size {n}")
    x = np.asarray(db.matrix, dtype=np.float64)
    sims = x @ x.T
    np.fill_diagonal(sims, -np.inf)
    names_arr = np.asarray(db.names, dtype=object)
    mask = np.zeros((n, n), dtype=bool)
    for i in range(n):
        mask[i, _top_indices(sims[i], names_arr, k)] = True
    mask = (mask & mask.T) if mutual else (mask | mask.T)
    affinity = np.where(mask, np.power(np.maximum(sims, 0.0), gamma), 0.0)
    affinity = (affinity + affinity.T) / 2.0
    np.fill_diagonal(affinity, 0.0)
    degree = affinity.sum(axis=1)
    inv_sqrt = np.where(degree > 0.0, 1.0 / np.sqrt(np.where(degree > 0.0, degree, 1.0)), 0.0)
    operator = sp.csr_matrix(affinity * inv_sqrt[:, None] * inv_sqrt[None, :])
    return DiffusionGraph(names=db.names, operator=operator, k=k, gamma=gamma)


def conjugate_gradient(
    matvec: Callable[[np.ndarray], np.ndarray],
    b: np.ndarray,
    tol: float,
    max_iter: int,
    x0: np.ndarray | None = None,
) -> tuple[np.ndarray, float, bool]:
    """Solve A x = b for symmetric positive definite A.

    Returns (x, relative_residual, converged); converged means
    ||A x - b|| <= tol * ||b||. Fully deterministic for fixed inputs.
    """
    b = np.asarray(b, dtype=np.float64)
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return np.zeros_like(b), 0.0, True
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    r = b - matvec(x)
    d = r.copy()
    rs = float(r @ r)
    threshold = tol * b_norm
    for _ in range(max_iter):
        if np.sqrt(rs) <= threshold:
            break
        ad = matvec(d)
        dad = float(d @ ad)
        if dad <= 0.0:
            break  # loss of positive definiteness; return best iterate
        alpha = rs / dad
        x = x + alpha * d
        r = r - alpha * ad
        rs_new = float(r @ r)
        d = r + (rs_new / rs) * d
        rs = rs_new
    residual = float(np.linalg.norm(b - matvec(x)))
    return x, residual / b_norm, residual <= threshold


def solve_diffusion(
    graph: DiffusionGraph,
    y: np.ndarray,
    alpha: float,
    tol: float = DEFAULT_DFS_TOL,
    max_iter: int = DEFAULT_DFS_MAX_ITER,
) -> tuple[np.ndarray, float, bool]:
    """Solve (I - alpha S) f = y by conjugate gradient, starting from y."""
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must be in [0, 1), got {alpha}")
    s = graph.operator

    def matvec(v: np.ndarray) -> np.ndarray:
        return v - alpha * (s @ v)

    return conjugate_gradient(matvec, y, tol=tol, max_iter=max_iter, x0=np.asarray(y, dtype=np.float64))


def diffuse(
    graph: DiffusionGraph,
    query: np.ndarray,
    db: DescriptorSet,
    kq: int = DEFAULT_DFS_KQ,
    alpha: float = DEFAULT_DFS_ALPHA,
    tol: float = DEFAULT_DFS_TOL,
    max_iter: int = DEFAULT_DFS_MAX_ITER,
    query_name: str = "",
) -> RankedList:
    """Re-rank one query by diffusion on the database graph.

    The source vector y holds max(0, s(query, i))^gamma for the kq nearest
    database items and zero elsewhere; ranking follows the solution of
    (I - alpha S) f = y. An all-zero y falls back to the raw similarities.
    """
    if graph.names != db.names:
        raise ValueError("diffusion graph and database name order differ")
    n = len(db)
    if not 1 <= kq <= n:
        raise ValueError(f"kq={kq} out of range for database size {n}")
    sims = np.asarray(db.matrix, dtype=np.float64) @ np.asarray(query, dtype=np.float64)
    names_arr = np.asarray(db.names, dtype=object)
    seeds = _top_indices(sims, names_arr, kq)
    y = np.zeros(n, dtype=np.float64)
    y[seeds] = np.power(np.maximum(sims[seeds], 0.0), graph.gamma)
    if not np.any(y):
        return _rank(query_name, db.names, sims)
    f, residual, converged = solve_diffusion(graph, y, alpha, tol=tol, max_iter=max_iter)
    if not converged:
        logger.warning(
            "diffusion solve for query %r stopped at relative residual %.3e (tol %.3e)",
            query_name, residual, tol,
        )
    return _rank(query_name, db.names, f)


def run_pipeline(
    spec: PipelineSpec,
    queries: DescriptorSet,
    db: DescriptorSet,
    whitening: WhiteningModel | None = None,
    threads: int = 1,
) -> list[RankedList]:
    """Execute one pipeline configuration for every query.

    Stage order: DBA transforms the database, global search ranks it, AQE
    re-queries with expanded descriptors, DFS re-ranks by diffusion. When a
    whitening model is given, both sets are post-processed first; otherwise
    they are expected to be unit-norm already.
    """
    if whitening is not None:
        queries = post_process(queries, whitening)
        db = post_process(db, whitening)
    original_db = db
    if "DBA" in spec.stages:
        db = dba(db, spec.dba_n, weighted=spec.dba_weighted)
    rankings = global_search(queries, db)
    query_matrix = np.asarray(queries.matrix, dtype=np.float64)
    if "AQE" in spec.stages:
        def expand(i: int) -> np.ndarray:
            return aqe(query_matrix[i], db, rankings[i], spec.aqe_n)

        expanded = _map_in_order(expand, range(len(queries)), threads)
        queries = DescriptorSet(
            queries.names, np.vstack(expanded), queries.provenance + (f"aqe-{spec.aqe_n}",)
        )
        query_matrix = np.asarray(queries.matrix, dtype=np.float64)
        rankings = global_search(queries, db)
    if "DFS" in spec.stages:
        dfs_db = original_db if spec.dfs_on_original else db
        graph = build_diffusion_graph(
            dfs_db, spec.dfs_k, gamma=spec.dfs_gamma, mutual=spec.dfs_mutual
        )

        def rerank(i: int) -> RankedList:
            return diffuse(
                graph,
                query_matrix[i],
                dfs_db,
                kq=spec.dfs_kq,
                alpha=spec.dfs_alpha,
                tol=spec.dfs_tol,
                max_iter=spec.dfs_max_iter,
                query_name=queries.names[i],
            )

        rankings = _map_in_order(rerank, range(len(queries)), threads)
    return rankings


def write_rankings_tsv(rankings: Iterable[RankedList], destination) -> None:
    """Export rankings as TSV rows: query, rank (1-based), name, score (6 dp)."""
    close = False
    if not hasattr(destination, "write"):
        destination = open(destination, "w", encoding="utf-8")
        close = True
    try:
        destination.write("query\trank\tname\tscore\n")
        for ranking in rankings:
            for pos, (name, score) in enumerate(zip(ranking.names, ranking.scores), start=1):
                destination.write(f"{ranking.query}\t{pos}\t{name}\t{score:.6f}\n")
    finally:
        if close:
            destination.close()
