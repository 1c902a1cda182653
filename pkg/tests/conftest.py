"""Shared synthetic fixtures.

The planted-cluster fixture is its own oracle: it is built so that every
intra-cluster similarity exceeds every cross-cluster similarity by a wide,
asserted margin, which forces a perfect ranking from any sane pipeline.
The chain fixture places points along a one-dimensional arc where transitive
similarity matters, plus mutually-isolated distractors that outscore the far
end of the chain on raw cosine.
"""

import json
import math

import numpy as np
import pytest

from irbench import DescriptorSet, GroundTruth, QueryGroundTruth
from irbench.postprocess import l2_normalize_rows

N_CLUSTERS = 5
PER_CLUSTER = 10
QUERIES_PER_CLUSTER = 3
CLUSTER_DIM = 32
CLUSTER_SIGMA = 0.02


def _orthonormal_rows(rng, n, dim):
    q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    return q.T[:n]


@pytest.fixture(scope="session")
def planted_clusters():
    """5 tight clusters of 10 database points each plus 3 queries per cluster.

    Returns (db, queries, gt, margin); margin = min intra-similarity minus
    max cross-similarity, asserted to be at least 3 * sigma.
    """
    rng = np.random.default_rng(20240601)
    centers = _orthonormal_rows(rng, N_CLUSTERS, CLUSTER_DIM)
    db_rows, db_names, gt_queries = [], [], []
    q_rows, q_names = [], []
    members = {}
    for k in range(N_CLUSTERS):
        names = [f"db{k}{i:02d}" for i in range(PER_CLUSTER)]
        members[k] = names
        for name in names:
            db_rows.append(centers[k] + CLUSTER_SIGMA * rng.normal(size=CLUSTER_DIM))
            db_names.append(name)
        for j in range(QUERIES_PER_CLUSTER):
            q_names.append(f"q{k}{j}")
            q_rows.append(centers[k] + CLUSTER_SIGMA * rng.normal(size=CLUSTER_DIM))
            gt_queries.append(
                QueryGroundTruth(f"q{k}{j}", positive=frozenset(names))
            )
    db_matrix = l2_normalize_rows(np.array(db_rows))
    q_matrix = l2_normalize_rows(np.array(q_rows))

    labels = np.repeat(np.arange(N_CLUSTERS), PER_CLUSTER)
    sims = db_matrix @ db_matrix.T
    same = labels[:, None] == labels[None, :]
    off_diag = ~np.eye(len(labels), dtype=bool)
    intra_min = sims[same & off_diag].min()
    inter_max = sims[~same].max()
    q_labels = np.repeat(np.arange(N_CLUSTERS), QUERIES_PER_CLUSTER)
    q_sims = q_matrix @ db_matrix.T
    q_same = q_labels[:, None] == labels[None, :]
    intra_min = min(intra_min, q_sims[q_same].min())
    inter_max = max(inter_max, q_sims[~q_same].max())
    margin = intra_min - inter_max
    assert margin >= 3 * CLUSTER_SIGMA, f"fixture margin {margin} too small"

    db = DescriptorSet(tuple(db_names), db_matrix)
    queries = DescriptorSet(tuple(q_names), q_matrix)
    gt = GroundTruth(tuple(gt_queries), tuple(db_names))
    return db, queries, gt, margin


@pytest.fixture(scope="session")
def chain_manifold():
    """A 1-D arc of mutually-linked points plus isolated distractors.

    The query sits at the start of the arc; the arc's far end has a lower
    cosine to the query than the distractors, so plain global search ranks
    imperfectly while diffusion can follow the chain.
    """
    dim = 24
    n_chain = 16
    n_distract = dim - 2 - 1  # one orthogonal axis per distractor
    step_deg = 5.5
    rows, names = [], []
    for i in range(n_chain):
        theta = math.radians(step_deg * (i + 1))
        vec = np.zeros(dim)
        vec[0] = math.cos(theta)
        vec[1] = math.sin(theta)
        rows.append(vec)
        names.append(f"chain{i:02d}")
    phi = math.radians(55.0)
    for j in range(n_distract):
        vec = np.zeros(dim)
        vec[0] = math.cos(phi)
        vec[2 + j] = math.sin(phi)
        rows.append(vec)
        names.append(f"noise{j:02d}")
    query = np.zeros(dim)
    query[0] = 1.0
    db = DescriptorSet(tuple(names), np.array(rows))
    queries = DescriptorSet(("probe",), query[None])
    gt = GroundTruth(
        (QueryGroundTruth("probe", positive=frozenset(names[:n_chain])),),
        tuple(names),
    )
    return db, queries, gt


def write_eval_inputs(tmp_path, db, queries, gt):
    """Materialize DSET and ground-truth files for CLI runs."""
    from irbench import write_dset
    from irbench.tensor_io import groundtruth_to_json

    db_path = tmp_path / "db.dset"
    q_path = tmp_path / "queries.dset"
    gt_path = tmp_path / "gt.json"
    write_dset(db, db_path)
    write_dset(queries, q_path)
    gt_path.write_text(groundtruth_to_json(gt))
    return db_path, q_path, gt_path
