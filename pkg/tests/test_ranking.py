"""Retrieval stages against brute-force oracles and closed forms."""

import io
import math

import numpy as np
import pytest

from irbench import (
    DescriptorSet,
    PipelineSpec,
    aqe,
    build_diffusion_graph,
    conjugate_gradient,
    dba,
    diffuse,
    global_search,
    l2_normalize_rows,
    parse_pipeline,
    run_pipeline,
    solve_diffusion,
    write_rankings_tsv,
)


def unit_rows(rng, n, dim, positive=False):
    x = rng.normal(size=(n, dim))
    if positive:
        x = np.abs(x) + 0.1
    return l2_normalize_rows(x)


def make_set(rng, n, dim, prefix="d", positive=False):
    return DescriptorSet(
        tuple(f"{prefix}{i:03d}" for i in range(n)),
        unit_rows(rng, n, dim, positive=positive),
    )


def oracle_order(names, scores):
    """O(n^2)-ish reference ranking: repeatedly take the best remaining."""
    remaining = list(zip(names, scores))
    out = []
    while remaining:
        best = None
        for name, score in remaining:
            if best is None or score > best[1] or (score == best[1] and name < best[0]):
                best = (name, score)
        out.append(best[0])
        remaining.remove(best)
    return out


class TestGlobalSearch:
    def test_self_similarity_first(self):
        rng = np.random.default_rng(0)
        db = make_set(rng, 12, 6)
        queries = DescriptorSet(("q",), db.matrix[3:4].copy())
        ranked = global_search(queries, db)[0]
        assert ranked.names[0] == db.names[3]
        assert ranked.scores[0] == pytest.approx(1.0, abs=1e-6)

    def test_orthonormal_basis(self):
        db = DescriptorSet(("e1", "e2"), np.eye(2))
        queries = DescriptorSet(("q",), np.array([[1.0, 0.0]]))
        ranked = global_search(queries, db)[0]
        assert ranked.names == ("e1", "e2")
        assert np.allclose(ranked.scores, [1.0, 0.0])

    def test_matches_brute_force_ordering(self):
        rng = np.random.default_rng(1)
        db = make_set(rng, 20, 8)
        queries = make_set(rng, 5, 8, prefix="q")
        q = np.asarray(queries.matrix, dtype=np.float64)
        x = np.asarray(db.matrix, dtype=np.float64)
        for i, ranked in enumerate(global_search(queries, db)):
            scores = [float(q[i] @ x[j]) for j in range(20)]
            assert list(ranked.names) == oracle_order(db.names, scores)

    def test_dim_mismatch(self):
        db = DescriptorSet(("a",), np.ones((1, 3)))
        queries = DescriptorSet(("q",), np.ones((1, 4)))
        with pytest.raises(ValueError, match="dim"):
            global_search(queries, db)

    def test_rotation_invariance(self):
        rng = np.random.default_rng(2)
        db = make_set(rng, 15, 7)
        queries = make_set(rng, 4, 7, prefix="q")
        rot, _ = np.linalg.qr(rng.normal(size=(7, 7)))
        db_rot = DescriptorSet(db.names, db.matrix @ rot)
        q_rot = DescriptorSet(queries.names, queries.matrix @ rot)
        base = global_search(queries, db)
        rotated = global_search(q_rot, db_rot)
        for a, b in zip(base, rotated):
            assert a.names == b.names
            assert np.allclose(a.scores, b.scores, atol=1e-6)


class TestAqe:
    def test_n0_keeps_ranking(self):
        rng = np.random.default_rng(3)
        db = make_set(rng, 8, 5)
        query = db.matrix[0].copy()
        ranked = global_search(DescriptorSet(("q",), query[None]), db)[0]
        expanded = aqe(query, db, ranked, 0)
        assert np.allclose(expanded, query, atol=1e-12)

    def test_top1_equal_to_query_is_noop(self):
        db = DescriptorSet(("a", "b"), np.array([[1.0, 0.0], [0.0, 1.0]]))
        query = np.array([1.0, 0.0])
        ranked = global_search(DescriptorSet(("q",), query[None]), db)[0]
        expanded = aqe(query, db, ranked, 1)
        assert np.allclose(expanded, query, atol=1e-12)

    def test_matches_hand_mean(self):
        rng = np.random.default_rng(4)
        db = make_set(rng, 5, 6)
        query = unit_rows(rng, 1, 6)[0]
        ranked = global_search(DescriptorSet(("q",), query[None]), db)[0]
        expanded = aqe(query, db, ranked, 2)
        index = db.name_index()
        mean = (query
                + db.matrix[index[ranked.names[0]]]
                + db.matrix[index[ranked.names[1]]]) / 3.0
        assert np.allclose(expanded, mean / np.linalg.norm(mean), atol=1e-12)

    def test_n_too_large(self):
        db = DescriptorSet(("a",), np.ones((1, 2)))
        ranked = global_search(DescriptorSet(("q",), np.ones((1, 2))), db)[0]
        with pytest.raises(ValueError, match="exceeds"):
            aqe(np.ones(2), db, ranked, 2)


class TestDba:
    def test_n0_renormalizes_only(self):
        rng = np.random.default_rng(5)
        db = make_set(rng, 6, 4)
        out = dba(db, 0)
        assert np.allclose(out.matrix, db.matrix, rtol=1e-14)
        assert out.provenance[-1] == "dba-0"
        again = dba(out, 0)
        assert np.allclose(again.matrix, out.matrix, rtol=1e-14)

    def test_identical_vectors_unchanged(self):
        v = np.array([0.6, 0.8])
        db = DescriptorSet(("a", "b"), np.array([v, v]))
        out = dba(db, 1)
        assert np.allclose(out.matrix, db.matrix, atol=1e-12)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(6)
        db = make_set(rng, 6, 5)
        out = dba(db, 2)
        x = np.asarray(db.matrix, dtype=np.float64)
        for i in range(6):
            sims = [(float(x[i] @ x[j]), db.names[j], j) for j in range(6) if j != i]
            sims.sort(key=lambda t: (-t[0], t[1]))
            mean = (x[i] + x[sims[0][2]] + x[sims[1][2]]) / 3.0
            assert np.allclose(out.matrix[i], mean / np.linalg.norm(mean), atol=1e-12)

    def test_no_cascading(self):
        # neighborhoods must come from the original vectors: augmenting twice
        # with the same parameters differs from a single cascaded update
        rng = np.random.default_rng(7)
        db = make_set(rng, 10, 4)
        once = dba(db, 3)
        x = np.asarray(db.matrix, dtype=np.float64)
        for i in range(10):
            sims = [(float(x[i] @ x[j]), db.names[j], j) for j in range(10) if j != i]
            sims.sort(key=lambda t: (-t[0], t[1]))
            mean = (x[i] + sum(x[s[2]] for s in sims[:3])) / 4.0
            assert np.allclose(once.matrix[i], mean / np.linalg.norm(mean), atol=1e-12)

    def test_keeps_dimension(self):
        rng = np.random.default_rng(8)
        db = make_set(rng, 7, 9)
        assert dba(db, 2).dim == 9

    def test_n_out_of_range(self):
        rng = np.random.default_rng(9)
        db = make_set(rng, 4, 3)
        with pytest.raises(ValueError, match="must be <"):
            dba(db, 4)


class TestDiffusionGraph:
    def test_two_mutual_neighbors(self):
        angle = 0.3
        db = DescriptorSet(
            ("a", "b"),
            np.array([[1.0, 0.0], [math.cos(angle), math.sin(angle)]]),
        )
        graph = build_diffusion_graph(db, k=1, gamma=1.0)
        s = graph.operator.toarray()
        assert np.allclose(s, [[0.0, 1.0], [1.0, 0.0]], atol=1e-12)

    def test_orthogonal_database_gives_zero_operator(self):
        db = DescriptorSet(("a", "b", "c"), np.eye(3))
        graph = build_diffusion_graph(db, k=1, gamma=3.0)
        assert graph.operator.nnz == 0

    def test_structure(self):
        rng = np.random.default_rng(10)
        db = make_set(rng, 15, 6, positive=True)
        graph = build_diffusion_graph(db, k=4, gamma=3.0)
        s = graph.operator.toarray()
        assert np.allclose(s, s.T, atol=1e-9)
        assert np.allclose(np.diag(s), 0.0)
        # before symmetrization each row keeps at most k candidates
        assert max((s[i] > 0).sum() for i in range(15)) <= 4

    def test_spectral_radius_at_most_one(self):
        rng = np.random.default_rng(11)
        for seed in range(5):
            db = make_set(np.random.default_rng(seed), 12, 5, positive=True)
            s = build_diffusion_graph(db, k=3, gamma=3.0).operator.toarray()
            v = rng.normal(size=12)
            for _ in range(200):
                nv = s @ v
                norm = np.linalg.norm(nv)
                if norm == 0:
                    break
                v = nv / norm
            assert abs(v @ (s @ v)) <= 1.0 + 1e-9

    def test_k_out_of_range(self):
        rng = np.random.default_rng(12)
        db = make_set(rng, 5, 4)
        with pytest.raises(ValueError, match="out of range"):
            build_diffusion_graph(db, k=5)
        with pytest.raises(ValueError, match="out of range"):
            build_diffusion_graph(db, k=0)


class TestDiffusion:
    def two_node_graph(self):
        angle = 0.4
        db = DescriptorSet(
            ("a", "b"),
            np.array([[1.0, 0.0], [math.cos(angle), math.sin(angle)]]),
        )
        return db, build_diffusion_graph(db, k=1, gamma=1.0)

    def test_two_node_closed_form(self):
        _, graph = self.two_node_graph()
        f, residual, converged = solve_diffusion(
            graph, np.array([1.0, 0.0]), alpha=0.5, tol=1e-14, max_iter=50
        )
        # (I - 0.5 S)^-1 [1, 0] with S = [[0,1],[1,0]] is [4/3, 2/3]
        assert converged
        assert abs(f[0] - 4.0 / 3.0) < 1e-12
        assert abs(f[1] - 2.0 / 3.0) < 1e-12

    def test_alpha_zero_is_identity_system(self):
        rng = np.random.default_rng(13)
        db = make_set(rng, 10, 4, positive=True)
        graph = build_diffusion_graph(db, k=3)
        y = np.abs(rng.normal(size=10))
        f, _, converged = solve_diffusion(graph, y, alpha=0.0)
        assert converged
        assert np.allclose(f, y, atol=1e-12)

    def test_alpha_zero_kq_full_matches_global_search(self):
        rng = np.random.default_rng(14)
        db = make_set(rng, 12, 5, positive=True)
        queries = make_set(rng, 3, 5, prefix="q", positive=True)
        graph = build_diffusion_graph(db, k=4)
        base = global_search(queries, db)
        for i in range(3):
            ranked = diffuse(
                graph, queries.matrix[i], db, kq=12, alpha=0.0, query_name=f"q{i:03d}"
            )
            assert ranked.names == base[i].names

    def test_matches_dense_solve(self):
        rng = np.random.default_rng(15)
        for seed in range(10):
            local = np.random.default_rng(seed)
            db = make_set(local, 30, 8, positive=True)
            graph = build_diffusion_graph(db, k=6, gamma=3.0)
            y = np.zeros(30)
            y[local.integers(0, 30, size=8)] = local.uniform(0.1, 1.0, size=8)
            f, _, converged = solve_diffusion(graph, y, alpha=0.9, tol=1e-10, max_iter=500)
            dense = np.linalg.solve(np.eye(30) - 0.9 * graph.operator.toarray(), y)
            assert converged
            assert np.linalg.norm(f - dense) / np.linalg.norm(dense) < 1e-6

    def test_zero_seed_falls_back_to_similarity(self):
        db = DescriptorSet(("a", "b", "c"), np.eye(3))
        graph = build_diffusion_graph(db, k=1)
        ranked = diffuse(graph, -np.ones(3) / math.sqrt(3.0), db, kq=2, alpha=0.9,
                         query_name="q")
        assert len(ranked.names) == 3  # all sims negative -> y = 0 -> fallback

    def test_alpha_validation(self):
        db, graph = self.two_node_graph()
        with pytest.raises(ValueError, match="alpha"):
            diffuse(graph, np.array([1.0, 0.0]), db, kq=1, alpha=1.0)

    def test_nonconvergence_reports_residual(self, caplog):
        rng = np.random.default_rng(16)
        db = make_set(rng, 20, 6, positive=True)
        graph = build_diffusion_graph(db, k=5)
        query = unit_rows(rng, 1, 6, positive=True)[0]
        with caplog.at_level("WARNING"):
            ranked = diffuse(graph, query, db, kq=5, alpha=0.99, tol=1e-15, max_iter=1,
                             query_name="q")
        assert len(ranked) == 20
        assert any("residual" in rec.message for rec in caplog.records)


class TestConjugateGradient:
    def test_exact_on_small_spd_system(self):
        rng = np.random.default_rng(17)
        m = rng.normal(size=(6, 6))
        a = m @ m.T + 6 * np.eye(6)
        b = rng.normal(size=6)
        x, residual, converged = conjugate_gradient(lambda v: a @ v, b, tol=1e-12, max_iter=50)
        assert converged
        assert np.allclose(x, np.linalg.solve(a, b), atol=1e-8)
        assert residual <= 1e-12

    def test_zero_rhs(self):
        x, residual, converged = conjugate_gradient(lambda v: v, np.zeros(4), 1e-9, 10)
        assert converged and residual == 0.0
        assert np.array_equal(x, np.zeros(4))


class TestPipelineSpec:
    @pytest.mark.parametrize("text,stages", [
        ("G", ("G",)),
        ("g+aqe", ("G", "AQE")),
        ("G+DFS", ("G", "DFS")),
        ("G+DBA", ("DBA", "G")),
        ("G+AQE+DFS", ("G", "AQE", "DFS")),
        ("G+DBA+AQE", ("DBA", "G", "AQE")),
        ("G+DBA+DFS", ("DBA", "G", "DFS")),
        ("G+DBA+AQE+DFS", ("DBA", "G", "AQE", "DFS")),
    ])
    def test_canonical_stage_order(self, text, stages):
        assert parse_pipeline(text).stages == stages

    def test_labels_follow_table_headers(self):
        assert parse_pipeline("g+dba+aqe+dfs").label == "G+DBA+AQE+DFS"
        assert parse_pipeline("G+AQE+DFS").label == "G+AQE+DFS"

    def test_default_parameters(self):
        spec = parse_pipeline("G+AQE")
        assert spec.aqe_n == 10
        spec = parse_pipeline("G+DBA+AQE")
        assert spec.aqe_n == 1 and spec.dba_n == 20
        spec = parse_pipeline("G+DFS")
        assert (spec.dfs_k, spec.dfs_kq, spec.dfs_alpha, spec.dfs_gamma) == (50, 10, 0.99, 3.0)
        assert (spec.dfs_tol, spec.dfs_max_iter) == (1e-6, 100)

    def test_overrides_win(self):
        spec = parse_pipeline("G+DBA+AQE", aqe_n=7, dba_n=3)
        assert spec.aqe_n == 7 and spec.dba_n == 3

    def test_malformed_specs(self):
        for bad in ("", "AQE", "G+G", "G+XYZ"):
            with pytest.raises(ValueError):
                parse_pipeline(bad)

    def test_spec_requires_g(self):
        with pytest.raises(ValueError, match="exactly once"):
            PipelineSpec(stages=("AQE", "DFS"))


class TestRunPipeline:
    def setup_method(self):
        rng = np.random.default_rng(18)
        self.db = make_set(rng, 25, 8, positive=True)
        self.queries = make_set(rng, 4, 8, prefix="q", positive=True)

    def test_plain_g_equals_global_search(self):
        spec = parse_pipeline("G")
        got = run_pipeline(spec, self.queries, self.db)
        want = global_search(self.queries, self.db)
        for a, b in zip(got, want):
            assert a.names == b.names
            assert np.array_equal(a.scores, b.scores)

    def test_aqe_n0_neutral(self):
        base = run_pipeline(parse_pipeline("G"), self.queries, self.db)
        neut = run_pipeline(parse_pipeline("G+AQE", aqe_n=0), self.queries, self.db)
        for a, b in zip(base, neut):
            assert a.names == b.names

    def test_dba_n0_neutral(self):
        base = run_pipeline(parse_pipeline("G"), self.queries, self.db)
        neut = run_pipeline(parse_pipeline("G+DBA", dba_n=0), self.queries, self.db)
        for a, b in zip(base, neut):
            assert a.names == b.names

    def test_dfs_alpha0_full_seed_neutral(self):
        base = run_pipeline(parse_pipeline("G"), self.queries, self.db)
        neut = run_pipeline(
            parse_pipeline("G+DFS", dfs_k=5, dfs_kq=len(self.db), dfs_alpha=0.0),
            self.queries, self.db,
        )
        for a, b in zip(base, neut):
            assert a.names == b.names

    def test_thread_count_invariance(self):
        spec = parse_pipeline("G+DBA+AQE+DFS", dba_n=5, dfs_k=6, dfs_kq=5)
        one = run_pipeline(spec, self.queries, self.db, threads=1)
        eight = run_pipeline(spec, self.queries, self.db, threads=8)
        for a, b in zip(one, eight):
            assert a.names == b.names
            assert np.array_equal(a.scores, b.scores)

    def test_rerun_bit_identical(self):
        spec = parse_pipeline("G+DBA+AQE+DFS", dba_n=4, dfs_k=5, dfs_kq=6)
        first = run_pipeline(spec, self.queries, self.db)
        second = run_pipeline(spec, self.queries, self.db)
        for a, b in zip(first, second):
            assert a.names == b.names
            assert np.array_equal(a.scores, b.scores)

    def test_rankings_complete_and_sorted(self):
        for text in ("G", "G+AQE", "G+DFS", "G+DBA", "G+AQE+DFS",
                     "G+DBA+AQE", "G+DBA+DFS", "G+DBA+AQE+DFS"):
            spec = parse_pipeline(text, dba_n=5, dfs_k=6, dfs_kq=5)
            for ranked in run_pipeline(spec, self.queries, self.db):
                assert sorted(ranked.names) == sorted(self.db.names)
                assert np.all(np.diff(ranked.scores) <= 0)

    def test_whitening_argument_post_processes(self):
        from irbench import fit_whitening, post_process

        model = fit_whitening(l2_normalize_rows(self.db.matrix), d=6)
        via_arg = run_pipeline(parse_pipeline("G"), self.queries, self.db, whitening=model)
        manual = global_search(post_process(self.queries, model), post_process(self.db, model))
        for a, b in zip(via_arg, manual):
            assert a.names == b.names


def test_rankings_tsv_format():
    db = DescriptorSet(("b", "a"), np.array([[1.0, 0.0], [0.0, 1.0]]))
    queries = DescriptorSet(("q",), np.array([[0.0, 1.0]]))
    buf = io.StringIO()
    write_rankings_tsv(global_search(queries, db), buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "query\trank\tname\tscore"
    assert lines[1] == "q\t1\ta\t1.000000"
    assert lines[2] == "q\t2\tb\t0.000000"
