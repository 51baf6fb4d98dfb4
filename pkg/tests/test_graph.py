import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lsec import graph as G
from lsec.errors import ArgumentError, ContractError, GraphIndexError, ParseError

from conftest import tiny_tripartite


def write_lines(path, lines):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def dense_from_csr(csr: G.Csr) -> np.ndarray:
    m = np.zeros((csr.n_rows, csr.n_cols), dtype=int)
    for r in range(csr.n_rows):
        m[r, csr.row(r)] = 1
    return m


class TestLoadEdges:
    def test_duplicate_collapses_to_earliest_timestamp(self, tmp_path):
        p = tmp_path / "buy.tsv"
        write_lines(p, ["u1\ti1\t100", "u1\ti1\t90"])
        edges, ts = G.TsvLoader().load_edges(str(p), "buy")
        assert edges.shape == (1, 2)
        assert ts.tolist() == [90]

    def test_two_plain_edges(self, tmp_path):
        p = tmp_path / "buy.tsv"
        write_lines(p, ["u1\ti1", "u2\ti2"])
        loader = G.TsvLoader()
        edges, ts = loader.load_edges(str(p), "buy")
        assert edges.shape == (2, 2)
        assert ts is None
        assert len(loader.maps[G.USER]) == 2
        assert len(loader.maps[G.ITEM]) == 2

    def test_bad_timestamp_reports_line(self, tmp_path):
        p = tmp_path / "buy.tsv"
        write_lines(p, ["u1\ti1\t5", "u2\ti2\tnope"])
        with pytest.raises(ParseError, match=":2"):
            G.TsvLoader().load_edges(str(p), "buy")

    def test_wrong_column_count(self, tmp_path):
        p = tmp_path / "buy.tsv"
        write_lines(p, ["u1"])
        with pytest.raises(ParseError, match=":1"):
            G.TsvLoader().load_edges(str(p), "buy")

    def test_inconsistent_arity(self, tmp_path):
        p = tmp_path / "buy.tsv"
        write_lines(p, ["u1\ti1\t5", "u2\ti2"])
        with pytest.raises(ParseError):
            G.TsvLoader().load_edges(str(p), "buy")

    def test_ids_shared_across_files(self, tmp_path):
        write_lines(tmp_path / "buy.tsv", ["alice\tbook\t1"])
        write_lines(tmp_path / "follow.tsv", ["alice\thost1"])
        write_lines(tmp_path / "sell.tsv", ["host1\tbook"])
        g = G.load_tripartite_dir(str(tmp_path))
        assert (g.n_users, g.n_items, g.n_streamers) == (1, 1, 1)
        assert g.id_maps[G.USER].decode(0) == "alice"

    @pytest.mark.skipif("LSEC_SMALL_DIR" not in os.environ,
                        reason="released small dataset not present")
    def test_released_small_dataset_statistics(self):
        g = G.load_tripartite_dir(os.environ["LSEC_SMALL_DIR"])
        assert g.buy.n_edges == 451_441
        assert g.n_users == 29_422
        assert g.n_items == 31_630


class TestIdMap:
    @given(st.lists(st.text(min_size=1, max_size=8), min_size=1, max_size=40))
    @settings(max_examples=50, deadline=None)
    def test_encode_decode_bijection(self, raws):
        m = G.IdMap()
        for r in raws:
            idx = m.encode(r)
            assert m.decode(idx) == r
        # encoding again returns the same dense index
        assert [m.encode(r) for r in raws] == [m.encode(r) for r in raws]
        assert len(m) == len(set(raws))


class TestBuildBipartite:
    def test_hand_transpose(self):
        g = G.build_bipartite(np.array([[0, 0], [0, 1], [1, 1]]), 2, 2)
        assert g.forward.row(0).tolist() == [0, 1]
        assert g.forward.row(1).tolist() == [1]
        assert g.reverse.row(0).tolist() == [0]
        assert g.reverse.row(1).tolist() == [0, 1]

    def test_empty_graph(self):
        g = G.build_bipartite(np.empty((0, 2)), 3, 4)
        assert g.n_edges == 0
        assert all(g.forward.row(i).size == 0 for i in range(3))

    def test_transpose_matches_dense_oracle(self, rng):
        pairs = {(int(a), int(b)) for a, b in zip(rng.integers(0, 9, 80), rng.integers(0, 7, 80))}
        edges = np.array(sorted(pairs))[:50]
        g = G.build_bipartite(edges, 9, 7)
        np.testing.assert_array_equal(dense_from_csr(g.reverse), dense_from_csr(g.forward).T)

    def test_out_of_range_edge(self):
        with pytest.raises(GraphIndexError, match=r"\(1, 5\)"):
            G.build_bipartite(np.array([[0, 0], [1, 5]]), 2, 2)

    def test_duplicate_edge_rejected(self):
        with pytest.raises(ContractError):
            G.build_bipartite(np.array([[0, 1], [0, 1]]), 2, 2)

    def test_timestamps_follow_forward_order(self):
        edges = np.array([[1, 0], [0, 1], [0, 0]])
        ts = np.array([30, 20, 10])
        g = G.build_bipartite(edges, 2, 2, timestamps=ts)
        # forward order is (0,0), (0,1), (1,0)
        assert g.timestamps.tolist() == [10, 20, 30]


class TestDegreeQuantile:
    def make(self, degrees):
        edges = [(u, i) for u, d in enumerate(degrees) for i in range(d)]
        return G.build_bipartite(np.array(edges), len(degrees), max(degrees))

    def test_nearest_rank_p90(self):
        assert G.degree_quantile(self.make([1, 1, 2, 3, 10]), "forward", 0.9) == 10

    def test_nearest_rank_p50(self):
        assert G.degree_quantile(self.make([1, 1, 2, 3, 10]), "forward", 0.5) == 2

    @pytest.mark.parametrize("p", [0.1, 0.5, 0.999, 1.0])
    def test_constant_degrees(self, p):
        assert G.degree_quantile(self.make([3, 3, 3, 3]), "forward", p) == 3

    def test_at_least_one(self):
        g = G.build_bipartite(np.array([[0, 0]]), 5, 1)
        assert G.degree_quantile(g, "forward", 0.5) == 1

    def test_reverse_direction(self):
        g = self.make([1, 1, 2, 3, 10])
        degs = sorted(g.reverse.degrees().tolist())
        rank = int(np.ceil(0.5 * len(degs)))
        assert G.degree_quantile(g, "reverse", 0.5) == max(1, degs[rank - 1])

    @pytest.mark.parametrize("p", [0.0, -0.2, 1.00001])
    def test_p_out_of_range(self, p):
        with pytest.raises(ArgumentError):
            G.degree_quantile(self.make([1, 2]), "forward", p)


def dense_norm_oracle(edges, lc, rc, self_loops):
    n = lc + rc
    a = np.zeros((n, n))
    for l, r in edges:
        a[l, lc + r] = 1.0
        a[lc + r, l] = 1.0
    if self_loops:
        a += np.eye(n)
    d = a.sum(axis=1)
    dinv = np.where(d > 0, 1.0 / np.sqrt(d), 0.0)
    return dinv[:, None] * a * dinv[None, :]


class TestNormalizedBlocks:
    def test_single_edge_with_self_loops(self):
        g = G.build_bipartite(np.array([[0, 0]]), 1, 1)
        dense = G.normalized_blocks(g, self_loops=True).toarray()
        np.testing.assert_allclose(dense, [[0.5, 0.5], [0.5, 0.5]], atol=1e-15)

    def test_isolated_node_self_loop_row(self):
        g = G.build_bipartite(np.array([[0, 0]]), 2, 1)  # user 1 is isolated
        dense = G.normalized_blocks(g, self_loops=True).toarray()
        np.testing.assert_allclose(dense[1], [0.0, 1.0, 0.0], atol=1e-15)

    def test_isolated_node_zero_row_without_self_loops(self):
        g = G.build_bipartite(np.array([[0, 0]]), 2, 1)
        dense = G.normalized_blocks(g, self_loops=False).toarray()
        assert np.all(dense[1] == 0.0)

    @pytest.mark.parametrize("self_loops", [True, False])
    def test_matches_dense_oracle(self, self_loops, rng):
        pairs = {(int(a), int(b)) for a, b in zip(rng.integers(0, 4, 9), rng.integers(0, 3, 9))}
        edges = np.array(sorted(pairs))
        g = G.build_bipartite(edges, 4, 3)
        got = G.normalized_blocks(g, self_loops=self_loops).toarray()
        np.testing.assert_allclose(got, dense_norm_oracle(edges, 4, 3, self_loops), atol=1e-12)

    def test_symmetry_and_value_range(self):
        g = tiny_tripartite().buy
        mat = G.normalized_blocks(g, self_loops=True)
        diff = (mat - mat.T).toarray()
        assert np.abs(diff).max() < 1e-12
        vals = mat.data
        assert np.all(vals > 0.0) and np.all(vals <= 1.0)


class TestSnapshot:
    def test_round_trip(self, tmp_path):
        g = tiny_tripartite()
        path = str(tmp_path / "graph.bin")
        G.save_snapshot(g, path)
        g2 = G.load_snapshot(path)
        assert (g2.n_users, g2.n_items, g2.n_streamers) == (g.n_users, g.n_items, g.n_streamers)
        for rel in (0, 1, 2):
            a, b = g.relation(rel), g2.relation(rel)
            np.testing.assert_array_equal(a.forward.indptr, b.forward.indptr)
            np.testing.assert_array_equal(a.forward.indices, b.forward.indices)
            np.testing.assert_array_equal(a.reverse.indices, b.reverse.indices)
            if a.timestamps is None:
                assert b.timestamps is None
            else:
                np.testing.assert_array_equal(a.timestamps, b.timestamps)
        assert g2.id_maps[G.USER].raw_ids() == g.id_maps[G.USER].raw_ids()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"not a snapshot at all")
        with pytest.raises(ParseError):
            G.load_snapshot(str(path))
