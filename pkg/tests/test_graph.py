"""
Unit tests for entity graph construction and shortest-path search.
"""

import logging

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from core.graph import (
    GraphConflictError,
    NodeLookupError,
    bfs_shortest_path,
    bfs_tree,
    build_graph,
    connected_pairs,
    edge_features,
    path_relation,
)
from core.model import ModelParams, TableEmbeddings
from core.properties import _brute_force_path, random_graph
from core.relations import RelationLabel as R
from core.tensor import Tensor


class _FakeEmbeddings:
    """Deterministic embeddings: entity i -> e_i, label j -> 10 + j constant vector."""

    width = 4

    def entity_row(self, name):
        return ord(name) - ord("A")

    def entity_vector(self, name):
        return Tensor(np.full(self.width, float(self.entity_row(name))))

    def relation_vector(self, label):
        return Tensor(np.full(self.width, 10.0 + label.index))


class TestBuildGraph:
    """Test node ordering, edges and conflict handling."""

    def test_first_mention_order(self):
        """Test nodes appear in the order they are first mentioned."""
        g = build_graph([("K", R.BELOW, "C"), ("C", R.LEFT, "A")])
        assert g.node_ids == ["K", "C", "A"]
        assert len(g) == 3
        assert g.num_edges == 2

    def test_sorted_neighbors(self):
        """Test adjacency lists are sorted by entity."""
        g = build_graph([("B", R.LEFT, "Z"), ("B", R.ABOVE, "A"), ("B", R.RIGHT, "M")])
        assert g.neighbors("B") == ["A", "M", "Z"]
        assert g.degree("B") == 3

    def test_edge_label_both_directions(self):
        """Test reading an edge backwards gives the inverse relation."""
        g = build_graph([("A", R.UPPER_LEFT, "B")])
        assert g.edge_label("A", "B") is R.UPPER_LEFT
        assert g.edge_label("B", "A") is R.LOWER_RIGHT
        assert g.edge_label("A", "A") is R.OVERLAP

    def test_edge_label_requires_adjacency(self):
        """Test non-adjacent pairs raise NodeLookupError."""
        g = build_graph([("A", R.LEFT, "B"), ("B", R.LEFT, "C")])
        with pytest.raises(NodeLookupError):
            g.edge_label("A", "C")

    def test_consistent_duplicate_collapses(self, caplog):
        """Test a restated relation (either direction) is kept once with a warning."""
        with caplog.at_level(logging.WARNING):
            g = build_graph([("A", R.LEFT, "B"), ("B", R.RIGHT, "A")])
        assert g.num_edges == 1
        assert "Duplicate" in caplog.text

    def test_contradiction_rejected(self):
        """Test contradictory relations for a pair raise GraphConflictError."""
        with pytest.raises(GraphConflictError):
            build_graph([("A", R.LEFT, "B"), ("A", R.ABOVE, "B")])

    def test_self_relations(self):
        """Test self overlap is skipped and any other self relation rejected."""
        g = build_graph([("A", R.OVERLAP, "A"), ("A", R.LEFT, "B")])
        assert g.num_edges == 1
        with pytest.raises(GraphConflictError):
            build_graph([("A", R.LEFT, "A")])

    def test_string_labels_parsed(self):
        """Test labels given as strings are accepted."""
        g = build_graph([("A", "lower-left", "B")])
        assert g.edge_label("A", "B") is R.LOWER_LEFT

    def test_unknown_node(self):
        """Test queries about missing nodes raise NodeLookupError (a KeyError)."""
        g = build_graph([("A", R.LEFT, "B")])
        assert "Q" not in g
        with pytest.raises(KeyError):
            g.neighbors("Q")

    def test_embeddings_attach_directional_features(self):
        """Test edge features follow direction and self loops are zero."""
        emb = _FakeEmbeddings()
        g = build_graph([("A", R.ABOVE, "C")], emb)
        assert g.width == 4
        assert g.node_embed_index == {"A": 0, "C": 2}
        assert_array_equal(g.node_embeddings["C"].data, np.full(4, 2.0))
        assert_array_equal(g.edge_feature("A", "C").data, np.full(4, 10.0 + R.ABOVE.index))
        assert_array_equal(g.edge_feature("C", "A").data, np.full(4, 10.0 + R.BELOW.index))
        assert_array_equal(g.edge_feature("A", "A").data, np.zeros(4))


class TestEdgeFeatures:
    """Test per-triple edge features over the trainable relation table."""

    @pytest.fixture
    def tables(self):
        params = ModelParams.init(6, seed=2)
        return params, TableEmbeddings(params.entity_embed, params.relation_embed)

    def test_forward_and_inverse_rows(self, tables):
        """Test the reverse direction reads the inverse label's row."""
        params, emb = tables
        forward, backward = edge_features(("A", R.UPPER_LEFT, "B"), emb)
        assert_array_equal(forward.data, params.relation_embed.data[R.UPPER_LEFT.index])
        assert_array_equal(backward.data, params.relation_embed.data[R.LOWER_RIGHT.index])

    def test_self_loop_is_zero(self, tables):
        """Test a self relation gets zero features in both directions."""
        _, emb = tables
        forward, backward = edge_features(("A", R.OVERLAP, "A"), emb)
        assert_array_equal(forward.data, np.zeros(6))
        assert_array_equal(backward.data, np.zeros(6))

    def test_string_label(self, tables):
        """Test string labels are parsed before the lookup."""
        params, emb = tables
        forward, _ = edge_features(("A", "below", "B"), emb)
        assert_array_equal(forward.data, params.relation_embed.data[R.BELOW.index])

    def test_label_rows_shared_across_edges(self, tables):
        """Test every edge with one label reads the same row and the graph uses these features."""
        _, emb = tables
        triples = [("A", R.LEFT, "B"), ("C", R.LEFT, "D"), ("B", R.ABOVE, "C")]
        g = build_graph(triples, emb)
        assert_array_equal(g.edge_feature("A", "B").data, g.edge_feature("C", "D").data)
        assert_array_equal(g.edge_feature("B", "A").data, g.edge_feature("D", "C").data)
        for triple in triples:
            forward, backward = edge_features(triple, emb)
            assert_array_equal(g.edge_feature(triple[0], triple[2]).data, forward.data)
            assert_array_equal(g.edge_feature(triple[2], triple[0]).data, backward.data)


class TestShortestPaths:
    """Test BFS distances, paths and tie-breaking."""

    @pytest.fixture
    def diamond(self):
        # A - B - D and A - C - D: two shortest paths to D
        return build_graph([
            ("A", R.LEFT, "C"),
            ("C", R.LEFT, "D"),
            ("A", R.ABOVE, "B"),
            ("B", R.LEFT, "D"),
        ])

    def test_distances(self, diamond):
        """Test hop distances from the source."""
        tree = bfs_tree(diamond, "A")
        assert tree.distance == {"A": 0, "B": 1, "C": 1, "D": 2}

    def test_lexicographic_tie_break(self, diamond):
        """Test the smaller intermediate entity wins between equal paths."""
        assert bfs_shortest_path(diamond, "A", "D") == ["A", "B", "D"]

    def test_tie_break_ignores_sentence_order(self):
        """Test reversing sentence order does not change the chosen path."""
        triples = [("A", R.LEFT, "C"), ("C", R.LEFT, "D"), ("A", R.ABOVE, "B"), ("B", R.LEFT, "D")]
        assert bfs_shortest_path(build_graph(triples[::-1]), "A", "D") == ["A", "B", "D"]

    def test_path_to_self_and_disconnected(self):
        """Test trivial and missing paths."""
        g = build_graph([("A", R.LEFT, "B"), ("X", R.LEFT, "Y")])
        assert bfs_shortest_path(g, "A", "A") == ["A"]
        assert bfs_shortest_path(g, "A", "Y") is None
        with pytest.raises(NodeLookupError):
            bfs_shortest_path(g, "A", "Q")

    def test_story_path(self):
        """Test the four-entity chain K-C-Y-E is found through a distractor."""
        g = build_graph([
            ("K", R.BELOW, "C"),
            ("Y", R.ABOVE, "C"),
            ("E", R.BELOW, "Y"),
            ("K", R.LEFT, "P"),
        ])
        assert bfs_shortest_path(g, "K", "E") == ["K", "C", "Y", "E"]

    def test_path_relation(self):
        """Test the oracle relation along the BFS path."""
        g = build_graph([("A", R.LEFT, "B"), ("B", R.ABOVE, "C"), ("X", R.LEFT, "Y")])
        assert path_relation(g, "A", "C") is R.UPPER_LEFT
        assert path_relation(g, "C", "A") is R.LOWER_RIGHT
        assert path_relation(g, "A", "A") is R.OVERLAP
        assert path_relation(g, "A", "X") is None

    def test_connected_pairs(self):
        """Test pairs at distance >= 2, both orders, sorted."""
        g = build_graph([("A", R.LEFT, "B"), ("B", R.LEFT, "C"), ("C", R.LEFT, "D")])
        assert connected_pairs(g) == [("A", "C"), ("A", "D"), ("B", "D"), ("C", "A"), ("D", "A"), ("D", "B")]

    @pytest.mark.parametrize("seed", range(5))
    def test_bfs_matches_brute_force(self, seed):
        """Test BFS agrees with exhaustive enumeration on small random graphs."""
        rng = np.random.default_rng(seed)
        g = build_graph(random_graph(rng, 7))
        for src in g.node_ids:
            for dst in g.node_ids:
                assert bfs_shortest_path(g, src, dst) == _brute_force_path(g, src, dst)
