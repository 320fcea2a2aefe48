"""
Unit tests for the breadth aggregation baseline and the smoothing metric.
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from core.breadth_baseline import (
    BreadthLayerStack,
    breadth_forward,
    smoothing_curve,
    smoothing_metric,
)
from core.depwise_engine import ExactEmbeddings
from core.graph import build_graph
from core.model import ModelParams, TableEmbeddings
from core.relations import ENTITY_ALPHABET, RelationLabel as R, entity_index
from core.taskgen import NOISE_KINDS, generate
from core.tensor import DimensionError, Tensor, grad_check_params, sum_all


def _one_hot(names, d):
    return {name: Tensor(np.eye(d)[i]) for i, name in enumerate(names)}


class TestBreadthStack:
    """Test stack construction and parameter naming."""

    def test_init_shapes(self):
        """Test each layer maps width d to d with a d x 2d neighbor projection."""
        stack = BreadthLayerStack.init(4, 3, np.random.default_rng(0))
        assert stack.num_layers == 3
        assert stack.width == 4
        assert stack.layers[0].w_nbr.shape == (4, 8)
        assert len(stack.parameters()) == 9

    def test_shared_weights_counted_once(self):
        """Test a shared stack exposes a single weight set."""
        stack = BreadthLayerStack.init(4, 5, np.random.default_rng(0), shared=True)
        assert stack.num_layers == 5
        assert sorted(stack.parameters("b")) == ["b.layer0.bias", "b.layer0.w_nbr", "b.layer0.w_self"]

    def test_zero_layers_rejected(self):
        """Test an empty stack raises DimensionError."""
        with pytest.raises(DimensionError):
            BreadthLayerStack.init(4, 0, np.random.default_rng(0))
        with pytest.raises(DimensionError):
            BreadthLayerStack([])


class TestBreadthForward:
    """Test message passing over story graphs."""

    def test_averaging_layer(self):
        """Test one averaging layer adds the neighbor mean to each node."""
        g = build_graph([("A", R.LEFT, "B"), ("B", R.LEFT, "C")])
        h = _one_hot(["A", "B", "C"], 3)
        out = breadth_forward(g, BreadthLayerStack.averaging(3, 1), h)
        assert_allclose(out["A"].data, [1.0, 1.0, 0.0])
        assert_allclose(out["B"].data, [0.5, 1.0, 0.5])

    def test_isolated_node_keeps_self_term(self):
        """Test a node without neighbors only applies its self transform."""
        g = build_graph([("A", R.OVERLAP, "A"), ("B", R.LEFT, "C")])
        h = _one_hot(["A", "B", "C"], 3)
        out = breadth_forward(g, BreadthLayerStack.averaging(3, 2), h)
        assert_allclose(out["A"].data, [1.0, 0.0, 0.0])

    def test_uses_graph_embeddings_by_default(self):
        """Test the graph's node embeddings are the default input."""
        g = build_graph([("A", R.LEFT, "B")], ExactEmbeddings(26))
        out = breadth_forward(g, BreadthLayerStack.averaging(26, 1))
        assert out["A"].data[0] == 1.0 and out["A"].data[1] == 1.0

    def test_width_mismatch(self):
        """Test embeddings of the wrong width are rejected."""
        g = build_graph([("A", R.LEFT, "B")])
        with pytest.raises(DimensionError):
            breadth_forward(g, BreadthLayerStack.averaging(4, 1), _one_hot(["A", "B"], 3))

    def test_gradients(self):
        """Test a two-layer stack passes a parameter gradient check."""
        rng = np.random.default_rng(4)
        emb = ExactEmbeddings(26)
        g = build_graph([("A", R.LEFT, "B"), ("B", R.ABOVE, "C")], emb)
        stack = BreadthLayerStack.init(26, 2, rng)
        w = Tensor(rng.normal(size=26))

        def loss():
            out = breadth_forward(g, stack)
            return sum_all(out["A"] * w)

        report = grad_check_params(loss, stack.parameters(), max_coords_per_param=10)
        assert report.passed, report.max_rel_error


class TestSmoothing:
    """Test the pairwise cosine metric and its growth with depth."""

    def test_metric_values(self):
        """Test orthogonal embeddings score 0 and parallel ones score 1."""
        assert smoothing_metric(_one_hot(["A", "B", "C"], 3)) == 0.0
        same = {"A": Tensor([1.0, 2.0]), "B": Tensor([2.0, 4.0])}
        assert smoothing_metric(same) == pytest.approx(1.0)

    def test_metric_edge_cases(self):
        """Test fewer than two or zero embeddings raise ValueError."""
        with pytest.raises(ValueError):
            smoothing_metric({"A": Tensor([1.0, 0.0])})
        with pytest.raises(ValueError):
            smoothing_metric({"A": Tensor([1.0, 0.0]), "B": Tensor([0.0, 0.0])})

    def test_averaging_converges(self):
        """Test node embeddings on a chain become nearly parallel as layers grow."""
        names = ["A", "B", "C", "D", "E"]
        g = build_graph([(a, R.LEFT, b) for a, b in zip(names, names[1:])])
        curve = smoothing_curve(g, _one_hot(names, 5), max_layers=25)
        assert len(curve) == 25
        assert curve[0] > 0.0
        assert curve[-1] > curve[0]
        assert curve[-1] > 0.95

    def test_complete_graph_never_desmooths(self):
        """Test on a complete graph each extra averaging layer keeps or raises the similarity."""
        names = ["A", "B", "C", "D"]
        g = build_graph([(a, R.LEFT, b) for i, a in enumerate(names) for b in names[i + 1:]])
        curve = smoothing_curve(g, _one_hot(names, 4), max_layers=8)
        assert curve[0] > 0.0
        assert np.all(np.diff(curve) >= -1e-12)


class TestPermutationEquivariance:
    """Test renaming entities (and moving their rows along) renames the outputs."""

    @pytest.mark.parametrize("noise", NOISE_KINDS)
    def test_random_stack(self, noise):
        """Test a random tanh stack gives each renamed node the original node's output."""
        d = 6
        rng = np.random.default_rng(2)
        params = ModelParams.init(d, seed=4)
        stack = BreadthLayerStack.init(d, 3, rng)
        perm = rng.permutation(len(ENTITY_ALPHABET))
        rename = {name: ENTITY_ALPHABET[perm[i]] for i, name in enumerate(ENTITY_ALPHABET)}
        rows = params.entity_embed.data
        moved = np.empty_like(rows)
        for name, new_name in rename.items():
            moved[entity_index(new_name)] = rows[entity_index(name)]
        emb = TableEmbeddings(params.entity_embed, params.relation_embed)
        renamed_emb = TableEmbeddings(Tensor(moved), params.relation_embed)

        for inst in generate(6, 4, noise, n=2):
            triples = [(rename[a], label, rename[b]) for a, label, b in inst.triples]
            out = breadth_forward(build_graph(inst.triples, emb), stack)
            renamed_out = breadth_forward(build_graph(triples, renamed_emb), stack)
            assert set(renamed_out) == {rename[n] for n in out}
            for node, h in out.items():
                assert_allclose(renamed_out[rename[node]].data, h.data, atol=1e-12)
