"""
Breadth Aggregation Baseline

A stackable mean-over-neighbors message-passing layer used to show how
node embeddings converge as layers are added:

    h_i' = act(W_self h_i + b + mean_{j in N(i)} W_nbr [h_j ; e_ij])

Edge features enter by concatenation with the neighbor state followed by
the ``d x 2d`` projection ``W_nbr``.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional

import numpy as np

from core.graph import EntityGraph
from core.layers import Activation, ACTIVATIONS
from core.tensor import DimensionError, Tensor, add, concat, matvec, mean_rows, stack

logger = logging.getLogger(__name__)


@dataclass
class BreadthLayerWeights:
    w_self: Tensor
    w_nbr: Tensor
    bias: Tensor

    @property
    def width(self) -> int:
        return self.w_self.shape[0]

    def parameters(self, prefix: str) -> Dict[str, Tensor]:
        return {f"{prefix}.w_self": self.w_self, f"{prefix}.w_nbr": self.w_nbr, f"{prefix}.bias": self.bias}


@dataclass
class BreadthLayerStack:
    """``num_layers`` breadth layers; with ``shared`` every layer reuses one weight set."""
    layers: List[BreadthLayerWeights]
    activation: Activation = Activation.TANH

    def __post_init__(self):
        if not self.layers:
            raise DimensionError("A breadth stack needs at least one layer")
        d = self.layers[0].width
        for i, layer in enumerate(self.layers):
            if (
                layer.w_self.shape != (d, d)
                or layer.w_nbr.shape != (d, 2 * d)
                or layer.bias.shape != (d,)
            ):
                raise DimensionError(f"Breadth layer {i} does not map width {d} to {d}")
        self.activation = Activation(self.activation)

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def width(self) -> int:
        return self.layers[0].width

    @classmethod
    def init(
        cls,
        d: int,
        num_layers: int,
        rng: np.random.Generator,
        activation: Activation = Activation.TANH,
        shared: bool = False,
    ) -> "BreadthLayerStack":
        if num_layers < 1:
            raise DimensionError(f"num_layers must be >= 1, got {num_layers}")

        def fresh() -> BreadthLayerWeights:
            return BreadthLayerWeights(
                Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d)), requires_grad=True),
                Tensor(rng.normal(0.0, 1.0 / np.sqrt(2 * d), size=(d, 2 * d)), requires_grad=True),
                Tensor(np.zeros(d), requires_grad=True),
            )

        if shared:
            layer = fresh()
            return cls([layer] * num_layers, activation)
        return cls([fresh() for _ in range(num_layers)], activation)

    @classmethod
    def averaging(cls, d: int, num_layers: int) -> "BreadthLayerStack":
        """Identity self and neighbor transforms, no nonlinearity: ``h_i + mean_j h_j``."""
        layer = BreadthLayerWeights(
            Tensor(np.eye(d)),
            Tensor(np.hstack([np.eye(d), np.zeros((d, d))])),
            Tensor(np.zeros(d)),
        )
        return cls([layer] * num_layers, Activation.IDENTITY)

    def parameters(self, prefix: str = "breadth") -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        seen = set()
        for i, layer in enumerate(self.layers):
            if id(layer) in seen:
                continue
            seen.add(id(layer))
            params.update(layer.parameters(f"{prefix}.layer{i}"))
        return params


def _edge_feature(g: EntityGraph, src: str, dst: str, d: int) -> Tensor:
    feature = g.edge_feature(src, dst)
    return feature if feature is not None else Tensor(np.zeros(d))


def breadth_layer(
    g: EntityGraph,
    layer: BreadthLayerWeights,
    activation: Activation,
    h: Mapping[str, Tensor],
) -> Dict[str, Tensor]:
    act = ACTIVATIONS[activation]
    d = layer.width
    out: Dict[str, Tensor] = {}
    for node in g.node_ids:
        z = add(matvec(layer.w_self, h[node]), layer.bias)
        neighbors = g.neighbors(node)
        if neighbors:
            messages = [
                matvec(layer.w_nbr, concat([h[n], _edge_feature(g, node, n, d)]))
                for n in neighbors
            ]
            z = add(z, mean_rows(stack(messages)))
        out[node] = act(z)
    return out


def breadth_forward(
    g: EntityGraph,
    stack_weights: BreadthLayerStack,
    embeddings: Optional[Mapping[str, Tensor]] = None,
) -> Dict[str, Tensor]:
    """
    Run every layer of the stack over the graph.

    ``embeddings`` defaults to the graph's node embeddings.

    Raises:
        DimensionError: an embedding width differs from the stack width
    """
    h = dict(embeddings if embeddings is not None else g.node_embeddings)
    for node in g.node_ids:
        if node not in h or h[node].shape != (stack_weights.width,):
            raise DimensionError(f"Node {node} needs an embedding of width {stack_weights.width}")
    for layer in stack_weights.layers:
        h = breadth_layer(g, layer, stack_weights.activation, h)
    return h


def smoothing_metric(embeddings: Mapping[str, Tensor]) -> float:
    """
    Mean pairwise cosine similarity of node embeddings.

    Raises:
        ValueError: fewer than two embeddings
    """
    if len(embeddings) < 2:
        raise ValueError("smoothing_metric needs at least two embeddings")
    rows = np.stack([t.data for t in embeddings.values()])
    norms = np.linalg.norm(rows, axis=1)
    if np.any(norms == 0):
        raise ValueError("smoothing_metric is undefined for zero embeddings")
    unit = rows / norms[:, None]
    cos = unit @ unit.T
    n = len(rows)
    return float(cos[np.triu_indices(n, k=1)].mean())


def smoothing_curve(
    g: EntityGraph,
    embeddings: Mapping[str, Tensor],
    max_layers: int,
    stack_factory: Optional[Callable[[int], "BreadthLayerStack"]] = None,
) -> List[float]:
    """Smoothing metric after 1..max_layers layers (averaging stack unless a factory is given)."""
    d = next(iter(embeddings.values())).shape[0]
    curve = []
    for layers in range(1, max_layers + 1):
        stack_weights = stack_factory(layers) if stack_factory else BreadthLayerStack.averaging(d, layers)
        curve.append(smoothing_metric(breadth_forward(g, stack_weights, embeddings)))
    logger.debug(f"Smoothing curve: {[round(c, 4) for c in curve]}")
    return curve
