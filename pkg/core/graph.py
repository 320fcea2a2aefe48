"""
Entity Graph

Builds the undirected entity graph of a story (one edge per relation
sentence) and answers shortest-path queries over it.

Features:
- Nodes in first-mention order, neighbor lists sorted by entity id
- Directional edge features (relation of the source to the destination)
- Consistent duplicate sentences collapse; contradictory ones are rejected
- Breadth-first search with a lexicographic tie-break between equal-length paths
"""

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np

from core.relations import RelationLabel, oracle_compose
from core.tensor import Tensor

logger = logging.getLogger(__name__)

Triple = Tuple[str, RelationLabel, str]
Path = List[str]


class GraphConflictError(ValueError):
    """Raised when two sentences give contradictory relations for one pair."""


class NodeLookupError(KeyError):
    """Raised when a query names an entity that is not in the graph."""


class GraphEmbeddings(Protocol):
    """Source of node embeddings and directional edge features."""

    width: int

    def entity_row(self, name: str) -> int:
        ...

    def entity_vector(self, name: str) -> Tensor:
        ...

    def relation_vector(self, label: RelationLabel) -> Tensor:
        ...


@dataclass(frozen=True)
class Edge:
    """One undirected edge; ``label`` is the relation of ``src`` to ``dst``."""
    edge_id: int
    src: str
    label: RelationLabel
    dst: str


@dataclass
class EntityGraph:
    """Immutable-after-build entity graph."""
    node_ids: List[str]
    node_embed_index: Dict[str, int]
    adjacency: Dict[str, List[Tuple[str, int]]]
    edges: List[Edge]
    node_embeddings: Dict[str, Tensor] = field(default_factory=dict)
    edge_features: Dict[Tuple[str, str], Tensor] = field(default_factory=dict)
    width: Optional[int] = None

    def __contains__(self, node: str) -> bool:
        return node in self.adjacency

    def __len__(self) -> int:
        return len(self.node_ids)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def degree(self, node: str) -> int:
        return len(self.neighbors(node))

    def neighbors(self, node: str) -> List[str]:
        self._require(node)
        return [n for n, _ in self.adjacency[node]]

    def edge_label(self, src: str, dst: str) -> RelationLabel:
        """Relation of ``src`` to ``dst`` for an adjacent pair."""
        self._require(src)
        self._require(dst)
        if src == dst:
            return RelationLabel.OVERLAP
        for neighbor, edge_id in self.adjacency[src]:
            if neighbor == dst:
                edge = self.edges[edge_id]
                return edge.label if edge.src == src else edge.label.inverse
        raise NodeLookupError(f"{src} and {dst} are not adjacent")

    def edge_feature(self, src: str, dst: str) -> Optional[Tensor]:
        """Feature of the directed edge; the self-loop feature is the zero vector."""
        if src == dst and self.width is not None:
            return Tensor(np.zeros(self.width))
        return self.edge_features.get((src, dst))

    def _require(self, node: str) -> None:
        if node not in self.adjacency:
            raise NodeLookupError(f"Unknown entity: {node!r}")


def edge_features(
    triple: Tuple[str, Union[RelationLabel, str], str],
    embeddings: GraphEmbeddings,
) -> Tuple[Tensor, Tensor]:
    """
    (feature src->dst, feature dst->src) of a story triple.

    Both directions read the provider's row for their label, so every edge
    with the same label shares one row; a self relation gets zero vectors.

    Raises:
        UnknownRelationError: label outside the vocabulary
    """
    src, raw_label, dst = triple
    label = RelationLabel.parse(raw_label)
    if src == dst:
        return Tensor(np.zeros(embeddings.width)), Tensor(np.zeros(embeddings.width))
    return embeddings.relation_vector(label), embeddings.relation_vector(label.inverse)


def _canonical(src: str, label: RelationLabel, dst: str) -> Triple:
    return (src, label, dst) if src <= dst else (dst, label.inverse, src)


def build_graph(
    triples: Sequence[Tuple[str, Union[RelationLabel, str], str]],
    embeddings: Optional[GraphEmbeddings] = None,
) -> EntityGraph:
    """
    Build the entity graph of a story.

    Args:
        triples: ``(src, label, dst)`` per sentence, read "src is label of dst"
        embeddings: optional provider of node embeddings and edge features

    Returns:
        EntityGraph with nodes in first-mention order

    Raises:
        GraphConflictError: contradictory relations for one pair, or a
            non-overlap self relation
        ValueError: empty entity name
    """
    node_ids: List[str] = []
    adjacency: Dict[str, List[Tuple[str, int]]] = {}
    edges: List[Edge] = []
    seen: Dict[Tuple[str, str], Triple] = {}

    def mention(name: str) -> None:
        if not name:
            raise ValueError("Entity names must be nonempty")
        if name not in adjacency:
            node_ids.append(name)
            adjacency[name] = []

    for src, raw_label, dst in triples:
        label = RelationLabel.parse(raw_label)
        mention(src)
        mention(dst)
        if src == dst:
            if label is not RelationLabel.OVERLAP:
                raise GraphConflictError(f"{src} cannot be {label.value} of itself")
            logger.debug(f"Skipping self relation for {src}")
            continue

        canon = _canonical(src, label, dst)
        pair = (canon[0], canon[2])
        if pair in seen:
            if seen[pair] != canon:
                raise GraphConflictError(
                    f"Contradictory relations between {pair[0]} and {pair[1]}: "
                    f"{seen[pair][1].value} vs {canon[1].value}"
                )
            logger.warning(f"Duplicate relation between {pair[0]} and {pair[1]} collapsed")
            continue
        seen[pair] = canon

        edge = Edge(len(edges), src, label, dst)
        edges.append(edge)
        adjacency[src].append((dst, edge.edge_id))
        adjacency[dst].append((src, edge.edge_id))

    for neighbors in adjacency.values():
        neighbors.sort()

    if embeddings is None:
        node_embed_index = {name: i for i, name in enumerate(node_ids)}
        return EntityGraph(node_ids, node_embed_index, adjacency, edges)

    node_embed_index = {name: embeddings.entity_row(name) for name in node_ids}
    node_embeddings = {name: embeddings.entity_vector(name) for name in node_ids}
    features: Dict[Tuple[str, str], Tensor] = {}
    for edge in edges:
        forward, backward = edge_features((edge.src, edge.label, edge.dst), embeddings)
        features[(edge.src, edge.dst)] = forward
        features[(edge.dst, edge.src)] = backward
    return EntityGraph(
        node_ids, node_embed_index, adjacency, edges,
        node_embeddings=node_embeddings, edge_features=features, width=embeddings.width,
    )


# ============================ SHORTEST PATHS ============================

@dataclass
class BFSTree:
    """Hop distances and first-discovery parents from one source."""
    source: str
    distance: Dict[str, int]
    parent: Dict[str, str]

    def path_to(self, dst: str) -> Optional[Path]:
        if dst not in self.distance:
            return None
        path = [dst]
        while path[-1] != self.source:
            path.append(self.parent[path[-1]])
        path.reverse()
        return path


def bfs_tree(g: EntityGraph, src: str) -> BFSTree:
    """
    Breadth-first search from ``src`` visiting neighbors in sorted order.

    The first parent to discover a node gives, per level, the
    lexicographically smallest shortest path.
    """
    g._require(src)
    distance = {src: 0}
    parent: Dict[str, str] = {}
    queue = deque([src])
    while queue:
        node = queue.popleft()
        for neighbor, _ in g.adjacency[node]:
            if neighbor not in distance:
                distance[neighbor] = distance[node] + 1
                parent[neighbor] = node
                queue.append(neighbor)
    return BFSTree(src, distance, parent)


def bfs_shortest_path(g: EntityGraph, src: str, dst: str) -> Optional[Path]:
    """
    Minimum-hop simple path from ``src`` to ``dst``, or None if disconnected.

    Raises:
        NodeLookupError: if either endpoint is not in the graph
    """
    g._require(dst)
    return bfs_tree(g, src).path_to(dst)


def path_relation(g: EntityGraph, src: str, dst: str) -> Optional[RelationLabel]:
    """Oracle relation of ``src`` to ``dst`` along the BFS path, or None if disconnected."""
    path = bfs_shortest_path(g, src, dst)
    if path is None:
        return None
    if len(path) == 1:
        return RelationLabel.OVERLAP
    return oracle_compose(g.edge_label(path[i], path[i + 1]) for i in range(len(path) - 1))


def connected_pairs(g: EntityGraph) -> List[Tuple[str, str]]:
    """Ordered pairs at hop distance >= 2, sorted by source then destination."""
    pairs: List[Tuple[str, str]] = []
    for src in sorted(g.node_ids):
        tree = bfs_tree(g, src)
        pairs.extend((src, dst) for dst in sorted(tree.distance) if tree.distance[dst] >= 2)
    return pairs
