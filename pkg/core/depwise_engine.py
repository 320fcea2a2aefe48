"""
Depth-Wise Reasoning Engine

One pass over an entity graph in three stages:

1. Node memory initialisation: every node binds a filler for each neighbor,
   ``M_i = sum_j FFN_init([V_i, E_ij, V_j]) (x) V_j``.
2. Long dependency collection: for every indirectly connected ordered pair,
   the atomic fillers along the BFS path are unbound, aggregated by a depth
   aggregator, composed with ``layernorm(FFN_agg(F) + F)`` and stored into the
   source memory under the destination's embedding.
3. Relation retrieval: every memory is unbound with the key and mixed back
   into the node embedding, ``V'_i = FFN_ret([V_i, layernorm(f_i), key])``.

There is no layer count: one pass covers any path length.

Exact mode swaps the learned networks for fixed maps (the initial filler is
the edge's offset feature, composition and embedding update are identities)
and, with one-hot roles and the sum aggregator, reproduces grid offsets
without rounding.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.graph import EntityGraph, bfs_tree, connected_pairs
from core.layers import Activation, FFNWeights, LayerNormParams, RNNWeights, ffn_forward, recurrent_cell_forward
from core.relations import ENTITY_ALPHABET, LABELS, NUM_LABELS, RelationLabel, entity_index
from core.tensor import (
    DimensionError,
    Tensor,
    add,
    concat,
    max_rows,
    mean_rows,
    stack,
    sum_rows,
)
from core.tpr_memory import NodeMemory, RoleBasis, bind_sum, random_unit_vector, retrieve, store, store_many

logger = logging.getLogger(__name__)

EXACT_WIDTH = 32

MemoryMap = Dict[str, NodeMemory]


class EngineConfigError(ValueError):
    """Raised when the engine is missing weights, embeddings or edge features."""


class AggregatorKind(str, Enum):
    """Depth aggregators over the ordered filler sequence of a path."""
    RECURRENT_GATED = "recurrent-gated"
    MEAN = "mean"
    MAX = "max"
    SUM_EXACT = "sum-exact"


class CollectionSemantics(str, Enum):
    SNAPSHOT = "snapshot"
    PROGRESSIVE = "progressive"


@dataclass
class AblationConfig:
    """Stage ablations; all off by default."""
    skip_collection: bool = False
    random_init_fillers: bool = False
    random_key: bool = False
    ablation_seed: int = 0

    def __post_init__(self):
        if self.ablation_seed < 0:
            raise EngineConfigError(f"ablation_seed must be non-negative, got {self.ablation_seed}")

    @property
    def active(self) -> List[str]:
        return [name for name in ("skip_collection", "random_init_fillers", "random_key") if getattr(self, name)]


@dataclass
class EngineWeights:
    """Learned networks of the three stages."""
    ffn_init: FFNWeights
    lstm: RNNWeights
    ffn_agg: FFNWeights
    ln_agg: LayerNormParams
    ffn_retrieve: FFNWeights
    ln_retrieve: LayerNormParams

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, activation: Activation = Activation.TANH) -> "EngineWeights":
        return cls(
            ffn_init=FFNWeights.init([3 * d, d, d], rng, activation),
            lstm=RNNWeights.init(d, d, rng),
            ffn_agg=FFNWeights.init([d, d, d], rng, activation),
            ln_agg=LayerNormParams.init(d),
            ffn_retrieve=FFNWeights.init([3 * d, d, d], rng, activation),
            ln_retrieve=LayerNormParams.init(d),
        )

    def parameters(self) -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        params.update(self.ffn_init.parameters("engine.ffn_init"))
        params.update(self.lstm.parameters("engine.lstm"))
        params.update(self.ffn_agg.parameters("engine.ffn_agg"))
        params.update(self.ln_agg.parameters("engine.ln_agg"))
        params.update(self.ffn_retrieve.parameters("engine.ffn_retrieve"))
        params.update(self.ln_retrieve.parameters("engine.ln_retrieve"))
        return params

    def check_width(self, d: int) -> None:
        expected = {
            "ffn_init": (self.ffn_init.input_width, self.ffn_init.output_width, 3 * d, d),
            "ffn_agg": (self.ffn_agg.input_width, self.ffn_agg.output_width, d, d),
            "ffn_retrieve": (self.ffn_retrieve.input_width, self.ffn_retrieve.output_width, 3 * d, d),
            "lstm": (self.lstm.input_width, self.lstm.hidden, d, d),
            "ln_agg": (self.ln_agg.width, self.ln_agg.width, d, d),
            "ln_retrieve": (self.ln_retrieve.width, self.ln_retrieve.width, d, d),
        }
        for name, (got_in, got_out, want_in, want_out) in expected.items():
            if (got_in, got_out) != (want_in, want_out):
                raise EngineConfigError(
                    f"{name} maps {got_in}->{got_out}, width {d} needs {want_in}->{want_out}"
                )


@dataclass
class EngineConfig:
    """
    Engine settings. ``weights`` is required unless ``exact`` is set.
    """
    d: int = 64
    aggregator: AggregatorKind = AggregatorKind.RECURRENT_GATED
    collection_semantics: CollectionSemantics = CollectionSemantics.SNAPSHOT
    weights: Optional[EngineWeights] = None
    exact: bool = False
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def __post_init__(self):
        if self.d < 2:
            raise EngineConfigError(f"Embedding width must be >= 2, got {self.d}")
        self.aggregator = AggregatorKind(self.aggregator)
        self.collection_semantics = CollectionSemantics(self.collection_semantics)
        if self.exact:
            if self.aggregator is AggregatorKind.RECURRENT_GATED:
                raise EngineConfigError("Exact mode has no learned aggregator; use sum-exact, mean or max")
            return
        if self.weights is None:
            raise EngineConfigError("Trained mode needs engine weights")
        self.weights.check_width(self.d)

    @classmethod
    def exact_mode(cls, d: int = EXACT_WIDTH, **kwargs) -> "EngineConfig":
        return cls(d=d, aggregator=kwargs.pop("aggregator", AggregatorKind.SUM_EXACT), exact=True, **kwargs)


# ============================ EXACT EMBEDDINGS ============================

class ExactEmbeddings:
    """
    Parameter-free embeddings: one-hot entity roles and offset relation
    features (``dx`` in coordinate 0, ``dy`` in coordinate 1).
    """

    def __init__(self, width: int = EXACT_WIDTH):
        if width < 26:
            raise EngineConfigError(f"One-hot roles for 26 entities need width >= 26, got {width}")
        self.width = width
        self.roles = RoleBasis.create(ENTITY_ALPHABET, width)

    def entity_row(self, name: str) -> int:
        return entity_index(name)

    def entity_vector(self, name: str) -> Tensor:
        entity_index(name)
        return self.roles.role(name)

    def relation_vector(self, label: RelationLabel) -> Tensor:
        return Tensor(offset_filler(label.offset, self.width))


def offset_filler(offset: Tuple[float, float], width: int) -> np.ndarray:
    v = np.zeros(width)
    v[0], v[1] = offset
    return v


def decode_offset(filler: Tensor) -> RelationLabel:
    """Label of the signs of the first two coordinates of an exact-mode filler."""
    return RelationLabel.from_offset(filler.data[0], filler.data[1])


# ============================ AGGREGATION ============================

def aggregate(
    kind: AggregatorKind,
    fillers: Sequence[Tensor],
    weights: Optional[EngineWeights] = None,
) -> Tensor:
    """
    Reduce an ordered filler sequence to one filler.

    Raises:
        ValueError: empty sequence
        EngineConfigError: recurrent aggregation without weights
    """
    kind = AggregatorKind(kind)
    if not fillers:
        raise ValueError("aggregate needs at least one filler")
    if kind is AggregatorKind.RECURRENT_GATED:
        if weights is None:
            raise EngineConfigError("recurrent-gated aggregation needs gated cell weights")
        state = weights.lstm.zero_state()
        for f in fillers:
            state = recurrent_cell_forward(weights.lstm, f, state)
        return state[0]
    rows = stack(fillers)
    if kind is AggregatorKind.MEAN:
        return mean_rows(rows)
    if kind is AggregatorKind.MAX:
        return max_rows(rows)
    return sum_rows(rows)


# ============================ STAGE 1: INITIALISATION ============================

def _embedding(g: EntityGraph, node: str) -> Tensor:
    try:
        return g.node_embeddings[node]
    except KeyError:
        raise EngineConfigError(f"Node {node} has no embedding") from None


def _init_filler(g: EntityGraph, src: str, dst: str, cfg: EngineConfig) -> Tensor:
    if cfg.ablation.random_init_fillers:
        rng = np.random.default_rng([cfg.ablation.ablation_seed, g.node_embed_index[src], g.node_embed_index[dst]])
        return Tensor(rng.normal(size=cfg.d))
    feature = g.edge_feature(src, dst)
    if feature is None:
        raise EngineConfigError(f"Edge {src}->{dst} has no feature")
    if cfg.exact:
        return feature
    return ffn_forward(cfg.weights.ffn_init, concat([_embedding(g, src), feature, _embedding(g, dst)]))


def init_memories(g: EntityGraph, cfg: EngineConfig) -> MemoryMap:
    """Bind one filler per neighbor into each node's memory; isolated nodes get zeros."""
    memories: MemoryMap = {}
    for node in g.node_ids:
        neighbors = g.neighbors(node)
        memory = NodeMemory.zeros(cfg.d)
        if neighbors:
            fillers = [_init_filler(g, node, n, cfg) for n in neighbors]
            roles = [_embedding(g, n) for n in neighbors]
            memory = NodeMemory(bind_sum(fillers, roles))
        memories[node] = memory
    return memories


# ============================ STAGE 2: COLLECTION ============================

@dataclass
class PathTrace:
    """What collection did for one ordered pair."""
    source: str
    target: str
    path: List[str]
    hop_fillers: List[Tensor]
    composed: Tensor


def compose(aggregated: Tensor, cfg: EngineConfig) -> Tensor:
    """``layernorm(FFN_agg(F) + F)``; identity in exact mode."""
    if cfg.exact:
        return aggregated
    w = cfg.weights
    return w.ln_agg.apply(add(ffn_forward(w.ffn_agg, aggregated), aggregated))


def _collect(
    g: EntityGraph,
    memories: MemoryMap,
    cfg: EngineConfig,
    pairs: Optional[Sequence[Tuple[str, str]]] = None,
) -> Tuple[MemoryMap, List[PathTrace]]:
    if cfg.ablation.skip_collection:
        return dict(memories), []
    if pairs is None:
        pairs = connected_pairs(g)
    unique_pairs = list(dict.fromkeys(pairs))
    trees = {src: bfs_tree(g, src) for src in sorted({s for s, _ in unique_pairs})}
    snapshot = cfg.collection_semantics is CollectionSemantics.SNAPSHOT

    current = dict(memories)
    atomic_cache: Dict[Tuple[str, str], Tensor] = {}

    def atomic(a: str, b: str) -> Tensor:
        if not snapshot:
            return retrieve(current[a], _embedding(g, b))
        if (a, b) not in atomic_cache:
            atomic_cache[(a, b)] = retrieve(memories[a], _embedding(g, b))
        return atomic_cache[(a, b)]

    traces: List[PathTrace] = []
    pending: Dict[str, Dict[str, Tensor]] = {}
    for src, dst in unique_pairs:
        path = trees[src].path_to(dst)
        if path is None or len(path) < 3:
            continue
        hop_fillers = [atomic(path[i], path[i + 1]) for i in range(len(path) - 1)]
        composed = compose(aggregate(cfg.aggregator, hop_fillers, cfg.weights), cfg)
        traces.append(PathTrace(src, dst, path, hop_fillers, composed))
        if snapshot:
            pending.setdefault(src, {})[dst] = composed
        else:
            current[src] = store(current[src], composed, _embedding(g, dst))

    for src in sorted(pending):
        targets = sorted(pending[src])
        current[src] = store_many(
            current[src],
            [pending[src][t] for t in targets],
            [_embedding(g, t) for t in targets],
        )
    traces.sort(key=lambda t: (t.source, t.target))
    logger.debug(f"Collected {len(traces)} long dependencies over {len(g)} nodes")
    return current, traces


def collect_long_dependencies(
    g: EntityGraph,
    memories: MemoryMap,
    cfg: EngineConfig,
    pairs: Optional[Sequence[Tuple[str, str]]] = None,
) -> MemoryMap:
    """
    Store a composed filler for every ordered pair at hop distance >= 2.

    Under snapshot semantics all unbinding reads ``memories`` as given and
    the stores are merged per source in sorted order, so the iteration order
    of ``pairs`` does not affect the result. Progressive semantics reads and
    writes the live memories in ``pairs`` order.
    """
    return _collect(g, memories, cfg, pairs)[0]


# ============================ STAGE 3: RETRIEVAL ============================

def retrieve_relations(
    g: EntityGraph,
    memories: MemoryMap,
    key: Tensor,
    cfg: EngineConfig,
) -> Tuple[Dict[str, Tensor], Dict[str, Tensor]]:
    """
    Unbind every memory with ``key`` and update the node embeddings.

    Returns:
        (updated embeddings, retrieved fillers), both keyed by node id

    Raises:
        DimensionError: key width differs from the engine width
    """
    if key.shape != (cfg.d,):
        raise DimensionError(f"Key must have length {cfg.d}, got shape {key.shape}")
    updated: Dict[str, Tensor] = {}
    fillers: Dict[str, Tensor] = {}
    for node in g.node_ids:
        f = retrieve(memories[node], key)
        fillers[node] = f
        if cfg.exact:
            updated[node] = _embedding(g, node)
        else:
            w = cfg.weights
            updated[node] = ffn_forward(w.ffn_retrieve, concat([_embedding(g, node), w.ln_retrieve.apply(f), key]))
    return updated, fillers


# ============================ FULL PASS ============================

@dataclass
class EngineResult:
    updated_embeddings: Dict[str, Tensor]
    retrieved_fillers: Dict[str, Tensor]
    memories: MemoryMap
    initial_memories: MemoryMap
    traces: List[PathTrace]
    source_filler: Optional[Tensor] = None


def ablation_key(cfg: EngineConfig) -> Tensor:
    rng = np.random.default_rng([cfg.ablation.ablation_seed, 1])
    return Tensor(random_unit_vector(rng, cfg.d))


def run_engine(
    g: EntityGraph,
    key: Tensor,
    cfg: EngineConfig,
    source: Optional[str] = None,
) -> EngineResult:
    """
    Initialise, collect and retrieve in one pass.

    ``source``, when given, selects the node whose retrieved filler is
    returned as ``source_filler``.
    """
    if cfg.ablation.random_key:
        key = ablation_key(cfg)
    initial = init_memories(g, cfg)
    memories, traces = _collect(g, initial, cfg)
    updated, fillers = retrieve_relations(g, memories, key, cfg)
    source_filler = None
    if source is not None:
        g._require(source)
        source_filler = fillers[source]
    return EngineResult(updated, fillers, memories, initial, traces, source_filler)


def exact_logits(filler: Tensor) -> Tensor:
    """One-hot logits over the label vocabulary for an exact-mode filler."""
    logits = np.zeros(NUM_LABELS)
    logits[LABELS.index(decode_offset(filler))] = 1.0
    return Tensor(logits)
