"""
Trainable Story Models

Embedding tables, edge features and classifier heads around the depth-wise
engine, plus the breadth-aggregation classifier used as a baseline and the
versioned checkpoint envelope shared by both.

The classifier reads ``[V'_source, layernorm(retrieved filler), V'_target]``
and emits nine logits, one per relation label.
"""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, ValidationError as PydanticValidationError

from core.breadth_baseline import BreadthLayerStack, breadth_forward
from core.depwise_engine import (
    EXACT_WIDTH,
    AblationConfig,
    AggregatorKind,
    CollectionSemantics,
    EngineConfig,
    EngineResult,
    EngineWeights,
    ExactEmbeddings,
    exact_logits,
    run_engine,
)
from core.graph import EntityGraph, build_graph
from core.io_utils import PathLike, load_yaml_section, write_json
from core.layers import Activation, FFNWeights, LayerNormParams, ffn_forward
from core.relations import ENTITY_ALPHABET, LABELS, NUM_LABELS, RelationLabel, UnknownEntityError, entity_index
from core.taskgen import StoryInstance
from core.tensor import Tensor, concat, no_grad, row, softmax_xent
from core.tpr_memory import RoleBasis, RoleMode

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = "depwise-ckpt/1"
ENTITY_ROWS = len(ENTITY_ALPHABET)


class InstanceError(ValueError):
    """Raised when an instance cannot be fed to a model (e.g. question entity absent)."""


class CheckpointError(ValueError):
    """Raised for unreadable checkpoints, version mismatches or wrong shapes."""


# ============================ CONFIGURATION ============================

@dataclass
class ModelConfig:
    """Model architecture settings (``model``, ``engine`` and ``exact`` config sections)."""
    d: int = 64
    exact_d: int = EXACT_WIDTH
    activation: Activation = Activation.TANH
    aggregator: AggregatorKind = AggregatorKind.RECURRENT_GATED
    collection_semantics: CollectionSemantics = CollectionSemantics.SNAPSHOT
    seed: int = 0
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def __post_init__(self):
        if self.d < 2:
            raise ValueError(f"d must be >= 2, got {self.d}")
        if self.exact_d < ENTITY_ROWS:
            raise ValueError(f"exact_d must be >= {ENTITY_ROWS} for one-hot roles, got {self.exact_d}")
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")
        self.activation = Activation(self.activation)
        self.aggregator = AggregatorKind(self.aggregator)
        self.collection_semantics = CollectionSemantics(self.collection_semantics)
        if isinstance(self.ablation, dict):
            self.ablation = AblationConfig(**self.ablation)

    @staticmethod
    def from_yaml(path: PathLike = "config.yaml") -> "ModelConfig":
        model = load_yaml_section(path, "model")
        engine = load_yaml_section(path, "engine")
        exact = load_yaml_section(path, "exact")
        defaults = ModelConfig()
        return ModelConfig(
            d=int(model.get("d", defaults.d)),
            exact_d=int(exact.get("d", defaults.exact_d)),
            activation=model.get("activation", defaults.activation),
            aggregator=engine.get("aggregator", defaults.aggregator),
            collection_semantics=engine.get("collection_semantics", defaults.collection_semantics),
            seed=int(model.get("seed", defaults.seed)),
            ablation=AblationConfig(**(engine.get("ablation") or {})),
        )


# ============================ PARAMETERS ============================

@dataclass
class ModelParams:
    """All learned tables of the depth-wise classifier."""
    entity_embed: Tensor
    relation_embed: Tensor
    engine: EngineWeights
    head: FFNWeights
    head_norm: LayerNormParams
    version: str = CHECKPOINT_VERSION

    @property
    def d(self) -> int:
        return self.entity_embed.shape[1]

    @classmethod
    def init(cls, d: int, seed: int = 0, activation: Activation = Activation.TANH) -> "ModelParams":
        rng = np.random.default_rng(seed)
        entity = entity_table(d, rng)
        return cls(
            entity_embed=Tensor(entity, requires_grad=True),
            relation_embed=Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), size=(NUM_LABELS, d)), requires_grad=True),
            engine=EngineWeights.init(d, rng, activation),
            head=FFNWeights.init([3 * d, d, NUM_LABELS], rng, activation),
            head_norm=LayerNormParams.init(d),
        )

    def embedding_parameters(self) -> Dict[str, Tensor]:
        return {"entity_embed": self.entity_embed, "relation_embed": self.relation_embed}

    def network_parameters(self) -> Dict[str, Tensor]:
        params = self.engine.parameters()
        params.update(self.head.parameters("head"))
        params.update(self.head_norm.parameters("head_norm"))
        return params


class TableEmbeddings:
    """Graph embedding provider backed by trainable tables (gradients reach the rows)."""

    def __init__(self, entity_embed: Tensor, relation_embed: Tensor):
        self.entity_embed = entity_embed
        self.relation_embed = relation_embed
        self.width = entity_embed.shape[1]

    def entity_row(self, name: str) -> int:
        return entity_index(name)

    def entity_vector(self, name: str) -> Tensor:
        return row(self.entity_embed, entity_index(name))

    def relation_vector(self, label: RelationLabel) -> Tensor:
        return row(self.relation_embed, RelationLabel.parse(label).index)


def entity_table(d: int, rng: np.random.Generator) -> np.ndarray:
    """Initial entity rows: one random unit role per letter, in alphabet order."""
    return RoleBasis.create(ENTITY_ALPHABET, d, RoleMode.RANDOM_UNIT, rng=rng).table()


def normalize_entity_rows(entity_embed: Tensor) -> None:
    data = entity_embed.data
    norms = np.linalg.norm(data, axis=1, keepdims=True)
    entity_embed.assign(data / np.where(norms == 0.0, 1.0, norms))


# ============================ CHECKPOINTS ============================

class TableRecord(BaseModel):
    shape: List[int]
    data: List[float]


class Checkpoint(BaseModel):
    """Versioned JSON envelope for model weights."""
    version: str
    model: Literal["depwise", "breadth"]
    d: int = Field(..., ge=2)
    aggregator: Optional[AggregatorKind] = None
    collection_semantics: Optional[CollectionSemantics] = None
    layers: Optional[int] = Field(default=None, ge=1)
    activation: Activation = Activation.TANH
    ablation: Dict[str, Any] = Field(default_factory=dict)
    tables: Dict[str, TableRecord]
    metadata: Dict[str, Any] = Field(default_factory=dict)

    def save(self, path: PathLike) -> None:
        write_json(path, self.model_dump_json(indent=1))
        logger.info(f"Wrote {self.model} checkpoint to {path}")

    @classmethod
    def load(cls, path: PathLike) -> "Checkpoint":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except FileNotFoundError:
            raise CheckpointError(f"Checkpoint not found: {path}") from None
        try:
            ckpt = cls.model_validate_json(text)
        except PydanticValidationError as e:
            raise CheckpointError(f"Malformed checkpoint {path}: {e.errors()[0].get('msg')}") from None
        if ckpt.version != CHECKPOINT_VERSION:
            raise CheckpointError(f"Checkpoint version {ckpt.version!r} is not supported (expected {CHECKPOINT_VERSION!r})")
        return ckpt


def dump_tables(params: Dict[str, Tensor]) -> Dict[str, TableRecord]:
    return {
        name: TableRecord(shape=list(t.shape), data=t.data.reshape(-1).tolist())
        for name, t in params.items()
    }


def load_tables(params: Dict[str, Tensor], tables: Dict[str, TableRecord]) -> None:
    missing = sorted(set(params) - set(tables))
    extra = sorted(set(tables) - set(params))
    if missing or extra:
        raise CheckpointError(f"Checkpoint tables do not match the model (missing {missing}, unexpected {extra})")
    for name, tensor in params.items():
        record = tables[name]
        if tuple(record.shape) != tensor.shape or len(record.data) != tensor.data.size:
            raise CheckpointError(f"Table {name} has shape {record.shape}, model needs {list(tensor.shape)}")
        tensor.assign(np.array(record.data).reshape(tensor.shape))


# ============================ MODELS ============================

class StoryModel:
    """Shared interface: forward / loss / predict / parameter groups / checkpoint."""

    name = "story"

    def forward(self, instance: StoryInstance) -> Tensor:
        raise NotImplementedError

    def parameter_groups(self) -> Dict[str, Dict[str, Tensor]]:
        return {}

    def parameters(self) -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        for group in self.parameter_groups().values():
            params.update(group)
        return params

    def after_step(self, updated_groups: List[str]) -> None:
        """Hook run after each optimizer step."""

    def loss(self, instance: StoryInstance) -> Tensor:
        return softmax_xent(self.forward(instance), instance.gold.index)

    def predict(self, instance: StoryInstance) -> RelationLabel:
        with no_grad():
            logits = self.forward(instance)
        return LABELS[int(np.argmax(logits.data))]

    def to_checkpoint(self, metadata: Optional[Dict[str, Any]] = None) -> Checkpoint:
        raise NotImplementedError

    @staticmethod
    def _question_nodes(g: EntityGraph, instance: StoryInstance) -> Tuple[str, str]:
        src, tgt = instance.question
        for entity in (src, tgt):
            if entity not in g:
                raise InstanceError(f"Question entity {entity!r} does not appear in the story")
        return src, tgt

    def _graph(self, instance: StoryInstance, embeddings) -> EntityGraph:
        try:
            return build_graph(instance.triples, embeddings)
        except UnknownEntityError as e:
            raise InstanceError(str(e)) from None


class DepwiseModel(StoryModel):
    """Depth-wise engine with trainable tables and head."""

    name = "depwise"

    def __init__(self, params: ModelParams, config: Optional[ModelConfig] = None):
        self.params = params
        self.config = config or ModelConfig(d=params.d)
        self.engine_config = EngineConfig(
            d=params.d,
            aggregator=self.config.aggregator,
            collection_semantics=self.config.collection_semantics,
            weights=params.engine,
            ablation=self.config.ablation,
        )

    @classmethod
    def create(cls, config: ModelConfig) -> "DepwiseModel":
        return cls(ModelParams.init(config.d, config.seed, config.activation), config)

    def run(self, instance: StoryInstance) -> Tuple[EngineResult, Tensor]:
        embeddings = TableEmbeddings(self.params.entity_embed, self.params.relation_embed)
        g = self._graph(instance, embeddings)
        src, tgt = self._question_nodes(g, instance)
        result = run_engine(g, g.node_embeddings[tgt], self.engine_config, source=src)
        head_input = concat([
            result.updated_embeddings[src],
            self.params.head_norm.apply(result.source_filler),
            result.updated_embeddings[tgt],
        ])
        return result, ffn_forward(self.params.head, head_input)

    def forward(self, instance: StoryInstance) -> Tensor:
        return self.run(instance)[1]

    def parameter_groups(self) -> Dict[str, Dict[str, Tensor]]:
        return {"embed": self.params.embedding_parameters(), "engine": self.params.network_parameters()}

    def after_step(self, updated_groups: List[str]) -> None:
        if "embed" in updated_groups:
            normalize_entity_rows(self.params.entity_embed)

    def to_checkpoint(self, metadata: Optional[Dict[str, Any]] = None) -> Checkpoint:
        return Checkpoint(
            version=CHECKPOINT_VERSION,
            model="depwise",
            d=self.params.d,
            aggregator=self.config.aggregator,
            collection_semantics=self.config.collection_semantics,
            activation=self.config.activation,
            ablation=asdict(self.config.ablation),
            tables=dump_tables(self.parameters()),
            metadata=metadata or {},
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "DepwiseModel":
        if ckpt.model != "depwise":
            raise CheckpointError(f"Expected a depwise checkpoint, got {ckpt.model!r}")
        config = ModelConfig(
            d=ckpt.d,
            activation=ckpt.activation,
            aggregator=ckpt.aggregator or AggregatorKind.RECURRENT_GATED,
            collection_semantics=ckpt.collection_semantics or CollectionSemantics.SNAPSHOT,
            ablation=AblationConfig(**ckpt.ablation),
        )
        model = cls.create(config)
        load_tables(model.parameters(), ckpt.tables)
        return model


class ExactDepwiseModel(StoryModel):
    """
    Parameter-free engine instance: one-hot roles, offset fillers, sum
    aggregation. Logits are one-hot on the sign label of the retrieved filler.
    """

    name = "exact"

    def __init__(self, d: int = EXACT_WIDTH, ablation: Optional[AblationConfig] = None,
                 aggregator: AggregatorKind = AggregatorKind.SUM_EXACT):
        self.embeddings = ExactEmbeddings(d)
        self.engine_config = EngineConfig.exact_mode(d, aggregator=aggregator, ablation=ablation or AblationConfig())

    def run(self, instance: StoryInstance) -> Tuple[EntityGraph, EngineResult]:
        g = self._graph(instance, self.embeddings)
        src, tgt = self._question_nodes(g, instance)
        return g, run_engine(g, g.node_embeddings[tgt], self.engine_config, source=src)

    def forward(self, instance: StoryInstance) -> Tensor:
        return exact_logits(self.run(instance)[1].source_filler)

    def to_checkpoint(self, metadata: Optional[Dict[str, Any]] = None) -> Checkpoint:
        raise CheckpointError("The exact model has no parameters to checkpoint")


# ============================ BREADTH BASELINE ============================

@dataclass
class BreadthParams:
    entity_embed: Tensor
    relation_embed: Tensor
    stack: BreadthLayerStack
    head: FFNWeights

    @property
    def d(self) -> int:
        return self.entity_embed.shape[1]

    @classmethod
    def init(cls, d: int, num_layers: int, seed: int = 0, activation: Activation = Activation.TANH) -> "BreadthParams":
        rng = np.random.default_rng(seed)
        entity = entity_table(d, rng)
        return cls(
            entity_embed=Tensor(entity, requires_grad=True),
            relation_embed=Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), size=(NUM_LABELS, d)), requires_grad=True),
            stack=BreadthLayerStack.init(d, num_layers, rng, activation),
            head=FFNWeights.init([2 * d, d, NUM_LABELS], rng, activation),
        )


class BreadthModel(StoryModel):
    """Stacked breadth layers with a head over ``[h_source, h_target]``."""

    name = "breadth"

    def __init__(self, params: BreadthParams, config: Optional[ModelConfig] = None):
        self.params = params
        self.config = config or ModelConfig(d=params.d)

    @classmethod
    def create(cls, config: ModelConfig, num_layers: int) -> "BreadthModel":
        return cls(BreadthParams.init(config.d, num_layers, config.seed, config.activation), config)

    @property
    def num_layers(self) -> int:
        return self.params.stack.num_layers

    def node_states(self, instance: StoryInstance) -> Tuple[EntityGraph, Dict[str, Tensor]]:
        embeddings = TableEmbeddings(self.params.entity_embed, self.params.relation_embed)
        g = self._graph(instance, embeddings)
        self._question_nodes(g, instance)
        return g, breadth_forward(g, self.params.stack)

    def forward(self, instance: StoryInstance) -> Tensor:
        _, h = self.node_states(instance)
        src, tgt = instance.question
        return ffn_forward(self.params.head, concat([h[src], h[tgt]]))

    def parameter_groups(self) -> Dict[str, Dict[str, Tensor]]:
        network = self.params.stack.parameters("breadth")
        network.update(self.params.head.parameters("head"))
        return {
            "embed": {"entity_embed": self.params.entity_embed, "relation_embed": self.params.relation_embed},
            "engine": network,
        }

    def after_step(self, updated_groups: List[str]) -> None:
        if "embed" in updated_groups:
            normalize_entity_rows(self.params.entity_embed)

    def to_checkpoint(self, metadata: Optional[Dict[str, Any]] = None) -> Checkpoint:
        return Checkpoint(
            version=CHECKPOINT_VERSION,
            model="breadth",
            d=self.params.d,
            layers=self.num_layers,
            activation=self.config.activation,
            tables=dump_tables(self.parameters()),
            metadata=metadata or {},
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "BreadthModel":
        if ckpt.model != "breadth" or ckpt.layers is None:
            raise CheckpointError(f"Expected a breadth checkpoint with a layer count, got {ckpt.model!r}")
        model = cls.create(ModelConfig(d=ckpt.d, activation=ckpt.activation), ckpt.layers)
        load_tables(model.parameters(), ckpt.tables)
        return model


def model_from_checkpoint(ckpt: Checkpoint) -> StoryModel:
    """Rebuild whichever model a checkpoint holds."""
    if ckpt.model == "breadth":
        return BreadthModel.from_checkpoint(ckpt)
    return DepwiseModel.from_checkpoint(ckpt)


def load_model(path: PathLike) -> StoryModel:
    return model_from_checkpoint(Checkpoint.load(path))
