"""
Synthetic Multi-Hop Spatial Story Generator

Builds k-hop relation chains between single-letter entities, injects
distractor noise, renders the story through a fixed template table and
parses rendered text back into triples.

Features:
- Label-stratified chains: the gold label cycles through all nine relations
- Integer grid positions, so every answer is checked against the offset oracle
- Noise kinds: disconnected (separate 2-node chain), irrelevant (dead-end
  branch off the chain), supporting (longer detour between chain nodes)
- Deterministic per (seed, k, noise, index); chain and question do not depend
  on the noise kind
- Template table with three paraphrases per relation and an exact parser
"""

import logging
import re
from collections import Counter
from enum import Enum
from typing import Dict, Iterable, List, Optional, Pattern, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from core.graph import bfs_shortest_path, build_graph
from core.relations import ENTITY_ALPHABET, LABELS, Offset, RelationLabel, oracle_compose

logger = logging.getLogger(__name__)

MAX_HOPS = 10
MAX_SEED = 2 ** 63 - 1

Triple = Tuple[str, RelationLabel, str]


class GenerationError(ValueError):
    """Raised for invalid generator arguments or an inconsistent instance."""


class ParseError(ValueError):
    """Raised when a sentence matches no template."""

    def __init__(self, message: str, sentence_index: int, sentence: str = ""):
        super().__init__(f"{message} (sentence {sentence_index}: {sentence!r})")
        self.sentence_index = sentence_index
        self.sentence = sentence


class NoiseKind(str, Enum):
    NONE = "none"
    DISCONNECTED = "disconnected"
    IRRELEVANT = "irrelevant"
    SUPPORTING = "supporting"


NOISE_KINDS: Tuple[NoiseKind, ...] = tuple(NoiseKind)


class Split(str, Enum):
    TRAIN = "train"
    VALIDATION = "validation"
    TEST = "test"


# ========================= PYDANTIC DATA MODELS =========================

class StoryInstance(BaseModel):
    """One generated story with its question and gold answer."""

    model_config = ConfigDict(frozen=True)

    triples: List[Tuple[str, RelationLabel, str]] = Field(..., min_length=1)
    sentences: List[str]
    question: Tuple[str, str]
    gold: RelationLabel
    k: int = Field(..., ge=1, le=MAX_HOPS, description="Hops on the clean chain")
    noise: NoiseKind = NoiseKind.NONE
    seed: int = Field(..., ge=0, le=MAX_SEED)

    @model_validator(mode="after")
    def check_shape(self) -> "StoryInstance":
        if len(self.sentences) != len(self.triples):
            raise ValueError(f"{len(self.sentences)} sentences for {len(self.triples)} triples")
        src, tgt = self.question
        if not src or not tgt or src == tgt:
            raise ValueError(f"Question needs two distinct entities, got {self.question}")
        return self

    def to_json(self) -> str:
        return self.model_dump_json()


class ParsedStory(BaseModel):
    triples: List[Tuple[str, RelationLabel, str]]
    question: Optional[Tuple[str, str]] = None


# ============================ TEMPLATES ============================

TEMPLATES: Dict[RelationLabel, Tuple[str, ...]] = {
    RelationLabel.LEFT: (
        "{a} is to the left of {b} and is on the same horizontal plane.",
        "{a} is on the left side of {b}.",
        "{a} is at {b}'s 9 o'clock.",
    ),
    RelationLabel.RIGHT: (
        "{a} is to the right of {b} and is on the same horizontal plane.",
        "{a} is on the right side of {b}.",
        "{a} is at {b}'s 3 o'clock.",
    ),
    RelationLabel.ABOVE: (
        "{a} is above {b}.",
        "{a} is on top of {b}.",
        "{a} is at {b}'s 12 o'clock.",
    ),
    RelationLabel.BELOW: (
        "{a} is below {b}.",
        "{a} is under {b}.",
        "{a} is at {b}'s 6 o'clock.",
    ),
    RelationLabel.UPPER_LEFT: (
        "{a} is diagonally above {b} to the left.",
        "{a} is to the upper left of {b}.",
        "{a} is at {b}'s 10 o'clock.",
    ),
    RelationLabel.UPPER_RIGHT: (
        "{a} is diagonally above {b} to the right.",
        "{a} is to the upper right of {b}.",
        "{a} is at {b}'s 2 o'clock.",
    ),
    RelationLabel.LOWER_LEFT: (
        "{a} is diagonally below {b} to the left.",
        "{a} is to the lower left of {b}.",
        "{a} is at {b}'s 8 o'clock.",
    ),
    RelationLabel.LOWER_RIGHT: (
        "{a} is diagonally below {b} to the right.",
        "{a} is to the lower right of {b}.",
        "{a} is at {b}'s 4 o'clock.",
    ),
    RelationLabel.OVERLAP: (
        "{a} and {b} are at the same location.",
        "{a} overlaps {b}.",
        "{a} is in the same place as {b}.",
    ),
}

QUESTION_TEMPLATE = "What is the relation of the agent {a} to the agent {b}?"

_SENTENCE_SPLIT = re.compile(r"(?<=[.?])\s+")
_ENTITY = re.compile(r"\b[A-Z]\b")


def _template_regex(template: str) -> Pattern[str]:
    parts = re.split(r"(\{a\}|\{b\})", template)
    pattern = "".join(
        "(?P<a>[A-Z])" if p == "{a}" else "(?P<b>[A-Z])" if p == "{b}" else re.escape(p)
        for p in parts
    )
    return re.compile(rf"^{pattern}$")


def _compile_templates() -> List[Tuple[Pattern[str], RelationLabel]]:
    seen: Dict[str, RelationLabel] = {}
    for label, templates in TEMPLATES.items():
        if len(templates) < 3:
            raise ValueError(f"Relation {label.value} needs at least three templates")
        for template in templates:
            if template in seen:
                raise ValueError(f"Template {template!r} used for both {seen[template].value} and {label.value}")
            seen[template] = label
    return [(_template_regex(t), label) for t, label in seen.items()]


_COMPILED = _compile_templates()
_QUESTION = _template_regex(QUESTION_TEMPLATE)


# ============================ RENDER / PARSE ============================

def render_sentences(triples: Sequence[Triple], seed: int) -> List[str]:
    """One sentence per triple; template choice is deterministic in ``seed``."""
    rng = np.random.default_rng([seed, 1])
    sentences = []
    for a, label, b in triples:
        options = TEMPLATES[RelationLabel.parse(label)]
        sentences.append(options[int(rng.integers(len(options)))].format(a=a, b=b))
    return sentences


def render_question(source: str, target: str) -> str:
    return QUESTION_TEMPLATE.format(a=source, b=target)


def render(instance: StoryInstance) -> str:
    """Story text, one sentence per line, ending with the question."""
    lines = render_sentences(instance.triples, instance.seed)
    lines.append(render_question(*instance.question))
    return "\n".join(lines)


def parse(text: str) -> ParsedStory:
    """
    Recover triples and question from rendered text.

    Raises:
        ParseError: a sentence has no entity, matches no template, or a
            second question appears
    """
    sentences = [s.strip() for s in _SENTENCE_SPLIT.split(text.strip()) if s.strip()]
    triples: List[Triple] = []
    question: Optional[Tuple[str, str]] = None
    for index, sentence in enumerate(sentences):
        if not _ENTITY.search(sentence):
            raise ParseError("No capital-letter entity", index, sentence)
        match = _QUESTION.match(sentence)
        if match:
            if question is not None:
                raise ParseError("More than one question", index, sentence)
            question = (match.group("a"), match.group("b"))
            continue
        for regex, label in _COMPILED:
            match = regex.match(sentence)
            if match:
                triples.append((match.group("a"), label, match.group("b")))
                break
        else:
            raise ParseError("Unknown sentence template", index, sentence)
    return ParsedStory(triples=triples, question=question)


# ============================ GENERATION ============================

def _axis_steps(rng: np.random.Generator, total: int, steps: int) -> List[int]:
    """``steps`` values in {-1, 0, 1} summing to ``total`` (``|total| <= steps``)."""
    sign = 1 if total >= 0 else -1
    pairs = int(rng.integers((steps - abs(total)) // 2 + 1))
    values = [sign] * abs(total) + [1, -1] * pairs
    values += [0] * (steps - len(values))
    rng.shuffle(values)
    return values


def _unit_walk(rng: np.random.Generator, displacement: Offset, steps: int) -> List[Offset]:
    xs = _axis_steps(rng, displacement[0], steps)
    ys = _axis_steps(rng, displacement[1], steps)
    return list(zip(xs, ys))


def _chain_displacement(rng: np.random.Generator, label: RelationLabel, k: int) -> Offset:
    """Random net offset with the signs of ``label`` and magnitude at most ``k`` per axis."""
    sx, sy = label.offset
    dx = sx * int(rng.integers(1, k + 1)) if sx else 0
    dy = sy * int(rng.integers(1, k + 1)) if sy else 0
    return dx, dy


def _label_between(pos: Dict[str, Offset], a: str, b: str) -> RelationLabel:
    """Relation of ``a`` to ``b`` for adjacent grid positions."""
    return RelationLabel.from_offset(pos[a][0] - pos[b][0], pos[a][1] - pos[b][1])


def _maybe_flip(rng: np.random.Generator, triple: Triple) -> Triple:
    a, label, b = triple
    return (b, label.inverse, a) if rng.random() < 0.5 else triple


class _Letters:
    def __init__(self, rng: np.random.Generator, used: Iterable[str] = ()):
        used = set(used)
        free = [c for c in ENTITY_ALPHABET if c not in used]
        self._pool = [free[i] for i in rng.permutation(len(free))]

    def take(self, count: int) -> List[str]:
        if count > len(self._pool):
            raise GenerationError(f"Story needs {count} more entities than the 26-letter alphabet provides")
        taken, self._pool = self._pool[:count], self._pool[count:]
        return taken


def _add_noise(
    rng: np.random.Generator,
    kind: NoiseKind,
    chain: List[str],
    pos: Dict[str, Offset],
) -> List[Triple]:
    letters = _Letters(rng, chain)
    if kind is NoiseKind.NONE:
        return []

    if kind is NoiseKind.DISCONNECTED:
        u, w = letters.take(2)
        return [(u, LABELS[int(rng.integers(len(LABELS)))], w)]

    if kind is NoiseKind.IRRELEVANT:
        anchor = chain[int(rng.integers(len(chain)))]
        branch = letters.take(int(rng.integers(1, 4)))
        triples = []
        previous = anchor
        for node in branch:
            label = LABELS[int(rng.integers(len(LABELS)))]
            triples.append(_maybe_flip(rng, (node, label, previous)))
            previous = node
        return triples

    # supporting: a detour of s new nodes (s + 1 hops) between chain[i] and chain[i + s].
    # The detour and the chain segment close an odd cycle, so every pair keeps
    # a unique shortest path and BFS never falls back on letter order.
    k = len(chain) - 1
    span = int(rng.integers(1, min(2, k) + 1))
    start = int(rng.integers(k - span + 1))
    a, b = chain[start], chain[start + span]
    detour = letters.take(span)
    walk = _unit_walk(rng, (pos[b][0] - pos[a][0], pos[b][1] - pos[a][1]), span + 1)
    nodes = [a] + detour + [b]
    local = {a: pos[a]}
    for node, (sx, sy) in zip(nodes[1:-1], walk):
        prev = local[nodes[len(local) - 1]]
        local[node] = (prev[0] + sx, prev[1] + sy)
    local[b] = pos[b]
    return [
        _maybe_flip(rng, (nodes[t], _label_between(local, nodes[t], nodes[t + 1]), nodes[t + 1]))
        for t in range(len(nodes) - 1)
    ]


def _instance_seed(seed: int, stream: int, k: int, noise: NoiseKind, index: int) -> int:
    state = np.random.SeedSequence([seed, stream, k, NOISE_KINDS.index(noise), index]).generate_state(2, np.uint32)
    return ((int(state[0]) << 32) | int(state[1])) & MAX_SEED


def _verify(instance: StoryInstance, chain_labels: Sequence[RelationLabel]) -> None:
    """Re-derive the answer from the noisy story and compare with the chain oracle."""
    graph = build_graph(instance.triples)
    path = bfs_shortest_path(graph, *instance.question)
    if path is None or len(path) != instance.k + 1:
        raise GenerationError(f"Question path has {None if path is None else len(path) - 1} hops, expected {instance.k}")
    labels = [graph.edge_label(path[i], path[i + 1]) for i in range(len(path) - 1)]
    if oracle_compose(labels) is not instance.gold or oracle_compose(chain_labels) is not instance.gold:
        raise GenerationError("Noise changed the oracle answer")


def generate_one(seed: int, k: int, noise: NoiseKind, index: int, stream: int = 0) -> StoryInstance:
    """Instance ``index`` of the (seed, k, noise) family."""
    noise = NoiseKind(noise)
    chain_rng = np.random.default_rng([seed, stream, k, index])
    noise_rng = np.random.default_rng([seed, stream, k, index, 1 + NOISE_KINDS.index(noise)])

    target = LABELS[(index + seed + k) % len(LABELS)]
    chain = _Letters(chain_rng).take(k + 1)
    steps = _unit_walk(chain_rng, _chain_displacement(chain_rng, target, k), k)

    # chain[i] is steps[i] of chain[i + 1]
    pos: Dict[str, Offset] = {chain[0]: (0, 0)}
    chain_triples: List[Triple] = []
    for i, (sx, sy) in enumerate(steps):
        pos[chain[i + 1]] = (pos[chain[i]][0] - sx, pos[chain[i]][1] - sy)
        chain_triples.append((chain[i], RelationLabel.from_offset(sx, sy), chain[i + 1]))
    chain_labels = [label for _, label, _ in chain_triples]

    triples = chain_triples + _add_noise(noise_rng, noise, chain, pos)
    order = noise_rng.permutation(len(triples))
    triples = [triples[i] for i in order]

    instance_seed = _instance_seed(seed, stream, k, noise, index)
    instance = StoryInstance(
        triples=triples,
        sentences=render_sentences(triples, instance_seed),
        question=(chain[0], chain[-1]),
        gold=oracle_compose(chain_labels),
        k=k,
        noise=noise,
        seed=instance_seed,
    )
    if instance.gold is not target:
        raise GenerationError(f"Chain composes to {instance.gold.value}, expected {target.value}")
    _verify(instance, chain_labels)
    return instance


def generate(seed: int, k: int, noise: NoiseKind = NoiseKind.NONE, n: int = 1, stream: int = 0) -> List[StoryInstance]:
    """
    Generate ``n`` instances with ``k`` hops and the given noise kind.

    Raises:
        GenerationError: k outside [1, 10], negative n or seed
    """
    if not 1 <= k <= MAX_HOPS:
        raise GenerationError(f"k must be in [1, {MAX_HOPS}], got {k}")
    if n < 0:
        raise GenerationError(f"n must be non-negative, got {n}")
    if seed < 0 or stream < 0:
        raise GenerationError(f"seed and stream must be non-negative, got {seed}, {stream}")
    noise = NoiseKind(noise)
    instances = [generate_one(seed, k, noise, i, stream) for i in range(n)]
    logger.debug(f"Generated {n} instances (k={k}, noise={noise.value}, seed={seed})")
    return instances


_SPLIT_STREAMS = {Split.TRAIN: 0, Split.VALIDATION: 1, Split.TEST: 2}


def generate_split(seed: int, split: Split, n_per_k: int) -> List[StoryInstance]:
    """
    Dataset preset: clean k=1..5 for train and validation, every noise kind
    at k=1..10 for test. Each split draws from its own seed stream.
    """
    split = Split(split)
    stream = _SPLIT_STREAMS[split]
    if split is Split.TEST:
        cells = [(k, noise) for k in range(1, MAX_HOPS + 1) for noise in NOISE_KINDS]
    else:
        cells = [(k, NoiseKind.NONE) for k in range(1, 6)]
    instances: List[StoryInstance] = []
    for k, noise in cells:
        instances.extend(generate(seed, k, noise, n_per_k, stream))
    logger.info(f"Generated {split.value} split: {len(instances)} instances over {len(cells)} cells")
    return instances


def label_histogram(instances: Iterable[StoryInstance]) -> Dict[str, int]:
    """Gold-label counts in vocabulary order (zero counts included)."""
    counts = Counter(inst.gold for inst in instances)
    return {label.value: counts.get(label, 0) for label in LABELS}
