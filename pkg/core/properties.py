"""
Invariant Suites

Randomised checks of the algebraic, numerical and structural invariants
the engine relies on, grouped into suites that the ``prop`` command runs:

- ``tpr``: binding linearity, unbind-after-bind, one-hot exactness, crosstalk scaling
- ``grad``: finite-difference checks of every differentiable op and of the full model
- ``noise``: exact-mode answers and immunity to irrelevant / supporting / disconnected noise
- ``bfs``: shortest paths against brute-force enumeration, tie-break determinism
- ``snapshot``: collection results independent of pair iteration order
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from core.depwise_engine import EngineConfig, collect_long_dependencies, init_memories, run_engine
from core.graph import EntityGraph, bfs_shortest_path, bfs_tree, build_graph, connected_pairs
from core.layers import FFNWeights, RNNWeights, ffn_forward, recurrent_cell_forward
from core.model import DepwiseModel, ExactDepwiseModel, ModelConfig, ModelParams, TableEmbeddings
from core.monitoring import span
from core.relations import ENTITY_ALPHABET, LABELS, RelationLabel
from core.taskgen import MAX_HOPS, NOISE_KINDS, NoiseKind, generate_one
from core.tensor import (
    Tensor,
    concat,
    dot,
    grad_check,
    grad_check_params,
    layernorm,
    matmul,
    matvec,
    max_rows,
    mean_rows,
    mul,
    no_grad,
    outer,
    relu,
    row,
    sigmoid,
    slice_vector,
    softmax_xent,
    stack,
    sum_all,
    sum_rows,
    tanh,
    transpose,
)
from core.tpr_memory import NodeMemory, crosstalk_statistics, retrieval_cosines, retrieve, store

logger = logging.getLogger(__name__)

GRAD_TOLERANCE = 1e-4
BINDING_ULPS = 2.0
NOISE_TRIALS = 200
SNAPSHOT_GRAPHS = 100


class PropertyResult(BaseModel):
    suite: str
    name: str
    passed: bool
    detail: str = ""
    seconds: float = Field(default=0.0, ge=0.0)


@dataclass
class Property:
    name: str
    check: Callable[[], Tuple[bool, str]]


# ============================ TPR ============================

def _binding_linearity() -> Tuple[bool, str]:
    rng = np.random.default_rng(0)
    worst = 0.0
    for d in (2, 8, 64):
        u, v = Tensor(rng.normal(size=d)), Tensor(rng.normal(size=d))
        a = float(rng.normal())
        lhs = outer(u * a, v).data
        rhs = (outer(u, v) * a).data
        ulps = np.abs(lhs - rhs) / np.spacing(np.maximum(np.abs(lhs), np.abs(rhs)))
        worst = max(worst, float(np.nan_to_num(ulps).max()))
    return worst <= BINDING_ULPS, f"max difference {worst:.1f} ulp"


def _unbind_after_bind() -> Tuple[bool, str]:
    rng = np.random.default_rng(1)
    worst = 0.0
    for d in (4, 16, 256):
        f = Tensor(rng.normal(size=d))
        r = rng.normal(size=d)
        r = Tensor(r / np.linalg.norm(r))
        mem = store(NodeMemory.zeros(d), f, r)
        worst = max(worst, float(np.abs(retrieve(mem, r).data - f.data).max()))
    return worst <= 1e-12, f"max abs error {worst:.2e}"


def _onehot_exactness() -> Tuple[bool, str]:
    rng = np.random.default_rng(2)
    worst = 0.0
    for d in (8, 32, 128):
        eye = np.eye(d)
        fillers = [Tensor(rng.normal(size=d)) for _ in range(d)]
        mem = NodeMemory.zeros(d)
        for i, f in enumerate(fillers):
            mem = store(mem, f, Tensor(eye[i]))
        for i, f in enumerate(fillers):
            worst = max(worst, float(np.abs(retrieve(mem, Tensor(eye[i])).data - f.data).max()))
    return worst <= 1e-12, f"max abs error {worst:.2e} over <= d stores"


def _proportional_recovery() -> Tuple[bool, str]:
    d = 16
    eye = np.eye(d)
    f_above = Tensor(np.r_[0.0, 1.0, np.zeros(d - 2)])
    f_below = Tensor(np.r_[0.0, -1.0, np.zeros(d - 2)])
    r_x, r_k = Tensor(eye[3] * 2.0), Tensor(eye[7] * 0.5)
    mem = store(store(NodeMemory.zeros(d), f_above, r_x), f_below, r_k)
    got = retrieve(mem, r_k).data
    alpha = float(r_k.data @ r_k.data)
    err = float(np.abs(got - alpha * f_below.data).max())
    return err <= 1e-12, f"retrieved = {alpha} * f_below (error {err:.1e})"


def _store_order() -> Tuple[bool, str]:
    rng = np.random.default_rng(3)
    d = 128
    pairs = [(Tensor(rng.normal(size=d)), Tensor(rng.normal(size=d))) for _ in range(16)]
    forward = NodeMemory.zeros(d)
    for f, r in pairs:
        forward = store(forward, f, r)
    backward_order = NodeMemory.zeros(d)
    for f, r in reversed(pairs):
        backward_order = store(backward_order, f, r)
    err = float(np.abs(forward.matrix.data - backward_order.matrix.data).max())
    return err <= 1e-12, f"reordered stores differ by {err:.2e}"


def _key_linearity() -> Tuple[bool, str]:
    rng = np.random.default_rng(4)
    d = 32
    mem = NodeMemory(Tensor(rng.normal(size=(d, d))))
    k1, k2 = Tensor(rng.normal(size=d)), Tensor(rng.normal(size=d))
    a = 1.7
    lhs = retrieve(mem, k1 * a + k2).data
    rhs = (retrieve(mem, k1) * a + retrieve(mem, k2)).data
    err = float(np.abs(lhs - rhs).max())
    return err <= 1e-12, f"max abs error {err:.2e}"


def _crosstalk_scaling() -> Tuple[bool, str]:
    details, ok = [], True
    for d in (64, 256):
        stats = crosstalk_statistics(d, samples=10_000, seed=d)
        rms_ratio = stats.rms / stats.expected_rms
        abs_ratio = stats.mean_abs / stats.expected_mean_abs
        ok = ok and abs(rms_ratio - 1.0) <= 0.2 and abs(abs_ratio - 1.0) <= 0.2
        details.append(f"d={d}: rms*sqrt(d)={rms_ratio:.3f}, mean|.|/sqrt(2/(pi d))={abs_ratio:.3f}")
    return ok, "; ".join(details)


def _random_role_retrieval() -> Tuple[bool, str]:
    cosines = retrieval_cosines(d=256, num_roles=8, trials=1000, seed=5)
    mean = float(np.mean(cosines))
    return mean >= 0.9, f"mean cosine {mean:.4f}"


# ============================ GRADIENTS ============================

def _weighted(rng: np.random.Generator, shape: Tuple[int, ...]) -> Tensor:
    return Tensor(rng.normal(size=shape))


def _op_cases(rng: np.random.Generator, d: int) -> List[Tuple[str, Callable[[Tensor], Tensor], Tensor]]:
    v, u, w = _weighted(rng, (d,)), _weighted(rng, (d,)), _weighted(rng, (d,))
    m, b = _weighted(rng, (d, d)), _weighted(rng, (d, d))
    ffn = FFNWeights.init([d, d, d], rng)
    gain, shift = _weighted(rng, (d,)), _weighted(rng, (d,))
    cell = RNNWeights.init(d, d, rng)
    state = (_weighted(rng, (d,)), _weighted(rng, (d,)))
    gold = int(rng.integers(d))
    vec, mat, table = _weighted(rng, (d,)), _weighted(rng, (d, d)), _weighted(rng, (3, d))

    def cell_loss(x: Tensor) -> Tensor:
        h, c = recurrent_cell_forward(cell, x, state)
        return dot(h, w) + dot(c, v)

    return [
        ("outer", lambda x: sum_all(mul(outer(x, v), m)), vec),
        ("dot", lambda x: dot(x, v), vec),
        ("matvec", lambda x: dot(matvec(m, x), w), vec),
        ("matvec-matrix", lambda x: dot(matvec(x, v), w), mat),
        ("matmul", lambda x: sum_all(mul(matmul(x, b), m)), mat),
        ("transpose", lambda x: sum_all(mul(transpose(x), m)), mat),
        ("tanh", lambda x: dot(tanh(x), w), vec),
        ("sigmoid", lambda x: dot(sigmoid(x), w), vec),
        ("relu", lambda x: dot(relu(x), w), vec),
        ("concat-slice", lambda x: dot(slice_vector(concat([x, v]), 1, d + 1), w), vec),
        ("mean-rows", lambda x: dot(mean_rows(stack([x, v, u])), w), vec),
        ("max-rows", lambda x: dot(max_rows(stack([x, v, u])), w), vec),
        ("sum-rows", lambda x: dot(sum_rows(stack([x, v])), w), vec),
        ("row", lambda x: dot(row(x, 1), w), table),
        ("ffn", lambda x: dot(ffn_forward(ffn, x), w), vec),
        ("layernorm", lambda x: dot(layernorm(x, gain, shift), w), vec),
        ("gated-cell", cell_loss, vec),
        ("softmax-xent", lambda x: softmax_xent(x, gold), vec),
    ]


def _op_gradients() -> Tuple[bool, str]:
    worst_name, worst = "", 0.0
    checked = 0
    for d in (2, 4, 8, 16):
        for seed in range(5):
            rng = np.random.default_rng([d, seed])
            for name, fn, x in _op_cases(rng, d):
                report = grad_check(fn, x, tol=GRAD_TOLERANCE)
                checked += 1
                if report.max_rel_error > worst:
                    worst, worst_name = report.max_rel_error, f"{name} (d={d}, seed={seed})"
    return worst <= GRAD_TOLERANCE, f"{checked} checks, max rel err {worst:.2e} at {worst_name}"


def _quadratic_gradient() -> Tuple[bool, str]:
    x = Tensor(np.random.default_rng(6).normal(size=8))
    report = grad_check(lambda t: dot(t, t), x)
    return report.max_rel_error < 1e-10, f"max rel err {report.max_rel_error:.2e}"


def _model_gradients(seeds: Sequence[int] = (0, 1, 2), coords_per_param: int = 12) -> Tuple[bool, str]:
    worst, worst_at = 0.0, ""
    for seed in seeds:
        model = DepwiseModel.create(ModelConfig(d=6, seed=seed))
        instance = generate_one(seed, 3, NoiseKind.IRRELEVANT, 0)
        report = grad_check_params(
            lambda: model.loss(instance),
            model.parameters(),
            max_coords_per_param=coords_per_param,
            seed=seed,
        )
        if report.max_rel_error >= worst:
            worst, worst_at = report.max_rel_error, f"{report.worst_parameter} (seed {seed})"
    return worst < GRAD_TOLERANCE, f"max rel err {worst:.2e} at {worst_at}"


# ============================ NOISE / EXACT MODE ============================

def _trial_instances(trials: int, kind: NoiseKind, min_k: int = 2) -> List[Tuple[int, int]]:
    rng = np.random.default_rng([7, NOISE_KINDS.index(kind)])
    return [(int(rng.integers(min_k, MAX_HOPS + 1)), t) for t in range(trials)]


def _exact_oracle(trials: int = NOISE_TRIALS) -> Tuple[bool, str]:
    model = ExactDepwiseModel()
    wrong = 0
    for kind in NOISE_KINDS:
        for k, t in _trial_instances(trials // len(NOISE_KINDS), kind, min_k=1):
            inst = generate_one(11, k, kind, t)
            wrong += model.predict(inst) is not inst.gold
    return wrong == 0, f"{wrong} wrong answers"


def _noise_invariance(kind: NoiseKind, trials: int = NOISE_TRIALS) -> Tuple[bool, str]:
    model = ExactDepwiseModel()
    differing = 0
    for k, t in _trial_instances(trials, kind):
        clean = generate_one(13, k, NoiseKind.NONE, t)
        noisy = generate_one(13, k, kind, t)
        a = model.run(clean)[1].source_filler.data
        b = model.run(noisy)[1].source_filler.data
        differing += not np.array_equal(a, b)
    return differing == 0, f"{differing}/{trials} retrieved fillers changed"


def _disconnected_nullity(trials: int = NOISE_TRIALS) -> Tuple[bool, str]:
    model = ExactDepwiseModel()
    cfg = model.engine_config
    worst = 0.0

    for k, t in _trial_instances(trials, NoiseKind.DISCONNECTED, min_k=1):
        inst = generate_one(17, k, NoiseKind.DISCONNECTED, t)
        g = build_graph(inst.triples, model.embeddings)
        src = inst.question[0]
        reachable = bfs_tree(g, src).distance
        for other in (n for n in g.node_ids if n not in reachable):
            result = run_engine(g, g.node_embeddings[other], cfg, source=src)
            worst = max(worst, float(np.linalg.norm(result.source_filler.data)))
    return worst <= 1e-12, f"max retrieved norm {worst:.1e}"


# ============================ BFS ============================

def random_graph(rng: np.random.Generator, max_nodes: int, edge_prob: float = 0.35) -> List[Tuple[str, RelationLabel, str]]:
    """Random relation triples over up to ``max_nodes`` letters (one edge per pair at most)."""
    n = int(rng.integers(2, max_nodes + 1))
    names = list(ENTITY_ALPHABET[:n])
    triples = []
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < edge_prob:
                label = LABELS[int(rng.integers(len(LABELS)))]
                triples.append((names[i], label, names[j]) if rng.random() < 0.5 else (names[j], label.inverse, names[i]))
    if not triples:
        triples.append((names[0], RelationLabel.LEFT, names[1]))
    return triples


def _brute_force_path(g: EntityGraph, src: str, dst: str) -> Optional[List[str]]:
    best: Optional[List[str]] = None

    def extend(path: List[str]) -> None:
        nonlocal best
        node = path[-1]
        if node == dst:
            if best is None or (len(path), path) < (len(best), best):
                best = list(path)
            return
        for neighbor in g.neighbors(node):
            if neighbor not in path:
                path.append(neighbor)
                extend(path)
                path.pop()

    extend([src])
    return best


def _bfs_oracle(graphs: int = 200) -> Tuple[bool, str]:
    rng = np.random.default_rng(19)
    mismatches = 0
    queries = 0
    for _ in range(graphs):
        triples = random_graph(rng, 8)
        g = build_graph(triples)
        shuffled = build_graph([triples[i] for i in rng.permutation(len(triples))])
        for src in g.node_ids:
            for dst in g.node_ids:
                queries += 1
                expected = _brute_force_path(g, src, dst)
                if bfs_shortest_path(g, src, dst) != expected or bfs_shortest_path(shuffled, src, dst) != expected:
                    mismatches += 1
    return mismatches == 0, f"{mismatches}/{queries} queries disagree with brute force"


def _pairs_symmetric(graphs: int = 200) -> Tuple[bool, str]:
    rng = np.random.default_rng(23)
    asymmetric = 0
    for _ in range(graphs):
        pairs = set(connected_pairs(build_graph(random_graph(rng, 10))))
        asymmetric += any((t, s) not in pairs for s, t in pairs)
    return asymmetric == 0, f"{asymmetric} graphs with asymmetric pair sets"


# ============================ SNAPSHOT ============================

def _snapshot_order(graphs: int = SNAPSHOT_GRAPHS, d: int = 8) -> Tuple[bool, str]:
    rng = np.random.default_rng(29)
    params = ModelParams.init(d, seed=29)
    cfg = EngineConfig(d=d, weights=params.engine)
    embeddings = TableEmbeddings(params.entity_embed, params.relation_embed)
    differing = 0
    with no_grad():
        for _ in range(graphs):
            g = build_graph(random_graph(rng, 10), embeddings)
            memories = init_memories(g, cfg)
            pairs = connected_pairs(g)
            reference = collect_long_dependencies(g, memories, cfg, pairs)
            permuted = [pairs[i] for i in rng.permutation(len(pairs))]
            other = collect_long_dependencies(g, memories, cfg, permuted)
            differing += any(
                not np.array_equal(reference[n].matrix.data, other[n].matrix.data) for n in g.node_ids
            )
    return differing == 0, f"{differing}/{graphs} graphs changed under pair permutation"


# ============================ SUITES ============================

SUITES: Dict[str, List[Property]] = {
    "tpr": [
        Property("binding-linearity", _binding_linearity),
        Property("unbind-after-bind", _unbind_after_bind),
        Property("onehot-exactness", _onehot_exactness),
        Property("proportional-recovery", _proportional_recovery),
        Property("store-order", _store_order),
        Property("key-linearity", _key_linearity),
        Property("crosstalk-scaling", _crosstalk_scaling),
        Property("random-role-retrieval", _random_role_retrieval),
    ],
    "grad": [
        Property("quadratic", _quadratic_gradient),
        Property("ops", _op_gradients),
        Property("model-d6", _model_gradients),
    ],
    "noise": [
        Property("exact-oracle", _exact_oracle),
        Property("irrelevant-invariance", lambda: _noise_invariance(NoiseKind.IRRELEVANT)),
        Property("supporting-invariance", lambda: _noise_invariance(NoiseKind.SUPPORTING)),
        Property("disconnected-nullity", _disconnected_nullity),
    ],
    "bfs": [
        Property("brute-force-oracle", _bfs_oracle),
        Property("pairs-symmetric", _pairs_symmetric),
    ],
    "snapshot": [
        Property("pair-order-independence", _snapshot_order),
    ],
}

SUITE_NAMES = tuple(SUITES) + ("all",)


def run_suite(name: str) -> List[PropertyResult]:
    """
    Run one suite (or ``all``), timing each property.

    Raises:
        KeyError: unknown suite name
    """
    if name != "all" and name not in SUITES:
        raise KeyError(f"Unknown suite {name!r}; choose from {', '.join(SUITE_NAMES)}")
    suites = list(SUITES) if name == "all" else [name]
    results: List[PropertyResult] = []
    for suite in suites:
        for prop in SUITES[suite]:
            with span(f"prop.{suite}.{prop.name}") as timing:
                try:
                    passed, detail = prop.check()
                except Exception as e:
                    logger.exception(f"Property {suite}/{prop.name} raised")
                    passed, detail = False, f"raised {type(e).__name__}: {e}"
            results.append(PropertyResult(suite=suite, name=prop.name, passed=passed, detail=detail, seconds=timing["seconds"]))
            logger.info(f"{suite}/{prop.name}: {'pass' if passed else 'FAIL'} ({detail})")
    return results
