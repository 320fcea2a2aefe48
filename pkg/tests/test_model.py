"""
Unit tests for the trainable models and the checkpoint envelope.
"""

import json
from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from core.depwise_engine import AblationConfig, AggregatorKind, ExactEmbeddings
from core.model import (
    CHECKPOINT_VERSION,
    BreadthModel,
    Checkpoint,
    CheckpointError,
    DepwiseModel,
    ExactDepwiseModel,
    InstanceError,
    ModelConfig,
    ModelParams,
    entity_table,
    load_model,
)
from core.relations import ENTITY_ALPHABET, LABELS, RelationLabel as R, entity_index
from core.taskgen import NOISE_KINDS, NoiseKind, StoryInstance, generate, generate_one, render_sentences
from core.tensor import Tensor, backward
from core.tpr_memory import RoleBasis, RoleMode


@pytest.fixture
def instance():
    return generate_one(0, 3, NoiseKind.IRRELEVANT, 0)


class TestModelConfig:
    """Test model settings and YAML loading."""

    def test_defaults(self):
        """Test the default width and aggregator."""
        config = ModelConfig()
        assert config.d == 64
        assert config.exact_d == 32
        assert config.aggregator is AggregatorKind.RECURRENT_GATED

    @pytest.mark.parametrize("kwargs", [{"d": 1}, {"exact_d": 20}, {"seed": -1}])
    def test_invalid_values(self, kwargs):
        """Test out-of-range settings raise ValueError."""
        with pytest.raises(ValueError):
            ModelConfig(**kwargs)

    def test_from_yaml(self, tmp_path):
        """Test sections are read and missing keys fall back to defaults."""
        path = tmp_path / "config.yaml"
        path.write_text(
            "model:\n  d: 16\n  seed: 3\n"
            "engine:\n  aggregator: mean\n  ablation:\n    random_key: true\n"
        )
        config = ModelConfig.from_yaml(path)
        assert config.d == 16 and config.seed == 3
        assert config.aggregator is AggregatorKind.MEAN
        assert config.ablation.random_key
        assert config.exact_d == 32

    def test_from_missing_yaml(self, tmp_path):
        """Test a missing file yields the defaults."""
        assert ModelConfig.from_yaml(tmp_path / "nope.yaml") == ModelConfig()


class TestDepwiseModel:
    """Test the trainable depth-wise classifier."""

    @pytest.fixture
    def model(self):
        return DepwiseModel.create(ModelConfig(d=8, seed=1))

    def test_forward_shape(self, model, instance):
        """Test nine logits per instance."""
        assert model.forward(instance).shape == (len(LABELS),)
        assert model.predict(instance) in LABELS

    def test_parameter_groups(self, model):
        """Test embeddings and networks are separate groups."""
        groups = model.parameter_groups()
        assert set(groups) == {"embed", "engine"}
        assert set(groups["embed"]) == {"entity_embed", "relation_embed"}
        assert "head.w0" in groups["engine"]

    def test_loss_reaches_embeddings(self, model, instance):
        """Test the loss sends gradients to the entity table."""
        backward(model.loss(instance))
        assert model.params.entity_embed.grad is not None
        assert np.abs(model.params.entity_embed.grad).sum() > 0.0

    def test_entity_rows_renormalised_after_embed_step(self, model):
        """Test entity rows return to unit norm only when embeddings were updated."""
        model.params.entity_embed.assign(model.params.entity_embed.data * 3.0)
        model.after_step(["engine"])
        assert np.linalg.norm(model.params.entity_embed.data[0]) == pytest.approx(3.0)
        model.after_step(["embed", "engine"])
        assert_allclose(np.linalg.norm(model.params.entity_embed.data, axis=1), 1.0)

    def test_question_entity_must_appear(self, model):
        """Test a question about an absent entity raises InstanceError."""
        bad = StoryInstance(
            triples=[("A", R.LEFT, "B")],
            sentences=["A is on the left side of B."],
            question=("A", "Z"),
            gold=R.LEFT,
            k=1,
            seed=0,
        )
        with pytest.raises(InstanceError):
            model.forward(bad)

    def test_checkpoint_roundtrip(self, model, instance, tmp_path):
        """Test a saved checkpoint reloads to identical predictions."""
        path = tmp_path / "model.json"
        model.to_checkpoint({"epoch": 4}).save(path)
        loaded = load_model(path)
        assert isinstance(loaded, DepwiseModel)
        assert_array_equal(loaded.forward(instance).data, model.forward(instance).data)
        assert Checkpoint.load(path).metadata == {"epoch": 4}

    def test_checkpoint_keeps_engine_settings(self, tmp_path):
        """Test aggregator and ablations survive a round trip."""
        config = ModelConfig(d=6, aggregator=AggregatorKind.MAX, ablation=AblationConfig(skip_collection=True))
        path = tmp_path / "m.json"
        DepwiseModel.create(config).to_checkpoint().save(path)
        loaded = load_model(path)
        assert loaded.config.aggregator is AggregatorKind.MAX
        assert loaded.config.ablation.skip_collection


class TestCheckpointErrors:
    """Test checkpoint validation."""

    @pytest.fixture
    def saved(self, tmp_path):
        path = tmp_path / "ckpt.json"
        DepwiseModel.create(ModelConfig(d=4)).to_checkpoint().save(path)
        return path

    def test_missing_file(self, tmp_path):
        """Test a missing checkpoint raises CheckpointError."""
        with pytest.raises(CheckpointError):
            Checkpoint.load(tmp_path / "absent.json")

    def test_version_mismatch(self, saved):
        """Test an unknown version is refused."""
        payload = json.loads(saved.read_text())
        payload["version"] = "depwise-ckpt/0"
        saved.write_text(json.dumps(payload))
        with pytest.raises(CheckpointError, match="version"):
            Checkpoint.load(saved)
        assert CHECKPOINT_VERSION != "depwise-ckpt/0"

    def test_malformed(self, saved):
        """Test invalid JSON raises CheckpointError."""
        saved.write_text("{not json")
        with pytest.raises(CheckpointError):
            Checkpoint.load(saved)

    def test_wrong_shape(self, saved):
        """Test a table of the wrong shape is refused on load."""
        payload = json.loads(saved.read_text())
        payload["tables"]["entity_embed"]["shape"] = [26, 5]
        saved.write_text(json.dumps(payload))
        with pytest.raises(CheckpointError):
            load_model(saved)

    def test_missing_table(self, saved):
        """Test a checkpoint lacking a table is refused."""
        payload = json.loads(saved.read_text())
        del payload["tables"]["head.w0"]
        saved.write_text(json.dumps(payload))
        with pytest.raises(CheckpointError):
            load_model(saved)


class TestExactModel:
    """Test the parameter-free engine model."""

    @pytest.mark.parametrize("noise", NOISE_KINDS)
    def test_answers_generated_stories(self, noise):
        """Test the exact model predicts the gold label at every depth."""
        model = ExactDepwiseModel()
        for k in (1, 2, 5, 10):
            for inst in generate(4, k, noise, n=3):
                assert model.predict(inst) is inst.gold

    def test_skip_collection_fails_long_chains(self):
        """Test without collection a multi-hop question reads an empty slot."""
        model = ExactDepwiseModel(ablation=AblationConfig(skip_collection=True))
        inst = generate_one(0, 4, NoiseKind.NONE, 0)
        assert model.predict(inst) is R.OVERLAP

    def test_no_checkpoint(self):
        """Test the exact model cannot be checkpointed."""
        with pytest.raises(CheckpointError):
            ExactDepwiseModel().to_checkpoint()


class TestBreadthModel:
    """Test the breadth baseline classifier."""

    def test_forward_and_roundtrip(self, instance, tmp_path):
        """Test logits shape and a checkpoint round trip keep the layer count."""
        model = BreadthModel.create(ModelConfig(d=6, seed=2), num_layers=3)
        assert model.forward(instance).shape == (len(LABELS),)
        path = tmp_path / "breadth.json"
        model.to_checkpoint().save(path)
        loaded = load_model(path)
        assert isinstance(loaded, BreadthModel)
        assert loaded.num_layers == 3
        assert_array_equal(loaded.forward(instance).data, model.forward(instance).data)

    def test_depwise_loader_rejects_breadth(self, tmp_path):
        """Test loading a breadth checkpoint as depwise fails."""
        ckpt = BreadthModel.create(ModelConfig(d=4), num_layers=1).to_checkpoint()
        with pytest.raises(CheckpointError):
            DepwiseModel.from_checkpoint(ckpt)


def _renamed(instance: StoryInstance, rename) -> StoryInstance:
    triples = [(rename[a], label, rename[b]) for a, label, b in instance.triples]
    src, tgt = instance.question
    return instance.model_copy(update={
        "triples": triples,
        "sentences": render_sentences(triples, instance.seed),
        "question": (rename[src], rename[tgt]),
    })


def _shuffled(instance: StoryInstance, rng: np.random.Generator) -> StoryInstance:
    order = rng.permutation(len(instance.triples))
    return instance.model_copy(update={
        "triples": [instance.triples[i] for i in order],
        "sentences": [instance.sentences[i] for i in order],
    })


class TestEntityTables:
    """Test entity tables come from role bases."""

    def test_trained_rows_are_random_unit_roles(self):
        """Test initial entity rows match a random-unit basis drawn from the same generator."""
        params = ModelParams.init(12, seed=5)
        basis = RoleBasis.create(ENTITY_ALPHABET, 12, RoleMode.RANDOM_UNIT, rng=np.random.default_rng(5))
        assert params.entity_embed.shape == (len(ENTITY_ALPHABET), 12)
        assert_array_equal(params.entity_embed.data, basis.table())
        assert_allclose(np.linalg.norm(params.entity_embed.data, axis=1), 1.0)

    def test_table_is_deterministic_in_generator(self):
        """Test equal generators give equal tables."""
        a = entity_table(8, np.random.default_rng(3))
        b = entity_table(8, np.random.default_rng(3))
        assert_array_equal(a, b)

    def test_exact_rows_are_onehot_roles(self):
        """Test exact-mode entity vectors are the one-hot basis in alphabet order."""
        emb = ExactEmbeddings()
        assert emb.roles.mode is RoleMode.ORTHONORMAL_ONEHOT
        table = emb.roles.table()
        assert_array_equal(table, np.eye(emb.width)[: len(ENTITY_ALPHABET)])
        for name in "AKZ":
            assert_array_equal(emb.entity_vector(name).data, table[entity_index(name)])


class TestModelSymmetries:
    """Test the trained model's logits under sentence reordering and entity renaming."""

    @pytest.fixture
    def model(self):
        return DepwiseModel.create(ModelConfig(d=8, seed=3))

    @pytest.mark.parametrize("noise", NOISE_KINDS)
    def test_sentence_order_does_not_matter(self, model, noise):
        """Test shuffling the story's sentences leaves the logits unchanged."""
        rng = np.random.default_rng(21)
        for k in (1, 3, 6):
            for inst in generate(8, k, noise, n=2):
                shuffled = _shuffled(inst, rng)
                assert_allclose(model.forward(shuffled).data, model.forward(inst).data, atol=1e-9)

    @pytest.mark.parametrize("noise", NOISE_KINDS)
    def test_renaming_entities_with_their_rows(self, model, noise):
        """Test renaming letters and moving their embedding rows along leaves the logits unchanged."""
        rng = np.random.default_rng(11)
        perm = rng.permutation(len(ENTITY_ALPHABET))
        rename = {name: ENTITY_ALPHABET[perm[i]] for i, name in enumerate(ENTITY_ALPHABET)}
        old_rows = model.params.entity_embed.data
        new_rows = np.empty_like(old_rows)
        for name, new_name in rename.items():
            new_rows[entity_index(new_name)] = old_rows[entity_index(name)]
        renamed_model = DepwiseModel(replace(model.params, entity_embed=Tensor(new_rows)), model.config)

        for k in (2, 4, 7):
            for inst in generate(9, k, noise, n=2):
                assert_allclose(
                    renamed_model.forward(_renamed(inst, rename)).data,
                    model.forward(inst).data,
                    atol=1e-9,
                )
