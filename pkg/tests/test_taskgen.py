"""
Unit tests for story generation, rendering and parsing.
"""

from collections import deque

import pytest
from pydantic import ValidationError

from core.graph import bfs_shortest_path, build_graph, path_relation
from core.relations import LABELS, RelationLabel as R
from core.taskgen import (
    MAX_HOPS,
    NOISE_KINDS,
    TEMPLATES,
    GenerationError,
    NoiseKind,
    ParseError,
    Split,
    StoryInstance,
    generate,
    generate_one,
    generate_split,
    label_histogram,
    parse,
    render,
    render_sentences,
)


def _shortest_path_counts(g, src):
    """Number of distinct shortest paths from ``src`` to every reachable node."""
    dist, count = {src: 0}, {src: 1}
    queue = deque([src])
    while queue:
        node = queue.popleft()
        for n in g.neighbors(node):
            if n not in dist:
                dist[n] = dist[node] + 1
                count[n] = count[node]
                queue.append(n)
            elif dist[n] == dist[node] + 1:
                count[n] += count[node]
    return count


class TestGenerate:
    """Test generator arguments, determinism and answer correctness."""

    @pytest.mark.parametrize("k", [0, 11, -1])
    def test_hop_range(self, k):
        """Test k outside [1, 10] is rejected."""
        with pytest.raises(GenerationError):
            generate(0, k)

    def test_bad_counts(self):
        """Test negative n or seed is rejected and n=0 yields nothing."""
        with pytest.raises(GenerationError):
            generate(0, 2, n=-1)
        with pytest.raises(GenerationError):
            generate(-3, 2)
        assert generate(0, 2, n=0) == []

    def test_deterministic(self):
        """Test the same arguments give identical instances."""
        a = generate(7, 4, NoiseKind.SUPPORTING, n=5)
        b = generate(7, 4, NoiseKind.SUPPORTING, n=5)
        assert [x.to_json() for x in a] == [x.to_json() for x in b]

    def test_seed_changes_output(self):
        """Test different seeds give different stories."""
        a = generate(1, 5, n=3)
        b = generate(2, 5, n=3)
        assert [x.triples for x in a] != [x.triples for x in b]

    @pytest.mark.parametrize("noise", NOISE_KINDS)
    @pytest.mark.parametrize("k", range(1, MAX_HOPS + 1))
    def test_gold_matches_oracle(self, k, noise):
        """Test the gold label is the oracle along a k-hop BFS path of the noisy story."""
        for inst in generate(3, k, noise, n=4):
            g = build_graph(inst.triples)
            assert len(bfs_shortest_path(g, *inst.question)) == k + 1
            assert path_relation(g, *inst.question) is inst.gold
            assert inst.k == k and inst.noise is noise

    def test_label_stratification(self):
        """Test nine consecutive instances cover every label once."""
        hist = label_histogram(generate(0, 3, n=9))
        assert list(hist) == [label.value for label in LABELS]
        assert set(hist.values()) == {1}

    def test_histogram_keeps_zero_counts(self):
        """Test labels that never occur are still listed."""
        hist = label_histogram(generate(0, 2, n=1))
        assert len(hist) == 9
        assert sum(hist.values()) == 1

    @pytest.mark.parametrize("noise", [NoiseKind.DISCONNECTED, NoiseKind.IRRELEVANT, NoiseKind.SUPPORTING])
    def test_noise_keeps_chain_and_question(self, noise):
        """Test noise adds triples without touching the clean chain or the question."""
        for index in range(5):
            clean = generate_one(11, 4, NoiseKind.NONE, index)
            noisy = generate_one(11, 4, noise, index)
            assert noisy.question == clean.question
            assert noisy.gold is clean.gold
            assert set(clean.triples) < set(noisy.triples)

    @pytest.mark.parametrize("noise", NOISE_KINDS)
    def test_shortest_paths_are_unique(self, noise):
        """Test no pair of entities has two equal-length shortest paths, so letter order never breaks a tie."""
        for k in range(1, MAX_HOPS + 1):
            for inst in generate(13, k, noise, n=3):
                g = build_graph(inst.triples)
                for src in g.node_ids:
                    counts = _shortest_path_counts(g, src)
                    assert set(counts.values()) == {1}, (inst.triples, src)

    def test_supporting_detour_is_one_hop_longer(self):
        """Test the detour adds s entities and s + 1 relations around an s-hop chain segment."""
        for index in range(9):
            clean = generate_one(17, 5, NoiseKind.NONE, index)
            noisy = generate_one(17, 5, NoiseKind.SUPPORTING, index)
            extra_triples = len(noisy.triples) - len(clean.triples)
            extra_nodes = len(build_graph(noisy.triples)) - len(build_graph(clean.triples))
            assert extra_triples == extra_nodes + 1
            assert extra_nodes in (1, 2)

    def test_clean_story_is_the_chain(self):
        """Test a noiseless story has exactly k triples over k + 1 entities."""
        inst = generate_one(5, 6, NoiseKind.NONE, 0)
        assert len(inst.triples) == 6
        assert len(build_graph(inst.triples)) == 7

    def test_disconnected_noise_is_unreachable(self):
        """Test the distractor pair has no path to the question entities."""
        inst = generate_one(5, 3, NoiseKind.DISCONNECTED, 2)
        g = build_graph(inst.triples)
        src = inst.question[0]
        extra = [n for n in g.node_ids if bfs_shortest_path(g, src, n) is None]
        assert len(extra) == 2

    def test_splits(self):
        """Test preset sizes and that splits draw from separate streams."""
        train = generate_split(0, Split.TRAIN, 2)
        val = generate_split(0, Split.VALIDATION, 2)
        test = generate_split(0, Split.TEST, 1)
        assert len(train) == len(val) == 10
        assert {inst.noise for inst in train} == {NoiseKind.NONE}
        assert len(test) == MAX_HOPS * len(NOISE_KINDS)
        assert [x.triples for x in train] != [x.triples for x in val]


class TestStoryInstance:
    """Test instance validation."""

    def test_sentence_count_must_match(self):
        """Test one sentence per triple is required."""
        with pytest.raises(ValidationError):
            StoryInstance(triples=[("A", R.LEFT, "B")], sentences=[], question=("A", "B"), gold=R.LEFT, k=1, seed=0)

    def test_question_needs_distinct_entities(self):
        """Test a question about one entity is rejected."""
        with pytest.raises(ValidationError):
            StoryInstance(
                triples=[("A", R.LEFT, "B")],
                sentences=["A is on the left side of B."],
                question=("A", "A"),
                gold=R.OVERLAP,
                k=1,
                seed=0,
            )

    def test_json_roundtrip(self):
        """Test serialised instances validate back to equal objects."""
        inst = generate_one(2, 3, NoiseKind.IRRELEVANT, 1)
        assert StoryInstance.model_validate_json(inst.to_json()) == inst


class TestRenderParse:
    """Test the template table and the parser."""

    def test_templates_cover_vocabulary(self):
        """Test every relation has at least three paraphrases."""
        assert set(TEMPLATES) == set(LABELS)
        assert all(len(t) >= 3 for t in TEMPLATES.values())

    @pytest.mark.parametrize("noise", NOISE_KINDS)
    def test_parse_recovers_render(self, noise):
        """Test parsing rendered text returns the triples and question on 250 stories per noise kind."""
        checked = 0
        for k in range(1, MAX_HOPS + 1):
            for inst in generate(9, k, noise, n=25):
                parsed = parse(render(inst))
                assert parsed.triples == inst.triples, inst.seed
                assert parsed.question == inst.question
                checked += 1
        assert checked == 250

    def test_shuffled_sentences_give_same_triples(self):
        """Test sentence order only reorders the parsed triples."""
        inst = generate_one(21, 6, NoiseKind.SUPPORTING, 4)
        shuffled = list(reversed(inst.sentences))
        parsed = parse(" ".join(shuffled))
        assert sorted(parsed.triples) == sorted(inst.triples)

    def test_every_template_parses(self):
        """Test each paraphrase maps back to its relation."""
        for label, templates in TEMPLATES.items():
            for template in templates:
                parsed = parse(template.format(a="Q", b="W"))
                assert parsed.triples == [("Q", label, "W")]

    def test_render_is_seeded(self):
        """Test template choice depends only on the seed."""
        triples = [("A", R.LEFT, "B"), ("B", R.ABOVE, "C")]
        assert render_sentences(triples, 4) == render_sentences(triples, 4)

    def test_inline_story(self):
        """Test a hand-written story with a question."""
        parsed = parse("K is below C. C is under Y. What is the relation of the agent K to the agent Y?")
        assert parsed.triples == [("K", R.BELOW, "C"), ("C", R.BELOW, "Y")]
        assert parsed.question == ("K", "Y")

    def test_story_without_question(self):
        """Test the question is optional."""
        assert parse("A overlaps B.").question is None

    @pytest.mark.parametrize("text,index", [
        ("A is near B.", 0),
        ("A is above B. nothing here.", 1),
        ("A is above B. What is the relation of the agent A to the agent B? "
         "What is the relation of the agent B to the agent A?", 2),
    ])
    def test_parse_errors(self, text, index):
        """Test unknown templates, entity-free sentences and repeated questions."""
        with pytest.raises(ParseError) as excinfo:
            parse(text)
        assert excinfo.value.sentence_index == index
