"""Task generators, the rule interpreter, pool disjointness, serialization."""

import json

import numpy as np
import pytest

from icolab.model import ModelConfig
from icolab.rng import RngStream
from icolab.tasks import (
    DEFAULT_K,
    FAMILIES,
    TaskFamilyConfig,
    TaskInstance,
    TaskVocab,
    assert_rule_pools_disjoint,
    family_config,
    family_protocol,
    gen_task,
    instantiate_task,
    measure_icl_accuracy,
    meta_pretrain,
    render_training_sequence,
    rule_oracle,
    rule_pool,
    sample_rule,
    tasks_from_jsonl,
    tasks_to_jsonl,
)
from icolab.tensor import ContractViolation

VOCAB = TaskVocab()


def shell_task(rule):
    return TaskInstance(family=rule["family"], rule=rule, demos=None, queries=[],
                        vocab=VOCAB, alphabet_size=0)


class TestVocab:
    def test_partitions_are_disjoint(self):
        v = TaskVocab()
        inputs = set(int(v.input_id(j)) for j in range(v.n_input_symbols))
        outputs = set(int(v.output_id(j)) for j in range(v.n_output_symbols))
        specials = {v.PAD, v.SEP, v.STOP}
        assert not (inputs & outputs)
        assert not (inputs & specials)
        assert not (outputs & specials)
        assert max(inputs | outputs | specials) == v.vocab_size - 1


class TestRuleOracle:
    def test_mapping_rule_application(self):
        rule = {"family": "token-mapping", "symbols": [0, 1], "images": [5, 7]}
        task = shell_task(rule)
        x = VOCAB.input_id(np.array([0]))
        assert np.array_equal(rule_oracle(task, x), VOCAB.output_id(np.array([5])))
        # the answered symbol is the final one; earlier symbols are context
        x2 = VOCAB.input_id(np.array([1, 0]))
        assert np.array_equal(rule_oracle(task, x2), VOCAB.output_id(np.array([5])))
        x3 = VOCAB.input_id(np.array([0, 1]))
        assert np.array_equal(rule_oracle(task, x3), VOCAB.output_id(np.array([7])))

    def test_modular_identity_parameters(self):
        rule = {"family": "modular-affine", "a": 1, "b": 0, "modulus": 16}
        task = shell_task(rule)
        for v in (0, 7, 15):
            x = VOCAB.input_id(np.array([v]))
            assert np.array_equal(rule_oracle(task, x), VOCAB.output_id(np.array([v])))

    def test_reverse(self):
        rule = {"family": "sequence-transform", "transform": "reverse"}
        task = shell_task(rule)
        x = VOCAB.input_id(np.array([3, 4, 5]))
        assert np.array_equal(rule_oracle(task, x), VOCAB.output_id(np.array([5, 4, 3])))

    def test_rotate_and_duplicate(self):
        rot = shell_task({"family": "sequence-transform", "transform": "rotate", "r": 1})
        x = VOCAB.input_id(np.array([1, 2, 3]))
        assert np.array_equal(rule_oracle(rot, x), VOCAB.output_id(np.array([2, 3, 1])))
        dup = shell_task({"family": "sequence-transform", "transform": "duplicate-last"})
        assert np.array_equal(rule_oracle(dup, x), VOCAB.output_id(np.array([1, 2, 3, 3])))

    def test_crop_against_independent_interpreter(self):
        # straight-line reference: scan the grid for the filled bounding box
        rule = {"family": "mini-grid", "transform": "crop"}
        task = shell_task(rule)
        grid = [[0, 0, 0],
                [0, 2, 3],
                [0, 4, 5]]

        def ref_crop(g):
            cells = [(r, c) for r in range(len(g)) for c in range(len(g[0])) if g[r][c]]
            r0 = min(r for r, _ in cells)
            r1 = max(r for r, _ in cells)
            c0 = min(c for _, c in cells)
            c1 = max(c for _, c in cells)
            return [row[c0:c1 + 1] for row in g[r0:r1 + 1]]

        from icolab.tasks import _grid_to_tokens, _tokens_to_grid
        x = _grid_to_tokens(np.array(grid), VOCAB.input_id)
        got = _tokens_to_grid(rule_oracle(task, x), VOCAB.output_index)
        assert got.tolist() == ref_crop(grid) == [[2, 3], [4, 5]]

    def test_malformed_input_rejected(self):
        rule = {"family": "token-mapping", "symbols": [0], "images": [1]}
        with pytest.raises(ContractViolation):
            rule_oracle(shell_task(rule), VOCAB.input_id(np.array([4])))
        grid_rule = {"family": "mini-grid", "transform": "reflect", "axis": "h"}
        with pytest.raises(ContractViolation):
            rule_oracle(shell_task(grid_rule), VOCAB.output_id(np.array([0, 1])))


class TestGeneration:
    @pytest.mark.parametrize("family", FAMILIES)
    def test_demos_satisfy_their_own_rule(self, family):
        cfg = family_config(family)
        task = gen_task(cfg, RngStream(31).split(family))
        for x, y in task.demos.pairs:
            assert np.array_equal(rule_oracle(task, x), y)
        for q in task.queries:
            assert np.array_equal(rule_oracle(task, q.x), q.y)

    @pytest.mark.parametrize("family", FAMILIES)
    def test_queries_disjoint_from_demos(self, family):
        cfg = family_config(family)
        task = gen_task(cfg, RngStream(32).split(family))
        demo_keys = {x.tobytes() for x, _ in task.demos.pairs}
        for q in task.queries:
            assert q.x.tobytes() not in demo_keys

    def test_multiple_choice_families_carry_options(self):
        for family in FAMILIES:
            task = gen_task(family_config(family), RngStream(33).split(family))
            if family_protocol(family) == "multiple-choice":
                for q in task.queries:
                    assert len(q.options) == 4
                    assert np.array_equal(q.options[q.answer_index], q.y)
                    keys = {o.tobytes() for o in q.options}
                    assert len(keys) == 4
            else:
                assert all(q.options is None for q in task.queries)

    def test_generation_is_pure_in_config_and_seed(self):
        cfg = family_config("token-mapping")
        a = gen_task(cfg, RngStream(34).split("t"))
        b = gen_task(cfg, RngStream(34).split("t"))
        assert json.dumps(a.rule) == json.dumps(b.rule)
        for (xa, ya), (xb, yb) in zip(a.demos.pairs, b.demos.pairs):
            assert np.array_equal(xa, xb) and np.array_equal(ya, yb)

    def test_k_exceeding_available_inputs_rejected(self):
        cfg = family_config("token-mapping", k=10, n_symbols=3, n_queries=4)
        with pytest.raises(ContractViolation):
            gen_task(cfg, RngStream(35).split("t"))

    def test_default_k_regimes(self):
        assert DEFAULT_K == {"token-mapping": 16, "modular-affine": 16,
                             "sequence-transform": 10, "mini-grid": 3}


class TestPools:
    def test_sample_rule_respects_pool(self):
        cfg = family_config("token-mapping")
        for pool in ("train", "eval"):
            for i in range(5):
                rule = sample_rule(cfg, RngStream(36).split(f"{pool}{i}"), pool=pool)
                assert rule_pool(rule) == pool

    def test_disjointness_assertion(self):
        cfg = family_config("modular-affine")
        r_train = sample_rule(cfg, RngStream(37).split("a"), pool="train")
        r_eval = sample_rule(cfg, RngStream(37).split("b"), pool="eval")
        assert_rule_pools_disjoint([r_train], [r_eval])
        with pytest.raises(ContractViolation):
            assert_rule_pools_disjoint([r_train], [r_train])


class TestSerialization:
    def test_jsonl_roundtrip_and_stability(self, tmp_path):
        tasks = [gen_task(family_config(f), RngStream(38).split(f), task_id=f"t-{f}")
                 for f in FAMILIES]
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        tasks_to_jsonl(tasks, p1)
        tasks_to_jsonl(tasks, p2)
        assert p1.read_bytes() == p2.read_bytes()
        loaded = tasks_from_jsonl(p1)
        assert len(loaded) == len(tasks)
        for orig, back in zip(tasks, loaded):
            assert orig.family == back.family
            assert json.dumps(orig.rule, sort_keys=True) == json.dumps(back.rule, sort_keys=True)
            for (xa, ya), (xb, yb) in zip(orig.demos.pairs, back.demos.pairs):
                assert np.array_equal(xa, xb) and np.array_equal(ya, yb)
        tasks_to_jsonl(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()


class TestMetaPretrain:
    def test_zero_steps_is_chance_level(self):
        cfg = ModelConfig(vocab_size=VOCAB.vocab_size, d_model=16, n_layers=1,
                          n_heads=2, max_seq_len=256)
        weights, report = meta_pretrain(cfg, None, steps=0, rng=RngStream(39),
                                        gate_tasks=10)
        assert report["loss_trace"] == []
        assert abs(report["gate_icl_accuracy"] - report["gate_chance"]) < 0.25

    def test_few_steps_smoke(self):
        cfg = ModelConfig(vocab_size=VOCAB.vocab_size, d_model=16, n_layers=1,
                          n_heads=2, max_seq_len=256)
        weights, report = meta_pretrain(cfg, {"token-mapping": 1.0}, steps=3,
                                        rng=RngStream(40), batch_size=4, gate_tasks=0)
        assert len(report["loss_trace"]) == 3
        assert all(np.isfinite(v) for v in report["loss_trace"])
        assert all(not t.requires_grad for _, t in weights.named_tensors())

    def test_training_sequence_layout(self):
        task = gen_task(family_config("token-mapping"), RngStream(41).split("t"))
        seq = render_training_sequence(task, task.queries[0])
        ctx = task.demos.context_tokens()
        assert np.array_equal(seq[:ctx.size], ctx)
        assert seq[-1] == VOCAB.STOP
