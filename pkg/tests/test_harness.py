"""Sweep records, confusion counts, diagnostics, and the cost benchmark."""

import numpy as np
import pytest

from icolab.harness import (
    BenchRecord,
    complexity_bench,
    confusion_matrix,
    evaluate_method,
    expected_per_head_counter,
    jsonl_equal_ignoring_timing,
    records_from_jsonl,
    records_to_jsonl,
    retrieval_diagnostic,
    sample_eval_rules,
    summarize_records,
    EvalRecord,
)
from icolab.methods import AdaptConfig, default_config
from icolab.model import ModelConfig, init_weights
from icolab.rng import RngStream
from icolab.tasks import TaskVocab, family_config, rule_pool
from icolab.tensor import ContractViolation

VOCAB = TaskVocab()


def tiny_model(seed=1, d=16, layers=2, heads=2):
    cfg = ModelConfig(vocab_size=VOCAB.vocab_size, d_model=d, n_layers=layers,
                      n_heads=heads, max_seq_len=1024)
    return init_weights(cfg, RngStream(seed).split("weights")), cfg


class TestEvaluateMethod:
    def test_icl_records_are_complete_and_deterministic(self):
        weights, cfg = tiny_model()
        fam = family_config("token-mapping", k=4, n_queries=2)
        rules = sample_eval_rules(fam, 3, RngStream(2).split("rules"))
        acfg = AdaptConfig(method="icl", iterations=0)
        rec1, fail1 = evaluate_method(weights, cfg, fam, rules, acfg, [0, 1],
                                      RngStream(3).split("eval"))
        rec2, _ = evaluate_method(weights, cfg, fam, rules, acfg, [0, 1],
                                  RngStream(3).split("eval"))
        assert len(rec1) == 3 * 2 and not fail1
        for a, b in zip(rec1, rec2):
            assert a.to_json()["accuracy"] == b.to_json()["accuracy"]
            assert a.per_query_correct == b.per_query_correct
        for r in rec1:
            assert r.train_wall_time == 0.0
            assert r.accuracy == pytest.approx(np.mean(r.per_query_correct))
            assert r.trainable_params == 0

    def test_adaptive_method_smoke(self):
        weights, cfg = tiny_model(seed=4)
        fam = family_config("token-mapping", k=4, n_queries=2)
        rules = sample_eval_rules(fam, 2, RngStream(5).split("rules"))
        acfg = default_config("ct-kv", iterations=2)
        records, failures = evaluate_method(weights, cfg, fam, rules, acfg, [0],
                                            RngStream(6).split("eval"))
        assert len(records) == 2 and not failures
        for r in records:
            assert r.iterations == 2
            assert r.trainable_params > 0
            assert r.train_wall_time > 0

    def test_summary_statistics(self):
        recs = [EvalRecord("t0", "f", "icl", 0, 1.0, [True], 0.0, 0, 1e-3, 0),
                EvalRecord("t1", "f", "icl", 0, 0.0, [False], 0.0, 0, 1e-3, 0),
                EvalRecord("t0", "f", "icl", 1, 1.0, [True], 0.0, 0, 1e-3, 0),
                EvalRecord("t1", "f", "icl", 1, 1.0, [True], 0.0, 0, 1e-3, 0)]
        s = summarize_records(recs)
        assert s["per_seed_accuracy"] == {0: 0.5, 1: 1.0}
        assert s["accuracy_mean"] == pytest.approx(0.75)
        assert s["accuracy_sd"] == pytest.approx(np.std([0.5, 1.0], ddof=1))


class TestConfusion:
    def _recs(self, method, flags_by_key):
        return [EvalRecord(t, "f", method, s, 1.0 if ok else 0.0, [ok], 0.0, 0, 0.0, 0)
                for (t, s), ok in flags_by_key.items()]

    def test_self_comparison_has_empty_off_diagonal(self):
        keys = {("t0", 0): True, ("t1", 0): False, ("t2", 0): True}
        a = self._recs("x", keys)
        counts = confusion_matrix(a, self._recs("y", keys))
        assert counts["a_solved_b_unsolved"] == 0
        assert counts["b_solved_a_unsolved"] == 0
        assert counts["total"] == 3

    def test_counts_partition_the_universe(self):
        a = self._recs("x", {("t0", 0): True, ("t1", 0): True, ("t2", 0): False,
                             ("t3", 0): False})
        b = self._recs("y", {("t0", 0): True, ("t1", 0): False, ("t2", 0): True,
                             ("t3", 0): False})
        counts = confusion_matrix(a, b)
        assert counts["a_solved_b_solved"] == 1
        assert counts["a_solved_b_unsolved"] == 1
        assert counts["b_solved_a_unsolved"] == 1
        assert counts["neither_solved"] == 1
        total = sum(counts[k] for k in ("a_solved_b_solved", "a_solved_b_unsolved",
                                        "b_solved_a_unsolved", "neither_solved"))
        assert total == counts["total"] == 4

    def test_mismatched_universes_rejected(self):
        a = self._recs("x", {("t0", 0): True})
        b = self._recs("y", {("t1", 0): True})
        with pytest.raises(ContractViolation):
            confusion_matrix(a, b)


class TestRecordsIO:
    def test_roundtrip_and_timing_exclusion(self, tmp_path):
        recs = [EvalRecord("t0", "f", "icl", 0, 1.0, [True, False], 1.23, 5, 1e-3, 64,
                           flags={"note": "x"})]
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        records_to_jsonl(recs, p1)
        back = records_from_jsonl(p1)
        assert back[0].task_id == "t0" and back[0].train_wall_time == 1.23
        recs[0].train_wall_time = 9.99  # timing differs, everything else equal
        records_to_jsonl(recs, p2)
        assert p1.read_bytes() != p2.read_bytes()
        assert jsonl_equal_ignoring_timing(p1, p2)
        recs[0].accuracy = 0.0
        records_to_jsonl(recs, p2)
        assert not jsonl_equal_ignoring_timing(p1, p2)


class TestRetrievalDiagnostic:
    def test_random_model_runs_and_reports(self):
        weights, cfg = tiny_model(seed=7)
        fams = [family_config("token-mapping", k=3, n_queries=1),
                family_config("sequence-transform", k=2, n_queries=1)]
        report = retrieval_diagnostic(weights, cfg, fams, n_tasks=2, seeds=[0, 1],
                                      rng=RngStream(8).split("diag"))
        for fam in ("token-mapping", "sequence-transform"):
            row = report["per_family"][fam]
            assert 0.0 <= row["accuracy_mean"] <= 1.0
            assert len(row["per_seed"]) == 2


class TestComplexityBench:
    def test_counter_formulas(self):
        assert expected_per_head_counter("ct-prompt", 4, 8) == 32 * 32 == 1024
        assert expected_per_head_counter("ttt", 4, 8) == 1024
        assert expected_per_head_counter("ct-kv", 4, 8) == 8 * 32 == 256
        # doubling tokens-per-pair at fixed k scales the kv counter 4x
        assert expected_per_head_counter("ct-kv", 4, 16) \
            == 4 * expected_per_head_counter("ct-kv", 4, 8)

    def test_counters_exact_on_small_grid(self):
        weights, cfg = tiny_model(seed=9)
        out = complexity_bench(weights, cfg, k_grid=[2, 4, 8], ell=4,
                               methods=["ct-kv", "ct-prompt", "ttt"],
                               rng=RngStream(10).split("bench"), repeats=1, warmup=0)
        assert len(out["records"]) == 9
        for rec in out["records"]:
            assert rec.counter_matches_formula, rec
            assert rec.per_head_counter == expected_per_head_counter(
                rec.method, rec.k, rec.tokens_per_pair)
        assert set(out["fitted_exponents"]) == {"ct-kv", "ct-prompt", "ttt"}

    def test_rejects_narrow_grid(self):
        weights, cfg = tiny_model()
        with pytest.raises(ContractViolation):
            complexity_bench(weights, cfg, k_grid=[2, 4], ell=4, methods=["ct-kv"],
                             rng=RngStream(11).split("b"))

    def test_time_monotone_in_k(self):
        weights, cfg = tiny_model(seed=12)
        out = complexity_bench(weights, cfg, k_grid=[2, 8, 32], ell=4,
                               methods=["ct-prompt"], rng=RngStream(13).split("b"),
                               repeats=3, warmup=1)
        times = [r.per_step_time for r in out["records"]]
        assert times == sorted(times)
