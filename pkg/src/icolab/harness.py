"""Experiment orchestration: method sweeps, diagnostics, and the cost benchmark.

Seeds vary the demonstration draw for a fixed hidden rule, mirroring the
protocol of evaluating each task under several randomly selected
demonstration sets. Records keep all deterministic fields at the top level
and wall-clock measurements under a separate "timing" key, so reruns can be
compared byte-for-byte with timing excluded.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .methods import (
    AdaptConfig,
    adapt_context,
    adapt_ttt,
    compose_ttt_ctkv,
    default_config,
    init_ct_kv,
    init_ct_prompt,
    make_lora_adapters,
)
from .methods import DemonstrationSet
from .model import (
    AttnCounter,
    ModelConfig,
    ModelWeights,
    greedy_decode,
    lora_parameters,
    score_options,
    sequence_nll,
)
from .optim import Adam
from .rng import RngStream
from .tasks import (
    TaskFamilyConfig,
    TaskInstance,
    family_protocol,
    instantiate_task,
    options_for_pair,
    sample_rule,
)
from .tensor import ContractViolation, GradientTape, NonFiniteError, add

__all__ = [
    "EvalRecord",
    "BenchRecord",
    "sample_eval_rules",
    "evaluate_method",
    "summarize_records",
    "retrieval_diagnostic",
    "confusion_matrix",
    "complexity_bench",
    "ablation_suite",
    "records_to_jsonl",
    "records_from_jsonl",
    "strip_volatile",
    "jsonl_equal_ignoring_timing",
]


@dataclass
class EvalRecord:
    task_id: str
    family: str
    method: str
    seed: int
    accuracy: float
    per_query_correct: list
    train_wall_time: float
    iterations: int
    learning_rate: float
    trainable_params: int
    flags: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "family": self.family,
            "method": self.method,
            "seed": self.seed,
            "accuracy": self.accuracy,
            "per_query_correct": [bool(c) for c in self.per_query_correct],
            "iterations": self.iterations,
            "learning_rate": self.learning_rate,
            "trainable_params": self.trainable_params,
            "flags": self.flags,
            "timing": {"train_wall_time": self.train_wall_time},
        }

    @staticmethod
    def from_json(rec: dict) -> "EvalRecord":
        return EvalRecord(
            task_id=rec["task_id"], family=rec["family"], method=rec["method"],
            seed=rec["seed"], accuracy=rec["accuracy"],
            per_query_correct=rec["per_query_correct"],
            train_wall_time=rec.get("timing", {}).get("train_wall_time", 0.0),
            iterations=rec["iterations"], learning_rate=rec["learning_rate"],
            trainable_params=rec["trainable_params"], flags=rec.get("flags", {}))


def sample_eval_rules(cfg: TaskFamilyConfig, n_tasks: int, rng: RngStream) -> list[dict]:
    """Distinct eval-pool rules for a task suite."""
    rules, seen = [], set()
    attempt = 0
    while len(rules) < n_tasks:
        rule = sample_rule(cfg, rng.split(f"rule{attempt}"), pool="eval")
        attempt += 1
        key = json.dumps(rule, sort_keys=True)
        if key not in seen:
            seen.add(key)
            rules.append(rule)
        if attempt > 50 * n_tasks:
            raise ContractViolation("could not sample enough distinct eval rules")
    return rules


def _score_queries(weights, config, task: TaskInstance, context, adapters,
                   literal_context: bool, reduction: str) -> list[bool]:
    """Per-query correctness under the family's protocol."""
    protocol = family_protocol(task.family)
    ctx_tokens = task.demos.context_tokens()
    correct = []
    for q in task.queries:
        if literal_context:
            x_in = np.concatenate([ctx_tokens, q.x])
            ctx_arg = None
        else:
            x_in = q.x
            ctx_arg = context
        if protocol == "multiple-choice":
            choice, _ = score_options(weights, config, ctx_arg, x_in, q.options,
                                      adapters=adapters, reduction=reduction)
            correct.append(bool(choice == q.answer_index))
        else:
            out = greedy_decode(weights, config, ctx_arg, x_in,
                                max_new=q.y.size + 2, stop_token=task.vocab.STOP,
                                adapters=adapters)
            body = out[:-1] if out.size and out[-1] == task.vocab.STOP else out
            correct.append(bool(body.size == q.y.size and np.array_equal(body, q.y)))
    return correct


def run_method_on_task(weights: ModelWeights, config: ModelConfig, task: TaskInstance,
                       acfg: AdaptConfig) -> EvalRecord:
    """Adapt with one method on one task instance, then score its queries."""
    method = acfg.method
    context, adapters, wall, iterations, n_params, flags = None, None, 0.0, 0, 0, {}
    if method == "icl":
        literal = True
    elif method == "ttt":
        result = adapt_ttt(weights, config, task.demos, acfg)
        adapters, literal = result.adapters, True
        wall, iterations, n_params, flags = (result.wall_time, len(result.loss_trace),
                                             result.trainable_params, result.flags)
    elif method == "ttt+ct-kv":
        ttt_cfg = default_config("ttt", rng=acfg.stream("ttt"))
        result = compose_ttt_ctkv(weights, config, task.demos, ttt_cfg, acfg)
        context, adapters, literal = result.context, result.adapters, False
        wall, iterations, n_params, flags = (result.wall_time, len(result.loss_trace),
                                             result.trainable_params, result.flags)
    else:
        result = adapt_context(weights, config, task.demos, acfg)
        context, literal = result.context, False
        wall, iterations, n_params, flags = (result.wall_time, len(result.loss_trace),
                                             result.trainable_params, result.flags)

    correct = _score_queries(weights, config, task, context, adapters, literal,
                             acfg.score_reduction)
    return EvalRecord(
        task_id=task.task_id, family=task.family, method=method, seed=-1,
        accuracy=float(np.mean(correct)), per_query_correct=correct,
        train_wall_time=wall, iterations=iterations,
        learning_rate=acfg.learning_rate, trainable_params=n_params, flags=flags)


def evaluate_method(weights: ModelWeights, config: ModelConfig,
                    family_cfg: TaskFamilyConfig, rules: list[dict],
                    acfg: AdaptConfig, seeds: list[int],
                    rng: RngStream) -> tuple[list[EvalRecord], list[dict]]:
    """One EvalRecord per (task, seed); adaptation failures are logged, not fatal."""
    records, failures = [], []
    for ti, rule in enumerate(rules):
        task_id = f"{family_cfg.family}-{ti:03d}"
        for seed in seeds:
            stream = rng.split(f"task{ti}").split(f"seed{seed}")
            task = instantiate_task(family_cfg, rule, stream.split("sample"),
                                    task_id=task_id)
            run_cfg = replace(acfg, rng=stream.split("adapt"))
            try:
                record = run_method_on_task(weights, config, task, run_cfg)
            except (NonFiniteError, ContractViolation) as err:
                failures.append({"task_id": task_id, "seed": seed,
                                 "method": acfg.method, "error": str(err)})
                continue
            record.seed = seed
            records.append(record)
    return records, failures


def summarize_records(records: list[EvalRecord]) -> dict:
    """Per-seed task means, then mean and standard deviation across seeds."""
    if not records:
        return {"n_records": 0}
    by_seed: dict[int, list[float]] = {}
    for r in records:
        by_seed.setdefault(r.seed, []).append(r.accuracy)
    seed_means = {s: float(np.mean(v)) for s, v in sorted(by_seed.items())}
    values = np.array(list(seed_means.values()))
    wall = float(np.mean([r.train_wall_time for r in records]))
    return {
        "n_records": len(records),
        "method": records[0].method,
        "family": records[0].family,
        "per_seed_accuracy": seed_means,
        "accuracy_mean": float(values.mean()),
        "accuracy_sd": float(values.std(ddof=1)) if values.size > 1 else 0.0,
        "mean_train_wall_time": wall,
    }


# ---------------------------------------------------------------------------
# Diagnostics


def retrieval_diagnostic(weights: ModelWeights, config: ModelConfig,
                         family_cfgs: list[TaskFamilyConfig], n_tasks: int,
                         seeds: list[int], rng: RngStream) -> dict:
    """Query the model with demonstration inputs whose answers sit in context.

    Plain in-context inference over the full demonstration set, evaluated on
    the demonstration pairs themselves; reports accuracy per family with
    mean and standard deviation over seeds.
    """
    report = {"per_family": {}}
    for cfg in family_cfgs:
        fam_rng = rng.split(cfg.family)
        rules = sample_eval_rules(cfg, n_tasks, fam_rng.split("rules"))
        per_seed = []
        for seed in seeds:
            hits, total = 0, 0
            for ti, rule in enumerate(rules):
                stream = fam_rng.split(f"task{ti}").split(f"seed{seed}")
                task = instantiate_task(cfg, rule, stream.split("sample"))
                ctx = task.demos.context_tokens()
                opt_rng = stream.split("options")
                for x_i, y_i in task.demos.pairs:
                    x_in = np.concatenate([ctx, x_i])
                    if family_protocol(cfg.family) == "multiple-choice":
                        options, answer = options_for_pair(task, x_i, y_i, opt_rng)
                        choice, _ = score_options(weights, config, None, x_in, options)
                        hits += int(choice == answer)
                    else:
                        out = greedy_decode(weights, config, None, x_in,
                                            max_new=y_i.size + 2,
                                            stop_token=task.vocab.STOP)
                        body = out[:-1] if out.size and out[-1] == task.vocab.STOP else out
                        hits += int(body.size == y_i.size and np.array_equal(body, y_i))
                    total += 1
            per_seed.append(hits / total)
        arr = np.array(per_seed)
        report["per_family"][cfg.family] = {
            "accuracy_mean": float(arr.mean()),
            "accuracy_sd": float(arr.std(ddof=1)) if arr.size > 1 else 0.0,
            "per_seed": [float(v) for v in per_seed],
        }
    return report


def confusion_matrix(records_a: list[EvalRecord], records_b: list[EvalRecord]) -> dict:
    """Task-level solved/unsolved counts; solving requires every query correct."""
    def keyed(records):
        return {(r.task_id, r.seed): all(r.per_query_correct) for r in records}

    a, b = keyed(records_a), keyed(records_b)
    if set(a) != set(b):
        raise ContractViolation("confusion_matrix: record universes differ")
    counts = {"a_solved_b_solved": 0, "a_solved_b_unsolved": 0,
              "b_solved_a_unsolved": 0, "neither_solved": 0}
    for key in a:
        if a[key] and b[key]:
            counts["a_solved_b_solved"] += 1
        elif a[key]:
            counts["a_solved_b_unsolved"] += 1
        elif b[key]:
            counts["b_solved_a_unsolved"] += 1
        else:
            counts["neither_solved"] += 1
    counts["total"] = len(a)
    counts["method_a"] = records_a[0].method if records_a else None
    counts["method_b"] = records_b[0].method if records_b else None
    return counts


def ablation_suite(weights: ModelWeights, config: ModelConfig,
                   family_cfgs: list[TaskFamilyConfig], n_tasks: int,
                   seeds: list[int], rng: RngStream,
                   base_cfg: Optional[AdaptConfig] = None) -> dict:
    """Four context-tuning configurations: masking and dropout on or off.

    Small-k families (k < 8) are reported separately, with a flag raised
    when masking hurts there (reported, never asserted).
    """
    base = base_cfg or default_config("ct-kv")
    variants = {
        "neither": dict(leave_one_out=False, p_drop=0.0),
        "no_leave_one_out": dict(leave_one_out=False, p_drop=base.p_drop or 0.05),
        "no_token_dropout": dict(leave_one_out=True, p_drop=0.0),
        "both": dict(leave_one_out=True, p_drop=base.p_drop or 0.05),
    }
    report = {"rows": [], "small_k": {}}
    for cfg in family_cfgs:
        rules = sample_eval_rules(cfg, n_tasks, rng.split(cfg.family).split("rules"))
        fam_results = {}
        for name, over in variants.items():
            acfg = replace(base, **over)
            if cfg.k == 1:
                acfg = replace(acfg, leave_one_out=False)
            records, failures = evaluate_method(
                weights, config, cfg, rules, acfg, seeds,
                rng.split(cfg.family).split(name))
            summary = summarize_records(records)
            summary["variant"] = name
            summary["n_failures"] = len(failures)
            fam_results[name] = summary
            report["rows"].append(summary)
        if cfg.k < 8:
            loo_reversal = (fam_results["no_leave_one_out"]["accuracy_mean"]
                            > fam_results["both"]["accuracy_mean"])
            report["small_k"][cfg.family] = {
                "k": cfg.k,
                "masking_hurts": bool(loo_reversal),
                "no_leave_one_out_mean": fam_results["no_leave_one_out"]["accuracy_mean"],
                "both_mean": fam_results["both"]["accuracy_mean"],
            }
    return report


# ---------------------------------------------------------------------------
# Complexity benchmark


@dataclass
class BenchRecord:
    method: str
    k: int
    tokens_per_pair: int
    per_step_time: float          # one optimization pass over all k pairs
    per_head_counter: int         # query-count x key-count, one pair sub-step
    counter_matches_formula: bool

    def to_json(self) -> dict:
        return {
            "method": self.method, "k": self.k, "tokens_per_pair": self.tokens_per_pair,
            "per_head_counter": self.per_head_counter,
            "counter_matches_formula": self.counter_matches_formula,
            "timing": {"per_step_time": self.per_step_time},
        }


def expected_per_head_counter(method: str, k: int, ell: int) -> int:
    """Attention multiplies per head for one pair sub-step.

    With leave-one-out, the context portion is the other k-1 pairs: methods
    whose prefix tokens generate queries pay (k*ell)^2, a key/value prefix
    pays ell * (k*ell).
    """
    if method in ("ct-prompt", "ttt"):
        return (k * ell) ** 2
    if method == "ct-kv":
        return k * ell * ell
    raise ContractViolation(f"no counter formula for method {method!r}")


_BENCH_LOCK = threading.Lock()


def _bench_demos(k: int, ell: int, vocab_size: int, rng: RngStream) -> DemonstrationSet:
    """k pairs of exactly ell tokens (ell-1 input tokens, one target token)."""
    if ell < 2:
        raise ContractViolation("tokens_per_pair must be >= 2")
    pairs = []
    for _ in range(k):
        toks = rng.integers(3, vocab_size, size=ell)
        pairs.append((toks[:-1], toks[-1:]))
    return DemonstrationSet(pairs, separator=None)


def _bench_step(weights, config, method, demos, context, adapters, opt,
                counters=None) -> None:
    """One optimization pass over all k pairs with leave-one-out as deletion."""
    segment = demos.segment_map()
    with GradientTape() as tape:
        total = None
        for i in range(1, demos.k + 1):
            x_i, y_i = demos.pairs[i - 1]
            keep = np.flatnonzero(segment != i)
            if method in ("ct-kv", "ct-prompt"):
                loss, _ = sequence_nll(weights, config, context.subset(keep),
                                       x_i, y_i, counters=counters)
            else:  # ttt: literal leave-one-out tokens
                inp = np.concatenate([demos.context_tokens()[keep], x_i])
                loss, _ = sequence_nll(weights, config, None, inp, y_i,
                                       adapters=adapters, counters=counters)
            total = loss if total is None else add(total, loss)
    tape.backward(total)
    opt.step()
    opt.zero_grad()


def complexity_bench(weights: ModelWeights, config: ModelConfig, k_grid: list[int],
                     ell: int, methods: list[str], rng: RngStream,
                     repeats: int = 5, warmup: int = 1,
                     min_sample_seconds: float = 2e-3) -> dict:
    """Exact attention counters plus wall-time scaling fits over the k grid.

    Runs on a single lane (refuses concurrent use). A step is one
    optimization pass over the k pairs; per-pair counters are asserted
    against the closed-form cost model. Returns records and the fitted
    log-log slope per method.
    """
    if max(k_grid) / min(k_grid) < 4:
        raise ContractViolation("k_grid must span at least a 4x range")
    if not _BENCH_LOCK.acquire(blocking=False):
        raise ContractViolation("complexity benchmark already running in this process")
    try:
        records, fits = [], {}
        for method in methods:
            times = []
            for k in k_grid:
                stream = rng.split(f"{method}-k{k}")
                demos = _bench_demos(k, ell, config.vocab_size, stream.split("demos"))
                context, adapters = None, None
                if method == "ct-kv":
                    context = init_ct_kv(weights, config, demos)
                    params = context.trainable_tensors()
                elif method == "ct-prompt":
                    context = init_ct_prompt(weights, config, demos)
                    params = context.trainable_tensors()
                elif method == "ttt":
                    adapters = make_lora_adapters(config, rank=8,
                                                  rng=stream.split("lora"))
                    params = lora_parameters(adapters)
                else:
                    raise ContractViolation(f"unknown bench method {method!r}")
                opt = Adam(params, lr0=1e-4, total_steps=10_000)

                counter = AttnCounter()
                _bench_step(weights, config, method, demos, context, adapters, opt,
                            counters=counter)
                values = counter.per_head_values()
                sub_expected = expected_per_head_counter(method, k, ell)
                matches = values == {sub_expected * demos.k}
                measured_sub = (next(iter(values)) // demos.k
                                if len(values) == 1 else -1)

                for _ in range(warmup):
                    _bench_step(weights, config, method, demos, context, adapters, opt)
                samples = []
                for _ in range(repeats):
                    batching = 1
                    while True:
                        t0 = time.perf_counter()
                        for _ in range(batching):
                            _bench_step(weights, config, method, demos, context,
                                        adapters, opt)
                        dt = time.perf_counter() - t0
                        if dt >= min_sample_seconds or batching >= 64:
                            samples.append(dt / batching)
                            break
                        batching *= 2
                median = float(np.median(samples))
                times.append(median)
                records.append(BenchRecord(
                    method=method, k=k, tokens_per_pair=ell, per_step_time=median,
                    per_head_counter=measured_sub,
                    counter_matches_formula=bool(matches)))
            slope = float(np.polyfit(np.log(np.asarray(k_grid, dtype=float)),
                                     np.log(np.asarray(times)), 1)[0])
            fits[method] = slope
        return {"records": records, "fitted_exponents": fits,
                "k_grid": list(k_grid), "tokens_per_pair": ell}
    finally:
        _BENCH_LOCK.release()


# ---------------------------------------------------------------------------
# Record files


def records_to_jsonl(records, path) -> None:
    with open(path, "w") as fh:
        for r in records:
            rec = r.to_json() if hasattr(r, "to_json") else r
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")


def records_from_jsonl(path) -> list[EvalRecord]:
    out = []
    with open(path) as fh:
        for line in fh:
            out.append(EvalRecord.from_json(json.loads(line)))
    return out


def strip_volatile(obj):
    """Drop wall-clock keys ("timing") recursively; timestamps live there too."""
    if isinstance(obj, dict):
        return {k: strip_volatile(v) for k, v in obj.items() if k != "timing"}
    if isinstance(obj, list):
        return [strip_volatile(v) for v in obj]
    return obj


def jsonl_equal_ignoring_timing(path_a, path_b) -> bool:
    def canon(path):
        with open(path) as fh:
            return [json.dumps(strip_volatile(json.loads(line)), sort_keys=True)
                    for line in fh if line.strip()]
    return canon(path_a) == canon(path_b)
