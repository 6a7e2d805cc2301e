"""Command-line entry point: pretrain, adapt, eval, ablate, bench, inspect.

Every workflow requires an explicit master seed, writes JSON artifacts that
embed the config hash and seed, and keeps wall-clock values under the
volatile "timing" key so reruns compare byte-for-byte without it.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import (
    CheckpointError,
    load_model_weights,
    read_header,
    save_checkpoint,
    save_model_weights,
)
from .config import DESK_MODEL, RunConfig, config_hash, parse_config
from .harness import (
    ablation_suite,
    complexity_bench,
    evaluate_method,
    records_to_jsonl,
    retrieval_diagnostic,
    sample_eval_rules,
    summarize_records,
)
from .methods import (
    ALL_METHODS,
    METHOD_DEFAULTS,
    AdaptConfig,
    MLPPrefixParameterization,
)
from .model import KVPrefix, SoftPrompt
from .rng import RngStream
from .tasks import family_config, gen_task, meta_pretrain
from .tensor import ContractViolation, NonFiniteError

__all__ = ["main", "run_workflow"]


def _provenance(config: RunConfig) -> dict:
    return {"config_hash": config_hash(config), "master_seed": config.master_seed}


def _write_json(path: Path, payload: dict, config: RunConfig) -> None:
    doc = dict(payload)
    doc["provenance"] = _provenance(config)
    doc.setdefault("timing", {})["written_at"] = time.time()
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def _adapt_config(adapt: dict, method: str, rng: RngStream) -> AdaptConfig:
    fields = {k: v for k, v in adapt.items() if k not in ("method", "methods")}
    base = dict(METHOD_DEFAULTS.get(method, {}))
    base.update(fields)
    allowed = {"learning_rate", "iterations", "p_drop", "leave_one_out",
               "init_scheme", "m", "lora_rank", "score_reduction"}
    base = {k: v for k, v in base.items() if k in allowed}
    return AdaptConfig(method=method, rng=rng, **base)


def _context_tensors(result) -> dict:
    out = {}
    ctx = result.context
    parts = ctx if isinstance(ctx, list) else ([ctx] if ctx is not None else [])
    for j, part in enumerate(parts):
        tag = f"part{j}." if len(parts) > 1 else ""
        if isinstance(part, SoftPrompt):
            out[f"{tag}prompt.matrix"] = part.matrix
        elif isinstance(part, KVPrefix):
            for li in range(part.n_layers):
                out[f"{tag}prefix.keys.{li}"] = part.keys[li]
                out[f"{tag}prefix.values.{li}"] = part.values[li]
        elif isinstance(part, MLPPrefixParameterization):
            out[f"{tag}mlp.seed"] = part.seed
            out[f"{tag}mlp.w_in"] = part.w_in
            out[f"{tag}mlp.w_out"] = part.w_out
    if result.adapters:
        for (li, name) in sorted(result.adapters):
            ad = result.adapters[(li, name)]
            out[f"lora.{li}.{name}.a"] = ad.a
            out[f"lora.{li}.{name}.b"] = ad.b
    return out


def _family_cfg(config: RunConfig, family=None):
    tasks = config.tasks
    return family_config(family or tasks["family"], k=tasks.get("k"),
                         n_queries=tasks.get("n_queries", 4))


# ---------------------------------------------------------------------------
# Workflows


def _run_pretrain(config: RunConfig, out: Path) -> None:
    rng = RngStream(config.master_seed)
    p = config.pretrain
    weights, report = meta_pretrain(
        config.model_config(), p["family_mix"], p["steps"], rng.split("pretrain"),
        batch_size=p["batch_size"], lr=p["lr"], k_by_family=p["k_by_family"],
        gate_tasks=p["gate_tasks"], p_copy_query=p["p_copy_query"])
    ckpt_path = out / "model.ckpt"
    save_model_weights(ckpt_path, weights, meta=_provenance(config))
    _write_json(out / "pretrain_report.json",
                {"report": report, "checkpoint": str(ckpt_path)}, config)


def _context_layout(result) -> list:
    ctx = result.context
    parts = ctx if isinstance(ctx, list) else ([ctx] if ctx is not None else [])
    layout = []
    for part in parts:
        kind = ("prompt" if isinstance(part, SoftPrompt)
                else "mlp" if isinstance(part, MLPPrefixParameterization) else "prefix")
        layout.append({"kind": kind,
                       "segment_map": np.asarray(part.segment_map).tolist(),
                       "position_base": np.asarray(part.position_base).tolist()})
    return layout


def _run_adapt(config: RunConfig, out: Path) -> None:
    from .methods import adapt_context, adapt_ttt, compose_ttt_ctkv

    weights = load_model_weights(config.checkpoint)
    model_cfg = weights.config
    rng = RngStream(config.master_seed)
    fam_cfg = _family_cfg(config)
    method = config.adapt["method"]
    if method == "icl":
        raise ContractViolation("adapt workflow: icl performs no optimization")
    for ti in range(config.tasks["n_tasks"]):
        stream = rng.split(f"task{ti}")
        task = gen_task(fam_cfg, stream.split("gen"), pool="eval",
                        task_id=f"{fam_cfg.family}-{ti:03d}")
        acfg = _adapt_config(config.adapt, method, stream.split("adapt"))
        if method == "ttt":
            result = adapt_ttt(weights, model_cfg, task.demos, acfg)
        elif method == "ttt+ct-kv":
            ttt_cfg = _adapt_config({}, "ttt", stream.split("ttt"))
            result = compose_ttt_ctkv(weights, model_cfg, task.demos, ttt_cfg, acfg)
        else:
            result = adapt_context(weights, model_cfg, task.demos, acfg)
        save_checkpoint(out / f"adapt_{task.task_id}.ckpt", _context_tensors(result),
                        model_config=model_cfg, meta=_provenance(config))
        _write_json(out / f"adapt_{task.task_id}.json", {
            "task_id": task.task_id,
            "method": result.method,
            "loss_trace": result.loss_trace,
            "trainable_params": result.trainable_params,
            "flags": result.flags,
            "context_layout": _context_layout(result),
            "adapt_settings": {k: v for k, v in config.adapt.items()
                               if k != "methods"},
            "timing": {"train_wall_time": result.wall_time},
        }, config)


def _run_eval(config: RunConfig, out: Path) -> None:
    weights = load_model_weights(config.checkpoint)
    model_cfg = weights.config
    rng = RngStream(config.master_seed)
    fam_cfg = _family_cfg(config)
    methods = config.adapt.get("methods") or [config.adapt["method"]]
    rules = sample_eval_rules(fam_cfg, config.tasks["n_tasks"], rng.split("rules"))
    seeds = list(config.tasks["seeds"])
    summaries, all_failures = {}, {}
    for method in methods:
        acfg = _adapt_config(config.adapt, method, None)
        records, failures = evaluate_method(
            weights, model_cfg, fam_cfg, rules, acfg, seeds, rng.split(f"m-{method}"))
        records_to_jsonl(records, out / f"records_{method}.jsonl")
        summaries[method] = summarize_records(records)
        all_failures[method] = failures
    _write_json(out / "summary.json",
                {"summaries": summaries, "failures": all_failures,
                 "seeds": seeds, "n_tasks": config.tasks["n_tasks"],
                 "family": fam_cfg.family}, config)


def _run_ablate(config: RunConfig, out: Path) -> None:
    weights = load_model_weights(config.checkpoint)
    model_cfg = weights.config
    rng = RngStream(config.master_seed)
    families = config.tasks.get("families") or [config.tasks["family"], "mini-grid"]
    fam_cfgs = [_family_cfg(config, f) if f == config.tasks["family"]
                else family_config(f) for f in families]
    base = _adapt_config(config.adapt, "ct-kv", None)
    report = ablation_suite(weights, model_cfg, fam_cfgs, config.tasks["n_tasks"],
                            list(config.tasks["seeds"]), rng.split("ablate"),
                            base_cfg=base)
    _write_json(out / "ablation.json", {"report": report}, config)


def _run_bench(config: RunConfig, out: Path) -> None:
    weights = load_model_weights(config.checkpoint)
    model_cfg = weights.config
    rng = RngStream(config.master_seed)
    b = config.bench
    result = complexity_bench(weights, model_cfg, b["k_grid"], b["tokens_per_pair"],
                              b["methods"], rng.split("bench"), repeats=b["repeats"])
    records_to_jsonl(result["records"], out / "bench_records.jsonl")
    _write_json(out / "bench_summary.json",
                {"fitted_exponents": result["fitted_exponents"],
                 "k_grid": result["k_grid"],
                 "tokens_per_pair": result["tokens_per_pair"]}, config)


def _run_inspect(config: RunConfig, out: Path) -> None:
    header = read_header(config.checkpoint)
    print(json.dumps(header, sort_keys=True, indent=2))


def run_workflow(config: RunConfig) -> int:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runners = {"pretrain": _run_pretrain, "adapt": _run_adapt, "eval": _run_eval,
               "ablate": _run_ablate, "bench": _run_bench, "inspect": _run_inspect}
    try:
        runners[config.workflow](config, out)
    except (ContractViolation, NonFiniteError, CheckpointError) as err:
        print(f"error [{config.workflow}]: {err}", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# Argument parsing


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--master-seed", type=int, dest="master_seed")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--checkpoint")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="icolab",
        description="Few-shot context-adaptation lab: training, evaluation, "
                    "ablations, and the attention-cost benchmark.")
    sub = parser.add_subparsers(dest="workflow", required=True)

    p = sub.add_parser("pretrain", help="meta-train a desk-scale model")
    _add_common(p)
    p.add_argument("--steps", type=int, dest="pretrain.steps")
    p.add_argument("--batch-size", type=int, dest="pretrain.batch_size")
    p.add_argument("--lr", type=float, dest="pretrain.lr")
    p.add_argument("--gate-tasks", type=int, dest="pretrain.gate_tasks")

    for name, hlp in (("adapt", "adapt a context on sampled tasks"),
                      ("eval", "evaluate methods over tasks and seeds")):
        p = sub.add_parser(name, help=hlp)
        _add_common(p)
        p.add_argument("--method", dest="adapt.method", choices=ALL_METHODS)
        p.add_argument("--methods", dest="adapt.methods",
                       help="comma-separated method list")
        p.add_argument("--family", dest="tasks.family")
        p.add_argument("--n-tasks", type=int, dest="tasks.n_tasks")
        p.add_argument("--k", type=int, dest="tasks.k")
        p.add_argument("--seeds", dest="tasks.seeds", help="comma-separated seeds")
        p.add_argument("--iterations", type=int, dest="adapt.iterations")
        p.add_argument("--learning-rate", type=float, dest="adapt.learning_rate")
        p.add_argument("--p-drop", type=float, dest="adapt.p_drop")
        p.add_argument("--m", type=int, dest="adapt.m")
        p.add_argument("--lora-rank", type=int, dest="adapt.lora_rank")

    p = sub.add_parser("ablate", help="masking/dropout ablation grid")
    _add_common(p)
    p.add_argument("--families", dest="tasks.families", help="comma-separated")
    p.add_argument("--n-tasks", type=int, dest="tasks.n_tasks")
    p.add_argument("--seeds", dest="tasks.seeds", help="comma-separated seeds")

    p = sub.add_parser("bench", help="attention-cost scaling benchmark")
    _add_common(p)
    p.add_argument("--k-grid", dest="bench.k_grid", help="comma-separated k values")
    p.add_argument("--tokens-per-pair", type=int, dest="bench.tokens_per_pair")
    p.add_argument("--bench-methods", dest="bench.methods", help="comma-separated")
    p.add_argument("--repeats", type=int, dest="bench.repeats")

    p = sub.add_parser("inspect", help="print a checkpoint's header")
    _add_common(p)
    return parser


_LIST_FLAGS = {"tasks.seeds": int, "bench.k_grid": int,
               "adapt.methods": str, "bench.methods": str, "tasks.families": str}


def main(argv=None) -> int:
    args = vars(build_parser().parse_args(argv))
    workflow = args.pop("workflow")
    source = args.pop("config", None)
    overrides = {"workflow": workflow}
    for key, value in args.items():
        if value is None:
            continue
        if key in _LIST_FLAGS and isinstance(value, str):
            cast = _LIST_FLAGS[key]
            value = [cast(v) for v in value.split(",") if v]
        overrides[key] = value
    try:
        config = parse_config(source if source is not None else {}, overrides)
    except ContractViolation as err:
        print(f"error [config]: {err}", file=sys.stderr)
        return 2
    return run_workflow(config)


if __name__ == "__main__":
    sys.exit(main())
