"""Run configuration: JSON documents with strict key validation.

A run config is a JSON object with a workflow tag, a mandatory master seed
(no implicit entropy anywhere), and per-section option blocks. Unknown keys
are rejected by name at every level; method-specific defaults are filled in
and echoed so an artifact always records the exact settings it ran with.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .methods import ALL_METHODS, METHOD_DEFAULTS
from .model import ModelConfig
from .tensor import ContractViolation

__all__ = ["RunConfig", "parse_config", "config_hash", "DESK_MODEL"]

WORKFLOWS = ("pretrain", "adapt", "eval", "ablate", "bench", "inspect")

# Default desk-scale model: wide enough to acquire in-context lookup, small
# enough that every acceptance run fits in minutes.
DESK_MODEL = {
    "vocab_size": 51,
    "d_model": 64,
    "n_layers": 4,
    "n_heads": 4,
    "max_seq_len": 1024,
    "positional": "rotary",
}

_TOP_KEYS = {"workflow", "master_seed", "out_dir", "model", "checkpoint",
             "tasks", "adapt", "pretrain", "bench"}
_MODEL_KEYS = set(DESK_MODEL)
_TASKS_KEYS = {"family", "families", "n_tasks", "k", "seeds", "n_queries"}
_ADAPT_KEYS = {"method", "methods", "learning_rate", "iterations", "p_drop",
               "leave_one_out", "init_scheme", "m", "lora_rank", "score_reduction"}
_PRETRAIN_KEYS = {"steps", "batch_size", "lr", "family_mix", "p_copy_query",
                  "gate_tasks", "k_by_family"}
_BENCH_KEYS = {"k_grid", "tokens_per_pair", "methods", "repeats"}

_TASKS_DEFAULTS = {"family": "token-mapping", "families": None, "n_tasks": 20,
                   "k": None, "seeds": [0, 1, 2, 3, 4], "n_queries": 4}
_PRETRAIN_DEFAULTS = {"steps": 2500, "batch_size": 32, "lr": 1e-3,
                      "family_mix": None, "p_copy_query": 0.25, "gate_tasks": 20,
                      "k_by_family": None}
_BENCH_DEFAULTS = {"k_grid": [2, 4, 8, 16, 32], "tokens_per_pair": 16,
                   "methods": ["ct-prompt", "ct-kv", "ttt"], "repeats": 5}


def _check_keys(section: str, obj: dict, allowed: set) -> None:
    for key in obj:
        if key not in allowed:
            raise ContractViolation(
                f"config: unknown key {key!r} in {section} "
                f"(allowed: {', '.join(sorted(allowed))})")


@dataclass
class RunConfig:
    workflow: str
    master_seed: int
    out_dir: str
    model: dict
    checkpoint: Optional[str]
    tasks: dict
    adapt: dict
    pretrain: dict
    bench: dict

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.model)

    def resolved(self) -> dict:
        return {
            "workflow": self.workflow, "master_seed": self.master_seed,
            "out_dir": self.out_dir, "model": self.model,
            "checkpoint": self.checkpoint, "tasks": self.tasks,
            "adapt": self.adapt, "pretrain": self.pretrain, "bench": self.bench,
        }


def config_hash(config: RunConfig) -> str:
    """Hash of everything that determines outputs (out_dir excluded)."""
    doc = config.resolved()
    doc.pop("out_dir")
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _fill_adapt_defaults(adapt: dict) -> dict:
    methods = adapt.get("methods")
    method = adapt.get("method", "ct-kv")
    if method not in ALL_METHODS:
        raise ContractViolation(f"config: unknown method {method!r}")
    if methods is not None:
        for m in methods:
            if m not in ALL_METHODS:
                raise ContractViolation(f"config: unknown method {m!r}")
    out = dict(METHOD_DEFAULTS.get(method, {}))
    out.update({k: v for k, v in adapt.items() if k not in ("method", "methods")})
    out["method"] = method
    if methods is not None:
        out["methods"] = list(methods)
    return out


def parse_config(source, overrides: Optional[dict] = None) -> RunConfig:
    """Parse and validate a config document (path, JSON string, or dict)."""
    if isinstance(source, dict):
        doc = dict(source)
    else:
        text = Path(source).read_text() if Path(str(source)).exists() else str(source)
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as err:
            raise ContractViolation(f"config: invalid JSON ({err})")
    if not isinstance(doc, dict):
        raise ContractViolation("config: top level must be a JSON object")
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if "." in key:
            section, sub = key.split(".", 1)
            doc.setdefault(section, {})[sub] = value
        else:
            doc[key] = value

    _check_keys("top level", doc, _TOP_KEYS)
    workflow = doc.get("workflow")
    if workflow not in WORKFLOWS:
        raise ContractViolation(
            f"config: workflow must be one of {WORKFLOWS}, got {workflow!r}")
    if "master_seed" not in doc:
        raise ContractViolation("config: master_seed is mandatory")
    master_seed = int(doc["master_seed"])

    model = dict(DESK_MODEL)
    _check_keys("model", doc.get("model", {}), _MODEL_KEYS)
    model.update(doc.get("model", {}))

    tasks = dict(_TASKS_DEFAULTS)
    _check_keys("tasks", doc.get("tasks", {}), _TASKS_KEYS)
    tasks.update(doc.get("tasks", {}))

    _check_keys("adapt", doc.get("adapt", {}), _ADAPT_KEYS)
    adapt = _fill_adapt_defaults(doc.get("adapt", {}))

    pretrain = dict(_PRETRAIN_DEFAULTS)
    _check_keys("pretrain", doc.get("pretrain", {}), _PRETRAIN_KEYS)
    pretrain.update(doc.get("pretrain", {}))

    bench = dict(_BENCH_DEFAULTS)
    _check_keys("bench", doc.get("bench", {}), _BENCH_KEYS)
    bench.update(doc.get("bench", {}))

    checkpoint = doc.get("checkpoint")
    if workflow in ("adapt", "eval", "ablate", "bench", "inspect"):
        if not checkpoint:
            raise ContractViolation(f"config: workflow {workflow!r} needs a checkpoint")
        if not Path(checkpoint).exists():
            raise ContractViolation(f"config: checkpoint {checkpoint!r} does not exist")

    return RunConfig(
        workflow=workflow, master_seed=master_seed,
        out_dir=doc.get("out_dir", "runs"),
        model=model, checkpoint=checkpoint, tasks=tasks, adapt=adapt,
        pretrain=pretrain, bench=bench)
