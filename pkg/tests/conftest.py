"""Shared fixtures: the meta-trained desk model, cached on disk across runs."""

import hashlib
import json
from pathlib import Path

import pytest

from icolab.checkpoint import load_model_weights, save_model_weights
from icolab.model import ModelConfig
from icolab.rng import RngStream
from icolab.tasks import meta_pretrain

CACHE_DIR = Path(__file__).parent / "_cache"
CACHE_VERSION = "v1"  # bump when task rendering or the training loop changes

DESK_SEED = 20240801
DESK_MODEL = ModelConfig(vocab_size=51, d_model=64, n_layers=4, n_heads=4,
                         max_seq_len=1024)
PRETRAIN = {
    "steps": 3000,
    "batch_size": 32,
    "lr": 1e-3,
    "family_mix": {"token-mapping": 0.55, "modular-affine": 0.15,
                   "sequence-transform": 0.15, "mini-grid": 0.15},
    "p_copy_query": 0.3,
    "gate_tasks": 25,
}


def _cache_key() -> str:
    blob = json.dumps({"version": CACHE_VERSION, "seed": DESK_SEED,
                       "model": DESK_MODEL.to_dict(), "pretrain": PRETRAIN},
                      sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@pytest.fixture(scope="session")
def desk_model():
    """Meta-trained desk model (weights, config, training report)."""
    CACHE_DIR.mkdir(exist_ok=True)
    key = _cache_key()
    ckpt = CACHE_DIR / f"desk_{key}.ckpt"
    report_path = CACHE_DIR / f"desk_{key}.json"
    if ckpt.exists() and report_path.exists():
        weights = load_model_weights(ckpt)
        report = json.loads(report_path.read_text())
        return weights, weights.config, report
    weights, report = meta_pretrain(
        DESK_MODEL, PRETRAIN["family_mix"], PRETRAIN["steps"], RngStream(DESK_SEED),
        batch_size=PRETRAIN["batch_size"], lr=PRETRAIN["lr"],
        gate_tasks=PRETRAIN["gate_tasks"], p_copy_query=PRETRAIN["p_copy_query"])
    save_model_weights(ckpt, weights, meta={"seed": DESK_SEED})
    report_path.write_text(json.dumps(report))
    return weights, DESK_MODEL, report
