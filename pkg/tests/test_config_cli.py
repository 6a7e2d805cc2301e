"""Config validation and end-to-end CLI workflows on a tiny model."""

import json

import numpy as np
import pytest

from icolab.checkpoint import load_model_weights
from icolab.cli import main, run_workflow
from icolab.config import DESK_MODEL, config_hash, parse_config
from icolab.harness import jsonl_equal_ignoring_timing, strip_volatile
from icolab.tensor import ContractViolation

TINY_MODEL = {"vocab_size": 51, "d_model": 16, "n_layers": 1, "n_heads": 2,
              "max_seq_len": 512}


class TestParseConfig:
    def test_minimal_eval_config_gets_method_defaults(self, tmp_path):
        ckpt = tmp_path / "m.ckpt"
        ckpt.write_bytes(b"")  # existence is all parse time checks
        cfg = parse_config({"workflow": "eval", "master_seed": 7,
                            "checkpoint": str(ckpt),
                            "adapt": {"method": "ct-kv"}})
        assert cfg.adapt["learning_rate"] == 1e-3
        assert cfg.adapt["iterations"] > 0
        assert cfg.resolved()["adapt"]["learning_rate"] == 1e-3

    def test_unknown_key_rejected_by_name(self):
        with pytest.raises(ContractViolation, match="lerning_rate"):
            parse_config({"workflow": "pretrain", "master_seed": 1,
                          "adapt": {"lerning_rate": 1e-3}})

    def test_parse_is_pure(self):
        doc = {"workflow": "pretrain", "master_seed": 3,
               "pretrain": {"steps": 5}}
        a = parse_config(dict(doc))
        b = parse_config(dict(doc))
        assert a.resolved() == b.resolved()
        assert config_hash(a) == config_hash(b)

    def test_master_seed_mandatory(self):
        with pytest.raises(ContractViolation, match="master_seed"):
            parse_config({"workflow": "pretrain"})

    def test_unknown_workflow_rejected(self):
        with pytest.raises(ContractViolation, match="workflow"):
            parse_config({"workflow": "fly", "master_seed": 1})

    def test_eval_requires_existing_checkpoint(self):
        with pytest.raises(ContractViolation, match="checkpoint"):
            parse_config({"workflow": "eval", "master_seed": 1,
                          "checkpoint": "/nonexistent/m.ckpt"})

    def test_hash_ignores_out_dir(self, tmp_path):
        a = parse_config({"workflow": "pretrain", "master_seed": 5, "out_dir": "x"})
        b = parse_config({"workflow": "pretrain", "master_seed": 5, "out_dir": "y"})
        assert config_hash(a) == config_hash(b)
        c = parse_config({"workflow": "pretrain", "master_seed": 6, "out_dir": "x"})
        assert config_hash(a) != config_hash(c)


@pytest.fixture(scope="module")
def tiny_checkpoint(tmp_path_factory):
    out = tmp_path_factory.mktemp("pretrain")
    cfg = parse_config({"workflow": "pretrain", "master_seed": 11,
                        "out_dir": str(out), "model": TINY_MODEL,
                        "pretrain": {"steps": 2, "batch_size": 2, "gate_tasks": 1,
                                     "family_mix": {"token-mapping": 1.0}}})
    assert run_workflow(cfg) == 0
    return out / "model.ckpt"


class TestWorkflows:
    def test_pretrain_artifacts(self, tiny_checkpoint):
        assert tiny_checkpoint.exists()
        report = json.loads((tiny_checkpoint.parent / "pretrain_report.json").read_text())
        assert "provenance" in report and "master_seed" in report["provenance"]
        assert len(report["report"]["loss_trace"]) == 2
        weights = load_model_weights(tiny_checkpoint)
        assert weights.config.d_model == TINY_MODEL["d_model"]

    def test_eval_workflow_and_determinism(self, tiny_checkpoint, tmp_path):
        def run(out):
            cfg = parse_config({
                "workflow": "eval", "master_seed": 21, "out_dir": str(out),
                "checkpoint": str(tiny_checkpoint),
                "tasks": {"family": "token-mapping", "n_tasks": 2, "k": 4,
                          "seeds": [0, 1]},
                "adapt": {"method": "icl", "methods": ["icl", "ct-kv"],
                          "iterations": 1},
            })
            assert run_workflow(cfg) == 0
        a, b = tmp_path / "a", tmp_path / "b"
        run(a)
        run(b)
        for method in ("icl", "ct-kv"):
            assert jsonl_equal_ignoring_timing(a / f"records_{method}.jsonl",
                                               b / f"records_{method}.jsonl")
        sa = strip_volatile(json.loads((a / "summary.json").read_text()))
        sb = strip_volatile(json.loads((b / "summary.json").read_text()))
        # mean wall time is a timing aggregate, excluded from the comparison
        for s in (sa, sb):
            for row in s["summaries"].values():
                row.pop("mean_train_wall_time", None)
        assert sa == sb

    def test_adapt_workflow_artifacts(self, tiny_checkpoint, tmp_path):
        out = tmp_path / "adapt"
        cfg = parse_config({
            "workflow": "adapt", "master_seed": 31, "out_dir": str(out),
            "checkpoint": str(tiny_checkpoint),
            "tasks": {"family": "token-mapping", "n_tasks": 1, "k": 3},
            "adapt": {"method": "ct-kv", "iterations": 1},
        })
        assert run_workflow(cfg) == 0
        ckpts = list(out.glob("adapt_*.ckpt"))
        sidecars = list(out.glob("adapt_*.json"))
        assert len(ckpts) == 1 and len(sidecars) == 1
        sidecar = json.loads(sidecars[0].read_text())
        assert sidecar["method"] == "ct-kv"
        assert len(sidecar["loss_trace"]) == 1
        assert sidecar["context_layout"][0]["kind"] == "prefix"

    def test_bench_workflow(self, tiny_checkpoint, tmp_path):
        out = tmp_path / "bench"
        cfg = parse_config({
            "workflow": "bench", "master_seed": 41, "out_dir": str(out),
            "checkpoint": str(tiny_checkpoint),
            "bench": {"k_grid": [2, 4, 8], "tokens_per_pair": 4,
                      "methods": ["ct-kv"], "repeats": 1},
        })
        assert run_workflow(cfg) == 0
        summary = json.loads((out / "bench_summary.json").read_text())
        assert "ct-kv" in summary["fitted_exponents"]
        assert (out / "bench_records.jsonl").exists()

    def test_inspect_prints_header(self, tiny_checkpoint, capsys):
        assert main(["inspect", "--checkpoint", str(tiny_checkpoint),
                     "--master-seed", "1"]) == 0
        header = json.loads(capsys.readouterr().out)
        assert any(e["name"] == "embedding" for e in header["tensors"])

    def test_cli_rejects_bad_config(self, capsys):
        assert main(["eval", "--checkpoint", "/missing.ckpt",
                     "--master-seed", "1"]) == 2
        assert "checkpoint" in capsys.readouterr().err

    def test_ablate_workflow_smoke(self, tiny_checkpoint, tmp_path):
        out = tmp_path / "ablate"
        cfg = parse_config({
            "workflow": "ablate", "master_seed": 51, "out_dir": str(out),
            "checkpoint": str(tiny_checkpoint),
            "tasks": {"family": "token-mapping", "n_tasks": 1, "k": 4,
                      "families": ["token-mapping", "mini-grid"], "seeds": [0]},
            "adapt": {"iterations": 1},
        })
        assert run_workflow(cfg) == 0
        report = json.loads((out / "ablation.json").read_text())["report"]
        assert len(report["rows"]) == 8  # 4 variants x 2 families
        assert "mini-grid" in report["small_k"]
