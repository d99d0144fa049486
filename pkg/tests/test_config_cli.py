"""Run configuration merging and CLI subcommands."""

import json

import numpy as np
import pytest

from fraudformer.cli import build_parser, run_subcommand
from fraudformer.config import ConfigError, DEFAULTS, load_run_config


# --- config -----------------------------------------------------------------

def test_defaults_load_without_file():
    cfg = load_run_config()
    assert cfg.seed == DEFAULTS["seed"]
    assert cfg.pretrain_config().batch_size == DEFAULTS["pretrain"]["batch_size"]


def test_override_merges_recursively(tmp_path):
    p = tmp_path / "run.json"
    p.write_text(json.dumps({"seed": 5, "pretrain": {"steps": 7}}))
    cfg = load_run_config(p)
    assert cfg.seed == 5
    assert cfg.pretrain_config().steps == 7
    assert cfg.pretrain_config().lr == DEFAULTS["pretrain"]["lr"]


def test_unknown_keys_rejected(tmp_path):
    p = tmp_path / "run.json"
    p.write_text(json.dumps({"pretrain": {"stepz": 7}}))
    with pytest.raises(ConfigError, match="stepz"):
        load_run_config(p)
    p.write_text(json.dumps({"bogus_section": {}}))
    with pytest.raises(ConfigError, match="bogus_section"):
        load_run_config(p)


def test_with_seed_propagates():
    cfg = load_run_config().with_seed(42)
    assert cfg.seed == 42
    assert cfg.generator_config().seed == 42
    assert cfg.pretrain_config().seed == 42


def test_every_spec_hyperparameter_is_named():
    cfg = load_run_config()
    assert cfg.head_config().kernel_sizes == (2, 3, 5)
    assert cfg.sft_config().backbone_lr_mult == 0.1
    assert cfg.sft_config().sampler.pos_fraction == 0.25
    assert cfg.contrastive_config().tau == 0.05
    assert cfg.k_fractions() == [0.01, 0.001, 0.0001]


# --- CLI --------------------------------------------------------------------

SMALL_DATA = {"data": {"n_users": 40, "fraud_fraction": 0.2, "t_min": 16,
                       "t_max": 16}}


def write_cfg(tmp_path, extra=None):
    body = dict(SMALL_DATA)
    if extra:
        body.update(extra)
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(body))
    return str(p)


def test_cli_bad_flags_exit_2(capsys):
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args(["no-such-command"])
    assert exc.value.code == 2


def test_cli_runtime_failure_exit_1(tmp_path, capsys):
    rc = run_subcommand(["pretrain", "--data", str(tmp_path / "missing.jsonl"),
                         "--vocab", str(tmp_path / "missing.json"),
                         "--out", str(tmp_path / "x.ckpt")])
    assert rc == 1
    assert "error:" in capsys.readouterr().err


def test_cli_gen_data_deterministic(tmp_path, capsys):
    cfgp = write_cfg(tmp_path)
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert run_subcommand(["gen-data", "--config", cfgp, "--out", str(a)]) == 0
    assert run_subcommand(["gen-data", "--config", cfgp, "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "a.jsonl.vocab.json").exists()


def test_cli_full_pipeline(tmp_path, capsys):
    cfgp = write_cfg(tmp_path, {
        "model": {"d_model": 32, "n_layers": 1, "n_heads": 2, "t_max": 16},
        "pretrain": {"steps": 5, "batch_size": 8},
        "sft": {"epochs": 1, "batch_size": 8, "filters": 4, "hidden": 8},
        "contrastive": {"batch_size": 8, "steps": 3},
    })
    data = tmp_path / "d.jsonl"
    vocab = tmp_path / "d.jsonl.vocab.json"
    ckpt = tmp_path / "pre.ckpt"
    sft_ckpt = tmp_path / "sft.ckpt"
    cl_ckpt = tmp_path / "cl.ckpt"
    scores = tmp_path / "scores.csv"

    assert run_subcommand(["gen-data", "--config", cfgp, "--out", str(data)]) == 0
    assert run_subcommand(["pretrain", "--config", cfgp, "--data", str(data),
                           "--vocab", str(vocab), "--out", str(ckpt)]) == 0
    assert (tmp_path / "pre.ckpt.loss.csv").read_text().startswith("step,loss")
    assert run_subcommand(["finetune-sft", "--config", cfgp, "--data", str(data),
                           "--vocab", str(vocab), "--checkpoint", str(ckpt),
                           "--out", str(sft_ckpt)]) == 0
    assert run_subcommand(["finetune-cl", "--config", cfgp, "--data", str(data),
                           "--vocab", str(vocab), "--checkpoint", str(ckpt),
                           "--out", str(cl_ckpt)]) == 0
    assert run_subcommand(["score", "--checkpoint", str(sft_ckpt),
                           "--data", str(data), "--out", str(scores)]) == 0
    assert scores.read_text().startswith("user_id,score")
    assert run_subcommand(["eval", "--scores", str(scores), "--data", str(data),
                           "--k", "0.1,0.5"]) == 0
    out = capsys.readouterr().out
    assert "ROC-AUC" in out

    emb = tmp_path / "emb.csv"
    assert run_subcommand(["embed", "--checkpoint", str(cl_ckpt),
                           "--data", str(data), "--out", str(emb)]) == 0
    assert emb.read_text().startswith("user_id,e0")


def test_cli_score_rejects_headless_checkpoint(tmp_path, capsys):
    cfgp = write_cfg(tmp_path, {
        "model": {"d_model": 32, "n_layers": 1, "n_heads": 2, "t_max": 16},
        "pretrain": {"steps": 1, "batch_size": 8},
    })
    data = tmp_path / "d.jsonl"
    ckpt = tmp_path / "pre.ckpt"
    run_subcommand(["gen-data", "--config", cfgp, "--out", str(data)])
    run_subcommand(["pretrain", "--config", cfgp, "--data", str(data),
                    "--vocab", str(tmp_path / "d.jsonl.vocab.json"),
                    "--out", str(ckpt)])
    rc = run_subcommand(["score", "--checkpoint", str(ckpt),
                         "--data", str(data), "--out", str(tmp_path / "s.csv")])
    assert rc == 1


def test_cli_vocab_mismatch_detected(tmp_path, capsys):
    cfgp = write_cfg(tmp_path, {
        "model": {"d_model": 32, "n_layers": 1, "n_heads": 2, "t_max": 16},
        "pretrain": {"steps": 1, "batch_size": 8},
    })
    data = tmp_path / "d.jsonl"
    vocab = tmp_path / "d.jsonl.vocab.json"
    ckpt = tmp_path / "pre.ckpt"
    run_subcommand(["gen-data", "--config", cfgp, "--out", str(data)])
    run_subcommand(["pretrain", "--config", cfgp, "--data", str(data),
                    "--vocab", str(vocab), "--out", str(ckpt)])
    other = tmp_path / "other.json"
    other.write_text(json.dumps({"dims": [{"name": "a", "cardinality": 3},
                                          {"name": "b", "cardinality": 4}]}))
    rc = run_subcommand(["finetune-sft", "--config", cfgp, "--data", str(data),
                         "--vocab", str(other), "--checkpoint", str(ckpt),
                         "--out", str(tmp_path / "x.ckpt")])
    assert rc == 1
    assert "vocab" in capsys.readouterr().err
