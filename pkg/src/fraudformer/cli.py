"""Command-line pipeline: data generation, training, scoring, reports.

Every subcommand is reproducible from (config JSON, seed) alone.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import contrastive as cl
from . import evaluation as ev
from . import sft as sft_mod
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_run_config
from .data import (BehaviorSequence, default_vocab, generate_corpus,
                   read_jsonl, read_vocab, write_jsonl, write_vocab)
from .model import ModelConfig, init_params, pretrain_loop
from .rng import child_rng
from .verify import TOLERANCE, gradient_suite

__all__ = ["main", "run_subcommand", "pipeline_smoke"]


def _dtype(mode: str):
    return np.float64 if mode == "f64" else np.float32


def _load_cfg(args) -> RunConfig:
    cfg = load_run_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _write_curve(path, curve: Sequence[Tuple[int, float]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("step,loss\n")
        for step, loss in curve:
            fh.write(f"{step},{loss:.8g}\n")


def _write_scores(path, scores: Sequence[Tuple[str, float]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("user_id,score\n")
        for uid, score in scores:
            fh.write(f"{uid},{score:.10g}\n")


def _read_scores(path) -> List[Tuple[str, float]]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            out.append((row["user_id"], float(row["score"])))
    return out


def _vocab_path(args) -> str:
    return args.vocab if args.vocab else str(args.out) + ".vocab.json"


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    corpus = generate_corpus(cfg.generator_config())
    write_jsonl(args.out, corpus)
    write_vocab(_vocab_path(args), cfg.generator_config().vocab)
    print(f"wrote {len(corpus)} sequences to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load_cfg(args)
    vocab = read_vocab(args.vocab)
    corpus = read_jsonl(args.data, vocab)
    model_cfg = cfg.model_config(vocab)
    params, curve = pretrain_loop(corpus, model_cfg, cfg.pretrain_config(),
                                  dtype=_dtype(args.mode))
    save_checkpoint(args.out, params, model_cfg, kind="pretrain",
                    meta={"steps": len(curve), "final_loss": curve[-1][1],
                          "seed": cfg.seed})
    _write_curve(args.curve or str(args.out) + ".loss.csv", curve)
    print(f"pretrained {len(curve)} steps; loss {curve[0][1]:.4f} -> {curve[-1][1]:.4f}")
    return 0


def _check_vocab(model_cfg: ModelConfig, vocab) -> None:
    if model_cfg.cardinalities != vocab.cardinalities:
        raise ValueError("checkpoint model does not match the vocab sidecar: "
                         f"{model_cfg.cardinalities} vs {vocab.cardinalities}")


def cmd_finetune_sft(args) -> int:
    cfg = _load_cfg(args)
    ckpt = load_checkpoint(args.checkpoint)
    vocab = read_vocab(args.vocab)
    _check_vocab(ckpt.model, vocab)
    corpus = read_jsonl(args.data, vocab)
    head_cfg = cfg.head_config()
    params, metrics = sft_mod.finetune_sft(ckpt.params, ckpt.model, corpus,
                                           head_cfg, cfg.sft_config())
    save_checkpoint(args.out, params, ckpt.model, head=head_cfg, kind="sft",
                    meta={"epochs": len(metrics), "seed": cfg.seed})
    metrics_path = args.metrics or str(args.out) + ".metrics.csv"
    with open(metrics_path, "w", newline="", encoding="utf-8") as fh:
        fh.write("epoch,loss,accuracy\n")
        for m in metrics:
            fh.write(f"{m['epoch']},{m['loss']:.8g},{m['accuracy']:.8g}\n")
    print(f"fine-tuned {len(metrics)} epochs; final accuracy {metrics[-1]['accuracy']:.3f}")
    return 0


def cmd_finetune_cl(args) -> int:
    cfg = _load_cfg(args)
    ckpt = load_checkpoint(args.checkpoint)
    vocab = read_vocab(args.vocab)
    _check_vocab(ckpt.model, vocab)
    corpus = read_jsonl(args.data, vocab)
    params, curve = cl.finetune_contrastive(ckpt.params, ckpt.model, corpus,
                                            cfg.contrastive_config())
    save_checkpoint(args.out, params, ckpt.model, kind="contrastive",
                    meta={"steps": len(curve), "seed": cfg.seed})
    _write_curve(args.curve or str(args.out) + ".loss.csv", curve)
    print(f"contrastive loss {curve[0][1]:.4f} -> {curve[-1][1]:.4f}")
    return 0


def cmd_score(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.head is None:
        raise ValueError("scoring needs an sft checkpoint with a binary head")
    corpus = read_jsonl(args.data)
    scores = sft_mod.score_users(ckpt.params, ckpt.model, ckpt.head, corpus)
    _write_scores(args.out, scores)
    print(f"scored {len(scores)} users -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    scores = dict(_read_scores(args.scores))
    corpus = read_jsonl(args.data)
    entries = [ev.RankEntry(s.user_id, scores[s.user_id], int(s.label > 0))
               for s in corpus if s.user_id in scores]
    ks = [float(k) for k in args.k.split(",")] if args.k else [0.01, 0.001, 0.0001]
    rows = ev.topk_rank_metrics(entries, ks)
    print(ev.render_topk_report(rows), end="")
    auc = ev.roc_auc(entries)
    print(f"ROC-AUC: {auc:.4f}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(ev.topk_report_csv(rows))
    return 0


def cmd_embed(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    corpus = read_jsonl(args.data)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        header = ",".join(f"e{i}" for i in range(ckpt.model.d_model))
        fh.write(f"user_id,{header}\n")
        for seq in corpus:
            vec = cl.embed_sequence(ckpt.params, ckpt.model, seq, mode="eval").data
            fh.write(seq.user_id + "," + ",".join(f"{x:.8g}" for x in vec) + "\n")
    print(f"embedded {len(corpus)} sequences -> {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    results = gradient_suite(seed=args.seed or 0)
    worst = 0.0
    for name, err in results:
        status = "ok" if err < TOLERANCE else "FAIL"
        print(f"{name:22s} max rel err {err:.3e}  {status}")
        worst = max(worst, err)
    return 0 if worst < TOLERANCE else 1


# --- end-to-end smoke ------------------------------------------------------

SMOKE_OVERRIDES = {
    "data": {"n_users": 12000, "fraud_fraction": 0.01, "t_min": 32, "t_max": 32},
    "pretrain": {"steps": 600},
    "sft": {"epochs": 2},
}

N_EVAL_USERS = 2000
N_FEWSHOT_POSITIVES = 50
MAX_SFT_NEGATIVES = 4000
SMOKE_BUDGET_SECONDS = 900.0


def pipeline_smoke(cfg: RunConfig, workdir, quiet: bool = False) -> Tuple[dict, bool]:
    """gen-data -> pretrain -> finetune-sft -> score -> eval, with thresholds."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    t0 = time.monotonic()
    say = (lambda *a: None) if quiet else print

    stage = "gen-data"
    try:
        gen_cfg = cfg.generator_config()
        corpus = generate_corpus(gen_cfg)
        write_jsonl(workdir / "corpus.jsonl", corpus)
        write_vocab(workdir / "vocab.json", gen_cfg.vocab)
        train, heldout = corpus[:-N_EVAL_USERS], corpus[-N_EVAL_USERS:]
        say(f"[{stage}] {len(train)} train / {len(heldout)} held-out users")

        stage = "pretrain"
        model_cfg = cfg.model_config(gen_cfg.vocab)
        params, curve = pretrain_loop(train, model_cfg, cfg.pretrain_config())
        save_checkpoint(workdir / "pretrain.ckpt", params, model_cfg, kind="pretrain")
        _write_curve(workdir / "pretrain.loss.csv", curve)
        initial = float(np.mean([l for _, l in curve[:5]]))
        final = float(np.mean([l for _, l in curve[-10:]]))
        say(f"[{stage}] loss {initial:.4f} -> {final:.4f}")

        stage = "finetune-sft"
        pos = [s for s in train if s.label > 0][:N_FEWSHOT_POSITIVES]
        neg = [s for s in train if s.label == 0][:MAX_SFT_NEGATIVES]
        head_cfg = cfg.head_config()
        sft_params, metrics = sft_mod.finetune_sft(params, model_cfg, pos + neg,
                                                   head_cfg, cfg.sft_config())
        save_checkpoint(workdir / "sft.ckpt", sft_params, model_cfg,
                        head=head_cfg, kind="sft")
        say(f"[{stage}] {len(pos)} positives, {len(neg)} negatives, "
            f"final train accuracy {metrics[-1]['accuracy']:.3f}")

        stage = "score"
        scores = sft_mod.score_users(sft_params, model_cfg, head_cfg, heldout)
        _write_scores(workdir / "scores.csv", scores)

        stage = "eval"
        labels = {s.user_id: int(s.label > 0) for s in heldout}
        entries = [ev.RankEntry(uid, score, labels[uid]) for uid, score in scores]
        auc = ev.roc_auc(entries)
        top1 = ev.topk_rank_metrics(entries, [0.01])[0]
        base_rate = 100.0 * sum(labels.values()) / len(labels)
    except Exception as exc:
        raise RuntimeError(f"smoke pipeline failed at stage {stage!r}: {exc}") from exc

    elapsed = time.monotonic() - t0
    report = {
        "initial_loss": initial,
        "final_loss": final,
        "loss_ratio": final / initial,
        "auc": auc,
        "top1_precision_pct": top1["precision"],
        "base_rate_pct": base_rate,
        "precision_lift": top1["precision"] / base_rate if base_rate else float("inf"),
        "elapsed_seconds": elapsed,
    }
    criteria = [
        ("reconstruction loss <= 80% of initial", report["loss_ratio"] <= 0.80,
         f"ratio {report['loss_ratio']:.3f}"),
        ("held-out ROC-AUC >= 0.90", auc >= 0.90, f"auc {auc:.4f}"),
        ("top-1% precision >= 10x base rate", report["precision_lift"] >= 10.0,
         f"lift {report['precision_lift']:.1f}x"),
        (f"wall clock <= {SMOKE_BUDGET_SECONDS:.0f}s", elapsed <= SMOKE_BUDGET_SECONDS,
         f"{elapsed:.1f}s"),
    ]
    ok = True
    for name, passed, detail in criteria:
        say(f"{'PASS' if passed else 'FAIL'}  {name}  ({detail})")
        ok = ok and passed
    report["pass"] = ok
    return report, ok


def cmd_smoke(args) -> int:
    cfg = load_run_config(args.config) if args.config else load_run_config(SMOKE_OVERRIDES)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    _, ok = pipeline_smoke(cfg, args.out or "smoke-run")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fraudformer",
                                     description="Payment-behavior sequence modeling toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True, out=True):
        if config:
            p.add_argument("--config", help="run-config JSON")
        p.add_argument("--seed", type=int, help="override the config seed")
        if out:
            p.add_argument("--out", required=True, help="output path")

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    common(p)
    p.add_argument("--vocab", help="vocab sidecar path (default: <out>.vocab.json)")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("pretrain", help="autoregressive pretraining")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--curve", help="loss-curve CSV path")
    p.add_argument("--mode", choices=("f32", "f64"), default="f32")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("finetune-sft", help="supervised anomaly fine-tuning")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--metrics", help="metrics CSV path")
    p.set_defaults(fn=cmd_finetune_sft)

    p = sub.add_parser("finetune-cl", help="contrastive fine-tuning")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--curve", help="loss-curve CSV path")
    p.set_defaults(fn=cmd_finetune_cl)

    p = sub.add_parser("score", help="rank users by anomaly score")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(fn=cmd_score)

    p = sub.add_parser("eval", help="top-k% report and ROC-AUC from a score CSV")
    p.add_argument("--scores", required=True)
    p.add_argument("--data", required=True, help="corpus JSONL carrying true labels")
    p.add_argument("--k", help="comma-separated top fractions, e.g. 0.01,0.001")
    p.add_argument("--out", help="optional report CSV path")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("embed", help="export sequence embeddings as CSV")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(fn=cmd_embed)

    p = sub.add_parser("gradcheck", help="64-bit finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("smoke", help="end-to-end desk-scale pipeline with thresholds")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="working directory (default: smoke-run)")
    p.set_defaults(fn=cmd_smoke)

    return parser


def run_subcommand(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # runtime failure -> message, exit 1
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_subcommand())


if __name__ == "__main__":
    main()
