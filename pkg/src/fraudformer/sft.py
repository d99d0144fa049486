"""Supervised fine-tuning: differenced hidden states through a multi-scale
convolutional anomaly head, trained with imbalance-aware sampling.

The backbone hidden sequence is first-order differenced to strip slow
trend, then each kernel size extracts local anomaly evidence which a
global max pool makes length-independent; a small MLP maps the pooled
features to class logits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import numerics as nm
from .data import BehaviorSequence, ids_array, window_sample
from .model import ModelConfig, causal_forward, encode_batch
from .rng import child_rng

__all__ = [
    "AnomalyHeadConfig", "SamplerConfig", "SftConfig", "diff_op",
    "init_head_params", "anomaly_head", "head_features",
    "imbalanced_batches", "epoch_batches", "finetune_sft", "score_users",
    "sequence_hidden_rows", "batch_class_logits",
]


class SequenceTooShortError(ValueError):
    pass


def diff_op(h: nm.Tensor) -> nm.Tensor:
    """First-order difference over time: out[t] = H[t+1] - H[t]."""
    if h.data.shape[0] < 2:
        raise SequenceTooShortError(
            f"differencing needs at least 2 time steps, got {h.data.shape[0]}")
    return nm.row_diff(h)


@dataclass(frozen=True)
class AnomalyHeadConfig:
    kernel_sizes: Tuple[int, ...] = (2, 3, 5)
    filters: int = 32
    hidden: int = 64
    n_classes: int = 2
    dropout: float = 0.1

    def __post_init__(self):
        if min(self.kernel_sizes) < 2:
            raise ValueError("kernel sizes must be >= 2")
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")

    @property
    def min_diff_len(self) -> int:
        return max(self.kernel_sizes)

    @property
    def feature_width(self) -> int:
        return len(self.kernel_sizes) * self.filters

    def to_json(self) -> dict:
        return {"kernel_sizes": list(self.kernel_sizes), "filters": self.filters,
                "hidden": self.hidden, "n_classes": self.n_classes, "dropout": self.dropout}

    @classmethod
    def from_json(cls, obj: dict) -> "AnomalyHeadConfig":
        return cls(tuple(obj["kernel_sizes"]), obj["filters"], obj["hidden"],
                   obj["n_classes"], obj["dropout"])


def init_head_params(cfg: AnomalyHeadConfig, d_model: int,
                     rng: np.random.Generator, dtype=np.float32) -> Dict[str, nm.Tensor]:
    p: Dict[str, nm.Tensor] = {}
    for k in cfg.kernel_sizes:
        scale = 1.0 / math.sqrt(k * d_model)
        p[f"head.conv{k}.w"] = nm.Tensor(
            rng.normal(0.0, scale, size=(k, d_model, cfg.filters)).astype(dtype),
            requires_grad=True)
        p[f"head.conv{k}.b"] = nm.Tensor(np.zeros(cfg.filters, dtype=dtype), requires_grad=True)
    nf = cfg.feature_width
    p["head.mlp.w1"] = nm.Tensor(
        rng.normal(0.0, 1.0 / math.sqrt(nf), size=(nf, cfg.hidden)).astype(dtype),
        requires_grad=True)
    p["head.mlp.b1"] = nm.Tensor(np.zeros(cfg.hidden, dtype=dtype), requires_grad=True)
    p["head.mlp.w2"] = nm.Tensor(
        rng.normal(0.0, 1.0 / math.sqrt(cfg.hidden), size=(cfg.hidden, cfg.n_classes)).astype(dtype),
        requires_grad=True)
    p["head.mlp.b2"] = nm.Tensor(np.zeros(cfg.n_classes, dtype=dtype), requires_grad=True)
    return p


def head_features(hdiff: nm.Tensor, cfg: AnomalyHeadConfig,
                  params: Dict[str, nm.Tensor]) -> nm.Tensor:
    """conv -> relu -> global max pool per kernel size, concatenated: [3F]."""
    if hdiff.data.shape[0] < cfg.min_diff_len:
        raise SequenceTooShortError(
            f"difference sequence of length {hdiff.data.shape[0]} is shorter than "
            f"the largest kernel ({cfg.min_diff_len}); need >= {cfg.min_diff_len + 1} events")
    pooled = []
    for k in cfg.kernel_sizes:
        conv = nm.conv1d(hdiff, params[f"head.conv{k}.w"], params[f"head.conv{k}.b"])
        pooled.append(nm.max_over_time(nm.relu(conv)))
    return nm.concat_cols(pooled)


def _mlp(features: nm.Tensor, cfg: AnomalyHeadConfig, params: Dict[str, nm.Tensor],
         mode: str, rng: Optional[np.random.Generator]) -> nm.Tensor:
    x = nm.dropout(features, cfg.dropout, rng, mode == "train")
    x = nm.relu(nm.add(nm.matmul(x, params["head.mlp.w1"]), params["head.mlp.b1"]))
    return nm.add(nm.matmul(x, params["head.mlp.w2"]), params["head.mlp.b2"])


def anomaly_head(hdiff: nm.Tensor, cfg: AnomalyHeadConfig, params: Dict[str, nm.Tensor],
                 mode: str = "eval", rng: Optional[np.random.Generator] = None) -> nm.Tensor:
    """Class logits for one difference sequence: [n_classes]."""
    feats = nm.reshape(head_features(hdiff, cfg, params), (1, cfg.feature_width))
    return nm.reshape(_mlp(feats, cfg, params, mode, rng), (cfg.n_classes,))


def sequence_hidden_rows(h: nm.Tensor, batch, b: int) -> nm.Tensor:
    """Hidden states of sequence b's real events inside a packed batch."""
    base = b * batch.rows_per_seq
    idx = base + 1 + np.arange(int(batch.lengths[b]))
    return nm.take_rows(h, idx)


def batch_class_logits(id_arrays: Sequence[np.ndarray], backbone: Dict[str, nm.Tensor],
                       model_cfg: ModelConfig, head_cfg: AnomalyHeadConfig,
                       head: Dict[str, nm.Tensor], mode: str = "eval",
                       rng: Optional[np.random.Generator] = None) -> nm.Tensor:
    """Full pipeline for a batch: embed -> causal -> diff -> head: [B, n_classes]."""
    batch = encode_batch(id_arrays, backbone, model_cfg)
    h = causal_forward(batch.x, backbone, model_cfg, mode=mode, mask=batch.mask, rng=rng)
    feats = [head_features(diff_op(sequence_hidden_rows(h, batch, b)), head_cfg, head)
             for b in range(batch.batch)]
    return _mlp(nm.stack_rows(feats), head_cfg, head, mode, rng)


@dataclass(frozen=True)
class SamplerConfig:
    batch_size: int = 32
    pos_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.pos_fraction < 1.0:
            raise ValueError("pos_fraction must be in (0, 1)")
        if round(self.pos_fraction * self.batch_size) < 1:
            raise ValueError("batch too small to hold one positive")

    @property
    def pos_per_batch(self) -> int:
        return int(round(self.pos_fraction * self.batch_size))


def epoch_batches(pos_pool: Sequence, neg_pool: Sequence, cfg: SamplerConfig,
                  epoch: int) -> List[List]:
    """One epoch: each negative exactly once, positives re-drawn with replacement."""
    if not pos_pool or not neg_pool:
        raise ValueError("both sample pools must be nonempty")
    n_pos = cfg.pos_per_batch
    n_neg = cfg.batch_size - n_pos
    rng = child_rng(cfg.seed, "sampler", epoch)
    neg_order = rng.permutation(len(neg_pool))
    batches = []
    for start in range(0, len(neg_pool), n_neg):
        chunk = neg_order[start:start + n_neg]
        picks = rng.integers(0, len(pos_pool), size=n_pos)
        batches.append([pos_pool[int(i)] for i in picks] + [neg_pool[int(i)] for i in chunk])
    return batches


def imbalanced_batches(pos_pool: Sequence, neg_pool: Sequence,
                       cfg: SamplerConfig) -> Iterator[List]:
    """Endless batch stream; each full pass over the negatives is one epoch."""
    epoch = 0
    while True:
        yield from epoch_batches(pos_pool, neg_pool, cfg, epoch)
        epoch += 1


@dataclass
class SftConfig:
    epochs: int = 3
    lr: float = 1e-3
    backbone_lr_mult: float = 0.1
    seed: int = 0
    sampler: SamplerConfig = None  # defaults to SamplerConfig(seed=seed)

    def __post_init__(self):
        if self.sampler is None:
            self.sampler = SamplerConfig(seed=self.seed)


def _class_label(seq: BehaviorSequence, n_classes: int) -> int:
    label = seq.label if n_classes > 2 else int(seq.label > 0)
    if label >= n_classes:
        raise ValueError(f"label {seq.label} of {seq.user_id!r} exceeds n_classes={n_classes}")
    return label


def finetune_sft(backbone: Dict[str, nm.Tensor], model_cfg: ModelConfig,
                 corpus: Sequence[BehaviorSequence], head_cfg: AnomalyHeadConfig,
                 cfg: SftConfig,
                 head: Optional[Dict[str, nm.Tensor]] = None,
                 dtype=np.float32) -> Tuple[Dict[str, nm.Tensor], List[dict]]:
    """Fine-tune backbone (at a reduced rate) plus anomaly head.

    Returns the merged parameter dict and per-epoch metrics
    (mean loss, training accuracy).
    """
    pos = [s for s in corpus if s.label > 0]
    neg = [s for s in corpus if s.label == 0]
    for s in corpus:
        _class_label(s, head_cfg.n_classes)
    if head is None:
        head = init_head_params(head_cfg, model_cfg.d_model,
                                child_rng(cfg.seed, "head-init"), dtype=dtype)
    params = dict(backbone)
    params.update(head)
    mult = {name: cfg.backbone_lr_mult for name in backbone}
    opt = nm.Adam(params, lr=cfg.lr, lr_mult=mult)
    metrics: List[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        losses, hits, total = [], 0, 0
        for batch_seqs in epoch_batches(pos, neg, cfg.sampler, epoch):
            wrng = child_rng(cfg.seed, "sft-window", step)
            ids = [ids_array(window_sample(s, model_cfg.t_max, wrng)) for s in batch_seqs]
            labels = np.array([_class_label(s, head_cfg.n_classes) for s in batch_seqs])
            drng = child_rng(cfg.seed, "sft-dropout", step)
            with nm.GradTape() as tape:
                logits = batch_class_logits(ids, params, model_cfg, head_cfg, params,
                                            mode="train", rng=drng)
                loss = nm.softmax_ce(logits, labels)
                val = float(loss.data)
                if not math.isfinite(val):
                    raise RuntimeError(f"non-finite fine-tuning loss at step {step}")
                opt.zero_grad()
                tape.backward(loss)
            opt.step()
            losses.append(val)
            hits += int((logits.data.argmax(axis=1) == labels).sum())
            total += len(labels)
            step += 1
        metrics.append({"epoch": epoch, "loss": float(np.mean(losses)),
                        "accuracy": hits / total})
    return params, metrics


def score_users(params: Dict[str, nm.Tensor], model_cfg: ModelConfig,
                head_cfg: AnomalyHeadConfig, corpus: Sequence[BehaviorSequence],
                batch_size: int = 64, seed: int = 0) -> List[Tuple[str, float]]:
    """Anomaly probability per user, sorted descending (ties by user_id)."""
    if head_cfg.n_classes != 2:
        raise ValueError("scoring requires the binary head")
    out = []
    for start in range(0, len(corpus), batch_size):
        chunk = corpus[start:start + batch_size]
        wrng = child_rng(seed, "score-window", start)
        ids = [ids_array(window_sample(s, model_cfg.t_max, wrng)) for s in chunk]
        logits = batch_class_logits(ids, params, model_cfg, head_cfg, params, mode="eval")
        z = logits.data - logits.data.max(axis=1, keepdims=True)
        e = np.exp(z)
        probs = e[:, 1] / e.sum(axis=1)
        out.extend((s.user_id, float(p)) for s, p in zip(chunk, probs))
    out.sort(key=lambda t: (-t[1], t[0]))
    return out
