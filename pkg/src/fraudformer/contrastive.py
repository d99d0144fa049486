"""Contrastive fine-tuning with dropout-generated positive views.

Two stochastic forward passes of the same batch give (v, v+) pairs; the
other first-view embeddings in the batch act as negatives in an InfoNCE
objective over temperature-scaled cosine similarities.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import numerics as nm
from .data import BehaviorSequence, ids_array, window_sample
from .model import ModelConfig, causal_forward, encode_batch
from .rng import child_rng

__all__ = [
    "ContrastiveConfig", "embed_sequence", "embed_batch", "cosine_matrix",
    "infonce_loss", "finetune_contrastive", "mean_alignment",
]

log = logging.getLogger(__name__)


def embed_batch(id_arrays: Sequence[np.ndarray], params: Dict[str, nm.Tensor],
                cfg: ModelConfig, mode: str = "eval",
                rng: Optional[np.random.Generator] = None) -> nm.Tensor:
    """Sequence embeddings: hidden state at each last non-pad position: [N, d_model]."""
    batch = encode_batch(id_arrays, params, cfg)
    h = causal_forward(batch.x, params, cfg, mode=mode, mask=batch.mask, rng=rng)
    last = np.array([batch.last_row(b) for b in range(batch.batch)])
    return nm.take_rows(h, last)


def embed_sequence(params: Dict[str, nm.Tensor], cfg: ModelConfig,
                   seq: BehaviorSequence, mode: str = "eval",
                   rng: Optional[np.random.Generator] = None) -> nm.Tensor:
    """Embedding of one sequence; train mode keeps dropout active so views differ."""
    ids = ids_array(seq)
    if ids.shape[0] > cfg.t_max:
        ids = ids[-cfg.t_max:]
    return nm.reshape(embed_batch([ids], params, cfg, mode=mode, rng=rng),
                      (cfg.d_model,))


def cosine_matrix(a: nm.Tensor, b: nm.Tensor) -> nm.Tensor:
    """out[i, j] = cos(a_i, b_j); rejects zero rows."""
    if a.data.shape != b.data.shape or a.data.ndim != 2:
        raise nm.DimensionError(f"cosine_matrix needs equal [N, d] shapes, "
                                f"got {a.data.shape} and {b.data.shape}")
    return nm.matmul_t(nm.normalize_rows(a), nm.normalize_rows(b))


def infonce_loss(v: nm.Tensor, v_plus: nm.Tensor, tau: float) -> nm.Tensor:
    """Mean over instances of -log softmax over {positive pair, in-batch negatives}.

    Row i's candidates are cos(v_i, v+_i) against cos(v_i, v_j) for the
    other N-1 first views, all divided by the temperature.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    n = v.data.shape[0]
    if n < 2:
        raise ValueError(f"InfoNCE needs a batch of >= 2, got {n}")
    eye = np.eye(n, dtype=v.data.dtype)
    pos = cosine_matrix(v, v_plus)
    neg = cosine_matrix(v, v)
    logits = nm.add(nm.mul_const(pos, eye / tau), nm.mul_const(neg, (1.0 - eye) / tau))
    return nm.softmax_ce(logits, np.arange(n))


def mean_alignment(v: np.ndarray, v_plus: np.ndarray) -> float:
    """Mean cosine between paired views."""
    va = v / np.linalg.norm(v, axis=1, keepdims=True)
    vb = v_plus / np.linalg.norm(v_plus, axis=1, keepdims=True)
    return float((va * vb).sum(axis=1).mean())


@dataclass
class ContrastiveConfig:
    tau: float = 0.05
    batch_size: int = 64
    steps: int = 200
    lr: float = 1e-3
    seed: int = 0


def finetune_contrastive(backbone: Dict[str, nm.Tensor], model_cfg: ModelConfig,
                         corpus: Sequence[BehaviorSequence], cfg: ContrastiveConfig,
                         ) -> Tuple[Dict[str, nm.Tensor], List[Tuple[int, float]]]:
    """Full-backbone InfoNCE training; returns params and the loss curve."""
    if model_cfg.dropout == 0.0:
        raise ValueError("contrastive fine-tuning needs dropout > 0: "
                         "with p=0 the two views coincide")
    if len(corpus) < cfg.batch_size:
        raise ValueError(f"corpus of {len(corpus)} smaller than batch size {cfg.batch_size}")
    opt = nm.Adam(backbone, lr=cfg.lr)
    order: List[int] = []
    epoch = 0
    curve: List[Tuple[int, float]] = []
    for step in range(cfg.steps):
        while len(order) < cfg.batch_size:
            perm = child_rng(cfg.seed, "cl-order", epoch).permutation(len(corpus))
            order.extend(int(i) for i in perm)
            epoch += 1
        picks, order = order[:cfg.batch_size], order[cfg.batch_size:]
        if len(picks) < 2:
            log.warning("skipping contrastive batch of size %d at step %d", len(picks), step)
            continue
        wrng = child_rng(cfg.seed, "cl-window", step)
        ids = [ids_array(window_sample(corpus[i], model_cfg.t_max, wrng)) for i in picks]
        rng_a = child_rng(cfg.seed, "cl-view-a", step)
        rng_b = child_rng(cfg.seed, "cl-view-b", step)
        with nm.GradTape() as tape:
            v = embed_batch(ids, backbone, model_cfg, mode="train", rng=rng_a)
            v_plus = embed_batch(ids, backbone, model_cfg, mode="train", rng=rng_b)
            loss = infonce_loss(v, v_plus, cfg.tau)
            val = float(loss.data)
            if not math.isfinite(val):
                raise RuntimeError(f"non-finite contrastive loss at step {step}")
            opt.zero_grad()
            tape.backward(loss)
        opt.step()
        curve.append((step, val))
    return backbone, curve
