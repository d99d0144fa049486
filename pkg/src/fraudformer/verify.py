"""64-bit finite-difference verification suite.

Every differentiable primitive and both composite losses are checked
against central differences on small random shapes. Used by the
``gradcheck`` CLI subcommand and the test suite.
"""

from __future__ import annotations

from typing import Callable, Dict, List, Tuple

import numpy as np

from . import numerics as nm
from .contrastive import infonce_loss
from .model import (ModelConfig, batch_reconstruction_loss, encode_batch,
                    init_params)
from .rng import child_rng
from .sft import (AnomalyHeadConfig, batch_class_logits, init_head_params)

__all__ = ["gradient_suite", "TOLERANCE"]

TOLERANCE = 1e-4
F64 = np.float64


def _t(rng, *shape, lo=-1.0, hi=1.0) -> nm.Tensor:
    return nm.Tensor(rng.uniform(lo, hi, size=shape).astype(F64), requires_grad=True)


def _check_matmul(rng) -> float:
    a, b = _t(rng, 4, 6), _t(rng, 6, 5)
    return nm.grad_check(lambda: nm.sum_all(nm.matmul(a, b)), [a, b], rng)


def _check_softmax_ce(rng) -> float:
    logits = _t(rng, 6, 7)
    targets = rng.integers(0, 7, size=6)
    return nm.grad_check(lambda: nm.softmax_ce(logits, targets), [logits], rng)


def _check_layer_norm(rng) -> float:
    x, g, b = _t(rng, 5, 8), _t(rng, 8), _t(rng, 8)
    w = _t(rng, 8, 3)
    return nm.grad_check(
        lambda: nm.sum_all(nm.matmul(nm.layer_norm(x, g, b), w)), [x, g, b, w], rng)


def _check_relu(rng) -> float:
    # keep values away from the kink at 0
    x = nm.Tensor(np.where(rng.uniform(-1, 1, (6, 6)) > 0, 1, -1)
                  * rng.uniform(0.1, 1.0, (6, 6)), requires_grad=True)
    w = _t(rng, 6, 2)
    return nm.grad_check(lambda: nm.sum_all(nm.matmul(nm.relu(x), w)), [x, w], rng)


def _check_dropout(rng) -> float:
    x = _t(rng, 6, 8)
    w = _t(rng, 8, 3)

    def loss():
        drng = np.random.default_rng(1234)  # same mask on every call
        return nm.sum_all(nm.matmul(nm.dropout(x, 0.3, drng, True), w))

    return nm.grad_check(loss, [x, w], rng)


def _check_conv1d(rng) -> float:
    x, k, b = _t(rng, 8, 3), _t(rng, 3, 3, 4), _t(rng, 4)
    w = _t(rng, 4, 2)
    return nm.grad_check(
        lambda: nm.sum_all(nm.matmul(nm.conv1d(x, k, b), w)), [x, k, b], rng)


def _check_max_pool(rng) -> float:
    x = _t(rng, 7, 5)
    return nm.grad_check(
        lambda: nm.sum_all(nm.reshape(nm.max_over_time(x), (1, 5))), [x], rng)


def _tiny_model(rng_label: str, dropout: float = 0.0) -> Tuple[ModelConfig, Dict[str, nm.Tensor]]:
    cfg = ModelConfig(cardinalities=(4, 5), d_k=(4, 4), d_model=8,
                      n_layers=1, n_heads=2, t_max=6, dropout=dropout)
    params = init_params(cfg, child_rng(7, rng_label), dtype=F64)
    return cfg, params


def _check_reconstruction(rng) -> float:
    cfg, params = _tiny_model("gc-recon")
    ids = [np.stack([rng.integers(1, v, size=t) for v in cfg.cardinalities], axis=1)
           for t in (4, 3)]
    wiggle = [params[k] for k in sorted(params)]

    def loss():
        batch = encode_batch(ids, params, cfg)
        return batch_reconstruction_loss(batch, params, cfg, ids, mode="eval")

    return nm.grad_check(loss, wiggle, rng, n_probes=20)


def _check_infonce(rng) -> float:
    v, vp = _t(rng, 4, 6), _t(rng, 4, 6)
    return nm.grad_check(lambda: infonce_loss(v, vp, 0.05), [v, vp], rng)


def _check_sft_pipeline(rng) -> float:
    cfg, params = _tiny_model("gc-sft")
    head_cfg = AnomalyHeadConfig(kernel_sizes=(2, 3), filters=3, hidden=4,
                                 n_classes=2, dropout=0.0)
    head = init_head_params(head_cfg, cfg.d_model, child_rng(7, "gc-sft-head"), dtype=F64)
    params = dict(params, **head)
    ids = [np.stack([rng.integers(1, v, size=t) for v in cfg.cardinalities], axis=1)
           for t in (6, 5)]
    labels = np.array([1, 0])
    wiggle = [params[k] for k in sorted(params)]

    def loss():
        logits = batch_class_logits(ids, params, cfg, head_cfg, params, mode="eval")
        return nm.softmax_ce(logits, labels)

    return nm.grad_check(loss, wiggle, rng, n_probes=20)


CHECKS: Dict[str, Callable] = {
    "matmul": _check_matmul,
    "softmax_ce": _check_softmax_ce,
    "layer_norm": _check_layer_norm,
    "relu": _check_relu,
    "dropout": _check_dropout,
    "conv1d": _check_conv1d,
    "max_over_time": _check_max_pool,
    "reconstruction_loss": _check_reconstruction,
    "infonce_loss": _check_infonce,
    "sft_pipeline": _check_sft_pipeline,
}


def gradient_suite(seed: int = 0) -> List[Tuple[str, float]]:
    """Run all checks; returns (name, max relative error) pairs."""
    results = []
    for name, fn in CHECKS.items():
        rng = child_rng(seed, f"gradcheck-{name}")
        results.append((name, fn(rng)))
    return results
