"""Causal transformer over concatenated multivariate embeddings.

Each event's D attribute tokens are embedded per dimension and the
embeddings concatenated into one d_model-wide row; a learned
begin-of-sequence row conditions the first prediction. Decoding reuses
the embedding tables (weight tying): the hidden state is sliced back
into per-dimension chunks and each chunk is matched against its own
table, so there are no separate decode matrices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import numerics as nm
from .data import BehaviorSequence, VocabSpec, ids_array, window_sample
from .rng import child_rng

__all__ = [
    "ModelConfig", "PretrainConfig", "allocate_widths", "init_params",
    "param_count", "embed_concat", "EncodedBatch", "encode_batch",
    "causal_forward", "reconstruct_logits", "reconstruction_loss",
    "batch_reconstruction_loss", "pretrain_loop", "pad_batch",
]


def allocate_widths(cardinalities: Sequence[int], d_model: int) -> Tuple[int, ...]:
    """Split d_model across dimensions, proportional to ceil(log2 V_d).

    Largest-remainder rounding; every dimension gets at least one column.
    """
    weights = [max(1, math.ceil(math.log2(v))) for v in cardinalities]
    total = sum(weights)
    if d_model < len(weights):
        raise ValueError(f"d_model={d_model} too small for {len(weights)} dimensions")
    raw = [d_model * w / total for w in weights]
    widths = [max(1, int(r)) for r in raw]
    remainders = sorted(range(len(raw)), key=lambda i: (raw[i] - int(raw[i]), i), reverse=True)
    i = 0
    while sum(widths) < d_model:
        widths[remainders[i % len(raw)]] += 1
        i += 1
    while sum(widths) > d_model:
        j = max(range(len(widths)), key=lambda k: (widths[k], k))
        widths[j] -= 1
    return tuple(widths)


@dataclass(frozen=True)
class ModelConfig:
    cardinalities: Tuple[int, ...]
    d_k: Tuple[int, ...]
    d_model: int
    n_layers: int
    n_heads: int
    t_max: int
    dropout: float = 0.1

    def __post_init__(self):
        if sum(self.d_k) != self.d_model:
            raise ValueError(f"sum(d_k)={sum(self.d_k)} must equal d_model={self.d_model}")
        if len(self.d_k) != len(self.cardinalities):
            raise ValueError("d_k and cardinalities must have equal length")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.t_max < 2:
            raise ValueError("t_max must be >= 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def D(self) -> int:
        return len(self.cardinalities)

    @property
    def d_offsets(self) -> Tuple[int, ...]:
        out, acc = [], 0
        for w in self.d_k:
            out.append(acc)
            acc += w
        return tuple(out)

    @classmethod
    def for_vocab(cls, vocab: VocabSpec, d_model: int, n_layers: int,
                  n_heads: int, t_max: int, dropout: float = 0.1) -> "ModelConfig":
        return cls(vocab.cardinalities, allocate_widths(vocab.cardinalities, d_model),
                   d_model, n_layers, n_heads, t_max, dropout)

    def to_json(self) -> dict:
        return {
            "cardinalities": list(self.cardinalities), "d_k": list(self.d_k),
            "d_model": self.d_model, "n_layers": self.n_layers,
            "n_heads": self.n_heads, "t_max": self.t_max, "dropout": self.dropout,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        return cls(tuple(obj["cardinalities"]), tuple(obj["d_k"]), obj["d_model"],
                   obj["n_layers"], obj["n_heads"], obj["t_max"], obj["dropout"])


def _trunc_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    """normal(0, std) with resampling outside +-2 std."""
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2 * std
    while np.any(bad):
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > 2 * std
    return x.astype(dtype)


def init_params(cfg: ModelConfig, rng: np.random.Generator,
                dtype=np.float32) -> Dict[str, nm.Tensor]:
    """Fresh backbone parameters; all weights trainable leaves."""
    std = 0.02
    p: Dict[str, nm.Tensor] = {}

    def leaf(name, arr):
        p[name] = nm.Tensor(arr, requires_grad=True)

    for d, (v, w) in enumerate(zip(cfg.cardinalities, cfg.d_k)):
        leaf(f"embed.{d}", _trunc_normal(rng, (v, w), std, dtype))
    leaf("pos", _trunc_normal(rng, (cfg.t_max + 1, cfg.d_model), std, dtype))
    leaf("bos", _trunc_normal(rng, (cfg.d_model,), std, dtype))
    dm, dh = cfg.d_model, 4 * cfg.d_model
    for i in range(cfg.n_layers):
        pre = f"layer{i}"
        leaf(f"{pre}.ln1.g", np.ones(dm, dtype=dtype))
        leaf(f"{pre}.ln1.b", np.zeros(dm, dtype=dtype))
        for nme in ("wq", "wk", "wv", "wo"):
            leaf(f"{pre}.attn.{nme}", _trunc_normal(rng, (dm, dm), std, dtype))
        for nme in ("bq", "bk", "bv", "bo"):
            leaf(f"{pre}.attn.{nme}", np.zeros(dm, dtype=dtype))
        leaf(f"{pre}.ln2.g", np.ones(dm, dtype=dtype))
        leaf(f"{pre}.ln2.b", np.zeros(dm, dtype=dtype))
        leaf(f"{pre}.mlp.w1", _trunc_normal(rng, (dm, dh), std, dtype))
        leaf(f"{pre}.mlp.b1", np.zeros(dh, dtype=dtype))
        leaf(f"{pre}.mlp.w2", _trunc_normal(rng, (dh, dm), std, dtype))
        leaf(f"{pre}.mlp.b2", np.zeros(dm, dtype=dtype))
    leaf("ln_f.g", np.ones(dm, dtype=dtype))
    leaf("ln_f.b", np.zeros(dm, dtype=dtype))
    return p


def param_count(cfg: ModelConfig) -> int:
    """Closed-form backbone size.

    sum_d V_d*d_k[d]  (tied embedding/decode tables)
    + (t_max + 2) * d_model  (positional rows incl. the BOS slot, + bos)
    + n_layers * (12*d_model^2 + 13*d_model)  (attention, MLP, two norms)
    + 2*d_model  (final norm)
    """
    dm = cfg.d_model
    emb = sum(v * w for v, w in zip(cfg.cardinalities, cfg.d_k))
    return emb + (cfg.t_max + 2) * dm + cfg.n_layers * (12 * dm * dm + 13 * dm) + 2 * dm


def embed_concat(ids: np.ndarray, params: Dict[str, nm.Tensor], cfg: ModelConfig,
                 offset: int = 0) -> nm.Tensor:
    """Concatenate per-dimension embeddings and add positional rows.

    ids: [T, D] token ids; row t gets positional[t + offset].
    """
    ids = np.asarray(ids, dtype=np.int64)
    t_len = ids.shape[0]
    if ids.ndim != 2 or ids.shape[1] != cfg.D:
        raise nm.DimensionError(f"ids must be [T, {cfg.D}], got {ids.shape}")
    if t_len + offset > cfg.t_max + 1:
        raise nm.DimensionError(f"sequence length {t_len} (+offset {offset}) exceeds t_max={cfg.t_max}")
    parts = [nm.take_rows(params[f"embed.{d}"], ids[:, d]) for d in range(cfg.D)]
    x = nm.concat_cols(parts)
    pos = nm.take_rows(params["pos"], np.arange(offset, offset + t_len))
    return nm.add(x, pos)


@dataclass
class EncodedBatch:
    """Block-diagonal packing of B sequences, each a BOS row + seg_len events."""

    x: nm.Tensor            # [B * (seg_len + 1), d_model]
    mask: np.ndarray        # additive attention mask, -inf across segments / future
    lengths: np.ndarray     # true (un-padded) event counts per sequence
    seg_len: int            # padded event count per sequence

    @property
    def batch(self) -> int:
        return len(self.lengths)

    @property
    def rows_per_seq(self) -> int:
        return self.seg_len + 1

    def row_of(self, b: int, t: int) -> int:
        """Row index of the position that predicts event t of sequence b."""
        return b * self.rows_per_seq + t

    def last_row(self, b: int) -> int:
        """Row holding the hidden state after the last real event of b."""
        return b * self.rows_per_seq + int(self.lengths[b])


def pad_batch(id_arrays: Sequence[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """Right-pad [T_i, D] id arrays with PAD (0) to a common length."""
    lengths = np.array([a.shape[0] for a in id_arrays], dtype=np.int64)
    seg = int(lengths.max())
    d = id_arrays[0].shape[1]
    out = np.zeros((len(id_arrays), seg, d), dtype=np.int64)
    for i, a in enumerate(id_arrays):
        out[i, :a.shape[0]] = a
    return out, lengths


def _block_causal_mask(batch: int, rows_per_seq: int, dtype) -> np.ndarray:
    seg = np.repeat(np.arange(batch), rows_per_seq)
    t = np.tile(np.arange(rows_per_seq), batch)
    allow = (seg[:, None] == seg[None, :]) & (t[None, :] <= t[:, None])
    mask = np.where(allow, 0.0, -np.inf).astype(dtype)
    return mask


def encode_batch(id_arrays: Sequence[np.ndarray], params: Dict[str, nm.Tensor],
                 cfg: ModelConfig) -> EncodedBatch:
    """Embed a batch as one block-diagonal sequence with per-segment BOS rows."""
    padded, lengths = pad_batch(id_arrays)
    batch, seg, _ = padded.shape
    if seg + 1 > cfg.t_max + 1:
        raise nm.DimensionError(f"sequence length {seg} exceeds t_max={cfg.t_max}")
    flat = padded.reshape(batch * seg, cfg.D)
    # Events of every segment sit at positions 1..seg; position 0 is the BOS row.
    parts = [nm.take_rows(params[f"embed.{d}"], flat[:, d]) for d in range(cfg.D)]
    ev = nm.concat_cols(parts)
    pos_idx = np.tile(np.arange(1, seg + 1), batch)
    ev = nm.add(ev, nm.take_rows(params["pos"], pos_idx))
    bos = nm.reshape(params["bos"], (1, cfg.d_model))
    bos_rows = nm.add(nm.take_rows(bos, np.zeros(batch, dtype=np.int64)),
                      nm.take_rows(params["pos"], np.zeros(batch, dtype=np.int64)))
    full = nm.concat_rows([bos_rows, ev])
    # Interleave: output row b*(seg+1) is BOS b; rows b*(seg+1)+1.. are its events.
    perm = np.empty(batch * (seg + 1), dtype=np.int64)
    for b in range(batch):
        base = b * (seg + 1)
        perm[base] = b
        perm[base + 1: base + seg + 1] = batch + b * seg + np.arange(seg)
    x = nm.take_rows(full, perm)
    mask = _block_causal_mask(batch, seg + 1, x.data.dtype)
    return EncodedBatch(x=x, mask=mask, lengths=lengths, seg_len=seg)


def causal_forward(x: nm.Tensor, params: Dict[str, nm.Tensor], cfg: ModelConfig,
                   mode: str = "eval", mask: Optional[np.ndarray] = None,
                   rng: Optional[np.random.Generator] = None) -> nm.Tensor:
    """Pre-norm masked self-attention blocks; strictly causal within segments."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    train = mode == "train"
    n = x.data.shape[0]
    if mask is None:
        mask = _block_causal_mask(1, n, x.data.dtype)
    dm = cfg.d_model
    dh = dm // cfg.n_heads
    inv_sqrt = 1.0 / math.sqrt(dh)
    for i in range(cfg.n_layers):
        pre = f"layer{i}"
        h = nm.layer_norm(x, params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"])
        q = nm.add(nm.matmul(h, params[f"{pre}.attn.wq"]), params[f"{pre}.attn.bq"])
        k = nm.add(nm.matmul(h, params[f"{pre}.attn.wk"]), params[f"{pre}.attn.bk"])
        v = nm.add(nm.matmul(h, params[f"{pre}.attn.wv"]), params[f"{pre}.attn.bv"])
        heads = []
        for j in range(cfg.n_heads):
            lo, hi = j * dh, (j + 1) * dh
            scores = nm.scale(nm.matmul_t(nm.slice_cols(q, lo, hi),
                                          nm.slice_cols(k, lo, hi)), inv_sqrt)
            probs = nm.softmax_rows(nm.add_const(scores, mask))
            heads.append(nm.matmul(probs, nm.slice_cols(v, lo, hi)))
        att = nm.add(nm.matmul(nm.concat_cols(heads), params[f"{pre}.attn.wo"]),
                     params[f"{pre}.attn.bo"])
        att = nm.dropout(att, cfg.dropout, rng, train)
        x = nm.add(x, att)
        h2 = nm.layer_norm(x, params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"])
        m = nm.relu(nm.add(nm.matmul(h2, params[f"{pre}.mlp.w1"]), params[f"{pre}.mlp.b1"]))
        m = nm.add(nm.matmul(m, params[f"{pre}.mlp.w2"]), params[f"{pre}.mlp.b2"])
        m = nm.dropout(m, cfg.dropout, rng, train)
        x = nm.add(x, m)
    return nm.layer_norm(x, params["ln_f.g"], params["ln_f.b"])


def reconstruct_logits(h: nm.Tensor, params: Dict[str, nm.Tensor],
                       cfg: ModelConfig) -> List[nm.Tensor]:
    """Slice hidden rows per dimension and decode against the tied tables."""
    out = []
    for d, (off, w) in enumerate(zip(cfg.d_offsets, cfg.d_k)):
        out.append(nm.matmul_t(nm.slice_cols(h, off, off + w), params[f"embed.{d}"]))
    return out


def reconstruction_loss(logits: Sequence[nm.Tensor], targets: np.ndarray,
                        valid: np.ndarray) -> nm.Tensor:
    """Mean over non-pad positions of the per-dimension mean cross-entropy.

    logits: per-dimension [N, V_d] rows aligned with targets [N, D];
    valid marks rows that carry a real next event.
    """
    valid = np.asarray(valid, dtype=bool)
    idx = np.flatnonzero(valid)
    if idx.size == 0:
        raise ValueError("reconstruction loss over an all-padded batch")
    d = len(logits)
    terms = [nm.softmax_ce(nm.take_rows(lg, idx), targets[idx, di])
             for di, lg in enumerate(logits)]
    return nm.scale(nm.add_n(terms), 1.0 / d)


def batch_reconstruction_loss(batch: EncodedBatch, params: Dict[str, nm.Tensor],
                              cfg: ModelConfig, id_arrays: Sequence[np.ndarray],
                              mode: str = "train",
                              rng: Optional[np.random.Generator] = None) -> nm.Tensor:
    """Forward + next-event loss for an encoded batch."""
    h = causal_forward(batch.x, params, cfg, mode=mode, mask=batch.mask, rng=rng)
    logits = reconstruct_logits(h, params, cfg)
    rows = batch.batch * batch.rows_per_seq
    targets = np.zeros((rows, cfg.D), dtype=np.int64)
    valid = np.zeros(rows, dtype=bool)
    for b, ids in enumerate(id_arrays):
        t_len = ids.shape[0]
        base = b * batch.rows_per_seq
        targets[base: base + t_len] = ids
        valid[base: base + t_len] = True
    return reconstruction_loss(logits, targets, valid)


@dataclass
class PretrainConfig:
    steps: int = 400
    batch_size: int = 32
    lr: float = 3e-3
    window: int = 32
    seed: int = 0
    log_every: int = 10


def pretrain_loop(corpus: Sequence[BehaviorSequence], cfg: ModelConfig,
                  train_cfg: PretrainConfig,
                  params: Optional[Dict[str, nm.Tensor]] = None,
                  dtype=np.float32) -> Tuple[Dict[str, nm.Tensor], List[Tuple[int, float]]]:
    """Next-event pretraining; returns params and the (step, loss) curve."""
    if not corpus:
        raise ValueError("pretraining corpus is empty")
    if params is None:
        params = init_params(cfg, child_rng(train_cfg.seed, "init"), dtype=dtype)
    opt = nm.Adam(params, lr=train_cfg.lr)
    order: List[int] = []
    epoch = 0
    curve: List[Tuple[int, float]] = []
    for step in range(train_cfg.steps):
        while len(order) < train_cfg.batch_size:
            perm = child_rng(train_cfg.seed, "pretrain-order", epoch).permutation(len(corpus))
            order.extend(int(i) for i in perm)
            epoch += 1
        picks, order = order[:train_cfg.batch_size], order[train_cfg.batch_size:]
        wrng = child_rng(train_cfg.seed, "pretrain-window", step)
        ids = [ids_array(window_sample(corpus[i], train_cfg.window, wrng)) for i in picks]
        drng = child_rng(train_cfg.seed, "pretrain-dropout", step)
        with nm.GradTape() as tape:
            batch = encode_batch(ids, params, cfg)
            loss = batch_reconstruction_loss(batch, params, cfg, ids, mode="train", rng=drng)
            val = float(loss.data)
            if not math.isfinite(val):
                raise RuntimeError(f"non-finite pretraining loss at step {step}")
            opt.zero_grad()
            tape.backward(loss)
        opt.step()
        curve.append((step, val))
    return params, curve
