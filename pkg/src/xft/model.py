"""Tiny decoder-only transformer with pluggable feed-forward slots.

Each layer is a pre-norm causal attention sublayer followed by a
feed-forward slot. The slot consumes the attention sublayer's output
directly and supplies its own residual, so a slot can hold either a plain
FFN or an MoE layer without changing the surrounding wiring. The slot kind
is uniform across a model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from xft import tensor as tn
from xft.tensor import Tensor

ATTENTION_MASK_VALUE = -1e9  # additive mask; exp underflows to exactly 0 in float32


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 256

    def __post_init__(self):
        for field in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"):
            if getattr(self, field) <= 0:
                raise ValueError(f"{field} must be positive, got {getattr(self, field)}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "max_seq_len": self.max_seq_len,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: int(d[k]) for k in (
            "vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len")})


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor


@dataclass
class AttentionParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor


@dataclass
class FFNWeights:
    """One feed-forward (expert) weight set: up-projection, GELU, down-projection."""

    w_up: Tensor    # [d_model, d_ff]
    b_up: Tensor    # [d_ff]
    w_down: Tensor  # [d_ff, d_model]
    b_down: Tensor  # [d_model]

    def tensors(self) -> dict[str, Tensor]:
        return {"w_up": self.w_up, "b_up": self.b_up, "w_down": self.w_down, "b_down": self.b_down}


@dataclass
class Block:
    ln1: LayerNormParams
    attn: AttentionParams
    slot: object  # FFNWeights, or any object with forward(u) -> (Tensor, decisions)


def ffn_forward(u: Tensor, w: FFNWeights, activation: Callable[[Tensor], Tensor] = tn.gelu) -> Tensor:
    """down(act(up(u))) with biases; the caller adds any residual."""
    return activation(u @ w.w_up + w.b_up) @ w.w_down + w.b_down


def causal_mask(t: int, dtype=np.float32) -> np.ndarray:
    """[t, t] additive mask: 0 at or below the diagonal, large negative above."""
    return np.triu(np.full((t, t), ATTENTION_MASK_VALUE, dtype=dtype), k=1)


def attention_forward(u: Tensor, block: Block, cfg: ModelConfig) -> Tensor:
    """Pre-norm multi-head causal self-attention, residual included.

    Position t attends only to positions <= t; the additive mask drives
    masked attention weights to exactly zero after the softmax, so outputs
    at position t are bit-identical under perturbations of later tokens.
    """
    t = u.shape[0]
    if t > cfg.max_seq_len:
        raise ValueError(f"sequence length {t} exceeds max_seq_len {cfg.max_seq_len}")
    d_head = cfg.d_model // cfg.n_heads
    scale = 1.0 / math.sqrt(d_head)

    x = tn.layer_norm(u, block.ln1.gain, block.ln1.bias)
    q = x @ block.attn.wq + block.attn.bq
    k = x @ block.attn.wk + block.attn.bk
    v = x @ block.attn.wv + block.attn.bv

    mask = Tensor(causal_mask(t, dtype=u.data.dtype))
    heads = []
    for h in range(cfg.n_heads):
        lo, hi = h * d_head, (h + 1) * d_head
        qh = tn.slice_cols(q, lo, hi)
        kh = tn.slice_cols(k, lo, hi)
        vh = tn.slice_cols(v, lo, hi)
        scores = (qh @ kh.transpose()) * scale + mask
        weights = tn.softmax(scores, axis=-1)
        heads.append(weights @ vh)
    out = tn.concat_cols(heads) @ block.attn.wo + block.attn.bo
    return u + out


class Transformer:
    """Decoder-only transformer; slots hold either FFNWeights or MoE layers."""

    def __init__(self, cfg: ModelConfig, tok_emb: Tensor, pos_emb: Tensor,
                 blocks: list[Block], ln_f: LayerNormParams, unembed: Tensor):
        self.cfg = cfg
        self.tok_emb = tok_emb      # [vocab, d_model]
        self.pos_emb = pos_emb      # [max_seq_len, d_model]
        self.blocks = blocks
        self.ln_f = ln_f
        self.unembed = unembed      # [d_model, vocab]

    @property
    def is_moe(self) -> bool:
        return not isinstance(self.blocks[0].slot, FFNWeights)

    def _check_tokens(self, tokens) -> np.ndarray:
        idx = np.asarray(tokens, dtype=np.intp)
        if idx.ndim != 1 or idx.size == 0:
            raise ValueError("tokens must be a nonempty 1-d sequence")
        if idx.size > self.cfg.max_seq_len:
            raise ValueError(f"sequence length {idx.size} exceeds max_seq_len {self.cfg.max_seq_len}")
        if idx.min() < 0 or idx.max() >= self.cfg.vocab_size:
            raise ValueError(f"token ids must lie in [0, {self.cfg.vocab_size})")
        return idx

    def hidden(self, tokens, collect_decisions: bool = False):
        """Final hidden states [T, d_model] and per-layer router decisions."""
        idx = self._check_tokens(tokens)
        x = tn.gather_rows(self.tok_emb, idx) + tn.gather_rows(self.pos_emb, np.arange(idx.size))
        decisions = []
        for block in self.blocks:
            u = attention_forward(x, block, self.cfg)
            if isinstance(block.slot, FFNWeights):
                x = u + ffn_forward(u, block.slot)
                decisions.append(None)
            else:
                x, layer_decisions = block.slot.forward(u)
                decisions.append(layer_decisions if collect_decisions else None)
        return x, decisions

    def logits(self, tokens) -> Tensor:
        h, _ = self.hidden(tokens)
        return tn.layer_norm(h, self.ln_f.gain, self.ln_f.bias) @ self.unembed

    def logits_and_decisions(self, tokens):
        h, decisions = self.hidden(tokens, collect_decisions=True)
        return tn.layer_norm(h, self.ln_f.gain, self.ln_f.bias) @ self.unembed, decisions

    def named_parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {"tok_emb": self.tok_emb, "pos_emb": self.pos_emb}
        for i, block in enumerate(self.blocks):
            prefix = f"layers.{i}"
            params[f"{prefix}.ln1.gain"] = block.ln1.gain
            params[f"{prefix}.ln1.bias"] = block.ln1.bias
            for name, tensor in vars(block.attn).items():
                params[f"{prefix}.attn.{name}"] = tensor
            if isinstance(block.slot, FFNWeights):
                for name, tensor in block.slot.tensors().items():
                    params[f"{prefix}.ffn.{name}"] = tensor
            else:
                for name, tensor in block.slot.named_tensors():
                    params[f"{prefix}.moe.{name}"] = tensor
        params["ln_f.gain"] = self.ln_f.gain
        params["ln_f.bias"] = self.ln_f.bias
        params["unembed"] = self.unembed
        return params

    def theta_o_names(self) -> list[str]:
        """Names of all parameters outside the feed-forward slots."""
        return [n for n in self.named_parameters()
                if ".ffn." not in n and ".moe." not in n]

    def copy(self, dtype=None, share_data: bool = False, requires_grad: bool | None = None) -> "Transformer":
        """Structural copy. ``share_data`` aliases the underlying buffers
        (used to build frozen views); otherwise buffers are copied."""

        def conv(t: Tensor) -> Tensor:
            data = t.data
            if dtype is not None:
                data = data.astype(dtype)
            elif not share_data:
                data = data.copy()
            rg = t.requires_grad if requires_grad is None else requires_grad
            return Tensor(data, requires_grad=rg)

        def copy_ln(ln: LayerNormParams) -> LayerNormParams:
            return LayerNormParams(conv(ln.gain), conv(ln.bias))

        blocks = []
        for block in self.blocks:
            attn = AttentionParams(**{k: conv(v) for k, v in vars(block.attn).items()})
            if isinstance(block.slot, FFNWeights):
                slot = FFNWeights(**{k: conv(v) for k, v in block.slot.tensors().items()})
            else:
                slot = block.slot.copy(conv)
            blocks.append(Block(copy_ln(block.ln1), attn, slot))
        return Transformer(self.cfg, conv(self.tok_emb), conv(self.pos_emb),
                           blocks, copy_ln(self.ln_f), conv(self.unembed))


def _param(rng: np.random.Generator, shape, std: float) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape).astype(np.float32), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)


def _ones(shape) -> Tensor:
    return Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)


def build_ffn(rng: np.random.Generator, cfg: ModelConfig, std: float) -> FFNWeights:
    return FFNWeights(
        w_up=_param(rng, (cfg.d_model, cfg.d_ff), std),
        b_up=_zeros(cfg.d_ff),
        w_down=_param(rng, (cfg.d_ff, cfg.d_model), std),
        b_down=_zeros(cfg.d_model),
    )


def build_dense_model(cfg: ModelConfig, seed: int = 0, init_std: float = 0.08) -> Transformer:
    rng = np.random.default_rng(seed)
    blocks = []
    for _ in range(cfg.n_layers):
        ln1 = LayerNormParams(_ones(cfg.d_model), _zeros(cfg.d_model))
        attn = AttentionParams(
            wq=_param(rng, (cfg.d_model, cfg.d_model), init_std), bq=_zeros(cfg.d_model),
            wk=_param(rng, (cfg.d_model, cfg.d_model), init_std), bk=_zeros(cfg.d_model),
            wv=_param(rng, (cfg.d_model, cfg.d_model), init_std), bv=_zeros(cfg.d_model),
            wo=_param(rng, (cfg.d_model, cfg.d_model), init_std), bo=_zeros(cfg.d_model),
        )
        blocks.append(Block(ln1, attn, build_ffn(rng, cfg, init_std)))
    return Transformer(
        cfg,
        tok_emb=_param(rng, (cfg.vocab_size, cfg.d_model), init_std),
        pos_emb=_param(rng, (cfg.max_seq_len, cfg.d_model), init_std),
        blocks=blocks,
        ln_f=LayerNormParams(_ones(cfg.d_model), _zeros(cfg.d_model)),
        unembed=_param(rng, (cfg.d_model, cfg.vocab_size), init_std),
    )


def model_forward_loss(model: Transformer, tokens, loss_mask) -> tuple[Tensor, Tensor]:
    """Next-token cross-entropy averaged over positions whose mask is 1.

    ``loss_mask`` aligns with ``tokens``: mask[i] = 1 marks token i as a
    prediction target (scored from position i-1).
    """
    tokens = list(tokens)
    mask = np.asarray(loss_mask, dtype=np.float64)
    if mask.shape != (len(tokens),):
        raise ValueError(f"loss_mask length {mask.size} != token length {len(tokens)}")
    if len(tokens) < 2:
        raise ValueError("need at least two tokens for next-token loss")
    target_mask = mask[1:]
    n_targets = float(target_mask.sum())
    if n_targets == 0:
        raise ValueError("loss_mask selects no target positions")

    logits = model.logits(tokens[:-1])
    targets = np.asarray(tokens[1:], dtype=np.intp)
    logp = tn.log_softmax(logits, axis=-1)
    picked = tn.take_along_rows(logp, targets[:, None])
    mask_col = Tensor(target_mask[:, None].astype(logits.data.dtype))
    loss = (picked * mask_col).sum() * (-1.0 / n_targets)
    return logits, loss


def generate_greedy(model: Transformer, prompt, max_new: int) -> list[int]:
    """Append argmax tokens; ties break toward the lower token id."""
    seq = [int(t) for t in prompt]
    if not seq:
        raise ValueError("prompt must be nonempty")
    if len(seq) > model.cfg.max_seq_len:
        raise ValueError(f"prompt length {len(seq)} exceeds max_seq_len {model.cfg.max_seq_len}")
    with tn.no_grad():
        for _ in range(max_new):
            if len(seq) >= model.cfg.max_seq_len:
                break
            logits = model.logits(seq)
            seq.append(int(np.argmax(logits.data[-1])))
    return seq
