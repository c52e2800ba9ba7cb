"""A small transformer encoder exposing every hidden state, not just the last.

The stack follows the standard recipe: learned token plus absolute position
embeddings, then ``layers`` blocks of multi-head self-attention and a ReLU
feed-forward, with residual connections and dropout. Blocks are pre-norm by
default for small-scale training stability; ``post_norm=True`` flips the
ordering. Attention logits at padding key positions are masked to -inf, so
padded keys get exactly zero weight and real positions are unaffected by how
far a batch is padded.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from hire.autodiff import (
    ShapeError,
    Tensor,
    concat,
    dropout,
    embedding,
    layer_norm,
    narrow,
    softmax,
    swap_last_axes,
)


@dataclass
class EncoderConfig:
    """Architecture hyperparameters; defaults are desk scale."""

    layers: int = 4
    hidden: int = 16
    heads: int = 2
    ffn_dim: int = 64
    vocab_size: int = 16
    max_len: int = 32
    dropout_rate: float = 0.1
    post_norm: bool = False

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError(f"encoder layers must be >= 1, got {self.layers}")
        if self.hidden % 2 != 0 or self.hidden % self.heads != 0:
            raise ValueError(
                f"hidden size {self.hidden} must be even and divisible by {self.heads} heads"
            )
        if self.max_len < 1:
            raise ValueError(f"max_len must be >= 1, got {self.max_len}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate {self.dropout_rate} outside [0, 1)")


@dataclass
class HiddenStates:
    """The embedding output followed by every block output, oldest first."""

    states: list[Tensor]
    lengths: np.ndarray

    def __len__(self) -> int:
        return len(self.states)


@dataclass
class EncoderOutput:
    hidden: HiddenStates
    attention: list[np.ndarray] | None = None

    @property
    def final(self) -> Tensor:
        """The last block's output; identical object to ``hidden.states[-1]``."""
        return self.hidden.states[-1]


def init_encoder_params(params: dict[str, Tensor], config: EncoderConfig, rng) -> None:
    d = config.hidden

    def normal(*shape):
        return Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    params["embedding.token"] = normal(config.vocab_size, d)
    params["embedding.position"] = normal(config.max_len, d)
    for j in range(config.layers):
        p = f"encoder.{j}"
        for name in ("wq", "wk", "wv", "wo"):
            params[f"{p}.attn.{name}"] = normal(d, d)
        for name in ("bq", "bk", "bv", "bo"):
            params[f"{p}.attn.{name}"] = zeros(d)
        params[f"{p}.ln1.gain"] = Tensor(np.ones(d), requires_grad=True)
        params[f"{p}.ln1.bias"] = zeros(d)
        params[f"{p}.ffn.w1"] = normal(d, config.ffn_dim)
        params[f"{p}.ffn.b1"] = zeros(config.ffn_dim)
        params[f"{p}.ffn.w2"] = normal(config.ffn_dim, d)
        params[f"{p}.ffn.b2"] = zeros(d)
        params[f"{p}.ln2.gain"] = Tensor(np.ones(d), requires_grad=True)
        params[f"{p}.ln2.bias"] = zeros(d)


def _validate_ids(ids: np.ndarray, config: EncoderConfig) -> np.ndarray:
    ids = np.asarray(ids)
    if ids.size == 0 or ids.shape[-1] == 0:
        raise ShapeError("embed: empty token sequence")
    if ids.shape[-1] > config.max_len:
        raise ShapeError(f"embed: sequence length {ids.shape[-1]} exceeds max_len {config.max_len}")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise ShapeError(f"embed: token id out of range [0, {config.vocab_size})")
    return ids


def embed(token_ids: np.ndarray, config: EncoderConfig, params: dict[str, Tensor]) -> Tensor:
    """Token embedding plus learned position embedding; trainable end to end."""
    ids = _validate_ids(token_ids, config)
    n = ids.shape[-1]
    tok = embedding(params["embedding.token"], ids)
    pos = embedding(params["embedding.position"], np.arange(n))
    return tok + pos


def _norm(x: Tensor, params: dict[str, Tensor], name: str) -> Tensor:
    return layer_norm(x) * params[f"{name}.gain"] + params[f"{name}.bias"]


def _attention(x, key_mask, prefix, config, params, capture):
    p = params
    q = x @ p[f"{prefix}.wq"] + p[f"{prefix}.bq"]
    k = x @ p[f"{prefix}.wk"] + p[f"{prefix}.bk"]
    v = x @ p[f"{prefix}.wv"] + p[f"{prefix}.bv"]
    dk = config.hidden // config.heads
    scale = 1.0 / np.sqrt(dk)
    heads_out = []
    for h in range(config.heads):
        qs = narrow(q, -1, h * dk, dk)
        ks = narrow(k, -1, h * dk, dk)
        vs = narrow(v, -1, h * dk, dk)
        logits = (qs @ swap_last_axes(ks)) * scale
        probs = softmax(logits, axis=-1, mask=key_mask)
        if capture is not None:
            capture.append(probs.values.copy())
        heads_out.append(probs @ vs)
    ctx = concat(heads_out, axis=-1)
    return ctx @ p[f"{prefix}.wo"] + p[f"{prefix}.bo"]


def encode(
    token_ids: np.ndarray,
    mask: np.ndarray,
    config: EncoderConfig,
    params: dict[str, Tensor],
    rng=None,
    training: bool = False,
    capture_attention: bool = False,
) -> EncoderOutput:
    """Run the full stack and keep all layers+1 hidden states.

    ``token_ids`` and ``mask`` are (n,) or (B, n); mask is 1 on real tokens
    and padding must be a suffix. Returns states shaped like the input
    (per-example calls get (n, d) matrices).
    """
    ids = _validate_ids(token_ids, config)
    mask = np.asarray(mask).astype(bool)
    if mask.shape != ids.shape:
        raise ShapeError(f"encode: mask shape {mask.shape} does not match ids shape {ids.shape}")

    single = ids.ndim == 1
    if single:
        ids = ids[None, :]
        mask = mask[None, :]
    batch, n = ids.shape

    lengths = mask.sum(axis=1)
    if (lengths == 0).any():
        raise ShapeError("encode: every sequence needs at least one unmasked position")
    for row in range(batch):
        if not mask[row, : lengths[row]].all():
            raise ShapeError("encode: padding must be a suffix of the sequence")

    rate = config.dropout_rate
    key_mask = mask[:, None, :]  # broadcast over query rows
    captured: list[np.ndarray] | None = [] if capture_attention else None

    h0 = embed(ids, config, params)
    states = [h0]
    x = dropout(h0, rate, rng, training)
    for j in range(config.layers):
        p = f"encoder.{j}"
        if config.post_norm:
            attn = _attention(x, key_mask, f"{p}.attn", config, params, captured)
            x = _norm(x + dropout(attn, rate, rng, training), params, f"{p}.ln1")
            ffn = (_ffn(x, params, p))
            x = _norm(x + dropout(ffn, rate, rng, training), params, f"{p}.ln2")
        else:
            attn = _attention(_norm(x, params, f"{p}.ln1"), key_mask, f"{p}.attn", config, params, captured)
            x = x + dropout(attn, rate, rng, training)
            ffn = _ffn(_norm(x, params, f"{p}.ln2"), params, p)
            x = x + dropout(ffn, rate, rng, training)
        states.append(x)

    if single:
        d = config.hidden
        states = [s.reshape(n, d) for s in states]
    return EncoderOutput(HiddenStates(states, lengths), attention=captured)


def _ffn(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    inner = (x @ params[f"{prefix}.ffn.w1"] + params[f"{prefix}.ffn.b1"]).relu()
    return inner @ params[f"{prefix}.ffn.w2"] + params[f"{prefix}.ffn.b2"]
