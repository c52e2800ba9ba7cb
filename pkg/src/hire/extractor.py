"""Layer-importance extraction over a stack of hidden states.

One shared 2-layer bidirectional GRU condenses each hidden state into a
fixed-size summary: the final states of (layer 1 forward, layer 1 backward,
layer 2 forward, layer 2 backward) concatenated, 4d wide. A learned linear
scorer with ReLU turns each summary into a nonnegative importance score,
softmax turns the scores into a distribution over layers, and the weighted
sum of the hidden states gives the complementary representation, shaped
like any single hidden state.

The summarizer only sees the true (unpadded) token rows, so padding can
never shift the importance weights. If ReLU clamps every score to zero the
softmax of the all-zero vector is uniform; that degenerate case is the
defined behavior, not an error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hire.autodiff import ShapeError, Tensor, concat, narrow, relu, softmax
from hire.encoder import HiddenStates
from hire.recurrent import bigru_stack, init_bigru_stack

SUMMARY_LAYERS = 2  # stacked bidirectional layers in the shared summarizer


@dataclass
class ImportanceDistribution:
    """Per-example importance over layers plus the derived representation.

    ``summaries`` is (layers+1, 4d) per example or (B, layers+1, 4d) batched;
    ``scores`` the raw nonnegative values, ``weights`` their softmax, and
    ``complementary`` the weighted sum of hidden states.
    """

    summaries: Tensor
    scores: Tensor
    weights: Tensor
    complementary: Tensor


def init_extractor_params(params: dict[str, Tensor], d: int, rng) -> None:
    init_bigru_stack(params, "extractor.gru", d, d, SUMMARY_LAYERS, rng)
    params["extractor.score.w"] = Tensor(rng.normal(0.0, 0.02, size=(4 * d,)), requires_grad=True)
    params["extractor.score.b"] = Tensor(np.zeros(()), requires_grad=True)


def _step_mask(lengths: np.ndarray, n: int) -> np.ndarray | None:
    lengths = np.asarray(lengths)
    if (lengths == n).all():
        return None
    return (np.arange(n)[None, :] < lengths[:, None]).astype(np.float64)


def summarize_batch(
    state: Tensor,
    lengths: np.ndarray,
    params: dict[str, Tensor],
    rng=None,
    dropout_rate: float = 0.1,
    training: bool = False,
) -> Tensor:
    """Summaries (B, 4d) of a batched hidden state (B, n, d)."""
    batch, n, _ = state.shape
    mask = _step_mask(lengths, n)
    _, finals = bigru_stack(
        state, params, "extractor.gru", SUMMARY_LAYERS,
        rng=rng, dropout_rate=dropout_rate, training=training, step_mask=mask,
    )
    pieces = [s for pair in finals for s in pair]  # layer-major, forward first
    return concat(pieces, axis=-1)


def summarize(
    state: Tensor,
    length: int,
    params: dict[str, Tensor],
    rng=None,
    dropout_rate: float = 0.1,
    training: bool = False,
) -> Tensor:
    """Summary vector (4d,) of one hidden state, using only its first ``length`` rows."""
    n, d = state.shape
    if not 1 <= length <= n:
        raise ShapeError(f"summarize: length {length} outside [1, {n}]")
    rows = narrow(state, 0, 0, length) if length < n else state
    out = summarize_batch(rows.reshape(1, length, d), np.array([length]), params,
                          rng=rng, dropout_rate=dropout_rate, training=training)
    return out.reshape(4 * d)


def score(summaries: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Nonnegative importance score per summary row: relu(w . u + b)."""
    w = params["extractor.score.w"]
    width = w.shape[0]
    if summaries.shape[-1] != width:
        raise ShapeError(
            f"score: summary width {summaries.shape[-1]} does not match scorer width {width}"
        )
    out_shape = summaries.shape[:-1]
    raw = summaries @ w.reshape(width, 1)
    return relu(raw.reshape(out_shape) + params["extractor.score.b"])


def normalize(scores: Tensor) -> Tensor:
    """Softmax over the layer axis (the last one)."""
    return softmax(scores, axis=-1)


def complement(weights: Tensor, states: list[Tensor]) -> Tensor:
    """Weighted sum of hidden states; one-hot weights select a layer exactly."""
    count = weights.shape[-1]
    if count != len(states):
        raise ShapeError(f"complement: {count} weights for {len(states)} hidden states")
    acc = None
    for i, state in enumerate(states):
        w_i = narrow(weights, -1, i, 1)
        if state.ndim == 3:
            w_i = w_i.reshape(w_i.shape[0], 1, 1)
        else:
            w_i = w_i.reshape(())
        term = w_i * state
        acc = term if acc is None else acc + term
    return acc


def extract(
    hidden: HiddenStates,
    params: dict[str, Tensor],
    rng=None,
    dropout_rate: float = 0.1,
    training: bool = False,
) -> ImportanceDistribution:
    """Summarize, score, normalize and weight the full stack of hidden states."""
    states = hidden.states
    batched = states[0].ndim == 3
    summaries = []
    for state in states:
        if batched:
            u = summarize_batch(state, hidden.lengths, params,
                                rng=rng, dropout_rate=dropout_rate, training=training)
            summaries.append(u.reshape(u.shape[0], 1, u.shape[-1]))
        else:
            u = summarize(state, int(hidden.lengths[0]), params,
                          rng=rng, dropout_rate=dropout_rate, training=training)
            summaries.append(u.reshape(1, u.shape[-1]))
    stacked = concat(summaries, axis=-2)
    raw = score(stacked, params)
    weights = normalize(raw)
    return ImportanceDistribution(stacked, raw, weights, complement(weights, states))


def fixed_strategy(
    kind: str,
    layer_range: str,
    k: int | None,
    layer_count: int,
    seed: int = 0,
) -> np.ndarray:
    """A non-learned importance distribution used in place of the dynamic one.

    ``mean`` spreads uniform weight over the selected layers; ``random``
    draws uniform(0, 1) scores for them (seeded) and softmaxes with every
    other layer at -inf. The result replaces the per-example weights for
    every example.
    """
    if kind not in ("mean", "random"):
        raise ValueError(f"fixed_strategy: unknown kind {kind!r}")
    if layer_range not in ("all", "last_k", "first_k"):
        raise ValueError(f"fixed_strategy: unknown range {layer_range!r}")
    if k == 0:
        raise ValueError("fixed_strategy: k must be at least 1")
    if layer_range == "all":
        indices = np.arange(layer_count)
    else:
        if k is None:
            raise ValueError(f"fixed_strategy: range {layer_range!r} needs k")
        if k > layer_count:
            raise ValueError(f"fixed_strategy: k {k} exceeds layer count {layer_count}")
        indices = np.arange(layer_count - k, layer_count) if layer_range == "last_k" else np.arange(k)

    weights = np.zeros(layer_count)
    if kind == "mean":
        weights[indices] = 1.0 / len(indices)
    else:
        scores_raw = np.full(layer_count, -np.inf)
        scores_raw[indices] = np.random.default_rng(seed).uniform(0.0, 1.0, size=len(indices))
        shifted = np.exp(scores_raw - scores_raw.max())
        weights = shifted / shifted.sum()
    return weights
