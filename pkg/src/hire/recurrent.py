"""Stacked bidirectional GRU layers built on the autodiff kernels.

Gate layout per direction: one input projection ``w`` of shape (in, 3h), one
recurrent projection ``u`` of shape (h, 3h) and a bias ``b`` of shape (3h,),
with the three h-wide column blocks holding the update gate, reset gate and
candidate state in that order. The state update follows the original gated
recurrent unit: the update gate interpolates between the previous state and
the candidate tanh(Wx + U(r * h)).

Initial states are zero. When a step mask is given, masked-out steps carry
the previous state through unchanged, so trailing padding never influences
the states (1.0 * x + 0.0 * y is exact in IEEE arithmetic).
"""

from __future__ import annotations

import numpy as np

from hire.autodiff import Tensor, concat, dropout, mul, narrow, sigmoid, tanh


def init_gru_direction(params: dict[str, Tensor], prefix: str, in_size: int, hidden: int, rng) -> None:
    params[f"{prefix}.w"] = Tensor(rng.normal(0.0, 0.02, size=(in_size, 3 * hidden)), requires_grad=True)
    params[f"{prefix}.u"] = Tensor(rng.normal(0.0, 0.02, size=(hidden, 3 * hidden)), requires_grad=True)
    params[f"{prefix}.b"] = Tensor(np.zeros(3 * hidden), requires_grad=True)


def init_bigru_stack(params: dict[str, Tensor], prefix: str, in_size: int, hidden: int, layers: int, rng) -> None:
    """Parameters for ``layers`` stacked bidirectional GRU layers.

    Layer 0 consumes ``in_size`` features; every later layer consumes the
    2*hidden-wide concatenation of the previous layer's two directions.
    """
    for i in range(layers):
        width = in_size if i == 0 else 2 * hidden
        init_gru_direction(params, f"{prefix}.{i}.fwd", width, hidden, rng)
        init_gru_direction(params, f"{prefix}.{i}.bwd", width, hidden, rng)


def gru_direction(
    x: Tensor,
    w: Tensor,
    u: Tensor,
    b: Tensor,
    reverse: bool = False,
    step_mask: np.ndarray | None = None,
) -> tuple[Tensor, Tensor]:
    """Scan one GRU direction over ``x`` of shape (B, n, in).

    Returns per-step states (B, n, h) in original position order and the
    final state (B, h). ``step_mask`` is a (B, n) 0/1 array; steps with mask
    0 leave the state untouched.
    """
    batch, steps, _ = x.shape
    hidden = u.shape[0]

    proj = x @ w + b  # (B, n, 3h)
    u_zr = narrow(u, -1, 0, 2 * hidden)
    u_n = narrow(u, -1, 2 * hidden, hidden)

    h = Tensor(np.zeros((batch, hidden)))
    outputs: list[Tensor | None] = [None] * steps
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        p_t = narrow(proj, 1, t, 1).reshape(batch, 3 * hidden)
        zr = sigmoid(narrow(p_t, -1, 0, 2 * hidden) + h @ u_zr)
        z = narrow(zr, -1, 0, hidden)
        r = narrow(zr, -1, hidden, hidden)
        cand = tanh(narrow(p_t, -1, 2 * hidden, hidden) + mul(r, h) @ u_n)
        h_new = mul(z, h) + mul(1.0 - z, cand)
        if step_mask is not None:
            m_t = Tensor(step_mask[:, t : t + 1].astype(np.float64))
            h = mul(m_t, h_new) + mul(1.0 - m_t, h)
        else:
            h = h_new
        outputs[t] = h.reshape(batch, 1, hidden)
    return concat(outputs, axis=1), h


def bigru_stack(
    x: Tensor,
    params: dict[str, Tensor],
    prefix: str,
    layers: int,
    rng=None,
    dropout_rate: float = 0.0,
    training: bool = False,
    step_mask: np.ndarray | None = None,
) -> tuple[Tensor, list[tuple[Tensor, Tensor]]]:
    """Run stacked bidirectional layers; dropout sits between stacked layers.

    Returns the top layer's (B, n, 2h) forward||backward outputs and the
    (forward_final, backward_final) pair of every layer, bottom first.
    """
    inputs = x
    finals: list[tuple[Tensor, Tensor]] = []
    for i in range(layers):
        if i > 0:
            inputs = dropout(inputs, dropout_rate, rng, training)
        fwd = [params[f"{prefix}.{i}.fwd.{k}"] for k in ("w", "u", "b")]
        bwd = [params[f"{prefix}.{i}.bwd.{k}"] for k in ("w", "u", "b")]
        out_f, fin_f = gru_direction(inputs, *fwd, reverse=False, step_mask=step_mask)
        out_b, fin_b = gru_direction(inputs, *bwd, reverse=True, step_mask=step_mask)
        inputs = concat([out_f, out_b], axis=-1)
        finals.append((fin_f, fin_b))
    return inputs, finals
