"""mLSTM sequence kernels: recurrent, parallel and chunkwise forms.

All three compute the same map from ``(q, k, v, i_pre, f_pre)`` to hidden
states. Shapes follow ``q, k: (..., L, d_qk)``, ``v: (..., L, d_v)`` and
``i_pre, f_pre: (..., L)``; any leading axes (batch, heads, trials) are carried
through unchanged.

The forget gate is ``sigmoid(f_pre)`` applied in log space and the input gate
is ``exp(i_pre)``. Exponentials are kept in range by a running log-space
maximum ``m``. Outputs are invariant to ``m`` in exact arithmetic, so it is
treated as a constant during backprop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, NumericError
from .tensor import Tensor

NEG_INF = -1e30


def _const(x, like: Tensor) -> Tensor:
    return Tensor(np.asarray(x, dtype=like.dtype))


def _expand(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Append unit axes to ``x`` and broadcast it to ``shape``."""
    return x.reshape(x.shape + (1,) * (len(shape) - x.ndim)).broadcast_to(shape)


@dataclass
class MLSTMState:
    """Recurrent carry: matrix memory ``C (..., d_v, d_qk)``, normalizer ``n (..., d_qk)``, stabilizer ``m (...)``."""

    C: Tensor
    n: Tensor
    m: np.ndarray

    @classmethod
    def zeros(cls, d_qk: int, d_v: int, batch_shape: tuple[int, ...] = (), dtype=np.float32) -> "MLSTMState":
        bs = tuple(batch_shape)
        return cls(Tensor(np.zeros(bs + (d_v, d_qk), dtype)), Tensor(np.zeros(bs + (d_qk,), dtype)),
                   np.zeros(bs, dtype))

    @property
    def d_qk(self) -> int:
        return self.C.shape[-1]

    @property
    def d_v(self) -> int:
        return self.C.shape[-2]


def _check_sequence(q: Tensor, k: Tensor, v: Tensor, i_pre: Tensor, f_pre: Tensor) -> None:
    if q.ndim < 2 or q.shape != k.shape:
        raise DimensionError(f"q {q.shape} and k {k.shape} must match and have rank >= 2")
    lead, L = q.shape[:-2], q.shape[-2]
    if v.shape[:-1] != lead + (L,):
        raise DimensionError(f"v {v.shape} does not match q {q.shape}")
    if i_pre.shape != lead + (L,) or f_pre.shape != lead + (L,):
        raise DimensionError(f"gate pre-activations {i_pre.shape}, {f_pre.shape} must be {lead + (L,)}")


def _first_bad_step(*xs: Tensor) -> int | None:
    """Index along the sequence axis of the first non-finite input, if any."""
    bad = None
    for x, time_axis in xs:
        ok = np.isfinite(x.data)
        if ok.all():
            continue
        ax = time_axis % x.ndim
        per_step = ~np.moveaxis(ok, ax, 0).reshape(x.shape[ax], -1).all(axis=1)
        t = int(np.argmax(per_step))
        bad = t if bad is None else min(bad, t)
    return bad


def _check_finite(q, k, v, i_pre, f_pre) -> None:
    t = _first_bad_step((q, -2), (k, -2), (v, -2), (i_pre, -1), (f_pre, -1))
    if t is not None:
        raise NumericError(f"non-finite mLSTM input at step {t}")


def recurrent_step(state: MLSTMState, q: Tensor, k: Tensor, v: Tensor, i_pre: Tensor, f_pre: Tensor,
                   step: int | None = None) -> tuple[Tensor, MLSTMState]:
    """Advance the memory by one token and read it out with ``q``.

    ``q, k: (..., d_qk)``, ``v: (..., d_v)``, ``i_pre, f_pre: (...)``. Returns
    ``h: (..., d_v)`` and the new state.
    """
    bs = state.m.shape
    dqk, dv = state.d_qk, state.d_v
    if q.shape != bs + (dqk,) or k.shape != q.shape or v.shape != bs + (dv,):
        raise DimensionError(f"step inputs q{q.shape} k{k.shape} v{v.shape} do not fit state C{state.C.shape}")
    if i_pre.shape != bs or f_pre.shape != bs:
        raise DimensionError(f"gate inputs must have shape {bs}")
    for x in (q, k, v, i_pre, f_pre):
        if not np.isfinite(x.data).all():
            where = "" if step is None else f" at step {step}"
            raise NumericError(f"non-finite mLSTM input{where}")

    g = f_pre.logsigmoid()
    m_new = np.maximum(g.data + state.m, i_pre.data)
    f_act = (g + _const(state.m - m_new, g)).exp()
    i_act = (i_pre - _const(m_new, i_pre)).exp()
    k_scaled = k * (1.0 / math.sqrt(dqk))

    write = v.reshape(bs + (dv, 1)) @ k_scaled.reshape(bs + (1, dqk))
    C = _expand(f_act, state.C.shape) * state.C + _expand(i_act, write.shape) * write
    n = _expand(f_act, state.n.shape) * state.n + _expand(i_act, k_scaled.shape) * k_scaled

    num = (C @ q.reshape(bs + (dqk, 1))).reshape(bs + (dv,))
    den = (n * q).sum(-1)
    with np.errstate(over="ignore"):
        floor = np.exp(-m_new)
    denom = T.maximum(den.abs(), _const(floor, den))
    h = num / _expand(denom, num.shape)
    return h, MLSTMState(C, n, m_new)


def forward_recurrent(q: Tensor, k: Tensor, v: Tensor, i_pre: Tensor, f_pre: Tensor,
                      init: MLSTMState | None = None) -> tuple[Tensor, MLSTMState]:
    """Fold :func:`recurrent_step` over the sequence axis."""
    _check_sequence(q, k, v, i_pre, f_pre)
    _check_finite(q, k, v, i_pre, f_pre)
    lead, L = q.shape[:-2], q.shape[-2]
    state = init if init is not None else MLSTMState.zeros(q.shape[-1], v.shape[-1], lead, q.dtype)
    hs = []
    for t in range(L):
        h, state = recurrent_step(state, q[..., t, :], k[..., t, :], v[..., t, :],
                                  i_pre[..., t], f_pre[..., t], step=t)
        hs.append(h)
    return T.stack(hs, axis=-2), state


def _chunk(q: Tensor, k: Tensor, v: Tensor, i_pre: Tensor, log_f: Tensor,
           prev: MLSTMState | None, need_state: bool) -> tuple[Tensor, MLSTMState | None]:
    """Outputs (and optionally the end state) for one contiguous block of tokens.

    The block attends to itself through a causally masked gate matrix and to the
    carried ``prev`` state, if any, through a decayed readout.
    """
    bs, c, dqk = q.shape[:-2], q.shape[-2], q.shape[-1]
    sq = (c, c)
    inv_sqrt = 1.0 / math.sqrt(dqk)
    mask = np.broadcast_to(np.tril(np.ones(sq, dtype=bool)), bs + sq)
    # Segment sums are accumulated outward from the diagonal, so the entries
    # that dominate each row avoid cancellation against a long prefix sum.
    row_f = T.where(mask, log_f.reshape(bs + (1, c)).broadcast_to(bs + sq), 0.0)
    seg = row_f.flip(-1).cumsum(-1).flip(-1)          # seg[t, s] = sum_{u=s..t} log_f[u]
    zero_col = _const(np.zeros(bs + (c, 1)), seg)
    decay = T.concat([seg[..., 1:], zero_col], axis=-1) if c > 1 else zero_col
    # gates[t, s] = sum_{u=s+1..t} log_f[u] + i_pre[s] for s <= t
    gates = T.where(mask, decay + i_pre.reshape(bs + (1, c)).broadcast_to(bs + sq), NEG_INF)
    m = gates.data.max(-1)
    if prev is not None:
        F = seg[..., 0]                                  # sum_{u=0..t} log_f[u]
        carried = F + _const(_expand_np(prev.m, bs + (c,)), F)
        m = np.maximum(m, carried.data)
    weights = (gates - _const(m[..., None] + np.zeros(sq[-1:], m.dtype), gates)).exp()
    scores = (q @ k.swapaxes(-1, -2)) * inv_sqrt * weights
    num = scores @ v
    den = scores.sum(-1)
    if prev is not None:
        w_prev = (carried - _const(m, carried)).exp()
        num = num + _expand(w_prev, num.shape) * (q @ prev.C.swapaxes(-1, -2))
        den = den + w_prev * (q @ prev.n.reshape(bs + (dqk, 1))).reshape(bs + (c,))
    with np.errstate(over="ignore"):
        floor = np.exp(-m)
    denom = T.maximum(den.abs(), _const(floor, den))
    h = num / _expand(denom, num.shape)
    if not need_state:
        return h, None

    to_end = gates[..., c - 1, :]                        # sum_{u=s+1..c-1} log_f[u] + i_pre[s]
    m_new = to_end.data.max(-1)
    if prev is not None:
        F_last = F[..., c - 1]
        m_new = np.maximum(m_new, F_last.data + prev.m)
    w = (to_end - _const(m_new[..., None] + np.zeros((c,), m_new.dtype), to_end)).exp()
    k_scaled = k * inv_sqrt
    C_new = (v * _expand(w, v.shape)).swapaxes(-1, -2) @ k_scaled
    n_new = (k_scaled * _expand(w, k_scaled.shape)).sum(-2)
    if prev is not None:
        w_state = (F_last + _const(prev.m - m_new, F_last)).exp()
        C_new = C_new + _expand(w_state, C_new.shape) * prev.C
        n_new = n_new + _expand(w_state, n_new.shape) * prev.n
    return h, MLSTMState(C_new, n_new, m_new)


def _expand_np(a: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    return np.broadcast_to(a.reshape(a.shape + (1,) * (len(shape) - a.ndim)), shape)


def forward_parallel(q: Tensor, k: Tensor, v: Tensor, i_pre: Tensor, f_pre: Tensor) -> Tensor:
    """All outputs at once from an ``L x L`` gate matrix; starts from the zero state."""
    _check_sequence(q, k, v, i_pre, f_pre)
    _check_finite(q, k, v, i_pre, f_pre)
    h, _ = _chunk(q, k, v, i_pre, f_pre.logsigmoid(), None, need_state=False)
    return h


def forward_chunkwise(q: Tensor, k: Tensor, v: Tensor, i_pre: Tensor, f_pre: Tensor, chunk: int,
                      init: MLSTMState | None = None) -> tuple[Tensor, MLSTMState]:
    """Parallel within blocks of ``chunk`` tokens, recurrent across blocks.

    The last block may be shorter. With ``init=None`` the first block has no
    carried state, which makes ``chunk == L`` identical to the parallel form.
    """
    _check_sequence(q, k, v, i_pre, f_pre)
    L = q.shape[-2]
    if not isinstance(chunk, (int, np.integer)) or chunk < 1:
        raise ConfigError(f"chunk size must be a positive integer, got {chunk!r}")
    chunk = min(int(chunk), max(L, 1))
    _check_finite(q, k, v, i_pre, f_pre)
    log_f = f_pre.logsigmoid()
    state = init
    outs = []
    for a in range(0, L, chunk):
        b = min(a + chunk, L)
        h, state = _chunk(q[..., a:b, :], k[..., a:b, :], v[..., a:b, :], i_pre[..., a:b], log_f[..., a:b],
                          state, need_state=True)
        outs.append(h)
    H = outs[0] if len(outs) == 1 else T.concat(outs, axis=-2)
    return H, state


def mlstm(q: Tensor, k: Tensor, v: Tensor, i_pre: Tensor, f_pre: Tensor, mode: str = "parallel",
          chunk: int | None = None) -> Tensor:
    """Hidden states from the zero state in the requested execution mode."""
    if mode == "parallel":
        return forward_parallel(q, k, v, i_pre, f_pre)
    if mode == "recurrent":
        return forward_recurrent(q, k, v, i_pre, f_pre)[0]
    if mode == "chunkwise":
        if chunk is None:
            raise ConfigError("chunkwise mode needs a chunk size")
        return forward_chunkwise(q, k, v, i_pre, f_pre, chunk)[0]
    raise ConfigError(f"unknown mLSTM mode {mode!r}")
