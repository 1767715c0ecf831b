"""Discretized selective state-space recurrence and its algebraic mirrors.

One layer carries a diagonal transition with positive entries a_i, so the
continuous-time eigenvalues exp(-a_i) sit strictly inside (0, 1). Each step
derives input-dependent quantities from the conditioning vector x_t:

    delta_t = softplus(W_delta x_t + b_delta) * delta_scale     (per channel)
    a_bar_t = exp(-delta_t * (a_scale * a))                     in (0, 1)
    b_bar_t = delta_t * (W_b x_t)
    c_t     = W_c x_t

and the state evolves per driving channel m as

    h_t[:, m] = a_bar_t * h_{t-1}[:, m] + b_bar_t * x_t[m]
    y_t[m]    = <c_t, h_t[:, m]>

The a_scale / delta_scale hooks are applied inside discretization, never to
the stored parameters, so calibration can rescale a frozen layer. Two
variants are supported: "mamba" (independent diagonal entries) and "mamba2"
(one shared entry per head).

All math is float64. Scans are strictly sequential in time; everything here
is a pure function of its inputs and safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

VARIANTS = ("mamba", "mamba2")


class ScanOverflowError(FloatingPointError):
    """State overflowed to a non-finite value during a scan."""

    def __init__(self, step: int, layer: int | None = None):
        self.step = step
        self.layer = layer
        where = f"step {step}" if layer is None else f"layer {layer}, step {step}"
        super().__init__(f"state overflow at {where}")


def softplus(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.logaddexp(0.0, x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class SsmLayerParams:
    """Continuous parameters of one selective-SSM layer.

    a_diag holds the positive transition diagonal (d_h,); for the "mamba2"
    variant the entries must be constant within each of `heads` equal-size
    head groups. The projections map R^{d_m} conditioning inputs to the
    per-step delta pre-activation, B_t and C_t, each of size d_h.
    """

    a_diag: np.ndarray
    w_delta: np.ndarray
    b_delta: np.ndarray
    w_b: np.ndarray
    w_c: np.ndarray
    variant: str = "mamba"
    heads: int | None = None

    def __post_init__(self):
        self.a_diag = np.asarray(self.a_diag, dtype=float)
        self.w_delta = np.asarray(self.w_delta, dtype=float)
        self.b_delta = np.asarray(self.b_delta, dtype=float)
        self.w_b = np.asarray(self.w_b, dtype=float)
        self.w_c = np.asarray(self.w_c, dtype=float)
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        d_h = self.a_diag.shape[0]
        for name, mat in (("w_delta", self.w_delta), ("w_b", self.w_b), ("w_c", self.w_c)):
            if mat.ndim != 2 or mat.shape[0] != d_h:
                raise ValueError(f"{name} must have shape (d_h, d_m), got {mat.shape}")
        if self.b_delta.shape != (d_h,):
            raise ValueError(f"b_delta must have shape ({d_h},), got {self.b_delta.shape}")
        if not np.all(np.isfinite(self.a_diag)) or np.any(self.a_diag <= 0):
            raise ValueError("a_diag entries must be finite and strictly positive")
        if self.variant == "mamba2":
            if self.heads is None or d_h % self.heads != 0:
                raise ValueError("mamba2 requires heads dividing d_h")
            grouped = self.a_diag.reshape(self.heads, -1)
            if not np.all(grouped == grouped[:, :1]):
                raise ValueError("mamba2 requires a_diag constant within each head")

    @property
    def d_h(self) -> int:
        return self.a_diag.shape[0]

    @property
    def d_m(self) -> int:
        return self.w_delta.shape[1]


@dataclass
class DiscretizedStep:
    """One step of discretized dynamics; a_bar strictly inside (0, 1)."""

    a_bar: np.ndarray
    b_bar: np.ndarray
    c: np.ndarray
    delta: np.ndarray


@dataclass
class ScanState:
    """Hidden state after t steps; h has one d_h column per driving channel."""

    h: np.ndarray
    t: int


class CumulativeTransition(NamedTuple):
    stepwise: np.ndarray
    summed: np.ndarray
    max_rel_diff: float


def resolve_scale(
    scale, d_h: int, heads: int | None = None, name: str = "scale"
) -> np.ndarray:
    """Broadcast a scaling hook to per-channel shape (d_h,).

    Accepts None (identity), a positive scalar, a per-channel vector (d_h,),
    or a per-head vector (heads,) for the mamba2 variant.
    """
    if scale is None:
        return np.ones(d_h)
    arr = np.atleast_1d(np.asarray(scale, dtype=float))
    if arr.ndim != 1:
        raise ValueError(f"{name} must be scalar or 1-d")
    if arr.shape[0] == 1:
        out = np.full(d_h, arr[0])
    elif arr.shape[0] == d_h:
        out = arr.astype(float, copy=True)
    elif heads is not None and arr.shape[0] == heads:
        out = np.repeat(arr, d_h // heads)
    else:
        raise ValueError(f"{name} has length {arr.shape[0]}, expected 1, {d_h}" +
                         (f" or {heads}" if heads else ""))
    if not np.all(np.isfinite(out)) or np.any(out <= 0):
        raise ValueError(f"{name} entries must be finite and strictly positive")
    return out


def discretize(
    params: SsmLayerParams,
    x_t: np.ndarray,
    a_scale=None,
    delta_scale=None,
) -> DiscretizedStep:
    """Discretize one step of the layer dynamics for conditioning input x_t."""
    x_t = np.asarray(x_t, dtype=float)
    if not np.all(np.isfinite(x_t)):
        raise ValueError("non-finite conditioning input")
    a_s = resolve_scale(a_scale, params.d_h, params.heads, "a_scale")
    d_s = resolve_scale(delta_scale, params.d_h, params.heads, "delta_scale")
    delta = softplus(params.w_delta @ x_t + params.b_delta) * d_s
    a_bar = np.exp(-delta * (a_s * params.a_diag))
    b_bar = delta * (params.w_b @ x_t)
    c = params.w_c @ x_t
    return DiscretizedStep(a_bar=a_bar, b_bar=b_bar, c=c, delta=delta)


def layer_signals(
    params: SsmLayerParams,
    xs: np.ndarray,
    a_scale=None,
    delta_scale=None,
    keep_cache: bool = False,
) -> dict:
    """Vectorized discretization over a batched sequence xs of shape (B, L, d_m).

    Returns delta, a_bar, b_bar, cvec of shape (B, L, d_h) plus the
    intermediates needed by the reverse pass when keep_cache is set.
    """
    a_s = resolve_scale(a_scale, params.d_h, params.heads, "a_scale")
    d_s = resolve_scale(delta_scale, params.d_h, params.heads, "delta_scale")
    pre = xs @ params.w_delta.T + params.b_delta
    sp = softplus(pre)
    delta = sp * d_s
    a_eff = a_s * params.a_diag
    a_bar = np.exp(-delta * a_eff)
    bmat = xs @ params.w_b.T
    b_bar = delta * bmat
    cvec = xs @ params.w_c.T
    out = {"delta": delta, "a_bar": a_bar, "b_bar": b_bar, "cvec": cvec}
    if keep_cache:
        out.update(
            {"pre": pre, "sp": sp, "bmat": bmat, "a_eff": a_eff,
             "a_scale": a_s, "delta_scale": d_s}
        )
    return out


def _time_major(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(arr.transpose(1, 0, 2))


_SCAN_CHUNK = 128


def scan_core(
    a_bar: np.ndarray,
    b_bar: np.ndarray,
    cvec: np.ndarray,
    drive: np.ndarray,
    h0: np.ndarray | None = None,
    collect_states: bool = False,
    collect_norms: bool = False,
) -> dict:
    """Run the recurrence over (B, L, ...) signal arrays.

    drive carries one scalar input per channel, shape (B, L, d_m); the state
    is (B, d_h, d_m). Returns outputs ys (B, L, d_m), the final state, and
    optionally the full state history / per-channel state norms.

    The time loop is the only sequential part and is kept to two ufunc calls
    per step: input contributions b_bar_t (x) x_t are materialized one chunk
    at a time, the recurrence fills the chunk in place, and outputs / norms
    contract each finished chunk in single einsum calls. Without
    collect_states, peak memory stays at one chunk per call.
    """
    B, L, d_h = a_bar.shape
    d_m = drive.shape[-1]
    a_t = _time_major(a_bar)[..., None]
    b_t = _time_major(b_bar)[..., None]
    x_t = _time_major(drive)[:, :, None, :]
    h = np.zeros((B, d_h, d_m)) if h0 is None else np.array(h0, dtype=float, copy=True)
    states = np.empty((L, B, d_h, d_m)) if collect_states else None
    norms = np.empty((B, L, d_m)) if collect_norms else None
    ys = np.empty((B, L, d_m))
    tmp = np.empty((B, d_h, d_m))
    buf = None
    with np.errstate(over="ignore", invalid="ignore"):
        for t0 in range(0, L, _SCAN_CHUNK):
            t1 = min(t0 + _SCAN_CHUNK, L)
            n = t1 - t0
            if collect_states:
                seg = states[t0:t1]
            else:
                if buf is None:
                    buf = np.empty((min(_SCAN_CHUNK, L), B, d_h, d_m))
                seg = buf[:n]
            np.multiply(b_t[t0:t1], x_t[t0:t1], out=seg)
            for i in range(n):
                np.multiply(a_t[t0 + i], h, out=tmp)
                seg[i] += tmp
                h = seg[i]
            ys[:, t0:t1] = np.einsum("blh,lbhm->blm", cvec[:, t0:t1], seg)
            if collect_norms:
                norms[:, t0:t1] = np.sqrt(np.einsum("lbhm,lbhm->blm", seg, seg))
            if not collect_states or t1 == L:
                h = h.copy()
    hist = states.transpose(1, 0, 2, 3) if collect_states else None
    return {"ys": ys, "h_final": h, "states": hist, "norms": norms}


def scan_backward(
    d_ys: np.ndarray,
    a_bar: np.ndarray,
    b_bar: np.ndarray,
    cvec: np.ndarray,
    drive: np.ndarray,
    states: np.ndarray,
    h0: np.ndarray | None = None,
) -> dict:
    """Reverse pass of scan_core.

    Given dLoss/dys, walks the recurrence backward and returns gradients with
    respect to the per-step signals (d_a_bar, d_b_bar, d_cvec) and the driving
    inputs (d_drive). states must be the history recorded by scan_core. Only
    the dH recursion runs step by step; every contraction against it is one
    vectorized einsum over the whole sequence.
    """
    B, L, d_h = a_bar.shape
    a_t = _time_major(a_bar)[..., None]
    # Seed terms c_t (x) dy_t for the whole sequence, then walk
    # dH_t = seed_t + a_bar_{t+1} * dH_{t+1} from the end, in place.
    dhs = np.empty((L, B, d_h, drive.shape[-1]))
    np.multiply(_time_major(cvec)[..., None], _time_major(d_ys)[:, :, None, :], out=dhs)
    tmp = np.empty_like(dhs[0])
    for t in range(L - 2, -1, -1):
        np.multiply(a_t[t + 1], dhs[t + 1], out=tmp)
        dhs[t] += tmp
    dH = dhs.transpose(1, 0, 2, 3)
    d_cvec = np.einsum("blhm,blm->blh", states, d_ys)
    d_b_bar = np.einsum("blhm,blm->blh", dH, drive)
    d_drive = np.einsum("blh,blhm->blm", b_bar, dH)
    d_a_bar = np.empty_like(a_bar)
    d_a_bar[:, 1:] = np.einsum("blhm,blhm->blh", dH[:, 1:], states[:, :-1])
    if h0 is None:
        d_a_bar[:, 0] = 0.0
    else:
        d_a_bar[:, 0] = np.einsum("bhm,bhm->bh", dH[:, 0], h0)
    return {
        "d_a_bar": d_a_bar,
        "d_b_bar": d_b_bar,
        "d_cvec": d_cvec,
        "d_drive": d_drive,
        "d_h0": a_bar[:, 0, :, None] * dH[:, 0],
    }


def signals_backward(grads: dict, sig: dict, xs: np.ndarray, params: SsmLayerParams) -> dict:
    """Chain scan_backward results through the discretization projections.

    Returns gradients for the layer parameters, the conditioning inputs, and
    both scaling hooks (per channel, before any granularity reduction).
    """
    d_a_bar = grads["d_a_bar"]
    d_b_bar = grads["d_b_bar"]
    d_cvec = grads["d_cvec"]
    delta, a_bar, bmat = sig["delta"], sig["a_bar"], sig["bmat"]
    a_eff, sp, pre = sig["a_eff"], sig["sp"], sig["pre"]

    d_delta = d_a_bar * (-a_eff) * a_bar + d_b_bar * bmat
    d_bmat = d_b_bar * delta
    # a_eff = a_scale * a_diag, so both factors chain from one accumulated term.
    d_a_eff = np.einsum("blh->h", d_a_bar * (-delta) * a_bar)
    d_sp = d_delta * sig["delta_scale"]
    d_delta_scale = np.einsum("blh->h", d_delta * sp)
    d_pre = d_sp * sigmoid(pre)
    return {
        "d_w_delta": np.einsum("blh,blm->hm", d_pre, xs),
        "d_b_delta": np.einsum("blh->h", d_pre),
        "d_w_b": np.einsum("blh,blm->hm", d_bmat, xs),
        "d_w_c": np.einsum("blh,blm->hm", d_cvec, xs),
        "d_a_diag": d_a_eff * sig["a_scale"],
        "d_a_scale": d_a_eff * params.a_diag,
        "d_delta_scale": d_delta_scale,
        "d_xs": d_pre @ params.w_delta + d_bmat @ params.w_b + d_cvec @ params.w_c,
    }


def selective_scan(
    params: SsmLayerParams,
    inputs: np.ndarray,
    h0=None,
    a_scale=None,
    delta_scale=None,
):
    """Run the selective recurrence over one sequence.

    inputs: (L, d_m) conditioning vectors, which also drive the state (each
    channel m is driven by its own component). Returns (outputs (L, d_m),
    final ScanState, state_norm_trace (L, d_m)) where the trace holds the
    2-norm of each channel's d_h state at every step. Raises
    ScanOverflowError at the first step whose state stops being finite.
    """
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim == 1:
        inputs = inputs[:, None]
    if inputs.ndim != 2 or inputs.shape[0] < 1:
        raise ValueError("inputs must be a non-empty (L, d_m) sequence")
    if not np.all(np.isfinite(inputs)):
        raise ValueError("non-finite scan input")
    L, d_m = inputs.shape
    sig = layer_signals(params, inputs[None], a_scale, delta_scale)
    a_bar, b_bar, cvec = sig["a_bar"][0], sig["b_bar"][0], sig["cvec"][0]
    if h0 is None:
        h = np.zeros((params.d_h, d_m))
    else:
        h = np.array(h0.h if isinstance(h0, ScanState) else h0, dtype=float, copy=True)
        if h.ndim == 1:
            h = np.broadcast_to(h[:, None], (params.d_h, d_m)).copy()
        if not np.all(np.isfinite(h)):
            raise ValueError("non-finite initial state")
    outputs = np.empty((L, d_m))
    norm_trace = np.empty((L, d_m))
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(L):
            h = a_bar[t, :, None] * h + b_bar[t, :, None] * inputs[t, None, :]
            if not np.all(np.isfinite(h)):
                raise ScanOverflowError(step=t)
            outputs[t] = cvec[t] @ h
            norm_trace[t] = np.sqrt(np.einsum("hm,hm->m", h, h))
    return outputs, ScanState(h=h, t=L), norm_trace


def materialize_mixing_matrix(
    params: SsmLayerParams,
    inputs: np.ndarray,
    a_scale=None,
    delta_scale=None,
    max_len: int = 4096,
):
    """Build the lower-triangular mixing matrix M and the outputs Y = M @ X.

    M[i, j] = <c_i, (prod_{t=j+1..i} a_bar_t) * b_bar_j> for j <= i and zero
    above the diagonal; Y reproduces selective_scan applied to the same
    inputs. Guarded to sequences of at most max_len steps.
    """
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim == 1:
        inputs = inputs[:, None]
    L = inputs.shape[0]
    if L > max_len:
        raise ValueError(f"sequence length {L} exceeds materialization guard {max_len}")
    if not np.all(np.isfinite(inputs)):
        raise ValueError("non-finite scan input")
    sig = layer_signals(params, inputs[None], a_scale, delta_scale)
    a_bar, b_bar, cvec = sig["a_bar"][0], sig["b_bar"][0], sig["cvec"][0]
    m = np.zeros((L, L))
    for i in range(L):
        m[i, i] = cvec[i] @ b_bar[i]
        prod = np.ones(params.d_h)
        for j in range(i - 1, -1, -1):
            prod = prod * a_bar[j + 1]
            m[i, j] = cvec[i] @ (prod * b_bar[j])
    return m, m @ inputs


def cumulative_transition(a_diag: np.ndarray, deltas: np.ndarray) -> CumulativeTransition:
    """Compare the stepwise product of transitions with its collapsed form.

    Computes prod_t exp(-a * delta_t) one factor at a time and exp(-a * sum_t
    delta_t) from the summed steps, returning both along with their largest
    elementwise relative difference.
    """
    a_diag = np.asarray(a_diag, dtype=float)
    deltas = np.asarray(deltas, dtype=float)
    if not (np.all(np.isfinite(a_diag)) and np.all(np.isfinite(deltas))):
        raise ValueError("non-finite input")
    if np.any(deltas <= 0):
        raise ValueError("all deltas must be strictly positive")
    stepwise = np.ones_like(a_diag)
    for d in deltas:
        stepwise = stepwise * np.exp(-a_diag * d)
    summed = np.exp(-a_diag * float(np.sum(deltas)))
    denom = np.maximum(np.maximum(np.abs(stepwise), np.abs(summed)), np.finfo(float).tiny)
    max_rel = float(np.max(np.abs(stepwise - summed) / denom))
    return CumulativeTransition(stepwise=stepwise, summed=summed, max_rel_diff=max_rel)
