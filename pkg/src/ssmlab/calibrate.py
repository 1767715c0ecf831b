"""Training-free calibration of per-layer scaling factors on a frozen model.

The factors rescale either the transition diagonal ("a" target) or the
discretization steps ("delta" target) through the hooks of the scan; model
weights are never touched, which every entry point asserts via a parameter
checksum. Two calibration functions are provided: a two-sided SPSA loop
that needs only forward passes, and exact Adam descent on the hand-derived
gradients of the calibration loss with respect to the factors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .model import ToyModel, loss_and_grads, model_checksum, sequence_loss

CLAMP_FLOOR = 0.001
TARGETS = ("a", "delta")
GRANULARITIES = ("layer", "channel", "head")


class CalibrationDivergedError(RuntimeError):
    """Calibration lost all usable objective signal or produced bad gradients."""


@dataclass
class ScalingFactors:
    """Positive multipliers, one column per layer, applied through scan hooks.

    values has shape (d_s, L): d_s = 1 for a per-layer scalar, d_h for
    per-channel factors, or the head count for per-head factors (mamba2).
    Entries are clamped to stay >= 0.001.
    """

    values: np.ndarray
    target: str = "a"
    granularity: str = "layer"

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if self.target not in TARGETS:
            raise ValueError(f"target must be one of {TARGETS}")
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"granularity must be one of {GRANULARITIES}")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < CLAMP_FLOOR):
            raise ValueError(f"factors must be finite and >= {CLAMP_FLOOR}")

    @property
    def n_layers(self) -> int:
        return self.values.shape[1]

    def clamped(self, values: np.ndarray) -> "ScalingFactors":
        return ScalingFactors(
            values=np.maximum(values, CLAMP_FLOOR),
            target=self.target,
            granularity=self.granularity,
        )


@dataclass
class CalibrationConfig:
    """Hyperparameters and data for one calibration run.

    calib_set holds token sequences of the target context length; masks may
    mark the positions that contribute to the loss (e.g. answer spans).
    """

    calib_set: list[np.ndarray]
    c: float = 0.01
    eta: float = 0.05
    iterations: int = 300
    seed: int = 0
    masks: list[np.ndarray] | None = None

    def __post_init__(self):
        if self.c <= 0 or self.eta <= 0:
            raise ValueError("c and eta must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not self.calib_set:
            raise ValueError("calibration set must be non-empty")


def factor_width(model: ToyModel, granularity: str) -> int:
    if granularity == "layer":
        return 1
    if granularity == "channel":
        return model.cfg.d_h
    if model.cfg.variant != "mamba2":
        raise ValueError("head granularity requires the mamba2 variant")
    return model.cfg.heads


def init_factors(n_layers: int, d_s: int, seed: int = 0,
                 target: str = "a", granularity: str = "layer") -> ScalingFactors:
    """Uniform(0, 1] starting factors with the clamp floor applied."""
    if n_layers < 1 or d_s < 1:
        raise ValueError("n_layers and d_s must be >= 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    values = np.maximum(rng.uniform(0.0, 1.0, (d_s, n_layers)), CLAMP_FLOOR)
    return ScalingFactors(values=values, target=target, granularity=granularity)


def constant_factors(model: ToyModel, factor: float, target: str) -> ScalingFactors:
    """One fixed factor broadcast to every layer (the no-tuning baseline)."""
    if factor <= 0:
        raise ValueError("factor must be positive")
    return ScalingFactors(
        values=np.full((1, model.cfg.n_layers), float(factor)),
        target=target,
        granularity="layer",
    )


def resolve_scales(factors: ScalingFactors | None, model: ToyModel):
    """Expand factors into the per-layer (a_scale, delta_scale) hook values."""
    if factors is None:
        return None
    if factors.n_layers != model.cfg.n_layers:
        raise ValueError(
            f"factors cover {factors.n_layers} layers, model has {model.cfg.n_layers}"
        )
    d_h = model.cfg.d_h
    out = []
    for i in range(model.cfg.n_layers):
        col = factors.values[:, i]
        if factors.granularity == "layer":
            vec = np.full(d_h, col[0])
        elif factors.granularity == "channel":
            if col.shape[0] != d_h:
                raise ValueError("channel granularity needs d_s == d_h")
            vec = col.copy()
        else:
            heads = model.cfg.heads
            if model.cfg.variant != "mamba2" or col.shape[0] != heads:
                raise ValueError("head granularity needs mamba2 and d_s == heads")
            vec = np.repeat(col, d_h // heads)
        out.append((vec, None) if factors.target == "a" else (None, vec))
    return out


def _reduce_scale_grad(grad_vec: np.ndarray, model: ToyModel, granularity: str) -> np.ndarray:
    if granularity == "layer":
        return np.array([grad_vec.sum()])
    if granularity == "channel":
        return grad_vec
    return grad_vec.reshape(model.cfg.heads, -1).sum(axis=1)


def eval_loss(
    model: ToyModel,
    factors: ScalingFactors | None,
    calib_set: Sequence[np.ndarray],
    masks: Sequence[np.ndarray] | None = None,
) -> float:
    """Mean next-token cross entropy (nats/token) of the scaled frozen model.

    Forward passes only; asserts via checksum that the parameters are
    untouched. A scan that overflows to non-finite values yields +inf, a
    legitimate (very bad) objective value the optimizers can move away from.
    """
    before = model_checksum(model)
    scales = resolve_scales(factors, model)
    total_nll = 0.0
    total_n = 0
    overflowed = False
    for idx, seq in enumerate(calib_set):
        seq = np.asarray(seq)
        tokens, targets = seq[None, :-1], seq[None, 1:]
        mask = None
        if masks is not None:
            mask = np.asarray(masks[idx])[None, 1:]
        try:
            loss = sequence_loss(model, tokens, targets, mask=mask, scales=scales)
        except FloatingPointError:
            loss = math.inf
        if not math.isfinite(loss):
            overflowed = True
            continue
        n = int(mask.sum()) if mask is not None else targets.size
        total_nll += loss * n
        total_n += n
    if model_checksum(model) != before:
        raise AssertionError("model parameters changed during evaluation")
    if overflowed:
        return math.inf
    return total_nll / total_n


def _batched_eval(model, factors, cfg: CalibrationConfig) -> float:
    """eval_loss over the calibration set stacked into one batch when possible."""
    lens = {len(np.asarray(s)) for s in cfg.calib_set}
    if len(lens) != 1:
        return eval_loss(model, factors, cfg.calib_set, cfg.masks)
    scales = resolve_scales(factors, model)
    seqs = np.stack([np.asarray(s) for s in cfg.calib_set])
    mask = None
    if cfg.masks is not None:
        mask = np.stack([np.asarray(m) for m in cfg.masks])[:, 1:]
    try:
        loss = sequence_loss(model, seqs[:, :-1], seqs[:, 1:], mask=mask, scales=scales)
    except FloatingPointError:
        return math.inf
    return loss if math.isfinite(loss) else math.inf


def spsa_calibrate(
    model: ToyModel,
    cfg: CalibrationConfig,
    s0: ScalingFactors,
    objective: Callable[[ScalingFactors], float] | None = None,
) -> tuple[ScalingFactors, np.ndarray]:
    """Two-sided SPSA descent on the calibration loss.

    Each iteration perturbs the factors by +-c along a Rademacher direction,
    forms the gradient estimate (l+ - l-) / (2c) * delta (multiplying by
    delta, since its entries are +-1), steps with rate eta and clamps at the
    floor. An infinite one-sided loss contributes sign information only: the
    factors take a step of magnitude eta * c away from the exploding side.
    More than 10 consecutive iterations with both sides infinite abort.

    Returns the calibrated factors and the per-iteration loss trace (mean of
    the two side evaluations). The trajectory is a pure function of
    (model, cfg, s0). An injected objective replaces the model evaluation
    entirely (model may then be None), which the oracle tests rely on.
    """
    before = model_checksum(model) if model is not None else None
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    if objective is None:
        objective = lambda f: _batched_eval(model, f, cfg)
    s = np.maximum(np.array(s0.values, dtype=float), CLAMP_FLOOR)
    trace = np.empty(cfg.iterations)
    dead_iters = 0
    for k in range(cfg.iterations):
        delta = rng.integers(0, 2, size=s.shape) * 2.0 - 1.0
        f_plus = s0.clamped(s + cfg.c * delta)
        f_minus = s0.clamped(s - cfg.c * delta)
        l_plus = objective(f_plus)
        l_minus = objective(f_minus)
        finite_p, finite_m = math.isfinite(l_plus), math.isfinite(l_minus)
        if finite_p and finite_m:
            dead_iters = 0
            ghat = (l_plus - l_minus) / (2.0 * cfg.c) * delta
            s = s - cfg.eta * ghat
            trace[k] = 0.5 * (l_plus + l_minus)
        elif finite_p or finite_m:
            dead_iters = 0
            direction = -delta if not finite_p else delta
            s = s + cfg.eta * cfg.c * direction
            trace[k] = l_plus if finite_p else l_minus
        else:
            dead_iters += 1
            trace[k] = math.inf
            if dead_iters > 10:
                raise CalibrationDivergedError(
                    f"both SPSA sides non-finite for {dead_iters} consecutive "
                    f"iterations (iteration {k})"
                )
        s = np.maximum(s, CLAMP_FLOOR)
    if model is not None and model_checksum(model) != before:
        raise AssertionError("model parameters changed during calibration")
    return s0.clamped(s), trace


def grad_calibrate(
    model: ToyModel,
    cfg: CalibrationConfig,
    s0: ScalingFactors,
) -> tuple[ScalingFactors, np.ndarray]:
    """Adam descent on exact dLoss/dFactors from the reverse pass.

    The chain rule runs through the scan: for the "a" target the per-step
    transition depends on the factors through exp(-delta * s * a); for the
    "delta" target both the transition and the input map do. Standard Adam
    moments (0.9 / 0.999, eps 1e-8) and the 0.001 clamp after every step.
    """
    before = model_checksum(model)
    s = np.maximum(np.array(s0.values, dtype=float), CLAMP_FLOOR)
    m_state = np.zeros_like(s)
    v_state = np.zeros_like(s)
    trace = np.empty(cfg.iterations)
    lens = {len(np.asarray(q)) for q in cfg.calib_set}
    if len(lens) != 1:
        raise ValueError("grad_calibrate needs equal-length calibration sequences")
    seqs = np.stack([np.asarray(q) for q in cfg.calib_set])
    mask = None
    if cfg.masks is not None:
        mask = np.stack([np.asarray(m) for m in cfg.masks])[:, 1:]
    for k in range(cfg.iterations):
        factors = s0.clamped(s)
        scales = resolve_scales(factors, model)
        loss, _, scale_grads = loss_and_grads(
            model, seqs[:, :-1], seqs[:, 1:], mask=mask, scales=scales,
            want_param_grads=False, want_scale_grads=True,
        )
        key = "a_scale" if s0.target == "a" else "delta_scale"
        g = np.stack(
            [_reduce_scale_grad(sg[key], model, s0.granularity) for sg in scale_grads],
            axis=1,
        )
        if not (math.isfinite(loss) and np.all(np.isfinite(g))):
            raise CalibrationDivergedError(f"non-finite gradient at iteration {k}")
        trace[k] = loss
        t = k + 1
        m_state = 0.9 * m_state + 0.1 * g
        v_state = 0.999 * v_state + 0.001 * g * g
        m_hat = m_state / (1 - 0.9**t)
        v_hat = v_state / (1 - 0.999**t)
        s = np.maximum(s - cfg.eta * m_hat / (np.sqrt(v_hat) + 1e-8), CLAMP_FLOOR)
    if model_checksum(model) != before:
        raise AssertionError("model parameters changed during calibration")
    return s0.clamped(s), trace
