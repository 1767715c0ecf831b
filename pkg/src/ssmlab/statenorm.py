"""Monte Carlo and closed-form analysis of steady-state hidden-state norms.

For the driven diagonal system h_t = Lambda h_{t-1} + B x_t with eigenvalues
drawn from a law on (0, 1), Gaussian B rows and white Gaussian inputs, the
expected squared state norm converges to

    E[|h_inf|^2] = E[|B x|^2] * E[1 / (1 - lambda^2)]

which for a uniform law on [lam_min, lam_max] collapses to the log-ratio
closed form implemented by closed_form_norm. This module simulates the
system, evaluates the closed forms and the general density integral by
adaptive quadrature, fits the asymptotic regimes of the integral near both
ends of (0, 1), checks the |B x| <= sigma_B sigma_x sqrt(d) bound, and
tracks per-layer state norms of a running model across sequence lengths.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .quad import adaptive_quad
from .scan import ScanOverflowError

_DEGENERATE_TOL = 1e-12


@dataclass(frozen=True)
class LambdaLaw:
    """Distribution of the transition eigenvalues on a support inside (0, 1).

    kind:
      "uniform"    uniform on [lam_min, lam_max]
      "degenerate" point mass at lam_min (= lam_max)
      "density"    user density p(lambda) on [lam_min, lam_max], vectorized
    """

    kind: str
    lam_min: float
    lam_max: float
    density: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        if self.kind not in ("uniform", "degenerate", "density"):
            raise ValueError(f"unknown lambda law {self.kind!r}")
        if not (0.0 <= self.lam_min <= self.lam_max):
            raise ValueError("need 0 <= lam_min <= lam_max")
        if self.lam_max >= 1.0:
            raise ValueError("support touching 1 gives a divergent state norm")
        if self.kind == "degenerate" and self.lam_min != self.lam_max:
            raise ValueError("degenerate law needs lam_min == lam_max")
        if self.kind == "density" and self.density is None:
            raise ValueError("density law needs a density callable")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "uniform":
            lams = rng.uniform(self.lam_min, self.lam_max, n)
        elif self.kind == "degenerate":
            lams = np.full(n, self.lam_min)
        else:
            lams = _rejection_sample(self.density, self.lam_min, self.lam_max, rng, n)
        if np.any(lams >= 1.0):
            raise ValueError("sampled eigenvalue >= 1; system would be unstable")
        return lams


def _rejection_sample(p, lo: float, hi: float, rng: np.random.Generator, n: int) -> np.ndarray:
    grid = np.linspace(lo, hi, 4097)
    p_max = float(np.max(p(grid))) * 1.05
    if not math.isfinite(p_max) or p_max <= 0:
        raise ValueError("density must be finite and positive somewhere on its support")
    out = np.empty(n)
    filled = 0
    while filled < n:
        m = max(n - filled, 1024)
        xs = rng.uniform(lo, hi, m)
        keep = rng.uniform(0.0, p_max, m) < p(xs)
        take = min(int(np.sum(keep)), n - filled)
        out[filled:filled + take] = xs[keep][:take]
        filled += take
    return out


@dataclass
class NormExperiment:
    """Specification of one Monte Carlo state-norm run."""

    d: int
    m: int
    t_max: int
    trials: int
    lambda_law: LambdaLaw
    sigma_b2: float
    seed: int = 0

    def __post_init__(self):
        if self.d < 1 or self.m < 1:
            raise ValueError("d and m must be >= 1")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")
        if self.sigma_b2 <= 0:
            raise ValueError("sigma_b2 must be positive")


@dataclass
class NormResult:
    """Monte Carlo estimate of E[|h_t|^2] against the closed-form limit."""

    mc_estimate: float
    mc_stderr: float
    closed_form: float
    ratio: float
    trace: np.ndarray
    trace_stderr: np.ndarray
    e_bx2: float = field(default=float("nan"))


def theorem_sigma_b2(d: int) -> float:
    """Row variance 1/(2d) used by the headline closed-form statement."""
    return 1.0 / (2.0 * d)


def restated_sigma_b2(d: int) -> float:
    """Alternative row variance 1/sqrt(d) used in the derivation's restatement."""
    return 1.0 / math.sqrt(d)


def _run_trial(spec: NormExperiment, seed: np.random.SeedSequence):
    rng = np.random.Generator(np.random.PCG64(seed))
    lams = spec.lambda_law.sample(rng, spec.d)
    b = rng.normal(0.0, math.sqrt(spec.sigma_b2), (spec.d, spec.m))
    e_bx2 = float(np.sum(b * b))  # E_x[|Bx|^2 | B] = |B|_F^2
    x = rng.normal(size=(spec.t_max, spec.m))
    bx = x @ b.T
    h = np.zeros(spec.d)
    sq = np.empty(spec.t_max)
    for t in range(spec.t_max):
        h = lams * h + bx[t]
        sq[t] = h @ h
    return sq, e_bx2


def simulate_state_norm(spec: NormExperiment, workers: int = 1) -> NormResult:
    """Monte Carlo estimate of the squared state norm trajectory and limit.

    Trials use independently spawned seeds and are accumulated in trial
    order, so results are bit-identical for a fixed spec regardless of the
    worker count. The closed-form prediction uses the mean squared Frobenius
    norm of the sampled input matrices rather than a nominal constant.
    """
    seeds = np.random.SeedSequence(spec.seed).spawn(spec.trials)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda s: _run_trial(spec, s), seeds))
    else:
        results = [_run_trial(spec, s) for s in seeds]
    traces = np.stack([r[0] for r in results])
    e_bx2 = float(np.mean([r[1] for r in results]))

    mc_estimate = float(np.mean(traces[:, -1]))
    if spec.trials > 1:
        mc_stderr = float(np.std(traces[:, -1], ddof=1) / math.sqrt(spec.trials))
        trace_stderr = np.std(traces, axis=0, ddof=1) / math.sqrt(spec.trials)
    else:
        mc_stderr = float("nan")
        trace_stderr = np.full(spec.t_max, np.nan)

    law = spec.lambda_law
    if law.kind == "density":
        closed = density_limit(law.density, law.lam_min, law.lam_max, e_bx2)
    else:
        closed = closed_form_norm(law.lam_min, law.lam_max, e_bx2)
    return NormResult(
        mc_estimate=mc_estimate,
        mc_stderr=mc_stderr,
        closed_form=closed,
        ratio=mc_estimate / closed if closed else float("nan"),
        trace=np.mean(traces, axis=0),
        trace_stderr=trace_stderr,
        e_bx2=e_bx2,
    )


def closed_form_norm(lam_min: float, lam_max: float, e_bx2: float) -> float:
    """Steady-state E[|h|^2] for eigenvalues uniform on [lam_min, lam_max].

    E[1 / (1 - lambda^2)] over the uniform law has the exact antiderivative
    atanh, so the limit is

        e_bx2 * (atanh(lam_max) - atanh(lam_min)) / (lam_max - lam_min)
      = e_bx2 * log( (1+lam_max)(1-lam_min) / ((1-lam_max)(1+lam_min)) )
             / (2 (lam_max - lam_min)).

    The degenerate lam_min == lam_max case uses the analytic limit
    e_bx2 / (1 - lambda^2) instead of the 0/0 ratio. Matches the density
    integral and the simulated steady state; the widely quoted variant with
    log((1-lam_min^2)/(1-lam_max^2)) integrates lambda/(1-lambda^2) instead
    and disagrees with both.
    """
    lam_min = float(lam_min)
    lam_max = float(lam_max)
    if not (0.0 <= lam_min <= lam_max):
        raise ValueError("need 0 <= lam_min <= lam_max")
    if lam_max >= 1.0:
        raise ValueError("lam_max >= 1 gives a divergent steady state")
    if e_bx2 < 0:
        raise ValueError("e_bx2 must be non-negative")
    if lam_max - lam_min <= _DEGENERATE_TOL:
        lam = 0.5 * (lam_min + lam_max)
        return e_bx2 / (1.0 - lam * lam)
    coeff = (math.atanh(lam_max) - math.atanh(lam_min)) / (lam_max - lam_min)
    return coeff * e_bx2


def density_limit(
    p: Callable[[np.ndarray], np.ndarray],
    lam_min: float,
    lam_max: float,
    e_bx2: float,
    rel_tol: float = 1e-9,
    check_normalization: bool = True,
) -> float:
    """Steady-state E[|h|^2] for eigenvalues with density p on [lam_min, lam_max].

    Evaluates e_bx2 * integral of p(lambda) / (1 - lambda^2) by adaptive
    quadrature to rel_tol. The density must integrate to 1 on its support
    (validated to 1e-6 unless check_normalization is disabled).
    """
    lam_min = float(lam_min)
    lam_max = float(lam_max)
    if not (0.0 <= lam_min < lam_max):
        raise ValueError("need 0 <= lam_min < lam_max")
    if lam_max >= 1.0:
        raise ValueError("support touching 1 makes the integrand non-integrable")
    if check_normalization:
        mass, _ = adaptive_quad(p, lam_min, lam_max, rel_tol=1e-10)
        if abs(mass - 1.0) > 1e-6:
            raise ValueError(f"density integrates to {mass!r}, not 1")
    val, _ = adaptive_quad(
        lambda lam: p(lam) / (1.0 - lam * lam), lam_min, lam_max, rel_tol=rel_tol
    )
    return float(e_bx2) * val


def rate_mamba(delta: float, lam: float) -> float:
    """Growth-rate figure (delta / 2 lambda) * log(1 / (1 - lambda^2)).

    Diverges as lambda -> 1- and vanishes as lambda -> 0+; monotone
    increasing in between.
    """
    delta = float(delta)
    lam = float(lam)
    if delta <= 0:
        raise ValueError("delta must be positive")
    if not 0.0 < lam < 1.0:
        raise ValueError("lambda must lie strictly in (0, 1)")
    return (delta / (2.0 * lam)) * -math.log1p(-lam * lam)


def rate_mamba2(delta: float, lam: float) -> float:
    """Growth-rate figure delta * lambda / (1 - lambda^2) for the shared-
    eigenvalue (per-head scalar) structure.

    This is the exact small-spread limit of the uniform closed form; the
    first-order variant delta * lambda / (1 - lambda) differs only by the
    bounded factor 1 / (1 + lambda).
    """
    delta = float(delta)
    lam = float(lam)
    if delta <= 0:
        raise ValueError("delta must be positive")
    if not 0.0 < lam < 1.0:
        raise ValueError("lambda must lie strictly in (0, 1)")
    return delta * lam / (1.0 - lam * lam)


def spectral_norm_power(
    mat: np.ndarray, iters: int = 200, tol: float = 1e-12, seed: int = 0
) -> float:
    """Largest singular value of mat via power iteration on mat^T mat."""
    mat = np.asarray(mat, dtype=float)
    rng = np.random.Generator(np.random.PCG64(seed))
    v = rng.normal(size=mat.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(iters):
        w = mat.T @ (mat @ v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v_new = w / nw
        sigma_new = math.sqrt(nw)
        if abs(sigma_new - sigma) <= tol * max(sigma_new, 1.0):
            return sigma_new
        v = v_new
        sigma = sigma_new
    return sigma


def matvec_norm_bound(
    sigma_b: float,
    sigma_x: float,
    d: int,
    samples: int,
    seed: int = 0,
    n_matrices: int = 32,
) -> tuple[float, float]:
    """Check |B x|_2 <= sigma_b * sigma_x * sqrt(d) over random (B, x) pairs.

    Gaussian matrices are rescaled to spectral norm sigma_b (found by power
    iteration); x entries are drawn uniformly inside [-sigma_x, sigma_x].
    Returns (bound, max_observed) and raises if the bound is ever exceeded,
    which would indicate a broken norm computation.
    """
    if sigma_b < 0 or sigma_x < 0 or d < 1 or samples < 1:
        raise ValueError("inputs must be positive")
    bound = sigma_b * sigma_x * math.sqrt(d)
    rng = np.random.Generator(np.random.PCG64(seed))
    n_matrices = min(n_matrices, samples)
    per_mat = -(-samples // n_matrices)  # ceil
    max_observed = 0.0
    for i in range(n_matrices):
        b = rng.normal(size=(d, d))
        cur = spectral_norm_power(b, seed=seed + i + 1)
        if cur > 0 and sigma_b > 0:
            b *= sigma_b / cur
        elif sigma_b == 0.0:
            b[:] = 0.0
        xs = rng.uniform(-sigma_x, sigma_x, (per_mat, d))
        norms = np.linalg.norm(xs @ b.T, axis=1)
        max_observed = max(max_observed, float(np.max(norms)) if norms.size else 0.0)
    # Tiny slack covers power-iteration truncation when rescaling B.
    if max_observed > bound * (1.0 + 1e-9) + 1e-12:
        raise RuntimeError(f"observed |Bx| = {max_observed} exceeds bound {bound}")
    return bound, max_observed


def divergence_slope(
    p: Callable[[np.ndarray], np.ndarray],
    lam_maxes: Sequence[float],
    lam_min: float = 0.0,
) -> tuple[float, float]:
    """Fit integral(p / (1 - lam^2)) against -log(1 - lam_max) near lam_max -> 1.

    For a density continuous at 1 with p(1) > 0 the integral diverges
    logarithmically with slope p(1) / 2. Returns (slope, intercept) of the
    least-squares line.
    """
    lam_maxes = np.asarray(lam_maxes, dtype=float)
    if np.any(lam_maxes <= lam_min) or np.any(lam_maxes >= 1.0):
        raise ValueError("sweep values must lie in (lam_min, 1)")
    vals = np.array([
        adaptive_quad(lambda lam: p(lam) / (1.0 - lam * lam), lam_min, lm, rel_tol=1e-10)[0]
        for lm in lam_maxes
    ])
    xs = -np.log1p(-lam_maxes)
    design = np.stack([xs, np.ones_like(xs)], axis=1)
    coef, *_ = np.linalg.lstsq(design, vals, rcond=None)
    return float(coef[0]), float(coef[1])


def vanishing_ratio(
    lam_max: float,
    p: Callable[[np.ndarray], np.ndarray] | None = None,
    p_at_0: float | None = None,
) -> float:
    """integral(p / (1 - lam^2), 0, lam_max) / (p(0) * lam_max).

    Approaches 1 as lam_max -> 0+ for any density continuous at 0 with
    p(0) > 0: the integral vanishes linearly with the shrinking support.
    Defaults to the uniform density renormalized onto [0, lam_max].
    """
    lam_max = float(lam_max)
    if not 0.0 < lam_max < 1.0:
        raise ValueError("lam_max must lie in (0, 1)")
    if p is None:
        p0 = 1.0 / lam_max
        p = lambda lam: np.full_like(np.asarray(lam, dtype=float), p0)
    else:
        if p_at_0 is None:
            raise ValueError("p_at_0 is required with a custom density")
        p0 = float(p_at_0)
    val, _ = adaptive_quad(
        lambda lam: p(lam) / (1.0 - lam * lam), 0.0, lam_max, rel_tol=1e-11
    )
    return val / (p0 * lam_max)


def track_model_state_norms(
    model,
    corpus: np.ndarray,
    lengths: Sequence[int],
    scales=None,
    n_sequences: int = 2,
) -> list[tuple[int, int, float, float]]:
    """Per-layer max/min state norms of a model over increasing lengths.

    Evaluation windows are prefixes of the same corpus positions at every
    length, so the set of observed steps grows with the length. Returns rows
    (length, layer, max_norm, min_norm) with extrema taken over sequences,
    steps and channels. Scan overflow is re-raised with its location.
    """
    from .model import forward_batch  # local import to avoid a cycle

    lengths = [int(x) for x in lengths]
    if any(b < a for a, b in zip(lengths, lengths[1:])):
        raise ValueError("lengths must be ascending")
    corpus = np.asarray(corpus)
    need = max(lengths) * n_sequences
    if corpus.shape[0] < need:
        raise ValueError(
            f"corpus has {corpus.shape[0]} tokens, need at least {need} "
            f"for {n_sequences} windows of length {max(lengths)}"
        )
    offsets = [i * max(lengths) for i in range(n_sequences)]
    rows: list[tuple[int, int, float, float]] = []
    for length in lengths:
        batch = np.stack([corpus[o:o + length] for o in offsets])
        out = forward_batch(model, batch, scales=scales, collect="norms")
        for layer_idx, norms in enumerate(out["norms"]):
            if not np.all(np.isfinite(norms)):
                bad = np.argwhere(~np.isfinite(norms))
                raise ScanOverflowError(step=int(bad[0][1]), layer=layer_idx)
            rows.append((length, layer_idx, float(np.max(norms)), float(np.min(norms))))
    return rows


def state_norm_ratios(rows: Sequence[tuple[int, int, float, float]]) -> dict[int, float]:
    """Collapse track_model_state_norms rows to max/min ratio per length."""
    per_length: dict[int, tuple[float, float]] = {}
    for length, _, mx, mn in rows:
        cur = per_length.get(length, (-math.inf, math.inf))
        per_length[length] = (max(cur[0], mx), min(cur[1], mn))
    return {length: mx / mn for length, (mx, mn) in sorted(per_length.items())}
