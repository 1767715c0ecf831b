"""Eigenvalue spectrum of the continuous transition map and its rescaling.

Each layer's transition diagonal a > 0 induces eigenvalues lambda = exp(-a)
in (0, 1). Raising the spectrum to a power s (equivalently multiplying a by
s) compresses values toward 0 for s > 1 and inflates them toward 1 for
s < 1; the operational counterpart in a running model is the a_scale hook of
the discretization, which this module only mirrors analytically.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .scan import SsmLayerParams


@dataclass
class SpectrumReport:
    """Per-layer descending eigenvalues with summary statistics."""

    eigenvalues: np.ndarray  # (n_layers, k), rows sorted descending
    lam_max: np.ndarray = field(init=False)
    lam_min: np.ndarray = field(init=False)
    frac_above_099: np.ndarray = field(init=False)
    frac_below_001: np.ndarray = field(init=False)

    def __post_init__(self):
        lams = np.asarray(self.eigenvalues, dtype=float)
        if lams.ndim != 2:
            raise ValueError("eigenvalues must be a (n_layers, k) matrix")
        if np.any(lams <= 0) or np.any(lams >= 1):
            raise ValueError("eigenvalues must lie strictly in (0, 1)")
        if np.any(np.diff(lams, axis=1) > 0):
            raise ValueError("rows must be sorted descending")
        self.eigenvalues = lams
        self.lam_max = lams[:, 0]
        self.lam_min = lams[:, -1]
        self.frac_above_099 = np.mean(lams > 0.99, axis=1)
        self.frac_below_001 = np.mean(lams < 0.01, axis=1)

    @property
    def n_layers(self) -> int:
        return self.eigenvalues.shape[0]


def layer_spectrum(params: SsmLayerParams) -> np.ndarray:
    """Descending eigenvalues exp(-a_i) of one layer's continuous transition.

    The mamba2 variant reports one value per head.
    """
    a = params.a_diag
    if params.variant == "mamba2":
        a = a.reshape(params.heads, -1)[:, 0]
    return np.sort(np.exp(-a))[::-1]


def model_spectrum(model) -> SpectrumReport:
    """Stack every layer's descending spectrum into a report (rows = layers).

    Accepts anything exposing n_layers and layer_view(i) -> SsmLayerParams,
    such as a trained ToyModel.
    """
    if model.n_layers < 1:
        raise ValueError("model must have at least one layer")
    rows = [layer_spectrum(model.layer_view(i)) for i in range(model.n_layers)]
    return SpectrumReport(eigenvalues=np.stack(rows))


def scale_spectrum(lams: np.ndarray, s: float) -> np.ndarray:
    """Raise a spectrum elementwise to the power s (s > 0).

    Equivalent to multiplying the transition diagonal by s, since
    exp(-s * a) = lambda ** s. Preserves descending order for any s > 0.
    """
    s = float(s)
    if s <= 0:
        raise ValueError("scaling exponent must be strictly positive")
    lams = np.asarray(lams, dtype=float)
    if np.any(lams <= 0) or np.any(lams >= 1):
        raise ValueError("spectrum values must lie strictly in (0, 1)")
    return lams ** s
