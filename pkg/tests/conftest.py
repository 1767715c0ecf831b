import os

# Pin BLAS to one thread before numpy loads: keeps every reduction order,
# and with it every trained artifact and CSV byte, identical across machines.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import numpy as np
import pytest

from ssmlab.scan import SsmLayerParams


def random_layer(rng: np.random.Generator, d_h: int = 4, d_m: int = 3,
                 variant: str = "mamba", heads: int | None = None) -> SsmLayerParams:
    if variant == "mamba2":
        a = np.repeat(rng.uniform(0.1, 3.0, heads), d_h // heads)
    else:
        a = rng.uniform(0.1, 3.0, d_h)
    return SsmLayerParams(
        a_diag=a,
        w_delta=rng.normal(0.0, 0.3, (d_h, d_m)),
        b_delta=rng.normal(-2.0, 0.3, d_h),
        w_b=rng.normal(0.0, 0.5, (d_h, d_m)),
        w_c=rng.normal(0.0, 0.5, (d_h, d_m)),
        variant=variant,
        heads=heads,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(0)
