"""Population-convention moments (divide by n, never n - 1).

Every bound in the package is built from these helpers so the closed-form
identities hold exactly in-sample.
"""

from __future__ import annotations

import numpy as np
from numpy.typing import ArrayLike


def pop_var(x: ArrayLike) -> float:
    x = np.asarray(x, dtype=float)
    d = x - x.mean()
    return float(np.dot(d, d) / x.size)


def pop_cov(x: ArrayLike, y: ArrayLike) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return float(np.dot(x - x.mean(), y - y.mean()) / x.size)


def pop_cor(x: ArrayLike, y: ArrayLike) -> float:
    """Pearson correlation; 0.0 when either vector is constant."""
    vx = pop_var(x)
    vy = pop_var(y)
    if vx <= 0.0 or vy <= 0.0:
        return 0.0
    r = pop_cov(x, y) / np.sqrt(vx * vy)
    return float(np.clip(r, -1.0, 1.0))
