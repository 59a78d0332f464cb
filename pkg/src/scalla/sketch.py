"""Randomized tangent-kernel estimation from JVP sketches.

For any projection v with zero mean and identity covariance,
E[ (J(x) v)(J(x') v)^T ] = J(x) J(x')^T, so averaging outer products of
JVP sketches gives an unbiased kernel estimate without ever forming a
Jacobian. Rademacher projections are the default: their estimator
variance is never larger than the Gaussian one.
"""

from __future__ import annotations

import numpy as np

from .diff import jvp, jvp_batch
from .network import NetworkSpec, TangentVector

PROJECTION_STREAM = 0
BATCH_STREAM = 1


def projection_seed(run_seed: int, step: int, draw: int = 0) -> tuple[int, ...]:
    """Counter-based seed so projection streams are reproducible and
    independent of how work is parallelized within a step."""
    return (int(run_seed), PROJECTION_STREAM, int(step), int(draw))


def sample_projection(p: int, dist: str, seed) -> TangentVector:
    """i.i.d. projection vector of length p; deterministic per seed."""
    if p < 1:
        raise ValueError("p must be >= 1")
    rng = np.random.default_rng(seed)
    if dist == "gaussian":
        values = rng.standard_normal(p)
    elif dist == "rademacher":
        values = rng.integers(0, 2, size=p).astype(np.float64) * 2.0 - 1.0
    else:
        raise ValueError(f"unknown projection distribution {dist!r}")
    return TangentVector(values, dist)


def sketch(spec: NetworkSpec, theta, x, v) -> np.ndarray:
    """Sketch z_v(x) = J(x) v, computed as a single JVP."""
    return jvp(spec, theta, x, v)


def sketch_batch(spec: NetworkSpec, theta, xs, v) -> np.ndarray:
    """Sketches for a batch under one shared projection, shape (B, C)."""
    return jvp_batch(spec, theta, xs, v)


def kernel_estimate(spec: NetworkSpec, theta, x1, x2, projections) -> np.ndarray:
    """(1/S) sum_s z_s(x1) z_s(x2)^T; unbiased for the exact NTK block."""
    if len(projections) == 0:
        raise ValueError("at least one projection is required")
    c = spec.output_dim
    acc = np.zeros((c, c))
    for v in projections:
        z1 = jvp(spec, theta, x1, v)
        z2 = jvp(spec, theta, x2, v)
        acc += np.outer(z1, z2)
    return acc / len(projections)


def estimator_variance_closed_form(jac, dist: str) -> float:
    """Closed-form variance of the scalar sketch estimate z_v(x) z_v(x)^T.

    Stated for C = 1 only: gaussian gives 2 tr(J^T J)^2 and rademacher
    subtracts 2 ||diag(J^T J)||_2^2, so rademacher never exceeds gaussian.
    """
    jac = np.asarray(jac, dtype=np.float64)
    if jac.ndim == 2:
        if jac.shape[0] != 1:
            raise ValueError("scalar-output variance formula requires C = 1")
        jac = jac[0]
    elif jac.ndim != 1:
        raise ValueError("scalar-output variance formula requires a vector Jacobian")
    sq = float(jac @ jac)
    gaussian = 2.0 * sq * sq
    if dist == "gaussian":
        return gaussian
    if dist == "rademacher":
        return gaussian - 2.0 * float(np.sum(jac**4))
    raise ValueError(f"unknown projection distribution {dist!r}")
