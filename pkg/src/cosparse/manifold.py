"""Line-search optimization on embedded manifolds with closed-form geodesics.

Operator learning in this package is posed over n-by-k matrices whose
columns are unit vectors orthogonal to the all-ones vector, i.e. each
column lives on the intersection of the unit sphere with the zero-mean
hyperplane. That intersection is a sphere inside a fixed subspace, so
geodesics are great circles and parallel transport is a rotation in the
plane spanned by the footpoint and the (normalized) direction, both
available in closed form and applied column-wise on the product.

A flat Euclidean geometry is provided as well, so the same nonlinear
conjugate gradient loop doubles as a standard unconstrained solver for the
image reconstruction problems.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import (
    DegenerateColumn,
    LineSearchFailure,
    ValidationError,
    ZeroDenominator,
)

#: Columns with centered norm below this are rejected as degenerate.
NORM_FLOOR = 1e-12

#: Armijo steps below this floor abort the line search.
STEP_FLOOR = 1e-16

#: Conjugation denominators with magnitude below this trigger a restart.
BETA_DENOM_FLOOR = 1e-14


@dataclass(frozen=True)
class SolverConfig:
    """Settings of the line-search solvers.

    ``armijo_slope`` is the sufficient-decrease fraction, ``armijo_shrink``
    the backtracking factor. The trial step starts at ``initial_step`` and
    is doubled after two consecutive line searches that accept their first
    trial; a backtracked line search resets the trial step to the accepted
    value.
    """

    max_iterations: int = 500
    gradient_norm_tolerance: float = 1e-6
    armijo_shrink: float = 0.5
    armijo_slope: float = 0.1
    initial_step: float = 1.0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValidationError("max_iterations must be a positive integer")
        if self.gradient_norm_tolerance <= 0:
            raise ValidationError("gradient_norm_tolerance must be positive")
        if not 0.0 < self.armijo_shrink < 1.0:
            raise ValidationError("armijo_shrink must lie in (0, 1)")
        if not 0.0 < self.armijo_slope < 1.0:
            raise ValidationError("armijo_slope must lie in (0, 1)")
        if self.initial_step <= 0:
            raise ValidationError("initial_step must be positive")


class Manifold:
    """Minimal geodesic interface consumed by the solvers.

    Points and tangent vectors are plain arrays of a fixed shape; a tangent
    vector is implicitly attached to the base point it was produced for.
    The embedded metric is the Frobenius inner product.
    """

    def tangent_project(self, base: np.ndarray, ambient: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def geodesic(self, base: np.ndarray, direction: np.ndarray, t: float) -> np.ndarray:
        raise NotImplementedError

    def transport(
        self, base: np.ndarray, direction: np.ndarray, t: float, payload: np.ndarray
    ) -> np.ndarray:
        raise NotImplementedError

    def inner(self, u: np.ndarray, v: np.ndarray) -> float:
        return float(np.sum(u * v))

    def norm(self, v: np.ndarray) -> float:
        return float(np.sqrt(np.sum(v * v)))


class CenteredSphereProduct(Manifold):
    """Product of k unit spheres intersected with the zero-mean hyperplane.

    Points are (n, k) arrays whose columns have unit Euclidean norm and
    entries summing to zero. Tangent vectors at a point have columns
    orthogonal to the matching point column and to the all-ones vector.
    """

    def __init__(self, n: int, k: int):
        if n < 2 or k < 1:
            raise ValidationError("need n >= 2 and k >= 1")
        self.n = n
        self.k = k

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n, self.k)

    def _check_shape(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n, self.k):
            raise ValidationError(f"expected shape {(self.n, self.k)}, got {x.shape}")
        return x

    def project(self, ambient: np.ndarray) -> np.ndarray:
        """Center each column, then normalize it to unit length."""
        x = self._check_shape(ambient)
        centered = x - x.mean(axis=0)
        norms = np.linalg.norm(centered, axis=0)
        if np.any(norms < NORM_FLOOR):
            bad = int(np.argmin(norms))
            raise DegenerateColumn(
                f"column {bad} is (numerically) constant and cannot be centered"
            )
        return centered / norms

    def tangent_project(self, base: np.ndarray, ambient: np.ndarray) -> np.ndarray:
        """Remove the components along the base column and the constant vector."""
        y = np.asarray(ambient, dtype=float)
        return y - base * np.sum(base * y, axis=0) - y.mean(axis=0)

    def geodesic(self, base: np.ndarray, direction: np.ndarray, t: float) -> np.ndarray:
        """Great circle through each column; stationary where the direction is zero."""
        speeds = np.linalg.norm(direction, axis=0)
        unit = np.divide(direction, speeds, out=np.zeros_like(direction), where=speeds > 0)
        theta = speeds * t
        return base * np.cos(theta) + unit * np.sin(theta)

    def transport(
        self, base: np.ndarray, direction: np.ndarray, t: float, payload: np.ndarray
    ) -> np.ndarray:
        """Parallel transport along the geodesic emanating in ``direction``.

        The component of the payload along the direction rotates with the
        geodesic; the orthogonal component is carried unchanged.
        """
        speeds = np.linalg.norm(direction, axis=0)
        unit = np.divide(direction, speeds, out=np.zeros_like(direction), where=speeds > 0)
        theta = speeds * t
        along = np.sum(unit * payload, axis=0)
        return payload - along * (base * np.sin(theta) + unit * (1.0 - np.cos(theta)))

    def random_point(self, rng: np.random.Generator) -> np.ndarray:
        return self.project(rng.standard_normal((self.n, self.k)))

    def random_tangent(self, base: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return self.tangent_project(base, rng.standard_normal((self.n, self.k)))

    def point_defect(self, x: np.ndarray) -> float:
        """Largest violation of the unit-norm and zero-sum column constraints."""
        norm_err = np.abs(np.linalg.norm(x, axis=0) - 1.0)
        sum_err = np.abs(x.sum(axis=0))
        return float(max(norm_err.max(), sum_err.max()))

    def tangent_defect(self, base: np.ndarray, h: np.ndarray) -> float:
        """Largest violation of the tangency conditions at ``base``."""
        dot_err = np.abs(np.sum(base * h, axis=0))
        sum_err = np.abs(h.sum(axis=0))
        return float(max(dot_err.max(), sum_err.max()))


class EuclideanSpace(Manifold):
    """Flat geometry: straight-line geodesics and identity transport."""

    def tangent_project(self, base: np.ndarray, ambient: np.ndarray) -> np.ndarray:
        return np.asarray(ambient, dtype=float)

    def geodesic(self, base: np.ndarray, direction: np.ndarray, t: float) -> np.ndarray:
        return base + t * direction

    def transport(
        self, base: np.ndarray, direction: np.ndarray, t: float, payload: np.ndarray
    ) -> np.ndarray:
        return payload


def cg_beta_hybrid(
    grad_new: np.ndarray,
    grad_old_transported: np.ndarray,
    dir_old_transported: np.ndarray,
) -> float:
    """Hybrid Dai-Yuan / Hestenes-Stiefel conjugation parameter.

    Returns ``max(0, min(beta_DY, beta_HS))`` with both quotients sharing
    the denominator ``<transported direction, gradient difference>``. A
    vanishing gradient difference means no progress was made and yields 0;
    a vanishing denominator with a nonzero difference raises
    ``ZeroDenominator`` so the caller can restart with steepest descent.
    """
    diff = grad_new - grad_old_transported
    if float(np.sqrt(np.sum(diff * diff))) < BETA_DENOM_FLOOR:
        return 0.0
    denom = float(np.sum(dir_old_transported * diff))
    if abs(denom) < BETA_DENOM_FLOOR:
        raise ZeroDenominator(
            f"conjugation denominator {denom:.3e} below {BETA_DENOM_FLOOR:.0e}"
        )
    beta_hs = float(np.sum(grad_new * diff)) / denom
    beta_dy = float(np.sum(grad_new * grad_new)) / denom
    return max(0.0, min(beta_dy, beta_hs))


@dataclass
class MinimizeResult:
    """Final iterate of a line-search run plus convergence bookkeeping."""

    point: np.ndarray
    value: float
    gradient_norm: float
    iterations: int
    converged: bool


Objective = Callable[[np.ndarray], tuple[float, np.ndarray]]
IterateCallback = Callable[[np.ndarray, int, float, float], None]


def minimize_cg(
    manifold: Manifold,
    objective: Objective,
    start: np.ndarray,
    config: SolverConfig,
    callback: Optional[IterateCallback] = None,
    conjugate: bool = True,
) -> MinimizeResult:
    """Nonlinear conjugate gradient with Armijo backtracking along geodesics.

    ``objective`` maps a point to ``(value, ambient_gradient)``; the
    Riemannian gradient is its tangent projection. Search directions follow
    the conjugate update with the hybrid parameter from
    :func:`cg_beta_hybrid`, transported along the accepted step, and are
    reset to steepest descent periodically (every ``start.size`` accepted
    steps), on a vanishing conjugation denominator, and whenever the
    candidate direction fails to point downhill. Accepted objective values
    are non-increasing.
    """
    x = np.array(start, dtype=float)
    value, ambient = objective(x)
    grad = manifold.tangent_project(x, ambient)
    gnorm = manifold.norm(grad)
    direction = -grad

    trial = config.initial_step
    first_try_streak = 0
    restart_period = max(1, x.size)
    iterations = 0
    converged = gnorm < config.gradient_norm_tolerance

    while not converged and iterations < config.max_iterations:
        slope = manifold.inner(grad, direction)
        if slope >= 0.0:
            direction = -grad
            slope = -gnorm * gnorm

        t = trial
        backtracked = False
        while True:
            candidate = manifold.geodesic(x, direction, t)
            cand_value, cand_ambient = objective(candidate)
            if np.isfinite(cand_value) and cand_value <= value + config.armijo_slope * t * slope:
                break
            t *= config.armijo_shrink
            backtracked = True
            if t < STEP_FLOOR:
                raise LineSearchFailure(
                    f"Armijo step shrank below {STEP_FLOOR:.0e} at iteration {iterations}"
                )
        if backtracked:
            trial = t
            first_try_streak = 0
        else:
            first_try_streak += 1
            if first_try_streak == 2:
                trial *= 2.0
                first_try_streak = 0

        new_grad = manifold.tangent_project(candidate, cand_ambient)
        new_gnorm = manifold.norm(new_grad)
        iterations += 1

        if conjugate and iterations % restart_period != 0:
            dir_t = manifold.transport(x, direction, t, direction)
            grad_t = manifold.transport(x, direction, t, grad)
            try:
                beta = cg_beta_hybrid(new_grad, grad_t, dir_t)
            except ZeroDenominator:
                beta = 0.0
            new_direction = -new_grad + beta * dir_t
        else:
            new_direction = -new_grad

        x, value, grad, gnorm, direction = candidate, cand_value, new_grad, new_gnorm, new_direction
        if callback is not None:
            callback(x, iterations, value, gnorm)
        converged = gnorm < config.gradient_norm_tolerance

    return MinimizeResult(
        point=x,
        value=value,
        gradient_norm=gnorm,
        iterations=iterations,
        converged=converged,
    )


def minimize_gradient_descent(
    manifold: Manifold,
    objective: Objective,
    start: np.ndarray,
    config: SolverConfig,
    callback: Optional[IterateCallback] = None,
) -> MinimizeResult:
    """Steepest descent: the conjugate loop with the mixing parameter pinned to zero."""
    return minimize_cg(manifold, objective, start, config, callback=callback, conjugate=False)
