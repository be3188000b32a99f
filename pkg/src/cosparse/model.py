"""Coupled co-sparse analysis model: objective terms, training data, learning.

An analysis operator is a k-by-n matrix whose rows are zero-mean unit-norm
filters; applied to a vectorized image patch it yields an analyzed vector
that is sparse for patches of the modeled class. Two operators, one per
modality, are learned jointly so that large filter responses co-occur
across modalities on aligned training patches. The learning objective adds
a log-det rank penalty and a log-barrier coherence penalty per operator to
the empirical coupled sparsity, and is minimized over the product of
constrained spheres with the conjugate gradient solver from
:mod:`cosparse.manifold`.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    CoincidentRows,
    DimensionMismatch,
    InsufficientSamples,
    MalformedFile,
    RankDeficient,
    ValidationError,
)
from .images import ModalImage
from .manifold import (
    CenteredSphereProduct,
    IterateCallback,
    MinimizeResult,
    SolverConfig,
    minimize_cg,
)

ROW_TOL = 1e-10
COINCIDENCE_TOL = 1e-12
DET_FLOOR_LOG = math.log(1e-300)

#: Patches whose standard deviation falls below this (on [0, 1]-scaled
#: images) carry too little contrast and are discarded from training.
DEFAULT_STD_THRESHOLD = 0.05


@dataclass(frozen=True)
class LearningParams:
    """Weights of the learning objective.

    ``nu`` shapes the sparsity measure, ``kappa_*`` weight the rank
    penalties and ``mu_*`` the coherence penalties of the two operators.
    """

    nu: float
    kappa_u: float
    kappa_v: float
    mu_u: float
    mu_v: float

    def __post_init__(self):
        for name in ("nu", "kappa_u", "kappa_v", "mu_u", "mu_v"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")


#: Published operating point for intensity (U) paired with depth (V).
INTENSITY_DEPTH_PARAMS = LearningParams(
    nu=400.0, kappa_u=5.0, kappa_v=22.0, mu_u=1e2, mu_v=2.5e4
)

#: Published operating point for intensity (U) paired with near infrared (V).
INTENSITY_NIR_PARAMS = LearningParams(
    nu=200.0, kappa_u=250.0, kappa_v=1000.0, mu_u=250.0, mu_v=1000.0
)

PARAM_PRESETS = {
    "intensity_depth": INTENSITY_DEPTH_PARAMS,
    "intensity_nir": INTENSITY_NIR_PARAMS,
}


def _rows(op) -> np.ndarray:
    """Accept an operator dataclass or a raw (k, n) row matrix."""
    rows = getattr(op, "rows", op)
    return np.asarray(rows, dtype=float)


@dataclass(eq=False)
class AnalysisOperator:
    """Learned filter bank of one modality: (k, n) matrix of patch filters."""

    rows: np.ndarray
    patch_side: int
    modality: str = ""

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=float)
        if self.rows.ndim != 2:
            raise ValidationError("operator rows must form a 2-D matrix")
        k, n = self.rows.shape
        if not np.all(np.isfinite(self.rows)):
            raise ValidationError("operator entries must be finite")
        if k < n - 1:
            raise ValidationError(f"need k >= n - 1 rows, got k={k} for n={n}")
        if self.patch_side < 1 or self.patch_side**2 != n:
            raise ValidationError(f"patch_side^2 must equal n={n}")
        norm_err = np.abs(np.linalg.norm(self.rows, axis=1) - 1.0).max()
        sum_err = np.abs(self.rows.sum(axis=1)).max()
        if norm_err > ROW_TOL or sum_err > ROW_TOL:
            raise ValidationError(
                f"rows must be unit-norm and zero-sum within {ROW_TOL:g} "
                f"(got {norm_err:.2e}, {sum_err:.2e})"
            )

    @property
    def k(self) -> int:
        return self.rows.shape[0]

    @property
    def n(self) -> int:
        return self.rows.shape[1]


@dataclass(eq=False)
class OperatorPair:
    """The coupled operators of the two modalities, sharing the row count k."""

    omega_u: AnalysisOperator
    omega_v: AnalysisOperator
    params: LearningParams

    def __post_init__(self):
        if self.omega_u.k != self.omega_v.k:
            raise ValidationError("paired operators must share the row count k")

    @property
    def k(self) -> int:
        return self.omega_u.k

    @property
    def n(self) -> int:
        return self.omega_u.n


@dataclass(eq=False)
class PatchDataset:
    """Aligned training patch pairs, each normalized by its own deviation.

    ``u`` and ``v`` are (M, n) arrays of vectorized patches; ``stds_u`` and
    ``stds_v`` record the standard deviations that were divided out.
    """

    u: np.ndarray
    v: np.ndarray
    stds_u: np.ndarray
    stds_v: np.ndarray

    @property
    def count(self) -> int:
        return self.u.shape[0]

    @property
    def n(self) -> int:
        return self.u.shape[1]

    def check(self, tol: float = 1e-10) -> None:
        """Verify the unit-deviation contract of the stored patches."""
        if self.u.shape != self.v.shape:
            raise DimensionMismatch("patch arrays must have matching shapes")
        for name, arr in (("u", self.u), ("v", self.v)):
            err = np.abs(arr.std(axis=1) - 1.0).max()
            if err > tol:
                raise ValidationError(
                    f"{name}-patches deviate from unit std by {err:.2e}"
                )

    def subset(self, indices: np.ndarray) -> "PatchDataset":
        return PatchDataset(
            u=self.u[indices],
            v=self.v[indices],
            stds_u=self.stds_u[indices],
            stds_v=self.stds_v[indices],
        )


def sparsity_measure(x, nu: float) -> float:
    """Smooth sparsity surrogate ``sum_j log(1 + nu * x_j^2)``."""
    if nu <= 0:
        raise ValidationError("nu must be positive")
    x = np.asarray(x, dtype=float)
    return float(np.sum(np.log1p(nu * x * x)))


def coupled_sparsity(a, b, nu: float) -> float:
    """Joint sparsity ``sum_j log(1 + nu * (a_j^2 + b_j^2))`` of two analyzed vectors."""
    if nu <= 0:
        raise ValidationError("nu must be positive")
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DimensionMismatch(f"coupled vectors differ in shape: {a.shape} vs {b.shape}")
    return float(np.sum(np.log1p(nu * (a * a + b * b))))


def empirical_coupling(omega_u, omega_v, data: PatchDataset, nu: float) -> float:
    """Mean coupled sparsity of the analyzed patch pairs."""
    ru, rv = _rows(omega_u), _rows(omega_v)
    _check_coupling_dims(ru, rv, data)
    au = data.u @ ru.T
    av = data.v @ rv.T
    return float(np.sum(np.log1p(nu * (au * au + av * av))) / data.count)


def _check_coupling_dims(ru: np.ndarray, rv: np.ndarray, data: PatchDataset) -> None:
    if ru.shape[0] != rv.shape[0]:
        raise DimensionMismatch("operators must share the row count k")
    if ru.shape[1] != data.n or rv.shape[1] != data.n:
        raise DimensionMismatch(
            f"operator width {ru.shape[1]}/{rv.shape[1]} does not match patch size {data.n}"
        )


@lru_cache(maxsize=None)
def zero_mean_basis(n: int) -> np.ndarray:
    """Orthonormal basis of the zero-sum subspace: the non-constant DCT vectors."""
    j = np.arange(n)[:, None]
    m = np.arange(1, n)[None, :]
    w = np.sqrt(2.0 / n) * np.cos(np.pi * (2 * j + 1) * m / (2 * n))
    w.flags.writeable = False
    return w


def rank_penalty(op) -> float:
    """Scaled negative log-determinant of the operator Gram on the zero-sum subspace.

    Finite exactly when the operator restricted to that subspace has full
    rank n - 1; invariant under the choice of orthonormal basis. Needs
    n >= 3 (the normalization degenerates at n = 2).
    """
    return _rank_penalty_value_grad(_rows(op), need_grad=False)[0]


def _rank_penalty_value_grad(rows: np.ndarray, need_grad: bool = True):
    k, n = rows.shape
    if n < 3:
        raise ValidationError("rank penalty is defined for n >= 3 only")
    w = zero_mean_basis(n)
    g = rows @ w
    gram = (g.T @ g) / k
    sign, logdet = np.linalg.slogdet(gram)
    if sign <= 0 or logdet <= DET_FLOOR_LOG:
        raise RankDeficient(
            "operator Gram on the zero-sum subspace is (numerically) singular"
        )
    scale = -1.0 / ((n - 1) * math.log(n - 1))
    value = scale * logdet
    if not need_grad:
        return value, None
    grad = scale * (2.0 / k) * (g @ np.linalg.inv(gram)) @ w.T
    return value, grad


def coherence_penalty(op) -> float:
    """Log-barrier on pairwise row inner products; zero iff rows are orthogonal."""
    return _coherence_value_grad(_rows(op), need_grad=False)[0]


def _coherence_value_grad(rows: np.ndarray, need_grad: bool = True):
    k = rows.shape[0]
    gram = rows @ rows.T
    iu = np.triu_indices(k, 1)
    off = gram[iu]
    if off.size and np.abs(off).max() >= 1.0 - COINCIDENCE_TOL:
        raise CoincidentRows(
            f"|<w_i, w_l>| reached {np.abs(off).max():.12f}; rows are (anti)parallel"
        )
    value = float(-np.sum(np.log1p(-off * off)))
    if not need_grad:
        return value, None
    c = gram / (1.0 - gram * gram)
    np.fill_diagonal(c, 0.0)
    grad = 2.0 * (c @ rows)
    return value, grad


def learning_objective(omega_u, omega_v, data: PatchDataset, params: LearningParams):
    """Value and ambient (k, n) gradients of the joint learning function.

    The value is the empirical coupling plus the weighted rank and
    coherence penalties of both operators; the gradient splits into one
    block per operator.
    """
    ru, rv = _rows(omega_u), _rows(omega_v)
    _check_coupling_dims(ru, rv, data)
    m = data.count
    au = data.u @ ru.T
    av = data.v @ rv.T
    denom = 1.0 + params.nu * (au * au + av * av)
    value = float(np.sum(np.log(denom))) / m
    scale = 2.0 * params.nu / m
    grad_u = (scale * (au / denom)).T @ data.u
    grad_v = (scale * (av / denom)).T @ data.v

    h_u, h_u_grad = _rank_penalty_value_grad(ru)
    h_v, h_v_grad = _rank_penalty_value_grad(rv)
    r_u, r_u_grad = _coherence_value_grad(ru)
    r_v, r_v_grad = _coherence_value_grad(rv)

    value += params.kappa_u * h_u + params.mu_u * r_u
    value += params.kappa_v * h_v + params.mu_v * r_v
    grad_u = grad_u + params.kappa_u * h_u_grad + params.mu_u * r_u_grad
    grad_v = grad_v + params.kappa_v * h_v_grad + params.mu_v * r_v_grad
    return value, grad_u, grad_v


def extract_training_patches(
    image_u: ModalImage,
    image_v: ModalImage,
    patch_side: int,
    count: int,
    seed: int,
    std_threshold: float = DEFAULT_STD_THRESHOLD,
) -> PatchDataset:
    """Sample aligned patch pairs, discard flat ones, normalize each by its std.

    Positions are drawn uniformly without replacement from all top-left
    patch positions at which both modalities reach the deviation threshold.
    Images are expected on a [0, 1] scale so the threshold is unit-free.
    """
    pu, pv = image_u.pixels, image_v.pixels
    if pu.shape != pv.shape:
        raise DimensionMismatch(
            f"modality images differ in shape: {pu.shape} vs {pv.shape}"
        )
    if patch_side < 1 or min(pu.shape) < patch_side:
        raise ValidationError(f"patch side {patch_side} does not fit the images")
    if count < 1:
        raise ValidationError("count must be positive")

    wu = sliding_window_view(pu, (patch_side, patch_side))
    wv = sliding_window_view(pv, (patch_side, patch_side))
    su = wu.std(axis=(2, 3))
    sv = wv.std(axis=(2, 3))
    keep = np.flatnonzero((su >= std_threshold) & (sv >= std_threshold))
    if keep.size < count:
        raise InsufficientSamples(
            f"only {keep.size} of {su.size} patch positions reach std {std_threshold:g}, "
            f"need {count}"
        )
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(keep, size=count, replace=False))
    ri, ci = np.unravel_index(chosen, su.shape)

    n = patch_side * patch_side
    patches_u = wu[ri, ci].reshape(count, n)
    patches_v = wv[ri, ci].reshape(count, n)
    stds_u = su[ri, ci]
    stds_v = sv[ri, ci]
    return PatchDataset(
        u=patches_u / stds_u[:, None],
        v=patches_v / stds_v[:, None],
        stds_u=stds_u,
        stds_v=stds_v,
    )


def merge_datasets(datasets: list[PatchDataset]) -> PatchDataset:
    """Concatenate patch datasets extracted from several image pairs."""
    if not datasets:
        raise ValidationError("need at least one dataset")
    if len({d.n for d in datasets}) != 1:
        raise DimensionMismatch("datasets must share the patch dimension")
    return PatchDataset(
        u=np.concatenate([d.u for d in datasets]),
        v=np.concatenate([d.v for d in datasets]),
        stds_u=np.concatenate([d.stds_u for d in datasets]),
        stds_v=np.concatenate([d.stds_v for d in datasets]),
    )


def learn_pair(
    data: PatchDataset,
    k: int,
    params: LearningParams,
    solver: Optional[SolverConfig] = None,
    seed: int = 0,
    modalities: tuple[str, str] = ("U", "V"),
    iterate_hook: Optional[IterateCallback] = None,
) -> OperatorPair:
    """Learn a coupled operator pair from aligned patches.

    Both operators are optimized jointly as one point on the product of
    2k constrained spheres, starting from random centered unit-norm rows.
    Deterministic for a fixed seed.
    """
    data.check()
    n = data.n
    side = math.isqrt(n)
    if side * side != n:
        raise ValidationError(f"patch dimension {n} is not a perfect square")
    if k < n - 1:
        raise ValidationError(f"need k >= n - 1 = {n - 1}, got {k}")
    if solver is None:
        solver = SolverConfig(max_iterations=300, gradient_norm_tolerance=1e-6)

    manifold = CenteredSphereProduct(n, 2 * k)
    rng = np.random.default_rng(seed)
    start = manifold.project(rng.standard_normal((n, 2 * k)))

    def objective(x: np.ndarray):
        value, grad_u, grad_v = learning_objective(x[:, :k].T, x[:, k:].T, data, params)
        return value, np.hstack([grad_u.T, grad_v.T])

    result: MinimizeResult = minimize_cg(
        manifold, objective, start, solver, callback=iterate_hook
    )
    x = result.point
    return OperatorPair(
        omega_u=AnalysisOperator(x[:, :k].T.copy(), patch_side=side, modality=modalities[0]),
        omega_v=AnalysisOperator(x[:, k:].T.copy(), patch_side=side, modality=modalities[1]),
        params=params,
    )


# ---------------------------------------------------------------------------
# Operator container ("COSP1"): magic, JSON header, two float64 row blobs.

MAGIC = b"COSP1\x00"


def save_operator_pair(pair: OperatorPair, path) -> None:
    header = {
        "k": pair.k,
        "n": pair.n,
        "patch_side": pair.omega_u.patch_side,
        "modality_u": pair.omega_u.modality,
        "modality_v": pair.omega_v.modality,
        "params": {
            "nu": pair.params.nu,
            "kappa_u": pair.params.kappa_u,
            "kappa_v": pair.params.kappa_v,
            "mu_u": pair.params.mu_u,
            "mu_v": pair.params.mu_v,
        },
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(pair.omega_u.rows, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(pair.omega_v.rows, dtype="<f8").tobytes())


def load_operator_pair(path) -> OperatorPair:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(MAGIC)] != MAGIC:
        raise MalformedFile("not a COSP1 operator container", offset=0)
    pos = len(MAGIC)
    if len(raw) < pos + 4:
        raise MalformedFile("truncated header length", offset=pos)
    (hlen,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    if len(raw) < pos + hlen:
        raise MalformedFile("truncated header", offset=pos)
    try:
        header = json.loads(raw[pos : pos + hlen].decode("utf-8"))
        k, n = int(header["k"]), int(header["n"])
        params = LearningParams(**{key: float(v) for key, v in header["params"].items()})
        patch_side = int(header["patch_side"])
    except (KeyError, ValueError, TypeError) as exc:
        raise MalformedFile(f"invalid header: {exc}", offset=pos) from exc
    pos += hlen
    need = 2 * k * n * 8
    if len(raw) - pos < need:
        raise MalformedFile(
            f"expected {need} bytes of matrix data, found {len(raw) - pos}", offset=pos
        )
    flat = np.frombuffer(raw, dtype="<f8", count=2 * k * n, offset=pos)
    rows_u = flat[: k * n].reshape(k, n).astype(float)
    rows_v = flat[k * n :].reshape(k, n).astype(float)
    return OperatorPair(
        omega_u=AnalysisOperator(rows_u, patch_side, header.get("modality_u", "U")),
        omega_v=AnalysisOperator(rows_v, patch_side, header.get("modality_v", "V")),
        params=params,
    )
