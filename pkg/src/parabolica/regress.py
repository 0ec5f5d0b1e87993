"""Least-squares estimators of conditional expectations E[V | X].

The backward schemes replace conditional expectations with
cross-sectional regressions: fit basis functions of the current states
to next-step values, then read the fitted value at each state.  Two
bases are offered - polynomials up to a total degree (graded
lexicographic order, constant first) and piecewise-constant indicators
on a per-dimension binning of the empirical bounding box.

States are standardized (per-dimension shift/scale) before the
polynomial design matrix is built, which keeps the normal equations
well conditioned far from the origin; coefficients live in standardized
coordinates and :func:`monomial_coefficients` maps them back when the
raw-space polynomial is wanted.

The ridge penalty never touches the constant term, so the fitted
surface reproduces the sample mean of the targets exactly for every
penalty strength, not just at lambda = 0.  Backward schemes lean on
this: the root step regresses on identical states, and any shrinkage
of the intercept there would bias the final estimate.  Rank-deficient
designs at lambda = 0 are flagged and deterministically re-solved with
lambda = 1e-8 instead of failing mid-sweep.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DimensionMismatch, NonFinite, RegressionFailure

__all__ = [
    "BasisSpec",
    "RegressionFit",
    "fit",
    "predict",
    "basis_size",
    "monomial_coefficients",
]

_RANK_RETRY_RIDGE = 1e-8


@dataclass(frozen=True)
class BasisSpec:
    """Basis family and penalty for one conditional-expectation fit."""

    kind: str = "polynomial"
    degree: int = 2      # polynomial: total degree
    bins: int = 4        # piecewise_constant: bins per dimension
    ridge: float = 0.0

    def __post_init__(self):
        if self.kind not in ("polynomial", "piecewise_constant"):
            raise RegressionFailure(f"unknown basis kind {self.kind!r}")
        if self.kind == "polynomial" and self.degree < 0:
            raise RegressionFailure("polynomial degree must be >= 0")
        if self.kind == "piecewise_constant" and self.bins < 1:
            raise RegressionFailure("need at least one bin per dimension")
        if self.ridge < 0:
            raise RegressionFailure("ridge penalty must be >= 0")


@dataclass(frozen=True, eq=False)
class RegressionFit:
    basis: BasisSpec
    dim: int
    coefficients: np.ndarray        # (p,) or (p, k), standardized coordinates
    residual_rms: float
    condition_estimate: float
    rank_deficient: bool
    ridge_used: float
    x_mean: Optional[np.ndarray] = None   # polynomial standardization
    x_scale: Optional[np.ndarray] = None
    box_min: Optional[np.ndarray] = None  # piecewise-constant binning box
    box_max: Optional[np.ndarray] = None


def multi_indices(d: int, q: int) -> list[tuple[int, ...]]:
    """Exponent tuples with total degree <= q, graded lexicographic."""
    out = []
    for total in range(q + 1):
        level = [idx for idx in itertools.product(range(total + 1), repeat=d)
                 if sum(idx) == total]
        out.extend(sorted(level))
    return out


def basis_size(basis: BasisSpec, d: int) -> int:
    if basis.kind == "polynomial":
        return math.comb(d + basis.degree, basis.degree)
    return basis.bins**d


def _validate_states(states, d: Optional[int] = None) -> np.ndarray:
    x = np.asarray(states, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise DimensionMismatch("states must be a (J, d) matrix")
    if d is not None and x.shape[1] != d:
        raise DimensionMismatch(f"states have width {x.shape[1]}, expected {d}")
    if not np.all(np.isfinite(x)):
        raise NonFinite("states contain non-finite entries")
    return x


def _poly_design(z: np.ndarray, q: int) -> np.ndarray:
    J, d = z.shape
    powers = [np.ones((J, q + 1)) for _ in range(d)]
    for i in range(d):
        for k in range(1, q + 1):
            powers[i][:, k] = powers[i][:, k - 1] * z[:, i]
    cols = [
        np.prod([powers[i][:, e] for i, e in enumerate(idx)], axis=0)
        for idx in multi_indices(d, q)
    ]
    return np.stack(cols, axis=1)


def _bin_indices(x: np.ndarray, lo: np.ndarray, hi: np.ndarray, bins: int) -> np.ndarray:
    width = np.where(hi > lo, hi - lo, 1.0)
    raw = np.floor((x - lo) / width * bins).astype(np.int64)
    per_dim = np.clip(raw, 0, bins - 1)
    flat = np.zeros(len(x), dtype=np.int64)
    for i in range(x.shape[1]):
        flat = flat * bins + per_dim[:, i]
    return flat


def _design(fit_or_basis, x, *, x_mean, x_scale, box_min, box_max) -> np.ndarray:
    basis = fit_or_basis
    if basis.kind == "polynomial":
        z = (x - x_mean) / x_scale
        return _poly_design(z, basis.degree)
    flat = _bin_indices(x, box_min, box_max, basis.bins)
    phi = np.zeros((len(x), basis.bins ** x.shape[1]))
    phi[np.arange(len(x)), flat] = 1.0
    return phi


def fit(states, targets, basis: BasisSpec) -> RegressionFit:
    """Least-squares fit of targets on basis functions of states.

    Vector targets (J, k) are fitted column-wise through one shared
    factorization.  Raises RegressionFailure when there are fewer
    samples than basis functions, NonFinite on bad inputs.
    """
    x = _validate_states(states)
    y = np.asarray(targets, dtype=np.float64)
    squeeze = y.ndim == 1
    if squeeze:
        y = y[:, None]
    if y.shape[0] != x.shape[0]:
        raise DimensionMismatch("states and targets disagree on sample count")
    if not np.all(np.isfinite(y)):
        raise NonFinite("targets contain non-finite entries")
    J, d = x.shape
    p = basis_size(basis, d)
    if J < p:
        raise RegressionFailure(f"{J} samples cannot support {p} basis functions")

    if basis.kind == "polynomial":
        x_mean = x.mean(axis=0)
        std = x.std(axis=0)
        x_scale = np.where(std > 0, std, 1.0)
        box_min = box_max = None
    else:
        x_mean = x_scale = None
        box_min, box_max = x.min(axis=0), x.max(axis=0)

    phi = _design(basis, x, x_mean=x_mean, x_scale=x_scale,
                  box_min=box_min, box_max=box_max)

    sv = np.linalg.svd(phi, compute_uv=False)
    tol = sv[0] * max(J, p) * np.finfo(np.float64).eps if sv[0] > 0 else 0.0
    rank = int(np.sum(sv > tol))
    rank_deficient = rank < p
    with np.errstate(divide="ignore"):
        condition = float(sv[0] / sv[-1]) if sv[-1] > 0 else float("inf")

    ridge = basis.ridge
    if ridge == 0.0 and rank_deficient:
        ridge = _RANK_RETRY_RIDGE
    if ridge > 0.0:
        # Penalize by row augmentation.  The constant column of the
        # polynomial basis is exempt, which pins the fitted mean to the
        # sample mean for any ridge strength.
        penalized = np.arange(1 if basis.kind == "polynomial" else 0, p)
        aug = np.zeros((len(penalized), p))
        aug[np.arange(len(penalized)), penalized] = np.sqrt(ridge)
        A = np.vstack([phi, aug])
        B = np.vstack([y, np.zeros((len(penalized), y.shape[1]))])
    else:
        A, B = phi, y
    coef, *_ = np.linalg.lstsq(A, B, rcond=None)

    if basis.kind == "piecewise_constant":
        # Bins that saw no data predict the global mean instead of 0.
        counts = phi.sum(axis=0)
        coef[counts == 0] = y.mean(axis=0)

    if not np.all(np.isfinite(coef)):
        raise NonFinite("regression produced non-finite coefficients")

    residual_rms = float(np.sqrt(np.mean((phi @ coef - y) ** 2)))
    return RegressionFit(
        basis=basis,
        dim=d,
        coefficients=coef[:, 0] if squeeze else coef,
        residual_rms=residual_rms,
        condition_estimate=condition,
        rank_deficient=rank_deficient,
        ridge_used=ridge,
        x_mean=x_mean,
        x_scale=x_scale,
        box_min=box_min,
        box_max=box_max,
    )


def predict(reg: RegressionFit, states) -> np.ndarray:
    """Evaluate the fitted conditional-expectation surface."""
    x = _validate_states(states, reg.dim)
    phi = _design(reg.basis, x, x_mean=reg.x_mean, x_scale=reg.x_scale,
                  box_min=reg.box_min, box_max=reg.box_max)
    return phi @ reg.coefficients


def monomial_coefficients(reg: RegressionFit) -> np.ndarray:
    """Polynomial coefficients in raw coordinates, graded-lex order.

    Expands each standardized basis function prod_i ((x_i - m_i)/s_i)^e_i
    into monomials and accumulates, so ``sum_idx c[idx] * x^idx`` equals
    ``predict`` exactly up to rounding.  Vector fits return (p, k).
    """
    if reg.basis.kind != "polynomial":
        raise RegressionFailure("only polynomial fits have monomial coefficients")
    q, d = reg.basis.degree, reg.dim
    idx_list = multi_indices(d, q)
    pos = {idx: i for i, idx in enumerate(idx_list)}
    coef = np.atleast_2d(reg.coefficients.T).T  # (p, k) view
    out = np.zeros_like(coef)
    for source, idx in enumerate(idx_list):
        # expand ((x_i - m)/s)^e per dimension, then take the product
        per_dim = []
        for i, e in enumerate(idx):
            m, s = reg.x_mean[i], reg.x_scale[i]
            expansion = [
                math.comb(e, j) * (-m) ** (e - j) / s**e for j in range(e + 1)
            ]
            per_dim.append(expansion)
        for combo in itertools.product(*(range(len(c)) for c in per_dim)):
            weight = 1.0
            for i, j in enumerate(combo):
                weight *= per_dim[i][j]
            out[pos[tuple(combo)]] += weight * coef[source]
    return out[:, 0] if reg.coefficients.ndim == 1 else out
