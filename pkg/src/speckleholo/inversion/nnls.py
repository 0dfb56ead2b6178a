"""Non-negative least-squares unmixing of ensemble autocorrelation maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigurationError, ParameterError
from ..speckle import AutocorrMap, informative_mask

TOL = 1e-10
MAX_ITER = 10_000
KKT_FACTOR = 1e-8


@dataclass
class NNLSResult:
    x: np.ndarray
    residual_norm: float
    iterations: int
    converged: bool
    kkt_violation: float  # max violation scaled by ||A|| ||y||; <= KKT_FACTOR passes
    method: str = "active-set"


def kkt_violation(A, y, x) -> float:
    """Largest KKT violation of ``x`` for ``min ||Ax - y||^2, x >= 0``.

    With ``g = A^T (A x - y)``: positive components need ``g == 0`` and zero
    components need ``g >= 0``. The result is normalized by
    ``||A||_2 * ||y||`` (1 when that product vanishes).
    """
    g = A.T @ (A @ x - y)
    pos = x > 0
    viol = 0.0
    if pos.any():
        viol = max(viol, float(np.max(np.abs(g[pos]))))
    if (~pos).any():
        viol = max(viol, float(np.max(np.maximum(-g[~pos], 0.0))))
    scale = np.linalg.norm(A, 2) * np.linalg.norm(y)
    return viol / scale if scale > 0 else viol


def _lstsq(A, y):
    return np.linalg.lstsq(A, y, rcond=None)[0]


def _active_set(A, y, tol, max_iter):
    """Lawson-Hanson active-set iteration; returns (x, iterations, hit_cap)."""
    m, n = A.shape
    x = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    scale = max(np.linalg.norm(A, 2) * np.linalg.norm(y), np.finfo(float).tiny)
    it = 0
    w = A.T @ (y - A @ x)
    while (~passive).any() and np.max(np.where(passive, -np.inf, w)) > tol * scale:
        if it >= max_iter:
            return x, it, True
        j = int(np.argmax(np.where(passive, -np.inf, w)))
        passive[j] = True
        s = np.zeros(n)
        s[passive] = _lstsq(A[:, passive], y)
        while np.any(s[passive] <= 0):
            it += 1
            if it >= max_iter:
                return x, it, True
            neg = passive & (s <= 0)
            alpha = np.min(x[neg] / (x[neg] - s[neg]))
            x = x + alpha * (s - x)
            passive &= x > tol * max(1.0, np.max(np.abs(x)))
            x[~passive] = 0.0
            s = np.zeros(n)
            if passive.any():
                s[passive] = _lstsq(A[:, passive], y)
        x = s
        it += 1
        w = A.T @ (y - A @ x)
    return x, it, False


def _projected_gradient(A, y, x0, tol, max_iter):
    """Fallback: projected gradient with step ``1/||A||_2^2``."""
    L = np.linalg.norm(A, 2) ** 2
    if L == 0:
        return np.zeros_like(x0), 0
    x = np.maximum(x0, 0.0)
    for it in range(1, max_iter + 1):
        x_new = np.maximum(x - (A.T @ (A @ x - y)) / L, 0.0)
        if np.max(np.abs(x_new - x)) <= tol * max(1.0, np.max(np.abs(x_new))):
            return x_new, it
        x = x_new
    return x, max_iter


def solve_nnls(A, y, tol: float = TOL, max_iter: int = MAX_ITER) -> NNLSResult:
    """Solve ``min ||A x - y||_2`` subject to ``x >= 0``.

    Active-set first; if it stalls or its certificate fails, projected
    gradient continues from its iterate. ``converged`` is True only when the
    KKT certificate passes and ``A`` has full column rank (otherwise the
    minimizer is not unique and the split between collinear bases is
    arbitrary).
    """
    A = np.asarray(A, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if A.ndim != 2 or A.shape[0] != y.size:
        raise ParameterError(f"A {A.shape} incompatible with y of length {y.size}")
    if A.shape[1] == 0:
        raise ParameterError("at least one basis column is required")
    x, it, capped = _active_set(A, y, tol, max_iter)
    method = "active-set"
    viol = kkt_violation(A, y, x)
    if capped or viol > KKT_FACTOR:
        x, it2 = _projected_gradient(A, y, x, tol, max_iter)
        it += it2
        method = "projected-gradient"
        viol = kkt_violation(A, y, x)
    full_rank = np.linalg.matrix_rank(A) == A.shape[1]
    converged = bool(viol <= KKT_FACTOR and full_rank)
    return NNLSResult(x, float(np.linalg.norm(A @ x - y)), int(it), converged, float(viol), method)


@dataclass
class UnmixProblem:
    """Measured ensemble map, candidate bases, and the lags used in the fit.

    ``config_hash`` identifies the optical configuration the measurement was
    made under; when given, every basis must carry the same hash.
    """

    measured: AutocorrMap
    bases: list
    lag_mask: np.ndarray | None = None
    config_hash: str | None = None

    def __post_init__(self):
        self.bases = list(self.bases)
        if not self.bases:
            raise ParameterError("at least one basis kernel is required")
        shape = self.measured.grid.shape
        if self.lag_mask is None:
            self.lag_mask = informative_mask(shape)
        self.lag_mask = np.asarray(self.lag_mask, dtype=bool)
        if self.lag_mask.shape != shape:
            raise ParameterError(f"lag mask {self.lag_mask.shape} differs from map {shape}")
        if not self.lag_mask.any():
            raise ParameterError("lag mask selects no lags")
        ref = self.config_hash if self.config_hash is not None else self.bases[0].config_hash
        for b in self.bases:
            if b.map.grid.shape != shape:
                raise ConfigurationError(
                    f"basis {b.species.name!r} has shape {b.map.grid.shape}, measured map {shape}",
                    species=b.species.name)
            if b.config_hash != ref:
                raise ConfigurationError(
                    f"basis {b.species.name!r} was built under a different optical config",
                    species=b.species.name)
            if b.map.normalized != self.measured.normalized:
                raise ConfigurationError(
                    f"basis {b.species.name!r} normalization differs from the measured map",
                    species=b.species.name)

    @property
    def names(self) -> list:
        return [b.species.name for b in self.bases]

    def design(self):
        A = np.stack([b.data[self.lag_mask] for b in self.bases], axis=1)
        y = self.measured.data[self.lag_mask]
        return A, y


@dataclass
class AbundanceEstimate:
    names: list
    abundance: np.ndarray  # mg/mL
    residual_norm: float
    iterations: int
    converged: bool
    kkt_violation: float = 0.0
    method: str = "active-set"

    def as_dict(self) -> dict:
        return {n: float(c) for n, c in zip(self.names, self.abundance)}


def nnls_unmix(p: UnmixProblem) -> AbundanceEstimate:
    """Per-species abundances as the non-negative combination of basis maps
    that best matches the measured map on the lag mask."""
    A, y = p.design()
    res = solve_nnls(A, y)
    return AbundanceEstimate(p.names, res.x, res.residual_norm, res.iterations, res.converged,
                             res.kkt_violation, res.method)
