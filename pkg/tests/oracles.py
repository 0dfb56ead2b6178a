"""Independent reference computations and problem generators shared by unit and acceptance tests."""

import math

import numpy as np

from speckleholo.inversion import TrainConfig, TrainingSet, encode, softplus, train_stage1

GRID_STEP = 0.01
GRID_MAX = 5.0


def grid_search_nnls(A, y, step=GRID_STEP, upper=GRID_MAX):
    """Exhaustive minimizer of ||A c - y||^2 over the lattice {0, step, ..., upper}^k, k <= 3.

    The last coordinate is not enumerated: for fixed leading coordinates the
    objective is a convex quadratic in it, so the best lattice value is the
    lattice point nearest the clipped 1-D minimizer. Every other coordinate
    is enumerated in full.
    """
    A = np.asarray(A, float)
    y = np.asarray(y, float)
    k = A.shape[1]
    if not 1 <= k <= 3:
        raise ValueError("grid search supports 1 to 3 columns")
    G = A.T @ A
    b = A.T @ y
    lattice = np.round(np.arange(0.0, upper + step / 2, step), 10)
    axes = np.meshgrid(*([lattice] * (k - 1)), indexing="ij")
    lead = np.stack([a.ravel() for a in axes], axis=1) if k > 1 else np.zeros((1, 0))
    # last coordinate minimizer given the leading ones
    g_ll = G[-1, -1]
    cross = lead @ G[:-1, -1] if k > 1 else np.zeros(1)
    last = (b[-1] - cross) / g_ll if g_ll > 0 else np.zeros(len(lead))
    last = np.clip(np.round(last / step) * step, 0.0, upper)
    # nearest lattice point might tie with a neighbour; check both sides
    best_val, best = np.inf, None
    for shift in (-step, 0.0, step):
        cand_last = np.clip(last + shift, 0.0, upper)
        C = np.hstack([lead, cand_last[:, None]])
        val = np.einsum("ij,jk,ik->i", C, G, C) - 2 * C @ b
        i = int(np.argmin(val))
        if val[i] < best_val:
            best_val, best = val[i], C[i]
    return best


def random_problem(rng, k, m=40, noise=0.01):
    """Well-conditioned NNLS instance whose solution lies inside [0, 5]^k."""
    A = rng.normal(size=(m, k))
    c = rng.uniform(0, 4.5, size=k)
    c[rng.random(k) < 0.3] = 0.0
    y = A @ c + noise * rng.normal(size=m)
    return A, y


def linear_head_set(seed=0, n=120):
    """Targets an affine+softplus head can represent exactly on frozen features.

    Returns the set, the frozen stage-I parameters and the encoded features.
    """
    rng = np.random.default_rng(seed)
    X, I = rng.normal(size=(n, 4)), rng.normal(size=(n, 2))
    t = np.eye(2)[rng.integers(0, 2, n)]
    frozen = train_stage1(TrainingSet(X, I, t, np.zeros((n, 2))),
                          TrainConfig(epochs=50, seed=seed, hidden=8)).params
    H = encode(X, I, frozen)
    M = rng.normal(size=(2, 8))
    c = softplus(H @ M.T + np.array([0.5, -0.2]))
    return TrainingSet(X, I, t, c), frozen, H


def sphere_forward_amplitude(radius, alpha):
    """Area integral of ``exp(i*alpha*w) - 1`` over a sphere's projected disk.

    ``w = 2*sqrt(R^2 - rho^2)`` is the chord; with ``t = sqrt(R^2 - rho^2)``
    the integral becomes ``2*pi*int_0^R t*(exp(2i*alpha*t) - 1) dt``, which
    integrates by parts in closed form. Units follow ``radius`` (area) and
    ``alpha`` (phase per unit chord).
    """
    b = 2j * alpha
    R = radius
    return 2 * math.pi * (np.exp(b * R) * (R / b - 1 / b**2) + 1 / b**2 - R * R / 2)
