"""Pixel-space and singular-value Laplace baselines, plus a small Jacobi SVD."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ParameterError


class SVDConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class PixDPParams:
    epsilon: float
    pixel_sensitivity: float = 1.0
    neighborhood_pixels: int = 1

    def __post_init__(self):
        if not (self.epsilon > 0 and self.pixel_sensitivity > 0 and self.neighborhood_pixels > 0):
            raise ParameterError("PixDP parameters must be positive")

    @property
    def scale(self) -> float:
        return self.pixel_sensitivity * self.neighborhood_pixels / self.epsilon


@dataclass(frozen=True)
class SVDPrivParams:
    epsilon: float
    rank_kept: int | None = None  # None keeps the full rank
    sv_sensitivity: float = 1.0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ParameterError("epsilon must be positive")
        if self.rank_kept is not None and self.rank_kept < 1:
            raise ParameterError("rank_kept must be positive")


def pixdp_obfuscate(img, p: PixDPParams, rng: np.random.Generator, noise=None) -> np.ndarray:
    """Independent Laplace noise on every pixel, then clamp to [0, 1]."""
    img = np.asarray(img, dtype=float)
    if noise is None:
        noise = rng.laplace(0.0, p.scale, img.shape)
    return np.clip(img + noise, 0.0, 1.0)


def svdpriv_obfuscate(img, p: SVDPrivParams, rng: np.random.Generator, noise=None) -> np.ndarray:
    """Perturb the leading singular values with Laplace noise and reconstruct."""
    img = np.asarray(img, dtype=float)
    H, W = img.shape
    r = min(H, W) if p.rank_kept is None else p.rank_kept
    if r > min(H, W):
        raise ParameterError(f"rank_kept={r} exceeds min(H, W)={min(H, W)}")
    U, S, V = svd(img)
    if noise is None:
        noise = rng.laplace(0.0, p.sv_sensitivity / p.epsilon, r)
    S_noisy = np.maximum(S[:r] + noise, 0.0)
    out = (U[:, :r] * S_noisy) @ V[:, :r].T
    return np.clip(out, 0.0, 1.0)


def svd(M, tol: float = 1e-15, max_sweeps: int = 60):
    """Thin SVD by one-sided (Hestenes) Jacobi rotations.

    Returns ``U`` (H, n), ``S`` (n,) descending, ``V`` (W, n) with
    ``n = min(H, W)`` and ``M = U @ diag(S) @ V.T``.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or not np.all(np.isfinite(M)):
        raise ParameterError("svd expects a finite 2-D matrix")
    H, W = M.shape
    if H < W:
        V, S, U = svd(M.T, tol, max_sweeps)
        return U, S, V
    A = M.copy()
    n = W
    V = np.eye(n)
    # columns below this squared norm are numerically zero and left alone
    floor = (np.finfo(float).eps * np.linalg.norm(M)) ** 2
    for _ in range(max_sweeps):
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                ai, aj = A[:, i], A[:, j]
                alpha = ai @ ai
                beta = aj @ aj
                gamma = ai @ aj
                if gamma == 0.0 or min(alpha, beta) <= floor or abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.sign(zeta) / (abs(zeta) + np.hypot(1.0, zeta)) if zeta != 0 else 1.0
                c = 1.0 / np.hypot(1.0, t)
                s = c * t
                A[:, [i, j]] = np.column_stack([c * ai - s * aj, s * ai + c * aj])
                V[:, [i, j]] = np.column_stack([c * V[:, i] - s * V[:, j], s * V[:, i] + c * V[:, j]])
        if not rotated:
            break
    else:
        raise SVDConvergenceError(f"Jacobi SVD did not converge in {max_sweeps} sweeps")
    S = np.linalg.norm(A, axis=0)
    order = np.argsort(-S, kind="stable")
    S, A, V = S[order], A[:, order], V[:, order]
    U = np.zeros((H, n))
    big = S > S[0] * 1e-13 if S[0] > 0 else np.zeros(n, bool)
    U[:, big] = A[:, big] / S[big]
    S = np.where(big, S, 0.0)
    # complete U with an orthonormal basis where singular values vanish
    for col in np.flatnonzero(~big):
        for e in range(H):
            v = np.zeros(H)
            v[e] = 1.0
            for _ in range(2):
                v -= U[:, :col] @ (U[:, :col].T @ v) + U[:, col + 1 :] @ (U[:, col + 1 :].T @ v)
            nv = np.linalg.norm(v)
            if nv > 1e-6:
                U[:, col] = v / nv
                break
    return U, S, V
