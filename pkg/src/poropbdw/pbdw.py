"""PBDW state estimation.

Given orthonormal representers ``W`` and an orthonormal reduced basis
``Phi`` (both in the joint mass inner product ``M``), a measurement vector
``l`` of orthonormal coordinates is reconstructed as ``u* = v* + eta*`` with

    v* = Phi c,   c = argmin ||G c - l||,   G = W^T M Phi,
    eta* = W (l - G c).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp


class ReconstructionError(RuntimeError):
    pass


def cross_gramian(W: np.ndarray, M: sp.spmatrix, Phi: np.ndarray) -> np.ndarray:
    """``G_ij = <w_i, rho_j>``, shape ``m x n``."""
    if W.shape[0] != M.shape[0] or Phi.shape[0] != M.shape[0]:
        raise ValueError("W, M and Phi dimensions disagree")
    return W.T @ (M @ Phi)


def stability_constant(G: np.ndarray, squared: bool = False) -> float:
    """Smallest singular value of ``G`` (``squared`` returns that of ``G^T G``)."""
    G = np.atleast_2d(G)
    if G.shape[1] == 0:
        return 1.0
    if G.shape[1] > G.shape[0]:
        return 0.0
    s = np.linalg.svd(G, compute_uv=False)
    beta = float(s.min())
    return beta**2 if squared else beta


def stability_curve(G_full: np.ndarray, n_max: int | None = None) -> np.ndarray:
    """``beta(V_n, W)`` for ``n = 1..n_max`` along a nested basis."""
    n_max = G_full.shape[1] if n_max is None else n_max
    return np.array([stability_constant(G_full[:, :n]) for n in range(1, n_max + 1)])


def apriori_bound(eps: float, beta: float, eps_u: float | None = None, eps_p: float | None = None,
                  zeta: float | None = None) -> float:
    """``eps / beta``, or ``sqrt(eps_u^2 + zeta eps_p^2) / beta`` when component tails are given."""
    if not beta > 0:
        raise ValueError("stability constant must be positive")
    if eps_u is not None and eps_p is not None:
        if zeta is None:
            raise ValueError("joint bound needs zeta")
        return float(np.sqrt(eps_u**2 + zeta * eps_p**2) / beta)
    return float(eps / beta)


def select_dimension(eps, beta) -> int:
    """``argmin_n eps_n / beta_n`` over admissible ``n`` (ties go to the smaller n).

    ``eps`` and ``beta`` are indexed by ``n = 1, 2, ...``; entries with
    ``beta <= 0`` are inadmissible.
    """
    eps = np.asarray(eps, float)
    beta = np.asarray(beta, float)
    if eps.shape != beta.shape:
        raise ValueError("eps and beta must have the same length")
    ok = beta > 0
    if not ok.any():
        raise ValueError("no admissible dimension (beta vanishes everywhere)")
    ratio = np.where(ok, eps / np.where(ok, beta, 1.0), np.inf)
    return int(np.argmin(ratio)) + 1


@dataclass(frozen=True)
class Reconstruction:
    v: np.ndarray
    eta: np.ndarray
    coefficients: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @property
    def u(self) -> np.ndarray:
        return self.v + self.eta


@dataclass
class Reconstructor:
    """Closed-form PBDW solver for fixed ``Phi`` and ``W``.

    ``G`` is factorized once by a column-pivoted QR; each call then costs
    two triangular solves and two tall matrix-vector products.
    """

    Phi: np.ndarray
    W: np.ndarray
    M: sp.spmatrix
    zeta: float = float("nan")
    eps_n: float = float("nan")
    max_condition: float = 1e12

    def __post_init__(self):
        m, n = self.W.shape[1], self.Phi.shape[1]
        if n > m:
            raise ValueError(f"need m >= n (got n={n}, m={m})")
        if n < 1:
            raise ValueError("reduced basis is empty")
        self.G = cross_gramian(self.W, self.M, self.Phi)
        s = np.linalg.svd(self.G, compute_uv=False)
        self.beta = float(s.min())
        self.beta_squared = float(np.min(np.linalg.eigvalsh(self.G.T @ self.G)))
        if not self.beta > 0:
            raise ReconstructionError("stability constant is zero: the reduced space is not observable")
        self.condition = float(s.max() / s.min())
        if self.condition > self.max_condition:
            raise ReconstructionError(f"cross-Gramian condition number {self.condition:.3e} exceeds "
                                      f"{self.max_condition:.1e} (beta={self.beta:.3e})")
        self._Q, self._R, self._perm = sla.qr(self.G, mode="economic", pivoting=True)
        self._MPhi = self.M @ self.Phi

    @property
    def n(self) -> int:
        return self.Phi.shape[1]

    @property
    def m(self) -> int:
        return self.W.shape[1]

    @property
    def bound(self) -> float:
        return apriori_bound(self.eps_n, self.beta) if np.isfinite(self.eps_n) else float("nan")

    def coefficients(self, l: np.ndarray) -> np.ndarray:
        """Least-squares ``c`` for ``l`` of shape ``(m,)`` or ``(m, k)``."""
        z = sla.solve_triangular(self._R, self._Q.T @ l)
        c = np.empty_like(z)
        c[self._perm] = z
        return c

    def reconstruct(self, l: np.ndarray, diagnostics: bool = True) -> Reconstruction:
        l = np.asarray(l, float)
        if l.shape[0] != self.m:
            raise ValueError(f"expected {self.m} measurements, got {l.shape[0]}")
        c = self.coefficients(l)
        v = self.Phi @ c
        eta = self.W @ (l - self.G @ c)
        diag = self.diagnose(v, eta, c, l) if diagnostics else {}
        return Reconstruction(v, eta, c, diag)

    def diagnose(self, v, eta, c, l) -> dict:
        u = v + eta
        ln = np.linalg.norm(l, axis=0)
        scale = np.where(ln > 0, ln, 1.0)
        cons = np.linalg.norm(self.W.T @ (self.M @ u) - l, axis=0) / scale
        # |<eta, rho_i>| <= ||eta|| <= ||l||, so both residuals share the data scale
        orth = np.abs(self._MPhi.T @ eta).max(axis=0) / scale
        gtl = np.linalg.norm(self.G.T @ l, axis=0)
        normal = np.linalg.norm(self.G.T @ (self.G @ c - l), axis=0) / np.where(gtl > 0, gtl, 1.0)
        out = {
            "beta": self.beta,
            "beta_squared": self.beta_squared,
            "eps_n": self.eps_n,
            "bound": self.bound,
            "n": self.n,
            "m": self.m,
            "zeta": self.zeta,
            "condition": self.condition,
        }
        for k, val in (("constraint_residual", cons), ("orthogonality_residual", orth), ("normal_residual", normal)):
            out[k] = float(np.max(val))
        return out

    def reconstruct_series(self, L: np.ndarray) -> np.ndarray:
        """Reconstructed states for measurements ``L`` of shape ``(steps, m)``; returns ``(steps, N)``."""
        L = np.atleast_2d(L)
        c = self.coefficients(L.T)
        return (self.Phi @ c + self.W @ (L.T - self.G @ c)).T


def solve_saddle(l: np.ndarray, Phi: np.ndarray, W: np.ndarray, M: sp.spmatrix, max_dofs: int = 5000):
    """Dense solve of the optimality system (test oracle).

    Unknowns ``(u, lam)`` satisfy ``(I - Phi Phi^T M) u - W lam = 0`` and
    ``W^T M u = l``.
    """
    N, m = W.shape
    if N > max_dofs:
        raise ValueError(f"saddle solve restricted to {max_dofs} DOFs (got {N})")
    Md = M.toarray() if sp.issparse(M) else np.asarray(M)
    K = np.zeros((N + m, N + m))
    K[:N, :N] = np.eye(N) - Phi @ (Phi.T @ Md)
    K[:N, N:] = -W
    K[N:, :N] = W.T @ Md
    rhs = np.concatenate([np.zeros(N), np.asarray(l, float)])
    with warnings.catch_warnings():
        warnings.simplefilter("error", sla.LinAlgWarning)
        try:
            x = sla.solve(K, rhs)
        except (np.linalg.LinAlgError, sla.LinAlgWarning) as exc:
            G = W.T @ (Md @ Phi)
            raise ReconstructionError(f"singular saddle system (beta={stability_constant(G):.3e})") from exc
    return x[:N], x[N:]


def joint_norm(y: np.ndarray, M: sp.spmatrix) -> float:
    return float(np.sqrt(max(y @ (M @ y), 0.0)))
