"""Training manifold and POD reduced basis.

Snapshots are joint ``(u, p)`` states gathered from forward runs over a
sample of ``theta = (kappa, E, nu, p_ventricles)``. The basis is computed
through the ``K x K`` covariance matrix in the joint mass inner product.
"""

from __future__ import annotations

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .fem import MaterialParameters, ReferenceOperators, SolverError, TimeConfig, simulate
from .mesh import Mesh

log = logging.getLogger(__name__)

PARAMETER_NAMES = ("kappa", "E", "nu", "p_ventricles")


@dataclass(frozen=True)
class ParameterRanges:
    kappa: tuple[float, float] = (1e-9, 1e-8)
    E: tuple[float, float] = (1e5, 1e6)
    nu: tuple[float, float] = (0.4, 0.45)
    p_ventricles: tuple[float, float] = (1e4, 1.1e4)

    def as_array(self) -> np.ndarray:
        return np.array([self.kappa, self.E, self.nu, self.p_ventricles], float)

    def validate(self) -> None:
        for name, (lo, hi) in zip(PARAMETER_NAMES, self.as_array()):
            if not lo < hi:
                raise ValueError(f"empty range for {name}: [{lo}, {hi}]")

    def contains(self, theta) -> bool:
        r = self.as_array()
        t = np.asarray(theta, float)
        return bool(np.all((t >= r[:, 0]) & (t <= r[:, 1])))

    def corners(self) -> np.ndarray:
        return np.array(list(itertools.product(*self.as_array())))

    @classmethod
    def from_dict(cls, d: dict) -> "ParameterRanges":
        return cls(**{k: tuple(v) for k, v in d.items()})

    def to_dict(self) -> dict:
        return {k: list(v) for k, v in zip(PARAMETER_NAMES, self.as_array().tolist())}


@dataclass(frozen=True)
class ParameterSample:
    id: int
    theta: tuple[float, float, float, float]
    provenance: str = ""

    def material(self, base: MaterialParameters = MaterialParameters()) -> MaterialParameters:
        return base.with_theta(*self.theta)


def sample_parameters(
    ranges: ParameterRanges = ParameterRanges(),
    counts: int | tuple[int, ...] = 2,
    strategy: str = "grid",
    seed: int | None = None,
    exclude=(),
    start_id: int = 0,
) -> list[ParameterSample]:
    """Tensor grid (``counts`` per axis) or ``counts`` uniform random draws.

    Random draws equal to any tuple in ``exclude`` are rejected and redrawn.
    A single grid point per axis sits at the interval midpoint.
    """
    ranges.validate()
    r = ranges.as_array()
    if strategy == "grid":
        per_axis = (counts,) * 4 if np.isscalar(counts) else tuple(counts)
        if len(per_axis) != 4 or min(per_axis) < 1:
            raise ValueError("grid counts must be four positive integers")
        axes = [np.linspace(lo, hi, c) if c > 1 else np.array([(lo + hi) / 2]) for (lo, hi), c in zip(r, per_axis)]
        out = []
        for k, idx in enumerate(itertools.product(*[range(c) for c in per_axis])):
            theta = tuple(float(axes[a][i]) for a, i in enumerate(idx))
            out.append(ParameterSample(start_id + k, theta, "grid" + str(list(idx))))
        return out
    if strategy == "random":
        if not np.isscalar(counts) or counts < 1:
            raise ValueError("random sampling needs a positive total count")
        rng = np.random.default_rng(seed)
        banned = {tuple(float(x) for x in t) for t in exclude}
        out = []
        while len(out) < counts:
            theta = tuple(float(x) for x in rng.uniform(r[:, 0], r[:, 1]))
            if theta in banned:
                continue
            banned.add(theta)
            out.append(ParameterSample(start_id + len(out), theta, f"random[seed={seed}]"))
        return out
    raise ValueError(f"unknown sampling strategy {strategy!r}")


@dataclass(frozen=True)
class SnapshotSet:
    """Snapshot matrix ``A`` (``N x K``) with per-column ``(sample_id, step)``."""

    A: np.ndarray
    sample_ids: np.ndarray
    steps: np.ndarray
    samples: tuple[ParameterSample, ...]
    tau: float
    n_nodes: int
    failures: dict = field(default_factory=dict)
    zeta: float | None = None

    @property
    def K(self) -> int:
        return self.A.shape[1]

    @property
    def N(self) -> int:
        return self.A.shape[0]

    def columns_of(self, sample_id: int) -> np.ndarray:
        return np.flatnonzero(self.sample_ids == sample_id)

    def metadata(self) -> list[dict]:
        return [{"column": k, "sample_id": int(s), "step": int(t)}
                for k, (s, t) in enumerate(zip(self.sample_ids, self.steps))]


def _retained(time: TimeConfig, retain) -> np.ndarray:
    if retain is None:
        return np.arange(1, time.steps + 1)
    retain = np.asarray(retain, np.int64)
    if retain.size == 0 or retain.min() < 0 or retain.max() > time.steps:
        raise ValueError("retained steps must lie in 0..steps")
    return np.unique(retain)


def generate_manifold(
    mesh: Mesh,
    samples,
    time: TimeConfig = TimeConfig(),
    base: MaterialParameters = MaterialParameters(),
    retain=None,
    workers: int = 1,
    **sim_kwargs,
) -> SnapshotSet:
    """Forward-solve every sample and stack the retained steps as columns.

    By default steps ``1..steps`` are retained (the initial state is
    identically zero). A failing sample is recorded in ``failures`` and
    skipped.
    """
    samples = tuple(samples)
    keep = _retained(time, retain)

    def run(s: ParameterSample):
        try:
            return simulate(mesh, s.material(base), time, **sim_kwargs).states[keep]
        except (SolverError, ValueError, np.linalg.LinAlgError, FloatingPointError) as exc:
            log.error("sample %d failed: %s", s.id, exc)
            return exc

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, samples))
    else:
        results = [run(s) for s in samples]

    blocks, ids, steps, ok, failures = [], [], [], [], {}
    for s, res in zip(samples, results):
        if isinstance(res, Exception):
            failures[s.id] = f"{type(res).__name__}: {res}"
            continue
        blocks.append(res)
        ids.append(np.full(len(keep), s.id))
        steps.append(keep)
        ok.append(s)
    if not blocks:
        raise SolverError("every training sample failed")
    A = np.ascontiguousarray(np.concatenate(blocks).T)
    return SnapshotSet(A, np.concatenate(ids), np.concatenate(steps), tuple(ok), time.tau, mesh.n_nodes, failures)


def component_norms(A: np.ndarray, ops: ReferenceOperators) -> tuple[np.ndarray, np.ndarray]:
    """Column-wise L2 norms of the displacement and pressure blocks."""
    nu = 3 * ops.n_nodes
    A = np.atleast_2d(A.T).T
    u, p = A[:nu], A[nu:]
    nu_sq = np.einsum("ij,ij->j", u, ops.vector_mass @ u)
    np_sq = np.einsum("ij,ij->j", p, ops.scalar_mass @ p)
    return np.sqrt(np.maximum(nu_sq, 0)), np.sqrt(np.maximum(np_sq, 0))


def compute_zeta(S: SnapshotSet | np.ndarray, ops: ReferenceOperators) -> float:
    """``max ||u|| / max ||p||`` over the snapshots."""
    A = S.A if isinstance(S, SnapshotSet) else np.asarray(S)
    if A.size == 0:
        raise ValueError("empty snapshot set")
    nu, np_ = component_norms(A, ops)
    if np_.max() == 0:
        raise ValueError("all snapshot pressures vanish; zeta undefined")
    return float(nu.max() / np_.max())


@dataclass(frozen=True)
class ReducedBasis:
    """POD modes ``Phi`` (``N x n``) and all covariance eigenvalues (descending)."""

    Phi: np.ndarray
    eigenvalues: np.ndarray
    zeta: float
    provenance: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.Phi.shape[1]

    def truncate(self, n: int) -> "ReducedBasis":
        if not 0 <= n <= self.n:
            raise ValueError(f"cannot truncate a {self.n}-mode basis to {n}")
        return ReducedBasis(self.Phi[:, :n], self.eigenvalues, self.zeta, dict(self.provenance, n=n))

    def tail_error(self, n: int | None = None) -> float:
        return pod_tail_error(self.eigenvalues, self.n if n is None else n)


def _fix_signs(Phi: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(Phi), axis=0)
    s = np.sign(Phi[idx, np.arange(Phi.shape[1])])
    s[s == 0] = 1.0
    return Phi * s


def compute_pod(S: SnapshotSet | np.ndarray, M: sp.spmatrix, n: int | None = None, drop_tol: float = 1e-12,
                zeta: float | None = None) -> ReducedBasis:
    """POD by the method of snapshots.

    ``C = A^T M A = B diag(Lambda) B^T``; the modes are ``A B Lambda^{-1/2}``
    followed by one M-orthonormalization sweep to remove round-off. Modes with
    ``Lambda_i < drop_tol * Lambda_1`` are not available. ``n=None`` keeps all
    available modes.
    """
    A = S.A if isinstance(S, SnapshotSet) else np.asarray(S, float)
    if A.ndim != 2 or A.shape[1] < 1:
        raise ValueError("need at least one snapshot")
    if zeta is None and isinstance(S, SnapshotSet):
        zeta = S.zeta
    MA = M @ A
    C = A.T @ MA
    C = 0.5 * (C + C.T)
    lam, B = np.linalg.eigh(C)
    lam, B = lam[::-1], B[:, ::-1]
    if lam[0] <= 0:
        raise ValueError("snapshot covariance is zero")
    neg = lam < -1e-12 * lam[0]
    if neg.any():
        log.warning("clamping %d negative covariance eigenvalues (min %.3e)", int(neg.sum()), lam.min())
    lam = np.maximum(lam, 0.0)
    avail = int(np.sum(lam >= drop_tol * lam[0]))
    n = avail if n is None else n
    if n > avail:
        raise ValueError(f"requested n={n} exceeds the {avail} modes above the drop tolerance")
    Phi = A @ (B[:, :n] / np.sqrt(lam[:n]))
    # one Gram-Schmidt sweep against round-off; Cholesky of the small Gram matrix
    if n:
        G = Phi.T @ (M @ Phi)
        L = np.linalg.cholesky(0.5 * (G + G.T))
        Phi = np.linalg.solve(L, Phi.T).T
    Phi = _fix_signs(Phi)
    return ReducedBasis(Phi, lam, float(zeta) if zeta is not None else float("nan"), {"K": A.shape[1], "n": n})


def pod_tail_error(eigenvalues, n: int) -> float:
    """``sqrt(sum_{i>n} Lambda_i / sum_i Lambda_i)``."""
    lam = np.clip(np.asarray(eigenvalues, float), 0.0, None)
    if not 0 <= n <= len(lam):
        raise ValueError(f"n must lie in 0..{len(lam)}")
    total = lam.sum()
    if total == 0:
        raise ValueError("all eigenvalues are zero")
    # sum the tail from the small end for accuracy
    tail = lam[n:][::-1].sum()
    return float(np.sqrt(tail / total))


def tail_curve(eigenvalues) -> np.ndarray:
    """``eps_n`` for ``n = 0..K``."""
    lam = np.clip(np.asarray(eigenvalues, float), 0.0, None)
    total = lam.sum()
    if total == 0:
        raise ValueError("all eigenvalues are zero")
    tails = np.concatenate([np.cumsum(lam[::-1])[::-1], [0.0]])
    return np.sqrt(tails / total)


def component_tail_errors(S: SnapshotSet | np.ndarray, basis: ReducedBasis, ops: ReferenceOperators,
                          n: int) -> tuple[float, float]:
    """Relative displacement and pressure projection tails at dimension ``n``.

    Each is ``sqrt(sum_k ||c_k - (Pi c)_k||^2 / sum_k ||c_k||^2)`` for the
    component blocks of the snapshots, with ``Pi`` the joint projection on the
    first ``n`` modes.
    """
    A = S.A if isinstance(S, SnapshotSet) else np.asarray(S, float)
    zeta = basis.zeta
    if not np.isfinite(zeta):
        raise ValueError("basis carries no zeta; pass zeta to compute_pod")
    M = sp.block_diag([ops.vector_mass, zeta * ops.scalar_mass], format="csr")
    Phi = basis.Phi[:, :n]
    E = A - Phi @ (Phi.T @ (M @ A))
    eu, ep = component_norms(E, ops)
    au, ap = component_norms(A, ops)
    return float(np.sqrt((eu**2).sum() / (au**2).sum())), float(np.sqrt((ep**2).sum() / (ap**2).sum()))
