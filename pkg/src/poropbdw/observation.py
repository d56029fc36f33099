"""Voxel observations of the displacement field.

Each voxel contributes three functionals, one per displacement component,
``l_i^j(v) = int_{voxel_i} v . e_j dx``. Their Riesz representers in the
joint mass inner product have a zero pressure block, and an orthonormal
basis of their span defines the measurement space.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem import QUAD_BARY, _vector_dofs, assemble_joint_mass, quadrature_points
from .mesh import Mesh

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class VoxelGrid:
    """Axis-aligned boxes ``[lo, hi)`` with stable integer ids."""

    lo: np.ndarray
    hi: np.ndarray
    ids: np.ndarray
    planes: tuple[float, ...] = ()
    edge: float | None = None
    kind: str = "custom"

    def __post_init__(self):
        lo = np.atleast_2d(np.asarray(self.lo, float))
        hi = np.atleast_2d(np.asarray(self.hi, float))
        if lo.shape != hi.shape or lo.shape[1:] != (3,):
            raise ValueError("voxel corners must have shape (n, 3)")
        if np.any(hi <= lo):
            raise ValueError("voxels must have positive extent")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "ids", np.asarray(self.ids, np.int64).reshape(-1))
        object.__setattr__(self, "planes", tuple(float(z) for z in self.planes))

    @property
    def n_voxels(self) -> int:
        return len(self.lo)

    @property
    def volumes(self) -> np.ndarray:
        return np.prod(self.hi - self.lo, axis=1)

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def subset(self, keep: np.ndarray) -> "VoxelGrid":
        return VoxelGrid(self.lo[keep], self.hi[keep], self.ids[keep], self.planes, self.edge, self.kind)

    def overlaps(self) -> list[tuple[int, int]]:
        """Pairs of voxels whose interiors intersect (empty for a valid grid)."""
        out = []
        for i in range(self.n_voxels):
            inter = np.minimum(self.hi[i], self.hi[i + 1:]) - np.maximum(self.lo[i], self.lo[i + 1:])
            for j in np.flatnonzero(np.all(inter > 0, axis=1)):
                out.append((i, i + 1 + int(j)))
        return out

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "planes": list(self.planes),
            "edge": self.edge,
            "ids": self.ids.tolist(),
            "lo": self.lo.tolist(),
            "hi": self.hi.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "VoxelGrid":
        return cls(np.array(d["lo"], float), np.array(d["hi"], float), np.array(d["ids"]),
                   tuple(d.get("planes", ())), d.get("edge"), d.get("kind", "custom"))

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path) -> "VoxelGrid":
        with open(path) as f:
            return cls.from_json(json.load(f))


def _inside(pts: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    return np.all((pts >= lo) & (pts < hi), axis=-1)


def _voxel_weights(grid: VoxelGrid, mesh: Mesh) -> np.ndarray:
    """Quadrature weight of the mesh falling inside each voxel."""
    pts, w = quadrature_points(mesh)
    pts, w = pts.reshape(-1, 3), w.ravel()
    return np.array([w[_inside(pts, grid.lo[i], grid.hi[i])].sum() for i in range(grid.n_voxels)])


def _drop_empty(grid: VoxelGrid, mesh: Mesh) -> VoxelGrid:
    covered = _voxel_weights(grid, mesh) > 0
    if not covered.all():
        log.info("dropping %d voxels outside the mesh", int((~covered).sum()))
    if not covered.any():
        raise ValueError("no voxel intersects the mesh")
    return grid.subset(np.flatnonzero(covered))


def _tile(lo: float, hi: float, edge: float) -> np.ndarray:
    n = max(1, math.ceil((hi - lo) / edge - 1e-9))
    return lo + edge * np.arange(n)


def make_slice_voxels(mesh: Mesh, planes, edge: float) -> VoxelGrid:
    """Tile each plane ``z = z_k`` with cubes of side ``edge`` centered on the plane.

    The in-plane tiling starts at the lower corner of the mesh bounding box.
    Voxels that miss the mesh are dropped; the rest are ordered
    lexicographically by center ``(z, y, x)``.
    """
    if not edge > 0:
        raise ValueError("voxel edge must be positive")
    planes = tuple(float(z) for z in planes)
    if not planes:
        raise ValueError("need at least one plane")
    (x0, y0, z0), (x1, y1, z1) = mesh.bounding_box
    for z in planes:
        if not z0 <= z <= z1:
            raise ValueError(f"plane z={z} lies outside the mesh z-range [{z0}, {z1}]")
    xs, ys = _tile(x0, x1, edge), _tile(y0, y1, edge)
    lo = []
    for z in sorted(planes):
        X, Y = np.meshgrid(xs, ys, indexing="xy")
        lo.append(np.column_stack([X.ravel(), Y.ravel(), np.full(X.size, z - edge / 2)]))
    lo = np.concatenate(lo)
    grid = VoxelGrid(lo, lo + edge, np.arange(len(lo)), planes, edge, "slices")
    grid = _drop_empty(grid, mesh)
    if grid.overlaps():
        raise ValueError("slice voxels overlap; planes must be at least one edge apart")
    return grid


def make_box_voxels(mesh: Mesh, edge: float) -> VoxelGrid:
    """Tile the whole bounding box with cubes of side ``edge`` (full-domain data)."""
    if not edge > 0:
        raise ValueError("voxel edge must be positive")
    (x0, y0, z0), (x1, y1, z1) = mesh.bounding_box
    Z, Y, X = np.meshgrid(_tile(z0, z1, edge), _tile(y0, y1, edge), _tile(x0, x1, edge), indexing="ij")
    lo = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])
    grid = VoxelGrid(lo, lo + edge, np.arange(len(lo)), (), edge, "box")
    return _drop_empty(grid, mesh)


# ---------------------------------------------------------------------------
# Functionals and representers


@dataclass(frozen=True)
class FunctionalMatrix:
    """Sparse ``m x N`` matrix; row ``3*i + j`` is component ``j`` on voxel ``i``."""

    matrix: sp.csr_matrix
    grid: VoxelGrid
    normalized: bool = False

    @property
    def m(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_dofs(self) -> int:
        return self.matrix.shape[1]

    def __matmul__(self, x):
        return self.matrix @ x


def assemble_functionals(grid: VoxelGrid, mesh: Mesh, normalize: bool = False) -> FunctionalMatrix:
    """Voxel integrals of each displacement component.

    A quadrature point of the 4-point rule contributes iff it lies in the
    voxel. With ``normalize`` each row is divided by the voxel volume.
    """
    pts, w = quadrature_points(mesh)
    n_el = mesh.n_elements
    flat = pts.reshape(-1, 3)
    vd = _vector_dofs(mesh).reshape(n_el, 4, 3)
    rows, cols, vals = [], [], []
    for i in range(grid.n_voxels):
        hit = _inside(flat, grid.lo[i], grid.hi[i]).reshape(n_el, 4)
        els, qs = np.nonzero(hit)
        if len(els) == 0:
            continue
        # weight on node k of element e from quadrature point q
        c = w[els, qs][:, None] * QUAD_BARY[qs]
        scale = 1.0 / grid.volumes[i] if normalize else 1.0
        for j in range(3):
            rows.append(np.full(c.size, 3 * i + j))
            cols.append(vd[els, :, j].ravel())
            vals.append(scale * c.ravel())
    N = 4 * mesh.n_nodes
    m = 3 * grid.n_voxels
    if rows:
        L = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(m, N)).tocsr()
    else:
        L = sp.csr_matrix((m, N))
    L.sum_duplicates()
    return FunctionalMatrix(L, grid, normalize)


def riesz_representers(F: FunctionalMatrix | sp.spmatrix, M: sp.spmatrix) -> np.ndarray:
    """Columns ``w_i`` solving ``M w_i = l_i`` (dense ``N x m``)."""
    L = F.matrix if isinstance(F, FunctionalMatrix) else sp.csr_matrix(F)
    try:
        lu = spla.splu(sp.csc_matrix(M))
    except RuntimeError as exc:
        raise np.linalg.LinAlgError("mass matrix factorization failed") from exc
    rhs = L.T.toarray()
    W = lu.solve(rhs) if rhs.shape[1] else np.zeros_like(rhs)
    return np.asarray(W)


# ---------------------------------------------------------------------------
# Orthonormalization


def _bmgs(X: np.ndarray, M: sp.spmatrix, tol_abs: float, block: int):
    """One right-looking block modified Gram-Schmidt sweep.

    Returns the orthonormal columns, the coefficients ``R`` with
    ``X ~= Q R`` and the indices of kept columns.
    """
    # rows of XT / QT are the vectors, so every slice below is contiguous
    XT = np.array(X.T, float, order="C")
    k, n = XT.shape
    QT = np.empty((k, n))
    MQT = np.empty((k, n))
    R = np.zeros((k, k))
    kept: list[int] = []
    for b0 in range(0, k, block):
        b1 = min(b0 + block, k)
        start = len(kept)
        for j in range(b0, b1):
            x = XT[j]
            for r in range(start, len(kept)):
                c = MQT[r] @ x
                R[r, j] += c
                x -= c * QT[r]
            Mx = M @ x
            nrm = math.sqrt(max(x @ Mx, 0.0))
            if nrm <= tol_abs:
                continue
            r = len(kept)
            QT[r] = x / nrm
            MQT[r] = Mx / nrm
            R[r, j] = nrm
            kept.append(j)
        if b1 < k and len(kept) > start:
            C = MQT[start:len(kept)] @ XT[b1:].T
            R[start:len(kept), b1:] += C
            XT[b1:] -= C.T @ QT[start:len(kept)]
    r = len(kept)
    return QT[:r].T.copy(), R[:r], np.array(kept, dtype=np.int64)


@dataclass(frozen=True)
class ObservationSpace:
    """Orthonormal representers ``W`` with ``W^T M W = I``.

    ``R`` (``m x m_raw``) satisfies ``W_raw = W R``; ``kept`` lists the raw
    columns that survived the drop test.
    """

    W: np.ndarray
    M: sp.csr_matrix
    R: np.ndarray
    kept: np.ndarray
    functionals: FunctionalMatrix | None = None
    provenance: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return self.W.shape[1]

    @property
    def m_raw(self) -> int:
        return self.R.shape[1]

    def measure(self, y: np.ndarray) -> np.ndarray:
        """Orthonormal coordinates ``W^T M y``; ``y`` is ``(N,)`` or ``(N, k)``."""
        return self.W.T @ (self.M @ y)

    def coordinates(self, raw: np.ndarray) -> np.ndarray:
        """Map raw functional values to orthonormal coordinates.

        Works on ``(m_raw,)`` or ``(steps, m_raw)`` arrays. Dropped
        functionals are ignored.
        """
        raw = np.asarray(raw, float)
        Rk = self.R[:, self.kept]
        sol = sla.solve_triangular(Rk.T, np.atleast_2d(raw)[:, self.kept].T, lower=True)
        return sol.T.reshape(raw.shape[:-1] + (self.m,))

    def project(self, y: np.ndarray) -> np.ndarray:
        return self.W @ self.measure(y)


def orthonormalize(Wraw: np.ndarray, M: sp.spmatrix, drop_tol: float = 1e-12, block: int = 64,
                   functionals: FunctionalMatrix | None = None, provenance: dict | None = None) -> ObservationSpace:
    """M-orthonormal basis of ``span(Wraw)`` by block MGS plus one full re-orthogonalization.

    A column whose remaining norm falls below ``drop_tol`` times the largest
    input column norm is dropped with a warning.
    """
    Wraw = np.asarray(Wraw, float)
    M = sp.csr_matrix(M)
    if Wraw.ndim != 2 or Wraw.shape[0] != M.shape[0]:
        raise ValueError("representer matrix and mass matrix dimensions disagree")
    if Wraw.shape[1] == 0:
        raise ValueError("no representers to orthonormalize")
    norms = np.sqrt(np.maximum(np.einsum("ij,ij->j", Wraw, M @ Wraw), 0.0))
    ref = norms.max()
    if ref == 0:
        raise ValueError("all representers vanish")
    tol = drop_tol * ref
    Q1, R1, kept = _bmgs(Wraw, M, tol, block)
    Q2, R2, kept2 = _bmgs(Q1, M, drop_tol, block)
    if len(kept2) < len(kept):
        kept = kept[kept2]
        R1 = R1[kept2]
    R = R2 @ R1
    dropped = Wraw.shape[1] - len(kept)
    if dropped:
        warnings.warn(f"dropped {dropped} nearly dependent representers (m={len(kept)})", RuntimeWarning,
                      stacklevel=2)
    return ObservationSpace(Q2, M, R, kept, functionals, dict(provenance or {}))


def build_observation_space(mesh: Mesh, grid: VoxelGrid, zeta: float, normalize: bool = False,
                            drop_tol: float = 1e-12) -> ObservationSpace:
    """Offline construction from mesh and grid only."""
    F = assemble_functionals(grid, mesh, normalize=normalize)
    M = assemble_joint_mass(mesh, zeta)
    Wraw = riesz_representers(F, M)
    prov = {"grid": grid.kind, "planes": list(grid.planes), "edge": grid.edge, "n_voxels": grid.n_voxels,
            "normalized": normalize, "zeta": zeta}
    return orthonormalize(Wraw, M, drop_tol=drop_tol, functionals=F, provenance=prov)


# ---------------------------------------------------------------------------
# Measurements


@dataclass(frozen=True)
class MeasurementSeries:
    """Raw functional values, one row per stored time step."""

    values: np.ndarray
    tau: float
    xi: float = 0.0
    seed: int | None = None

    @property
    def m(self) -> int:
        return self.values.shape[1]

    @property
    def steps(self) -> int:
        return self.values.shape[0] - 1


def observe(series, F: FunctionalMatrix) -> MeasurementSeries:
    """Apply the functionals to every stored state of a time series."""
    states = np.atleast_2d(series.states)
    if states.shape[1] != F.n_dofs:
        raise ValueError("state length does not match the functional matrix")
    return MeasurementSeries(np.asarray((F.matrix @ states.T).T), series.tau)


def add_noise(ms: MeasurementSeries, xi: float, seed: int | np.random.SeedSequence | None = None) -> MeasurementSeries:
    """Gaussian noise with ``sigma = xi * max |l|`` over all entries and times."""
    if xi < 0:
        raise ValueError("noise intensity must be nonnegative")
    s = seed if isinstance(seed, (int, np.integer)) or seed is None else None
    if xi == 0:
        return MeasurementSeries(ms.values.copy(), ms.tau, 0.0, s)
    rng = np.random.default_rng(seed)
    sigma = noise_sigma(ms.values, xi)
    return MeasurementSeries(ms.values + rng.normal(0.0, sigma, ms.values.shape), ms.tau, float(xi), s)


def noise_sigma(values: np.ndarray, xi: float) -> float:
    return float(xi * np.max(np.abs(values))) if np.size(values) else 0.0
