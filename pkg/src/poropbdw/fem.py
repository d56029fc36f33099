"""P1 finite elements for linear Biot poroelasticity.

Degrees of freedom are ordered displacement first, node-major
(``3*i + component``), followed by one pressure value per node. Units are
CGS throughout.

The semi-discrete system is::

    [M_U 0] [u'']   [0   0  ] [u']   [A_U  B ] [u]   [F_U]
    [0   0] [p''] + [B'  M_P] [p'] + [0   A_P] [p] = [F_P]

with the material coefficients folded into the blocks. Time stepping uses the
Newmark update with the velocity refreshed by ``v_{n+1} = v_n + tau a_{n+1}``;
the pressure rows of the resulting iteration matrix are scaled by
``beta_hat * tau`` so that it coincides with the bilinear form used in the
coercivity estimate.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import BoundaryRegion, Mesh

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class MaterialParameters:
    """Material and loading constants; defaults are the fixed physical values."""

    kappa: float = 1e-8
    E: float = 1e5
    nu: float = 0.4
    p_ventricles: float = 1e4
    alpha: float = 1.0
    mu_f: float = 1e-2
    rho: float = 1.0
    B: float = 0.99
    p_csf: float = 1e4
    xi: float = -500.0
    omega: float = 50.0

    def validate(self) -> None:
        checks = {
            "E > 0": self.E > 0,
            "0 < nu < 0.5": 0 < self.nu < 0.5,
            "kappa > 0": self.kappa > 0,
            "mu_f > 0": self.mu_f > 0,
            "rho > 0": self.rho > 0,
            "0 < B <= 1": 0 < self.B <= 1,
            "0 < alpha <= 1": 0 < self.alpha <= 1,
        }
        failed = [k for k, ok in checks.items() if not ok]
        if failed:
            raise ValueError("invalid material parameters: " + ", ".join(failed))

    @property
    def theta(self) -> tuple[float, float, float, float]:
        return (self.kappa, self.E, self.nu, self.p_ventricles)

    def with_theta(self, kappa: float, E: float, nu: float, p_ventricles: float) -> "MaterialParameters":
        return replace(self, kappa=kappa, E=E, nu=nu, p_ventricles=p_ventricles)


@dataclass(frozen=True)
class DerivedModuli:
    lame: float
    mu_s: float
    storage: float

    @property
    def strain_coefficient(self) -> float:
        """Coefficient multiplying ``(eps(u), eps(v))`` in the stiffness."""
        return 2.0 * self.mu_s


def derive_moduli(theta: MaterialParameters, literal_2E: bool = False) -> DerivedModuli:
    """Lame parameter, stress-law shear modulus and storage coefficient.

    With ``literal_2E`` the strain term uses ``2E`` instead of ``E/(1+nu)``.
    """
    theta.validate()
    E, nu, a, B = theta.E, theta.nu, theta.alpha, theta.B
    lame = E * nu / ((1 + nu) * (1 - 2 * nu))
    mu_s = E if literal_2E else E / (2 * (1 + nu))
    storage = 3 * a * (1 - a * B) * (1 - 2 * nu) / (B * E)
    if not storage > 0:
        raise ValueError("storage coefficient must be positive (need alpha*B < 1)")
    return DerivedModuli(lame, mu_s, storage)


# ---------------------------------------------------------------------------
# Geometry helpers and parameter-free operators


def p1_gradients(mesh: Mesh) -> tuple[np.ndarray, np.ndarray]:
    """Barycentric gradients ``(n_el, 4, 3)`` and volumes ``(n_el,)``."""
    key = "p1_gradients"
    if key not in mesh._cache:
        x = mesh.nodes[mesh.elements]
        J = np.transpose(x[:, 1:, :] - x[:, :1, :], (0, 2, 1))
        det = np.linalg.det(J)
        if np.any(np.abs(det) < 1e-14 * np.abs(det).max()):
            raise SolverError("singular element Jacobian")
        Jinv = np.linalg.inv(J)
        g = np.empty((len(x), 4, 3))
        g[:, 1:, :] = Jinv
        g[:, 0, :] = -Jinv.sum(axis=1)
        mesh._cache[key] = (g, det / 6.0)
    return mesh._cache[key]


# 4-point rule, exact for quadratics on a tetrahedron.
_QA, _QB = 0.5854101966249685, 0.1381966011250105
QUAD_BARY = np.full((4, 4), _QB) + np.eye(4) * (_QA - _QB)
QUAD_WEIGHTS = np.full(4, 0.25)


def quadrature_points(mesh: Mesh) -> tuple[np.ndarray, np.ndarray]:
    """Physical quadrature points ``(n_el, 4, 3)`` and weights ``(n_el, 4)``."""
    _, vol = p1_gradients(mesh)
    x = mesh.nodes[mesh.elements]
    pts = np.einsum("qk,ekd->eqd", QUAD_BARY, x)
    return pts, vol[:, None] * QUAD_WEIGHTS[None, :]


def _scatter(rows, cols, vals, shape) -> sp.csr_matrix:
    r = np.broadcast_to(rows[:, :, None], vals.shape).ravel()
    c = np.broadcast_to(cols[:, None, :], vals.shape).ravel()
    return sp.coo_matrix((vals.ravel(), (r, c)), shape=shape).tocsr()


def _vector_dofs(mesh: Mesh) -> np.ndarray:
    return (3 * mesh.elements[:, :, None] + np.arange(3)).reshape(-1, 12)


@dataclass(frozen=True)
class ReferenceOperators:
    """Parameter-free P1 matrices for one mesh.

    ``grad`` is ``(grad p, v)`` with rows on displacement DOFs; ``div`` is
    ``(div u, q)`` with rows on pressure DOFs.
    """

    n_nodes: int
    scalar_mass: sp.csr_matrix
    scalar_stiffness: sp.csr_matrix
    vector_mass: sp.csr_matrix
    strain: sp.csr_matrix
    divdiv: sp.csr_matrix
    grad: sp.csr_matrix
    div: sp.csr_matrix

    @classmethod
    def from_mesh(cls, mesh: Mesh) -> "ReferenceOperators":
        key = "reference_operators"
        if key in mesh._cache:
            return mesh._cache[key]
        g, vol = p1_gradients(mesh)
        nn = mesh.n_nodes
        el = mesh.elements
        vd = _vector_dofs(mesh)

        me = vol[:, None, None] * (np.ones((4, 4)) + np.eye(4)) / 20.0
        ke = vol[:, None, None] * np.einsum("eid,ejd->eij", g, g)
        Ms = _scatter(el, el, me, (nn, nn))
        Ks = _scatter(el, el, ke, (nn, nn))

        I3 = np.eye(3)
        mv = np.einsum("eij,ab->eiajb", me, I3).reshape(-1, 12, 12)
        gg = np.einsum("eid,ejd->eij", g, g)
        strain = 0.5 * (np.einsum("eij,ab->eiajb", gg, I3) + np.einsum("eib,eja->eiajb", g, g))
        strain = (vol[:, None, None, None, None] * strain).reshape(-1, 12, 12)
        divdiv = (vol[:, None, None, None, None] * np.einsum("eia,ejb->eiajb", g, g)).reshape(-1, 12, 12)
        # (grad phi_j, phi_i e_a) = vol/4 * g_j[a]
        grad = (vol[:, None, None, None] / 4.0 * np.ones((1, 4, 1, 1)) * np.transpose(g, (0, 2, 1))[:, None, :, :])
        grad = grad.reshape(-1, 12, 4)
        # (div(phi_i e_a), phi_j) = vol/4 * g_i[a]
        div = vol[:, None, None] / 4.0 * g.reshape(-1, 1, 12) * np.ones((1, 4, 1))

        ops = cls(
            n_nodes=nn,
            scalar_mass=Ms,
            scalar_stiffness=Ks,
            vector_mass=_scatter(vd, vd, mv, (3 * nn, 3 * nn)),
            strain=_scatter(vd, vd, strain, (3 * nn, 3 * nn)),
            divdiv=_scatter(vd, vd, divdiv, (3 * nn, 3 * nn)),
            grad=_scatter(vd, el, grad, (3 * nn, nn)),
            div=_scatter(el, vd, div, (nn, 3 * nn)),
        )
        mesh._cache[key] = ops
        return ops


# ---------------------------------------------------------------------------
# System assembly


@dataclass(frozen=True)
class FemSystem:
    """Assembled blocks for one parameter set (coefficients included)."""

    theta: MaterialParameters
    moduli: DerivedModuli
    ops: ReferenceOperators
    M_U: sp.csr_matrix
    B_prime: sp.csr_matrix
    M_P: sp.csr_matrix
    A_U: sp.csr_matrix
    B: sp.csr_matrix
    A_P: sp.csr_matrix

    @property
    def n_nodes(self) -> int:
        return self.ops.n_nodes

    @property
    def n_dofs(self) -> int:
        return 4 * self.ops.n_nodes

    @property
    def n_u(self) -> int:
        return 3 * self.ops.n_nodes

    def mass(self) -> sp.csr_matrix:
        nn = self.n_nodes
        return sp.block_diag([self.M_U, sp.csr_matrix((nn, nn))], format="csr")

    def damping(self) -> sp.csr_matrix:
        nu = self.n_u
        return sp.bmat([[sp.csr_matrix((nu, nu)), None], [self.B_prime, self.M_P]], format="csr")

    def stiffness(self) -> sp.csr_matrix:
        return sp.bmat([[self.A_U, self.B], [None, self.A_P]], format="csr")

    def iteration_matrix(self, tau: float, beta_hat: float) -> sp.csr_matrix:
        """Newmark matrix with pressure rows multiplied by ``beta_hat * tau``.

        As a bilinear form this is ``A((u, p), (v, q))`` of the coercivity
        estimate.
        """
        bt = beta_hat * tau
        top = [self.M_U / (beta_hat * tau**2) + self.A_U, self.B]
        bottom = [self.B_prime, self.M_P + bt * self.A_P]
        return sp.bmat([top, bottom], format="csr")


def assemble_blocks(mesh: Mesh, theta: MaterialParameters, literal_2E: bool = False) -> FemSystem:
    mod = derive_moduli(theta, literal_2E=literal_2E)
    ops = ReferenceOperators.from_mesh(mesh)
    return FemSystem(
        theta=theta,
        moduli=mod,
        ops=ops,
        M_U=theta.rho * ops.vector_mass,
        B_prime=theta.alpha * ops.div,
        M_P=mod.storage * ops.scalar_mass,
        A_U=(mod.strain_coefficient * ops.strain + mod.lame * ops.divdiv).tocsr(),
        B=theta.alpha * ops.grad,
        A_P=(theta.kappa / theta.mu_f) * ops.scalar_stiffness,
    )


def assemble_joint_mass(mesh: Mesh, zeta: float) -> sp.csr_matrix:
    """Matrix of ``(u, v)_{L2} + zeta (p, q)_{L2}``."""
    if not zeta > 0:
        raise ValueError("zeta must be positive")
    ops = ReferenceOperators.from_mesh(mesh)
    return sp.block_diag([ops.vector_mass, zeta * ops.scalar_mass], format="csr")


def traction_profile(
    mesh: Mesh,
    theta: MaterialParameters,
    direction=(0.0, 1.0, 0.0),
    L: float | None = None,
    y0: float = 0.0,
) -> np.ndarray:
    """Load vector of ``xi * s(x) * direction`` on the MRE surface, ``s = 1 - (y - y0)/L``.

    Multiply by ``sin(2 pi omega t)`` for the load at time ``t``.
    """
    L = mesh.frontal_length if L is None else L
    if L == 0:
        raise ValueError("frontal length L must be nonzero")
    facets = mesh.facets_of(BoundaryRegion.MRE)
    if len(facets) == 0:
        raise ValueError("mesh has no MRE boundary")
    x = mesh.nodes[facets]
    area = 0.5 * np.linalg.norm(np.cross(x[:, 1] - x[:, 0], x[:, 2] - x[:, 0]), axis=1)
    s = 1.0 - (x[:, :, 1] - y0) / L
    # exact for the linear profile: int s phi_i = A/12 (s_i + sum_k s_k)
    w = area[:, None] / 12.0 * (s + s.sum(axis=1, keepdims=True))
    d = np.asarray(direction, float)
    nodal = np.bincount(facets.ravel(), weights=w.ravel(), minlength=mesh.n_nodes)
    F = np.zeros(4 * mesh.n_nodes)
    F[: 3 * mesh.n_nodes] = theta.xi * (nodal[:, None] * d[None, :]).ravel()
    return F


def assemble_load(mesh: Mesh, theta: MaterialParameters, t: float, direction=(0.0, 1.0, 0.0),
                  L: float | None = None, y0: float = 0.0) -> np.ndarray:
    """MRE traction load at time ``t`` (zero on pressure DOFs)."""
    return np.sin(2 * np.pi * theta.omega * t) * traction_profile(mesh, theta, direction, L, y0)


def assemble_body_load(mesh: Mesh, f_u: Callable | None = None, f_p: Callable | None = None) -> np.ndarray:
    """Load vector of volume sources ``(f_u, v) + (f_p, q)``.

    ``f_u`` maps points ``(k, 3)`` to values ``(k, 3)``; ``f_p`` to ``(k,)``.
    """
    pts, w = quadrature_points(mesh)
    flat = pts.reshape(-1, 3)
    nn = mesh.n_nodes
    F = np.zeros(4 * nn)
    phi = QUAD_BARY  # phi_k at quadrature point q is bary[q, k]
    if f_u is not None:
        vals = np.asarray(f_u(flat), float).reshape(pts.shape)
        contrib = np.einsum("eq,qk,eqd->ekd", w, phi, vals)
        F[: 3 * nn] = np.bincount(_vector_dofs(mesh).ravel(), weights=contrib.ravel(), minlength=3 * nn)
    if f_p is not None:
        vals = np.asarray(f_p(flat), float).reshape(pts.shape[:2])
        contrib = np.einsum("eq,qk,eq->ek", w, phi, vals)
        F[3 * nn:] = np.bincount(mesh.elements.ravel(), weights=contrib.ravel(), minlength=nn)
    return F


# ---------------------------------------------------------------------------
# Boundary conditions


@dataclass(frozen=True)
class ConstrainedSystem:
    system: FemSystem
    dofs: np.ndarray
    values: np.ndarray

    @property
    def free(self) -> np.ndarray:
        mask = np.ones(self.system.n_dofs, bool)
        mask[self.dofs] = False
        return np.flatnonzero(mask)


def constrain(system: FemSystem, dofs, values) -> ConstrainedSystem:
    dofs = np.asarray(dofs, np.int64)
    values = np.broadcast_to(np.asarray(values, float), dofs.shape).copy()
    order = np.argsort(dofs, kind="stable")
    dofs, values = dofs[order], values[order]
    if len(np.unique(dofs)) != len(dofs):
        raise ValueError("duplicate constrained DOFs")
    return ConstrainedSystem(system, dofs, values)


def apply_boundary_conditions(system: FemSystem, mesh: Mesh, neck_displacement: float = 0.0) -> ConstrainedSystem:
    """Dirichlet data: ``u = (d, d, d)`` on the neck, ``p_ventricles`` / ``p_csf`` on
    the ventricles / MRE surface. Ventricle values win on shared nodes."""
    theta = system.theta
    nn = mesh.n_nodes
    neck = mesh.boundary_nodes(BoundaryRegion.NECK)
    vent = mesh.boundary_nodes(BoundaryRegion.VENTRICLES)
    mre = mesh.boundary_nodes(BoundaryRegion.MRE)
    if len(neck) == 0 or len(vent) == 0 or len(mre) == 0:
        raise ValueError("every boundary region must be nonempty")
    shared = np.intersect1d(vent, mre)
    if len(shared):
        log.warning("%d nodes shared by ventricles and MRE surface; ventricle pressure applied", len(shared))
    mre = np.setdiff1d(mre, vent)
    u_dofs = (3 * neck[:, None] + np.arange(3)).ravel()
    dofs = np.concatenate([u_dofs, 3 * nn + vent, 3 * nn + mre])
    values = np.concatenate([
        np.full(len(u_dofs), float(neck_displacement)),
        np.full(len(vent), theta.p_ventricles),
        np.full(len(mre), theta.p_csf),
    ])
    return constrain(system, dofs, values)


# ---------------------------------------------------------------------------
# Time integration


@dataclass(frozen=True)
class TimeConfig:
    tau: float = 1.0 / (40 * 50.0)
    steps: int = 20
    # With v_{n+1} = v_n + tau a_{n+1} the scheme is unconditionally stable only for beta_hat = 1/2.
    beta_hat: float = 0.5

    def validate(self) -> None:
        if not self.tau > 0:
            raise ValueError("time step must be positive")
        if self.steps < 1:
            raise ValueError("need at least one step")
        if not 0 < self.beta_hat <= 0.5:
            raise ValueError("beta_hat must lie in (0, 1/2]")

    @classmethod
    def per_cycle(cls, omega: float, steps_per_cycle: int = 40, steps: int | None = None,
                  beta_hat: float = 0.5) -> "TimeConfig":
        return cls(1.0 / (omega * steps_per_cycle), steps_per_cycle if steps is None else steps, beta_hat)


@dataclass(frozen=True)
class TimeSeries:
    """States at ``t_k = k * tau`` for ``k = 0..steps``; row ``k`` is the full DOF vector."""

    tau: float
    states: np.ndarray
    n_nodes: int
    period: float | None = None

    @property
    def steps(self) -> int:
        return self.states.shape[0] - 1

    @property
    def times(self) -> np.ndarray:
        return self.tau * np.arange(self.states.shape[0])

    @property
    def u(self) -> np.ndarray:
        return self.states[:, : 3 * self.n_nodes]

    @property
    def p(self) -> np.ndarray:
        return self.states[:, 3 * self.n_nodes:]


@dataclass
class NewmarkStepper:
    """Constant-matrix Newmark integrator; the free-DOF block is factorized once."""

    csys: ConstrainedSystem
    tau: float
    beta_hat: float = 0.5
    refactorize: bool = False
    _lu: object = field(default=None, init=False, repr=False)

    def __post_init__(self):
        TimeConfig(self.tau, 1, self.beta_hat).validate()
        sys_ = self.csys.system
        self.K = sys_.iteration_matrix(self.tau, self.beta_hat).tocsc()
        free = self.csys.free
        self._free = free
        self._K_FF = self.K[free][:, free].tocsc()
        self._K_FD = self.K[free][:, self.csys.dofs].tocsr()
        self._lift = self._K_FD @ self.csys.values
        if not self.refactorize:
            self._lu = self._factor()

    def _factor(self):
        try:
            return spla.splu(self._K_FF)
        except RuntimeError as exc:
            raise SolverError(f"singular iteration matrix for theta={self.csys.system.theta.theta}") from exc

    def history(self, y, v, a) -> np.ndarray:
        """Right-hand side contribution of the previous state (pressure rows scaled)."""
        s = self.csys.system
        nu = s.n_u
        b, t = self.beta_hat, self.tau
        c2 = (1 - 2 * b) / (2 * b)
        hm = (y[:nu] + t * v[:nu]) / (b * t**2) + c2 * a[:nu]
        hc = (y + t * v) / (b * t) - v + t * c2 * a
        r = np.empty_like(y)
        r[:nu] = s.M_U @ hm
        r[nu:] = b * t * (s.B_prime @ hc[:nu] + s.M_P @ hc[nu:])
        return r

    def step(self, y, v, a, load: np.ndarray | None):
        s = self.csys.system
        nu = s.n_u
        rhs = self.history(y, v, a)
        if load is not None:
            rhs[:nu] += load[:nu]
            rhs[nu:] += self.beta_hat * self.tau * load[nu:]
        y_new = np.empty_like(y)
        y_new[self.csys.dofs] = self.csys.values
        lu = self._factor() if self.refactorize else self._lu
        y_new[self._free] = lu.solve(rhs[self._free] - self._lift)
        b, t = self.beta_hat, self.tau
        a_new = (y_new - y - t * v) / (b * t**2) - (1 - 2 * b) / (2 * b) * a
        v_new = v + t * a_new
        return y_new, v_new, a_new


def initial_acceleration(csys: ConstrainedSystem, y0: np.ndarray, load0: np.ndarray | None) -> np.ndarray:
    """Displacement acceleration from the momentum equation at ``t = 0``."""
    s = csys.system
    nu = s.n_u
    a = np.zeros(s.n_dofs)
    r = -(s.A_U @ y0[:nu] + s.B @ y0[nu:])
    if load0 is not None:
        r = r + load0[:nu]
    if not np.any(r):
        return a
    free_u = csys.free[csys.free < nu]
    a[free_u] = spla.spsolve(s.M_U[free_u][:, free_u].tocsc(), r[free_u])
    return a


def newmark_solve(
    csys: ConstrainedSystem,
    tau: float,
    steps: int,
    beta_hat: float = 0.5,
    load: Callable[[float], np.ndarray] | None = None,
    initial: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
    refactorize: bool = False,
) -> TimeSeries:
    """Integrate from a homogeneous state (or ``initial = (y, v, a)``).

    Dirichlet values are imposed from the first step on; ``load(t)`` returns
    the full-length load vector.
    """
    TimeConfig(tau, steps, beta_hat).validate()
    stepper = NewmarkStepper(csys, tau, beta_hat, refactorize=refactorize)
    N = csys.system.n_dofs
    if initial is None:
        y = np.zeros(N)
        v = np.zeros(N)
        a = initial_acceleration(csys, y, None if load is None else load(0.0))
    else:
        y, v, a = (np.array(x, float) for x in initial)
    states = np.empty((steps + 1, N))
    states[0] = y
    for k in range(1, steps + 1):
        y, v, a = stepper.step(y, v, a, None if load is None else load(k * tau))
        states[k] = y
    period = 1.0 / csys.system.theta.omega if csys.system.theta.omega else None
    return TimeSeries(tau, states, csys.system.n_nodes, period)


def simulate(
    mesh: Mesh,
    theta: MaterialParameters,
    time: TimeConfig = TimeConfig(),
    neck_displacement: float = 0.0,
    direction=(0.0, 1.0, 0.0),
    literal_2E: bool = False,
) -> TimeSeries:
    """Forward run with the MRE pulse and the standard boundary conditions."""
    time.validate()
    system = assemble_blocks(mesh, theta, literal_2E=literal_2E)
    csys = apply_boundary_conditions(system, mesh, neck_displacement=neck_displacement)
    profile = traction_profile(mesh, theta, direction)
    w = 2 * np.pi * theta.omega

    def load(t):
        return np.sin(w * t) * profile

    return newmark_solve(csys, time.tau, time.steps, time.beta_hat, load=load)


def triple_norm(y: np.ndarray, system: FemSystem, tau: float) -> float:
    """Energy norm ``(rho/tau^2)|u|^2 + 2E|eps(u)|^2 + S|p|^2 + (kappa tau/mu)|grad p|^2``, square-rooted."""
    th, ops = system.theta, system.ops
    nu = system.n_u
    u, p = y[:nu], y[nu:]
    sq = (
        th.rho / tau**2 * u @ (ops.vector_mass @ u)
        + 2 * th.E * u @ (ops.strain @ u)
        + system.moduli.storage * p @ (ops.scalar_mass @ p)
        + th.kappa * tau / th.mu_f * p @ (ops.scalar_stiffness @ p)
    )
    return float(np.sqrt(max(sq, 0.0)))
