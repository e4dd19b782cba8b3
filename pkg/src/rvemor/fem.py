"""Plane-strain FE machinery for a periodic two-phase unit cell.

The mesh is a structured grid of bilinear quadrilaterals (2x2 Gauss points)
over the unit cell; circular particles assign elements to the stiff phase by
their centroid, with periodic wrapping.  Volumetric locking from the
isochoric plastic flow is relieved by the F-bar modification: the in-plane
deformation gradient at each quadrature point is scaled by
sqrt(det2 F_center / det2 F_qp), so every point shares the element-centre
in-plane dilatation.

Periodicity ties each non-corner boundary node to its partner one lattice
vector away through Lagrange multipliers; the four (periodically identical)
corner nodes are pinned to the homogeneous field, which removes rigid
translations.  Each macro increment is solved by a full Newton loop on the
bordered system

    [ K   C^T ] [ du ]   [ -(f_int + C^T g) ]
    [ C   0   ] [ dg ] = [ -(C u - d(U))    ],

with a direct sparse factorisation, and up to `max_bisections` levels of
increment halving when an increment does not converge.

The stiffness is the exact derivative of the internal force, including the
F-bar centre/quadrature-point coupling and the algorithmic material tangent,
so Newton converges quadratically.  It is generally unsymmetric.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import instrument
from .errors import (ConfigError, ElementInversionError, NonconvergenceError,
                     SimulationDivergedError)
from .loading import MacroStretch, complete_stretch
from .material import MaterialParams, stress_update_batch

__all__ = [
    "MeshSpec",
    "PeriodicMesh",
    "StateBatch",
    "SolverConfig",
    "DnsSolution",
    "build_rve_mesh",
    "fbar_deformation",
    "fbar_kinematics",
    "update_stresses",
    "internal_force",
    "assemble",
    "constraint_matrix",
    "constraint_targets",
    "solve_dns",
    "volume_average_stress",
]

_GAUSS = 1.0 / np.sqrt(3.0)
_QP_LOCAL = np.array([[-_GAUSS, -_GAUSS], [_GAUSS, -_GAUSS],
                      [_GAUSS, _GAUSS], [-_GAUSS, _GAUSS]])
_EYE2 = np.eye(2)


def _shape_gradients(xi: float, eta: float) -> np.ndarray:
    """Gradients of the four bilinear shape functions w.r.t. (xi, eta)."""
    return 0.25 * np.array([
        [-(1.0 - eta), -(1.0 - xi)],
        [(1.0 - eta), -(1.0 + xi)],
        [(1.0 + eta), (1.0 + xi)],
        [-(1.0 + eta), (1.0 - xi)],
    ])


@dataclass(frozen=True)
class MeshSpec:
    """Geometry of the unit cell: grid resolution and circular particles
    given as (cx, cy, r) triples."""

    grid_n: int = 16
    cell_size: float = 1.0
    particles: tuple[tuple[float, float, float], ...] = ()


@dataclass
class PeriodicMesh:
    nodes: np.ndarray          # (n_nodes, 2)
    elements: np.ndarray       # (n_el, 4) counter-clockwise
    pairings: np.ndarray       # (n_pair, 2) (slave, master) node ids
    pair_offsets: np.ndarray   # (n_pair, 2) lattice vectors slave - master
    corners: np.ndarray        # (4,) node ids
    phase: np.ndarray          # (n_el,) material index per element
    cell_size: float
    grid_n: int
    # quadrature data, shared by all elements of the structured grid
    grad_qp: np.ndarray = field(repr=False, default=None)   # (4, 4, 2)
    grad_c: np.ndarray = field(repr=False, default=None)    # (4, 2)
    qp_weight: float = 0.0

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_dof(self) -> int:
        return 2 * self.n_nodes

    @property
    def n_el(self) -> int:
        return self.elements.shape[0]

    @property
    def n_qp(self) -> int:
        return 4 * self.n_el

    @property
    def qp_phase(self) -> np.ndarray:
        return np.repeat(self.phase, 4)

    @property
    def edof(self) -> np.ndarray:
        """(n_el, 8) global dof ids, local order (node, component)."""
        e = np.empty((self.n_el, 8), dtype=np.int64)
        e[:, 0::2] = 2 * self.elements
        e[:, 1::2] = 2 * self.elements + 1
        return e

    @property
    def free_dofs(self) -> np.ndarray:
        mask = np.ones(self.n_dof, dtype=bool)
        for c in self.corners:
            mask[2 * c] = False
            mask[2 * c + 1] = False
        return np.flatnonzero(mask)

    def fingerprint(self) -> str:
        """Content hash of the discretisation (geometry + topology + phases)."""
        h = hashlib.sha256()
        h.update(b"rve-mesh-v1")
        for a in (self.nodes, self.elements, self.pairings,
                  self.pair_offsets, self.corners, self.phase):
            h.update(np.ascontiguousarray(a).tobytes())
        h.update(np.float64(self.cell_size).tobytes())
        return h.hexdigest()


def _periodic_distance(a, b, L: float) -> float:
    d = np.abs(np.asarray(a, float) - np.asarray(b, float)) % L
    d = np.minimum(d, L - d)
    return float(np.hypot(d[0], d[1]))


def build_rve_mesh(spec: MeshSpec) -> PeriodicMesh:
    """Structured periodic mesh of the unit cell with phase assignment."""
    n, L = spec.grid_n, spec.cell_size
    if n < 2:
        raise ConfigError(f"grid resolution must be at least 2, got {n}")
    if L <= 0.0:
        raise ConfigError(f"cell size must be positive, got {L}")
    for cx, cy, r in spec.particles:
        if not 0.0 < r < 0.5 * L:
            raise ConfigError(f"particle radius {r} outside (0, {0.5 * L})")
    parts = [tuple(map(float, p)) for p in spec.particles]
    for i in range(len(parts)):
        for j in range(i + 1, len(parts)):
            dist = _periodic_distance(parts[i][:2], parts[j][:2], L)
            if dist < parts[i][2] + parts[j][2]:
                raise ConfigError(
                    f"particles {i} and {j} overlap (distance {dist:.4g})")
        # the four cell corners are one periodic point; pinning them to the
        # homogeneous field is inconsistent with a particle covering them
        if _periodic_distance(parts[i][:2], (0.0, 0.0), L) <= parts[i][2]:
            raise ConfigError(
                f"particle {i} covers the pinned cell corner")

    h = L / n
    xs = np.arange(n + 1) * h
    node_id = lambda i, j: j * (n + 1) + i
    X, Y = np.meshgrid(xs, xs, indexing="xy")
    nodes = np.column_stack([X.ravel(), Y.ravel()])

    elements = np.empty((n * n, 4), dtype=np.int64)
    for j in range(n):
        for i in range(n):
            elements[j * n + i] = (node_id(i, j), node_id(i + 1, j),
                                   node_id(i + 1, j + 1), node_id(i, j + 1))

    centroids = nodes[elements].mean(axis=1)
    phase = np.zeros(n * n, dtype=np.int64)
    for cx, cy, r in parts:
        for e, c in enumerate(centroids):
            if _periodic_distance(c, (cx, cy), L) < r:
                phase[e] = 1

    pairs, offsets = [], []
    for j in range(1, n):          # right edge -> left edge
        pairs.append((node_id(n, j), node_id(0, j)))
        offsets.append((L, 0.0))
    for i in range(1, n):          # top edge -> bottom edge
        pairs.append((node_id(i, n), node_id(i, 0)))
        offsets.append((0.0, L))
    corners = np.array([node_id(0, 0), node_id(n, 0),
                        node_id(n, n), node_id(0, n)], dtype=np.int64)

    grad_qp = np.array([_shape_gradients(xi, eta) * (2.0 / h)
                        for xi, eta in _QP_LOCAL])
    grad_c = _shape_gradients(0.0, 0.0) * (2.0 / h)
    return PeriodicMesh(nodes=nodes, elements=elements,
                        pairings=np.array(pairs, dtype=np.int64),
                        pair_offsets=np.array(offsets),
                        corners=corners, phase=phase,
                        cell_size=L, grid_n=n,
                        grad_qp=grad_qp, grad_c=grad_c,
                        qp_weight=(0.5 * h) ** 2)


@dataclass
class StateBatch:
    """History of all quadrature points, flat ordering qp = 4*element + gp."""

    Fp: np.ndarray   # (n_qp, 3, 3)
    lam: np.ndarray  # (n_qp,)

    @staticmethod
    def virgin(n_qp: int) -> "StateBatch":
        return StateBatch(np.tile(np.eye(3), (n_qp, 1, 1)), np.zeros(n_qp))

    def copy(self) -> "StateBatch":
        return StateBatch(self.Fp.copy(), self.lam.copy())


def fbar_deformation(F_q: np.ndarray, F_c: np.ndarray) -> np.ndarray:
    """F-bar modification of a single quadrature-point gradient: the
    in-plane block inherits the centre dilatation, out-of-plane untouched."""
    F_q = np.asarray(F_q, float)
    F_c = np.asarray(F_c, float)
    det_q = F_q[0, 0] * F_q[1, 1] - F_q[0, 1] * F_q[1, 0]
    det_c = F_c[0, 0] * F_c[1, 1] - F_c[0, 1] * F_c[1, 0]
    if det_q <= 0.0 or det_c <= 0.0:
        raise ElementInversionError("non-positive in-plane Jacobian")
    out = F_q.copy()
    out[:2, :2] *= np.sqrt(det_c / det_q)
    return out


@dataclass
class Kinematics:
    """Per-element/per-point deformation data shared by force, stiffness and
    the stress-only online path."""

    F2: np.ndarray      # (n_el, 4, 2, 2) in-plane gradients at the qps
    F2c: np.ndarray     # (n_el, 2, 2) at the element centre
    scale: np.ndarray   # (n_el, 4) F-bar scaling
    Fbar: np.ndarray    # (n_qp, 3, 3) modified gradients, flat
    Hq: np.ndarray      # (n_el, 4, 2, 2) F_q^{-T}
    Hc: np.ndarray      # (n_el, 2, 2) F_c^{-T}


def fbar_kinematics(u: np.ndarray, mesh: PeriodicMesh) -> Kinematics:
    u_e = u.reshape(-1, 2)[mesh.elements]                      # (E, 4, 2)
    F2 = _EYE2 + np.einsum("eni,qnj->eqij", u_e, mesh.grad_qp)
    F2c = _EYE2 + np.einsum("eni,nj->eij", u_e, mesh.grad_c)
    det_q = F2[..., 0, 0] * F2[..., 1, 1] - F2[..., 0, 1] * F2[..., 1, 0]
    det_c = F2c[..., 0, 0] * F2c[..., 1, 1] - F2c[..., 0, 1] * F2c[..., 1, 0]
    if np.any(det_q <= 0.0) or np.any(det_c <= 0.0):
        bad = np.flatnonzero(np.any(det_q <= 0.0, axis=1) | (det_c <= 0.0))
        raise ElementInversionError(
            f"inverted element(s): {bad.tolist()[:8]}")
    scale = np.sqrt(det_c[:, None] / det_q)
    Fbar = np.zeros((mesh.n_el, 4, 3, 3))
    Fbar[..., :2, :2] = scale[..., None, None] * F2
    Fbar[..., 2, 2] = 1.0
    Hq = np.swapaxes(np.linalg.inv(F2), -1, -2)
    Hc = np.swapaxes(np.linalg.inv(F2c), -1, -2)
    return Kinematics(F2=F2, F2c=F2c, scale=scale,
                      Fbar=Fbar.reshape(-1, 3, 3), Hq=Hq, Hc=Hc)


def update_stresses(kin: Kinematics, states: StateBatch, mesh: PeriodicMesh,
                    materials, want_tangent: bool = True,
                    tangent_mode: str = "exact"):
    """Constitutive update on all quadrature points, grouped by phase.

    Returns (P (n_qp,3,3), A (n_qp,3,3,3,3) or None, trial StateBatch).
    """
    n_qp = mesh.n_qp
    P = np.empty((n_qp, 3, 3))
    A = np.empty((n_qp, 3, 3, 3, 3)) if want_tangent else None
    trial = StateBatch(np.empty((n_qp, 3, 3)), np.empty(n_qp))
    qp_phase = mesh.qp_phase
    for p, mat in enumerate(materials):
        idx = np.flatnonzero(qp_phase == p)
        if idx.size == 0:
            continue
        Pp, Ap, Fp_new, lam_new, _ = stress_update_batch(
            kin.Fbar[idx], states.Fp[idx], states.lam[idx], mat,
            want_tangent=want_tangent, tangent_mode=tangent_mode)
        P[idx] = Pp
        if want_tangent:
            A[idx] = Ap
        trial.Fp[idx] = Fp_new
        trial.lam[idx] = lam_new
    return P, A, trial


def internal_force(kin: Kinematics, P: np.ndarray,
                   mesh: PeriodicMesh) -> np.ndarray:
    """Assembled internal force for given per-point stresses."""
    E = mesh.n_el
    p2 = P.reshape(E, 4, 3, 3)[..., :2, :2]
    s = kin.scale
    pi = np.einsum("eqij,eqij->eq", p2, kin.F2)
    aP = np.einsum("eqij,qnj->eqni", p2, mesh.grad_qp)
    Hqa = np.einsum("eqij,qnj->eqni", kin.Hq, mesh.grad_qp)
    Hcb = np.einsum("eij,nj->eni", kin.Hc, mesh.grad_c)
    spi = 0.5 * s * pi
    f_e = (np.einsum("eq,eqni->eni", s, aP)
           + np.einsum("eq,eni->eni", spi, Hcb)
           - np.einsum("eq,eqni->eni", spi, Hqa))
    f_e *= mesh.qp_weight
    f = np.zeros(mesh.n_dof)
    np.add.at(f, mesh.edof.ravel(), f_e.reshape(E, 8).ravel())
    return f


def _stiffness(kin: Kinematics, P: np.ndarray, A: np.ndarray,
               mesh: PeriodicMesh) -> sp.csr_matrix:
    """Exact derivative of the internal force (F-bar consistent)."""
    E = mesh.n_el
    GQ, GC = mesh.grad_qp, mesh.grad_c
    p2 = P.reshape(E, 4, 3, 3)[..., :2, :2]
    A22 = A.reshape(E, 4, 3, 3, 3, 3)[..., :2, :2, :2, :2]
    F2, s = kin.F2, kin.scale
    pi = np.einsum("eqij,eqij->eq", p2, F2)
    aP = np.einsum("eqij,qnj->eqni", p2, GQ)
    Hqa = np.einsum("eqij,qnj->eqni", kin.Hq, GQ)
    Hcb = np.einsum("eij,nj->eni", kin.Hc, GC)
    xi = 0.5 * (Hcb[:, None] - Hqa)                     # (E, 4, m, k)
    R = Hcb[:, None] - Hqa                              # (E, 4, n, i)

    AF = np.einsum("eqijkl,eqkl->eqij", A22, F2)
    FA = np.einsum("eqij,eqijkl->eqkl", F2, A22)
    FAF = np.einsum("eqkl,eqkl->eq", FA, F2)
    AFa = np.einsum("eqij,qnj->eqni", AF, GQ)
    FAa = np.einsum("eqkl,qml->eqmk", FA, GQ)

    s2 = s * s
    K_e = np.einsum("eq,eqmk,eqni->enimk", s, xi, aP)
    K_e += np.einsum("eq,eqmk,eqni->enimk", s2, xi, AFa)
    K_e += np.einsum("eq,eqijkl,qnj,qml->enimk", s2, A22, GQ, GQ)
    scal3 = (0.5 * s * (pi + s * FAF))[..., None, None] * xi
    scal3 += (0.5 * s2)[..., None, None] * FAa
    scal3 += (0.5 * s)[..., None, None] * aP
    K_e += np.einsum("eqmk,eqni->enimk", scal3, R)
    spi = 0.5 * s * pi
    K_e += np.einsum("eq,eqmi,eqnk->enimk", spi, Hqa, Hqa)
    K_e -= np.einsum("eq,emi,enk->enimk", spi, Hcb, Hcb)
    K_e *= mesh.qp_weight

    edof = mesh.edof
    rows = np.repeat(edof, 8, axis=1).ravel()
    cols = np.tile(edof, (1, 8)).ravel()
    K = sp.coo_matrix((K_e.reshape(E, 8, 8).ravel(), (rows, cols)),
                      shape=(mesh.n_dof, mesh.n_dof))
    return K.tocsr()


@dataclass
class AssembleResult:
    f_int: np.ndarray
    K: sp.csr_matrix | None
    states_trial: StateBatch
    P_qp: np.ndarray
    kin: Kinematics


def assemble(u: np.ndarray, states: StateBatch, mesh: PeriodicMesh,
             materials, want_tangent: bool = True,
             tangent_mode: str = "exact") -> AssembleResult:
    """Internal force, tangent stiffness and trial history at displacement u.

    Trial states are *not* committed; the caller commits them once the
    increment has converged.
    """
    kin = fbar_kinematics(u, mesh)
    P, A, trial = update_stresses(kin, states, mesh, materials,
                                  want_tangent=want_tangent,
                                  tangent_mode=tangent_mode)
    f = internal_force(kin, P, mesh)
    K = _stiffness(kin, P, A, mesh) if want_tangent else None
    return AssembleResult(f_int=f, K=K, states_trial=trial, P_qp=P, kin=kin)


# ---------------------------------------------------------------------------
# periodic constraints and the bordered Newton solve
# ---------------------------------------------------------------------------

def constraint_matrix(mesh: PeriodicMesh) -> sp.csr_matrix:
    """Signed incidence matrix C with C u = u_slave - u_master, one row per
    paired displacement component."""
    n_pair = mesh.pairings.shape[0]
    rows = np.arange(2 * n_pair)
    slave = np.repeat(2 * mesh.pairings[:, 0], 2) + np.tile([0, 1], n_pair)
    master = np.repeat(2 * mesh.pairings[:, 1], 2) + np.tile([0, 1], n_pair)
    data = np.ones(2 * n_pair)
    C = sp.coo_matrix(
        (np.concatenate([data, -data]),
         (np.concatenate([rows, rows]), np.concatenate([slave, master]))),
        shape=(2 * n_pair, mesh.n_dof))
    return C.tocsr()


def constraint_targets(mesh: PeriodicMesh, U: MacroStretch) -> np.ndarray:
    """Right-hand side d(U): (U - I) times the lattice offset, per row."""
    gradU = U.tensor()[:2, :2] - _EYE2
    return (mesh.pair_offsets @ gradU.T).ravel()


@dataclass(frozen=True)
class SolverConfig:
    tol_newton: float = 1e-9
    max_iter: int = 25
    max_bisections: int = 4
    tol_constraint: float = 1e-10


@dataclass
class DnsSolution:
    """Converged record of one macro increment."""

    macro: MacroStretch
    u: np.ndarray
    g: np.ndarray
    converged: bool
    iterations: int
    residual_norm: float
    constraint_norm: float
    residual_history: list[float]
    P_macro: np.ndarray
    lam_field: np.ndarray | None = None
    states: StateBatch | None = None


def volume_average_stress(P_qp: np.ndarray, mesh: PeriodicMesh) -> np.ndarray:
    """Reference-volume average of per-quadrature-point stresses."""
    w = np.full(P_qp.shape[0], mesh.qp_weight)
    return np.einsum("n,nij->ij", w, P_qp) / w.sum()


def _apply_corner_bc(u: np.ndarray, mesh: PeriodicMesh,
                     U: MacroStretch) -> None:
    gradU = U.tensor()[:2, :2] - _EYE2
    for c in mesh.corners:
        u[2 * c:2 * c + 2] = gradU @ mesh.nodes[c]


def _solve_bordered(K, C_free, r_free, c_res):
    instrument.count_system_solve()
    n = r_free.shape[0]
    system = sp.bmat([[K, C_free.T], [C_free, None]], format="csc")
    sol = spla.spsolve(system, -np.concatenate([r_free, c_res]))
    return sol[:n], sol[n:]


def _newton_increment(u, g, states, U, mesh, materials, C, solver):
    """One macro increment; mutates the passed copies and returns a record.

    Raises NonconvergenceError when the iteration cap is hit.
    """
    free = mesh.free_dofs
    C_free = C[:, free]
    d = constraint_targets(mesh, U)
    _apply_corner_bc(u, mesh, U)

    history = []
    for iteration in range(solver.max_iter + 1):
        res = assemble(u, states, mesh, materials, want_tangent=True)
        r_free = res.f_int[free] + (C.T @ g)[free]
        c_res = C @ u - d
        scale = max(float(np.linalg.norm(res.f_int)), 1e-30)
        rnorm = float(np.linalg.norm(r_free))
        cnorm = float(np.abs(c_res).max()) if c_res.size else 0.0
        history.append(rnorm / scale)
        if rnorm <= solver.tol_newton * scale and cnorm <= solver.tol_constraint:
            return DnsSolution(
                macro=U, u=u, g=g, converged=True, iterations=iteration,
                residual_norm=rnorm / scale, constraint_norm=cnorm,
                residual_history=history,
                P_macro=volume_average_stress(res.P_qp, mesh),
            ), res.states_trial
        if iteration == solver.max_iter:
            break
        Kff = res.K[free][:, free]
        du, dg = _solve_bordered(Kff, C_free, r_free, c_res)
        u[free] += du
        g += dg
    raise NonconvergenceError(
        f"increment to (U11={U.U11:.6g}, U12={U.U12:.6g}) stalled at "
        f"relative residual {history[-1]:.3e} after {solver.max_iter} iterations")


def _midpoint(a: MacroStretch, b: MacroStretch) -> MacroStretch:
    return complete_stretch(0.5 * (a.U11 + b.U11), 0.5 * (a.U12 + b.U12))


def _advance(u, g, states, U_from, U_to, depth, mesh, materials, C, solver,
             increment_index):
    try:
        return _newton_increment(u.copy(), g.copy(), states.copy(), U_to,
                                 mesh, materials, C, solver)
    except (NonconvergenceError, ElementInversionError):
        if depth >= solver.max_bisections:
            raise SimulationDivergedError(
                f"increment {increment_index} diverged after "
                f"{solver.max_bisections} bisections", increment=increment_index)
        U_mid = _midpoint(U_from, U_to)
        rec, trial = _advance(u, g, states, U_from, U_mid, depth + 1,
                              mesh, materials, C, solver, increment_index)
        return _advance(rec.u, rec.g, trial, U_mid, U_to, depth + 1,
                        mesh, materials, C, solver, increment_index)


def solve_dns(load_path, mesh: PeriodicMesh, materials,
              solver: SolverConfig | None = None,
              lambda_landmarks=(), keep_states: bool = False):
    """Direct simulation of a macro load path.

    Parameters
    ----------
    load_path : LoadPath of macro stretches.
    materials : sequence of MaterialParams indexed by mesh phase.
    lambda_landmarks : increment numbers (1-based) at which the plastic
        multiplier field is recorded on the solution.
    keep_states : attach a copy of the committed history to every record.

    Returns a list of DnsSolution, one per increment of the original path
    (bisected sub-steps are internal).
    """
    solver = solver or SolverConfig()
    C = constraint_matrix(mesh)
    u = np.zeros(mesh.n_dof)
    g = np.zeros(C.shape[0])
    states = StateBatch.virgin(mesh.n_qp)
    landmarks = set(lambda_landmarks)
    records = []
    U_prev = MacroStretch.identity()
    for k, U in enumerate(load_path.increments, start=1):
        rec, trial = _advance(u, g, states, U_prev, U, 0, mesh, materials,
                              C, solver, k)
        u, g, states = rec.u, rec.g, trial
        if k in landmarks:
            rec.lam_field = states.lam.copy()
        if keep_states:
            rec.states = states.copy()
        records.append(rec)
        U_prev = U
    return records
