"""Snapshot collection, proper-orthogonal-decomposition basis, and the
projection-reduced RVE solver.

Snapshots are fluctuation displacements: the homogeneous map Psi omega(U) is
subtracted from converged full-order solutions so every snapshot (and hence
every basis vector) vanishes at the pinned corners and is exactly periodic.
The reduced solution ansatz u = Psi omega + Phi alpha therefore satisfies the
constraints by construction and the online Newton runs on the n_b reduced
unknowns alone, with no Lagrange multipliers.

The basis comes from the eigendecomposition of the small Gram matrix U^T U
(n_t x n_t) instead of a dense SVD of U (n_u x n_t): left singular vectors
are recovered as Phi_i = U v_i / sigma_i.  Columns are normalised and signed
so that their largest-magnitude entry is positive, which makes the basis
deterministic across platforms.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass

import numpy as np

from . import binio, instrument
from .errors import (ConfigError, DataMismatchError, NonconvergenceError,
                     RankError)
from .fem import PeriodicMesh, StateBatch, assemble, volume_average_stress
from .loading import LoadPath, MacroStretch, build_psi

__all__ = [
    "SnapshotMeta",
    "SnapshotSet",
    "ReducedBasis",
    "ReducedSolution",
    "collect_snapshots",
    "fluctuation_field",
    "build_basis",
    "reconstruction_error",
    "project",
    "solve_reduced",
    "save_snapshots",
    "load_snapshots",
    "save_basis",
    "load_basis",
]

_SNAP_MAGIC = b"RVESNAP1"
_BASIS_MAGIC = b"RVEBAS01"


@dataclass(frozen=True)
class SnapshotMeta:
    """Provenance of one snapshot column."""

    sim: int
    inc: int
    U11: float
    U22: float
    U12: float


@dataclass
class SnapshotSet:
    data: np.ndarray              # (n_u, n_t), one column per snapshot
    meta: list[SnapshotMeta]

    @property
    def n_u(self) -> int:
        return self.data.shape[0]

    @property
    def n_t(self) -> int:
        return self.data.shape[1]


def fluctuation_field(u: np.ndarray, mesh: PeriodicMesh,
                      U: MacroStretch) -> np.ndarray:
    """Displacement minus the homogeneous map (U - I) X."""
    gradU = U.tensor()[:2, :2] - np.eye(2)
    return u - (mesh.nodes @ gradU.T).ravel()


def collect_snapshots(runs, mesh: PeriodicMesh, stride: int = 1) -> SnapshotSet:
    """Extract fluctuation snapshots from full-order runs.

    `runs` is a sequence of converged-record sequences, one per simulation
    (a (LoadPath, records) pair is also accepted); increments stride,
    2*stride, ... of each run contribute one column each.
    """
    if stride < 1:
        raise ConfigError(f"snapshot stride must be >= 1, got {stride}")
    cols, meta = [], []
    for sim, run in enumerate(runs):
        records = run[1] if isinstance(run, tuple) else run
        for k in range(stride, len(records) + 1, stride):
            rec = records[k - 1]
            if rec.u.shape[0] != mesh.n_dof:
                raise DataMismatchError(
                    f"run {sim} has {rec.u.shape[0]} dofs, mesh has "
                    f"{mesh.n_dof}: snapshots must share one mesh")
            cols.append(fluctuation_field(rec.u, mesh, rec.macro))
            meta.append(SnapshotMeta(sim=sim, inc=k, U11=rec.macro.U11,
                                     U22=rec.macro.U22, U12=rec.macro.U12))
    if not cols:
        raise ConfigError("no snapshots collected")
    return SnapshotSet(np.column_stack(cols), meta)


@dataclass
class ReducedBasis:
    Phi: np.ndarray              # (n_u, n_b), orthonormal columns
    sigma: np.ndarray            # full singular spectrum, descending
    mesh_fingerprint: str

    @property
    def n_u(self) -> int:
        return self.Phi.shape[0]

    @property
    def n_b(self) -> int:
        return self.Phi.shape[1]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(b"rve-basis-v1")
        h.update(np.asarray([self.n_u, self.n_b], dtype=np.uint64).tobytes())
        h.update(np.ascontiguousarray(self.Phi).tobytes())
        h.update(self.mesh_fingerprint.encode())
        return h.hexdigest()


def build_basis(snapshots, n_b: int, mesh_fingerprint: str = "") -> ReducedBasis:
    """Truncated POD basis via the Gram-matrix eigenproblem.

    Raises RankError when the requested size exceeds the numerical rank
    (eigenvalues below 1e-12 of the largest are treated as zero).
    """
    U = snapshots.data if isinstance(snapshots, SnapshotSet) else np.asarray(snapshots, float)
    if U.ndim != 2:
        raise ConfigError("snapshot matrix must be two-dimensional")
    n_t = U.shape[1]
    if n_b < 1:
        raise ConfigError(f"basis size must be >= 1, got {n_b}")
    if n_b > n_t:
        raise RankError(f"requested {n_b} vectors from {n_t} snapshots")
    gram = U.T @ U
    evals, evecs = np.linalg.eigh(gram)
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    evecs = evecs[:, order]
    cutoff = 1e-12 * max(evals[0], 0.0)
    rank = int(np.sum(evals > cutoff))
    if n_b > rank:
        raise RankError(
            f"requested {n_b} vectors but snapshot rank is {rank}")
    sigma = np.sqrt(np.clip(evals, 0.0, None))
    Phi = U @ (evecs[:, :n_b] / sigma[:n_b])
    Phi /= np.linalg.norm(Phi, axis=0)
    for j in range(n_b):
        lead = np.argmax(np.abs(Phi[:, j]))
        if Phi[lead, j] < 0.0:
            Phi[:, j] = -Phi[:, j]
    return ReducedBasis(Phi=Phi, sigma=sigma,
                        mesh_fingerprint=mesh_fingerprint)


def reconstruction_error(sigma: np.ndarray, k: int) -> float:
    """Relative Frobenius error of the rank-k snapshot reconstruction,
    sqrt(sum_{i>k} sigma_i^2 / sum_i sigma_i^2)."""
    sigma = np.asarray(sigma, float)
    total = float(np.sum(sigma ** 2))
    if total == 0.0:
        return 0.0
    tail = float(np.sum(sigma[k:] ** 2))
    return float(np.sqrt(max(tail, 0.0) / total))


def project(u_fluct: np.ndarray, basis: ReducedBasis) -> np.ndarray:
    """Least-squares reduced coordinates of a fluctuation field, Phi^T u."""
    return basis.Phi.T @ u_fluct


@dataclass
class ReducedSolution:
    """Converged record of one macro increment of the reduced solver."""

    macro: MacroStretch
    alpha: np.ndarray
    u: np.ndarray
    converged: bool
    iterations: int
    residual_norm: float
    P_macro: np.ndarray
    lam_field: np.ndarray | None = None
    states: StateBatch | None = None


def solve_reduced(load_path: LoadPath, basis: ReducedBasis,
                  mesh: PeriodicMesh, materials, solver=None,
                  lambda_landmarks=(), keep_states: bool = False):
    """Galerkin-projected Newton solve of a macro load path.

    Each increment starts with a predictor solve at the previously converged
    state: Phi^T K Phi dalpha = -Phi^T f - Phi^T K Psi domega, where domega
    is the change of the homogeneous coordinates; subsequent iterations are
    plain Newton on the reduced residual Phi^T f_int.
    """
    from .fem import SolverConfig
    solver = solver or SolverConfig()
    fp = mesh.fingerprint()
    if basis.mesh_fingerprint and basis.mesh_fingerprint != fp:
        raise DataMismatchError(
            "reduced basis was built for a different mesh")
    if basis.n_u != mesh.n_dof:
        raise DataMismatchError(
            f"basis has {basis.n_u} rows, mesh has {mesh.n_dof} dofs")
    Psi = build_psi(mesh)
    Phi = basis.Phi
    states = StateBatch.virgin(mesh.n_qp)
    alpha = np.zeros(basis.n_b)
    omega_old = MacroStretch.identity().omega()
    landmarks = set(lambda_landmarks)
    records = []
    for k, U in enumerate(load_path.increments, start=1):
        omega_new = U.omega()
        u = Psi @ omega_old + Phi @ alpha
        res = assemble(u, states, mesh, materials, want_tangent=True)
        r_red = Phi.T @ res.f_int
        scale = max(float(np.linalg.norm(res.f_int)), 1e-30)
        iterations = 0
        if np.array_equal(omega_new, omega_old) and \
                np.linalg.norm(r_red) <= solver.tol_newton * scale:
            pass  # nothing to do for this increment
        else:
            KPhi = res.K @ Phi
            rhs = -r_red - Phi.T @ (res.K @ (Psi @ (omega_new - omega_old)))
            instrument.count_system_solve()
            alpha = alpha + np.linalg.solve(Phi.T @ KPhi, rhs)
            iterations = 1
            for it in range(1, solver.max_iter + 1):
                u = Psi @ omega_new + Phi @ alpha
                res = assemble(u, states, mesh, materials, want_tangent=True)
                r_red = Phi.T @ res.f_int
                scale = max(float(np.linalg.norm(res.f_int)), 1e-30)
                if np.linalg.norm(r_red) <= solver.tol_newton * scale:
                    break
                if it == solver.max_iter:
                    raise NonconvergenceError(
                        f"reduced increment {k} stalled at relative residual "
                        f"{np.linalg.norm(r_red) / scale:.3e}")
                instrument.count_system_solve()
                alpha = alpha - np.linalg.solve(Phi.T @ (res.K @ Phi), r_red)
                iterations = it + 1
        u = Psi @ omega_new + Phi @ alpha
        states = res.states_trial
        rec = ReducedSolution(
            macro=U, alpha=alpha.copy(), u=u, converged=True,
            iterations=iterations,
            residual_norm=float(np.linalg.norm(r_red)) / scale,
            P_macro=volume_average_stress(res.P_qp, mesh))
        if k in landmarks:
            rec.lam_field = states.lam.copy()
        if keep_states:
            rec.states = states.copy()
        records.append(rec)
        omega_old = omega_new
    return records


# ---------------------------------------------------------------------------
# container formats
# ---------------------------------------------------------------------------

def save_snapshots(path, snaps: SnapshotSet) -> None:
    """Binary snapshot matrix plus a .meta.csv provenance sidecar."""
    with open(path, "wb") as fh:
        binio.write_magic(fh, _SNAP_MAGIC)
        binio.write_u64(fh, snaps.n_u, snaps.n_t)
        binio.write_f64(fh, snaps.data)
    with open(f"{path}.meta.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["col", "sim", "inc", "U11", "U22", "U12"])
        for c, m in enumerate(snaps.meta):
            writer.writerow([c, m.sim, m.inc, repr(m.U11), repr(m.U22),
                             repr(m.U12)])


def load_snapshots(path) -> SnapshotSet:
    with open(path, "rb") as fh:
        binio.expect_magic(fh, _SNAP_MAGIC, "snapshot file")
        n_u, n_t = binio.read_u64(fh, 2, "snapshot header")
        data = binio.read_f64(fh, (n_u, n_t), "snapshot matrix")
        binio.expect_eof(fh, "snapshot file")
    meta = []
    try:
        with open(f"{path}.meta.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                meta.append(SnapshotMeta(
                    sim=int(row["sim"]), inc=int(row["inc"]),
                    U11=float(row["U11"]), U22=float(row["U22"]),
                    U12=float(row["U12"])))
    except FileNotFoundError:
        meta = [SnapshotMeta(0, c + 1, 1.0, 1.0, 0.0) for c in range(n_t)]
    if len(meta) != n_t:
        raise DataMismatchError(
            f"snapshot sidecar lists {len(meta)} columns, file holds {n_t}")
    return SnapshotSet(data, meta)


def save_basis(path, basis: ReducedBasis) -> None:
    with open(path, "wb") as fh:
        binio.write_magic(fh, _BASIS_MAGIC)
        binio.write_u64(fh, basis.n_u, basis.n_b, basis.sigma.shape[0])
        binio.write_f64(fh, basis.sigma)
        binio.write_f64(fh, basis.Phi)
        binio.write_str(fh, basis.mesh_fingerprint)


def load_basis(path) -> ReducedBasis:
    with open(path, "rb") as fh:
        binio.expect_magic(fh, _BASIS_MAGIC, "basis file")
        n_u, n_b, n_sig = binio.read_u64(fh, 3, "basis header")
        sigma = binio.read_f64(fh, (n_sig,), "singular values")
        Phi = binio.read_f64(fh, (n_u, n_b), "basis matrix")
        fp = binio.read_str(fh, "mesh fingerprint")
        binio.expect_eof(fh, "basis file")
    return ReducedBasis(Phi=Phi, sigma=sigma, mesh_fingerprint=fp)
