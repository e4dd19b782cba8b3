"""Equation-free online stage: RNN-predicted reduced coefficients drive the
micro fields, one committed stress update per quadrature point per increment
evolves the plastic history, and the macro stress is the reference-volume
average.  No stiffness is assembled and no linear system is solved; the
instrumentation counters prove it.

The predicted displacements are generally *not* in equilibrium.  The
projected residual norm |Phi^T f_int| can be recorded per increment as a
diagnostic (reusing the already-computed stresses), but it is never used to
iterate.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from . import instrument
from .errors import (DataMismatchError, ElementInversionError,
                     NonconvergenceError)
from .fem import (PeriodicMesh, StateBatch, fbar_kinematics, internal_force,
                  update_stresses, volume_average_stress)
from .loading import LoadPath, build_psi
from .pod import ReducedBasis
from .rnn import RnnModel, RnnStepper

__all__ = [
    "OnlineResult",
    "RunData",
    "ErrorReport",
    "run_online",
    "homogenize_stress",
    "compare_fields",
    "write_stress_csv",
    "read_stress_csv",
    "write_lambda_csv",
    "write_timing_csv",
]


def homogenize_stress(P_qp: np.ndarray, mesh: PeriodicMesh) -> np.ndarray:
    """Reference-volume-weighted average of the per-point stresses."""
    return volume_average_stress(P_qp, mesh)


@dataclass
class OnlineResult:
    """Full record of one equation-free run."""

    path: LoadPath
    alphas: np.ndarray           # (n_inc, n_b)
    P_macro: np.ndarray          # (n_inc, 3, 3)
    lam: np.ndarray              # (n_inc, n_qp) plastic multiplier history
    reduced_residual: np.ndarray | None   # (n_inc,) |Phi^T f| / max(|f|, eps)
    u: np.ndarray | None         # (n_inc, n_dof) when store_fields
    P_qp: np.ndarray | None      # (n_inc, n_qp, 3, 3) when store_fields
    Fp: np.ndarray | None        # (n_inc, n_qp, 3, 3) when store_fields
    final_state: StateBatch
    timings: dict                # stage -> (n_inc,) seconds
    system_solves: int
    stress_updates: int
    failures: list = field(default_factory=list)

    @property
    def n_inc(self) -> int:
        return self.alphas.shape[0]


def run_online(load_path: LoadPath, basis: ReducedBasis, model: RnnModel,
               mesh: PeriodicMesh, materials, alpha_override=None,
               diagnostics: bool = True, store_fields: bool = True,
               strict: bool = True) -> OnlineResult:
    """Run the surrogate over a macro load path.

    alpha_override: optional (n_inc, n_b) array fed in place of the RNN
    predictions (isolates reduction error from network error).
    strict=False keeps going after a failed constitutive update, carrying
    the previous stresses and state for that increment and recording the
    failure.
    """
    if model.n_b != basis.n_b:
        raise DataMismatchError(
            f"model predicts {model.n_b} coefficients, basis has {basis.n_b}")
    if model.basis_fingerprint and model.basis_fingerprint != basis.fingerprint():
        raise DataMismatchError("model was trained against a different basis")
    mesh_fp = mesh.fingerprint()
    if basis.mesh_fingerprint and basis.mesh_fingerprint != mesh_fp:
        raise DataMismatchError("basis was built for a different mesh")
    if basis.n_u != mesh.n_dof:
        raise DataMismatchError(
            f"basis has {basis.n_u} rows, mesh has {mesh.n_dof} dofs")
    n_inc = load_path.n_inc
    if alpha_override is not None:
        alpha_override = np.asarray(alpha_override, float)
        if alpha_override.shape != (n_inc, basis.n_b):
            raise DataMismatchError(
                f"alpha override has shape {alpha_override.shape}, expected "
                f"{(n_inc, basis.n_b)}")

    Psi = build_psi(mesh)
    Phi = basis.Phi
    stepper = RnnStepper(model)
    states = StateBatch.virgin(mesh.n_qp)
    before = instrument.snapshot()

    alphas = np.zeros((n_inc, basis.n_b))
    P_macro = np.zeros((n_inc, 3, 3))
    lam_hist = np.zeros((n_inc, mesh.n_qp))
    resid = np.zeros(n_inc) if diagnostics else None
    u_hist = np.zeros((n_inc, mesh.n_dof)) if store_fields else None
    P_hist = np.zeros((n_inc, mesh.n_qp, 3, 3)) if store_fields else None
    Fp_hist = np.zeros((n_inc, mesh.n_qp, 3, 3)) if store_fields else None
    stages = ("rnn", "reconstruct", "stress", "homogenize")
    timings = {s: np.zeros(n_inc) for s in stages}
    failures = []
    P_prev = np.zeros((mesh.n_qp, 3, 3))

    for k, U in enumerate(load_path.increments):
        t0 = time.perf_counter()
        if alpha_override is not None:
            alpha = alpha_override[k]
            stepper.step((U.U11, U.U12))  # keep hidden state comparable
        else:
            alpha = stepper.step((U.U11, U.U12))
        t1 = time.perf_counter()
        u = Psi @ U.omega() + Phi @ alpha
        try:
            kin = fbar_kinematics(u, mesh)
        except ElementInversionError as exc:
            if strict:
                raise ElementInversionError(
                    f"reconstructed field inverts elements at increment "
                    f"{k + 1}: {exc}") from exc
            failures.append((k + 1, str(exc)))
            kin = None
        t2 = time.perf_counter()
        P = P_prev
        if kin is not None:
            try:
                P, _, trial = update_stresses(kin, states, mesh, materials,
                                              want_tangent=False)
                states = trial      # committed once, immediately
                P_prev = P
            except NonconvergenceError as exc:
                if strict:
                    raise NonconvergenceError(
                        f"stress update failed at increment {k + 1}: "
                        f"{exc}") from exc
                failures.append((k + 1, str(exc)))
                # carry previous stresses and state
        t3 = time.perf_counter()
        P_macro[k] = homogenize_stress(P, mesh)
        t4 = time.perf_counter()

        alphas[k] = alpha
        lam_hist[k] = states.lam
        if store_fields:
            u_hist[k] = u
            P_hist[k] = P
            Fp_hist[k] = states.Fp
        if diagnostics:
            if kin is None:
                resid[k] = np.nan
            else:
                f_int = internal_force(kin, P, mesh)
                resid[k] = float(np.linalg.norm(Phi.T @ f_int)
                                 / max(np.linalg.norm(f_int), 1e-30))
        timings["rnn"][k] = t1 - t0
        timings["reconstruct"][k] = t2 - t1
        timings["stress"][k] = t3 - t2
        timings["homogenize"][k] = t4 - t3

    delta = instrument.delta_since(before)
    return OnlineResult(
        path=load_path, alphas=alphas, P_macro=P_macro, lam=lam_hist,
        reduced_residual=resid, u=u_hist, P_qp=P_hist, Fp=Fp_hist,
        final_state=states, timings=timings,
        system_solves=delta.system_solves,
        stress_updates=delta.stress_updates, failures=failures)


# ---------------------------------------------------------------------------
# uniform run adapter + error report
# ---------------------------------------------------------------------------

@dataclass
class RunData:
    """Minimal common view of a DNS, reduced, or online run for comparison."""

    label: str
    inputs: np.ndarray             # (n_inc, 2) of (U11, U12)
    P_macro: np.ndarray            # (n_inc, 3, 3)
    alphas: np.ndarray | None = None
    lam: dict = field(default_factory=dict)   # increment -> (n_qp,)
    seconds_per_inc: np.ndarray | None = None
    iterations: np.ndarray | None = None

    @staticmethod
    def from_dns(path: LoadPath, records, label: str = "dns") -> "RunData":
        lam = {i + 1: r.lam_field for i, r in enumerate(records)
               if r.lam_field is not None}
        return RunData(
            label=label, inputs=path.inputs(),
            P_macro=np.array([r.P_macro for r in records]),
            lam=lam,
            iterations=np.array([r.iterations for r in records]))

    @staticmethod
    def from_reduced(path: LoadPath, records, label: str = "mor") -> "RunData":
        lam = {i + 1: r.lam_field for i, r in enumerate(records)
               if r.lam_field is not None}
        return RunData(
            label=label, inputs=path.inputs(),
            P_macro=np.array([r.P_macro for r in records]),
            alphas=np.array([r.alpha for r in records]), lam=lam,
            iterations=np.array([r.iterations for r in records]))

    @staticmethod
    def from_online(result: OnlineResult, label: str = "rnn") -> "RunData":
        lam = {k + 1: result.lam[k] for k in range(result.n_inc)}
        total = sum(result.timings.values())
        return RunData(
            label=label, inputs=result.path.inputs(),
            P_macro=result.P_macro, alphas=result.alphas, lam=lam,
            seconds_per_inc=total)


@dataclass
class ErrorReport:
    label: str
    stress_rel_l2: float
    stress_err_per_inc: np.ndarray      # (n_inc,) Frobenius norms
    alpha_mse: float | None             # mean over increments (coefficient MSE)
    alpha_mse_per_inc: np.ndarray | None
    lam_diff: dict                      # increment -> (n_qp,) difference field
    max_lam_diff: float


def compare_fields(a: RunData, b: RunData, lam_at=()) -> ErrorReport:
    """Error of run `a` against reference `b`.

    Stress error is the relative L2 norm of the stacked in-plane macro
    stress trace (the four components the trace files carry); coefficient
    error is the mean over increments of the squared coefficient error norm
    when both runs carry coefficients.
    """
    if a.P_macro.shape != b.P_macro.shape:
        raise DataMismatchError(
            f"runs have different shapes {a.P_macro.shape} vs {b.P_macro.shape}")
    diff = a.P_macro[:, :2, :2] - b.P_macro[:, :2, :2]
    per_inc = np.linalg.norm(diff.reshape(diff.shape[0], -1), axis=1)
    denom = np.linalg.norm(b.P_macro[:, :2, :2])
    rel = float(np.linalg.norm(diff) / max(denom, 1e-30))
    alpha_mse = None
    alpha_per_inc = None
    if a.alphas is not None and b.alphas is not None:
        if a.alphas.shape != b.alphas.shape:
            raise DataMismatchError("runs carry different coefficient counts")
        alpha_per_inc = np.sum((a.alphas - b.alphas) ** 2, axis=1)
        alpha_mse = float(alpha_per_inc.mean()) if alpha_per_inc.size else 0.0
    lam_diff = {}
    worst = 0.0
    for inc in lam_at:
        if inc in a.lam and inc in b.lam:
            d = a.lam[inc] - b.lam[inc]
            lam_diff[inc] = d
            worst = max(worst, float(np.max(np.abs(d))) if d.size else 0.0)
    return ErrorReport(label=f"{a.label} vs {b.label}", stress_rel_l2=rel,
                       stress_err_per_inc=per_inc, alpha_mse=alpha_mse,
                       alpha_mse_per_inc=alpha_per_inc, lam_diff=lam_diff,
                       max_lam_diff=worst)


# ---------------------------------------------------------------------------
# delimited exports
# ---------------------------------------------------------------------------

def write_stress_csv(path, run: RunData) -> None:
    """Homogenized stress trace: inc, U11, U22, U12, P11, P22, P12, P21."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["inc", "U11", "U22", "U12",
                         "P11", "P22", "P12", "P21"])
        for k in range(run.P_macro.shape[0]):
            u11, u12 = run.inputs[k]
            u22 = (1.0 + u12 * u12) / u11
            P = run.P_macro[k]
            writer.writerow([k + 1, repr(float(u11)), repr(float(u22)),
                             repr(float(u12)), repr(float(P[0, 0])),
                             repr(float(P[1, 1])), repr(float(P[0, 1])),
                             repr(float(P[1, 0]))])


def read_stress_csv(path, label: str = "file") -> RunData:
    incs, inputs, stresses = [], [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            incs.append(int(row["inc"]))
            inputs.append([float(row["U11"]), float(row["U12"])])
            P = np.zeros((3, 3))
            P[0, 0] = float(row["P11"])
            P[1, 1] = float(row["P22"])
            P[0, 1] = float(row["P12"])
            P[1, 0] = float(row["P21"])
            stresses.append(P)
    if incs != list(range(1, len(incs) + 1)):
        raise DataMismatchError(f"{path}: increments are not 1..n")
    return RunData(label=label, inputs=np.array(inputs),
                   P_macro=np.array(stresses))


def write_lambda_csv(path, lam: np.ndarray) -> None:
    """Plastic-multiplier field at one increment: element, gp, lam."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["element", "gp", "lam"])
        for q, value in enumerate(np.asarray(lam, float)):
            writer.writerow([q // 4, q % 4, repr(float(value))])


def write_timing_csv(path, timings: dict) -> None:
    stages = list(timings)
    n = len(timings[stages[0]]) if stages else 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["inc"] + [f"{s}_seconds" for s in stages]
                        + ["total_seconds"])
        for k in range(n):
            vals = [timings[s][k] for s in stages]
            writer.writerow([k + 1] + [repr(float(v)) for v in vals]
                            + [repr(float(sum(vals)))])
