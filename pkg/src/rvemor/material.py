"""Finite-strain elastoplastic constitutive model.

Multiplicative split F = Fe.Fp with a compressible neo-Hookean elastic law,

    W(Fe) = E (I_e - 3 - 2 ln J_e) / (4 (1 + nu))
          + E nu (ln J_e)^2 / (2 (1 + nu)(1 - 2 nu)),

a von-Mises-type yield function on the Mandel stress M = Fe^T dW/dFe,

    y(M, lam) = sqrt(3/2 M_dev : M_dev) - M0 - h lam^m,

and associated flow  Fp_dot = lam_dot (dy/dM) Fp  under the usual
Karush-Kuhn-Tucker loading/unloading conditions.

The incremental update is a backward-Euler exponential map,
Fp_new = exp(dlam N) Fp_old with the flow direction N evaluated at the
updated state.  Because the elastic law is isotropic, the update is coaxial
with the trial elastic stretch: it is solved in the principal frame of
Ce_trial = Fe_trial^T Fe_trial as a coupled Newton iteration on the three
principal elastic log strains and dlam.  The algorithmic (consistent)
tangent dP/dF follows from the closed form

    P(F) = mu Fe_tr G Fp_old^{-T} + (lambda ln(det F) - mu) F^{-T},

where G is the isotropic tensor function of Ce_trial with eigenvalues
g_a = exp(2 eps_a) / c_a; the sensitivity dG/dCe_trial combines the inverse
local Jacobian with the standard spectral derivative of an isotropic tensor
function.

All functions are pure; the batched entry point is what the FE assembly and
the online surrogate call, the scalar wrappers mirror it one point at a time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import instrument
from .errors import ElementInversionError, ReturnMappingError

__all__ = [
    "MaterialParams",
    "QuadPointState",
    "StressResult",
    "strain_energy",
    "elastic_piola",
    "mandel_stress",
    "yield_value",
    "stress_update",
    "stress_update_batch",
    "tangent_check",
]

_EYE3 = np.eye(3)

# Threshold below which two trial eigenvalues are treated as coincident when
# forming the spectral derivative (relative to the largest eigenvalue).
_EIG_COINCIDENCE_RTOL = 1e-8

_LOCAL_MAX_ITER = 50


@dataclass(frozen=True)
class MaterialParams:
    """Isotropic finite-strain elastoplastic constants.

    Attributes
    ----------
    E, nu : float
        Young's modulus and Poisson's ratio of the elastic law.
    M0 : float
        Initial yield stress on the Mandel equivalent stress.  ``math.inf``
        marks an elastic-only phase; the plastic branch is then skipped
        entirely (no infinities enter any arithmetic).
    h, m : float
        Power-law isotropic hardening  h * lam**m.
    """

    E: float
    nu: float
    M0: float
    h: float
    m: float

    def __post_init__(self):
        if not self.E > 0.0:
            raise ValueError(f"E must be positive, got {self.E}")
        if not -1.0 < self.nu < 0.5:
            raise ValueError(f"nu must lie in (-1, 0.5), got {self.nu}")
        if not self.M0 > 0.0:
            raise ValueError(f"M0 must be positive (or inf), got {self.M0}")
        if self.h < 0.0:
            raise ValueError(f"h must be non-negative, got {self.h}")
        if not self.m > 0.0:
            raise ValueError(f"m must be positive, got {self.m}")

    @property
    def mu(self) -> float:
        return self.E / (2.0 * (1.0 + self.nu))

    @property
    def lam(self) -> float:
        """First Lame constant."""
        return self.E * self.nu / ((1.0 + self.nu) * (1.0 - 2.0 * self.nu))

    @property
    def elastic_only(self) -> bool:
        return math.isinf(self.M0)

    @property
    def tol_yield(self) -> float:
        """Elastic/plastic switch tolerance on the yield value."""
        return 1e-10 * self.E


@dataclass
class QuadPointState:
    """History carried by one quadrature point: plastic part of F and the
    accumulated plastic multiplier."""

    Fp: np.ndarray
    lam: float

    @staticmethod
    def virgin() -> "QuadPointState":
        return QuadPointState(np.eye(3), 0.0)

    def copy(self) -> "QuadPointState":
        return QuadPointState(self.Fp.copy(), self.lam)


@dataclass
class StressResult:
    """Outcome of one committed-candidate stress update."""

    P: np.ndarray
    tangent: np.ndarray | None
    state_new: QuadPointState
    dlam: float


def strain_energy(Fe: np.ndarray, params: MaterialParams) -> float:
    """Elastic strain energy density W(Fe)."""
    Fe = np.asarray(Fe, dtype=float)
    Je = np.linalg.det(Fe)
    if Je <= 0.0:
        raise ElementInversionError(f"det(Fe) = {Je} is not positive")
    Ie = float(np.tensordot(Fe, Fe))
    lnJ = math.log(Je)
    E, nu = params.E, params.nu
    return (E * (Ie - 3.0 - 2.0 * lnJ) / (4.0 * (1.0 + nu))
            + E * nu * lnJ * lnJ / (2.0 * (1.0 + nu) * (1.0 - 2.0 * nu)))


def elastic_piola(Fe: np.ndarray, params: MaterialParams) -> np.ndarray:
    """First Piola-Kirchhoff stress of the elastic law, P_e = dW/dFe."""
    Fe = np.asarray(Fe, dtype=float)
    Je = np.linalg.det(Fe)
    if Je <= 0.0:
        raise ElementInversionError(f"det(Fe) = {Je} is not positive")
    FeinvT = np.linalg.inv(Fe).T
    return params.mu * (Fe - FeinvT) + params.lam * math.log(Je) * FeinvT


def mandel_stress(Fe: np.ndarray, params: MaterialParams) -> np.ndarray:
    """Mandel stress M = Fe^T P_e; symmetric for this isotropic law."""
    Fe = np.asarray(Fe, dtype=float)
    return Fe.T @ elastic_piola(Fe, params)


def yield_value(M: np.ndarray, lam: float, params: MaterialParams) -> float:
    """Yield function value; -inf for an elastic-only phase."""
    if params.elastic_only:
        return -math.inf
    if lam < 0.0:
        raise ValueError(f"plastic multiplier must be non-negative, got {lam}")
    M = np.asarray(M, dtype=float)
    Mdev = M - np.trace(M) / 3.0 * _EYE3
    q = math.sqrt(1.5 * float(np.tensordot(Mdev, Mdev)))
    return q - params.M0 - params.h * lam ** params.m


# ---------------------------------------------------------------------------
# batched update
# ---------------------------------------------------------------------------

def stress_update_batch(F, Fp_old, lam_old, params: MaterialParams,
                        want_tangent: bool = True,
                        tangent_mode: str = "exact"):
    """Stress update for a batch of quadrature points of one material.

    Parameters
    ----------
    F : (N, 3, 3) total deformation gradients (already F-bar modified).
    Fp_old : (N, 3, 3) committed plastic parts, det = 1.
    lam_old : (N,) committed plastic multipliers.
    want_tangent : skip the algorithmic tangent when only stresses are
        needed (the equation-free online stage).
    tangent_mode : "exact" for the analytic consistent tangent, "fd" for a
        central-difference fallback (step 1e-7, debugging aid).

    Returns
    -------
    P : (N, 3, 3) first Piola-Kirchhoff stresses (conjugate to F).
    A : (N, 3, 3, 3, 3) tangents dP/dF, or None.
    Fp_new, lam_new, dlam : updated history (not yet committed anywhere).
    """
    F = np.asarray(F, dtype=float)
    Fp_old = np.asarray(Fp_old, dtype=float)
    lam_old = np.asarray(lam_old, dtype=float)
    n = F.shape[0]
    instrument.count_stress_updates(n)

    detF = np.linalg.det(F)
    if np.any(detF <= 0.0):
        bad = np.flatnonzero(detF <= 0.0)
        raise ElementInversionError(
            f"non-positive det(F) at {bad.size} point(s), first index {bad[0]}")
    lnJ = np.log(detF)

    mu, lame = params.mu, params.lam
    Fpi = np.linalg.inv(Fp_old)
    Fe_tr = F @ Fpi
    Ce_tr = np.swapaxes(Fe_tr, -1, -2) @ Fe_tr
    c, V = np.linalg.eigh(Ce_tr)            # ascending eigenvalues, V[:, :, a]
    eps_tr = 0.5 * np.log(c)

    # trial Mandel stress in the principal frame
    m_tr = mu * (c - 1.0) + lame * eps_tr.sum(axis=-1, keepdims=True)
    mdev = m_tr - m_tr.mean(axis=-1, keepdims=True)
    q_tr = np.sqrt(1.5 * np.einsum("na,na->n", mdev, mdev))

    eps = eps_tr.copy()
    dlam = np.zeros(n)
    lam_new = lam_old.copy()
    plastic = np.zeros(n, dtype=bool)
    J_local = None
    if not params.elastic_only:
        y_tr = q_tr - params.M0 - params.h * lam_old ** params.m
        plastic = y_tr > params.tol_yield
        if plastic.any():
            idx = np.flatnonzero(plastic)
            eps_p, dlam_p, J_local = _return_map(eps_tr[idx], lam_old[idx], params)
            eps[idx] = eps_p
            dlam[idx] = dlam_p
            lam_new[idx] = lam_old[idx] + dlam_p

    # plastic shrink of the trial eigenvalues; g = 1 on elastic points
    g = np.exp(2.0 * eps) / c

    # Fp_new = exp(dlam N) Fp_old, with dlam*n_a = eps_tr_a - eps_a, applied
    # only where flow occurred so elastic states stay bitwise unchanged.
    # De-meaning removes the (already tiny) floating-point trace so the
    # exponential stays exactly unimodular.
    Fp_new = Fp_old.copy()
    if plastic.any():
        idx = np.flatnonzero(plastic)
        d = eps_tr[idx] - eps[idx]
        d -= d.mean(axis=-1, keepdims=True)
        expm = np.einsum("nAa,na,nBa->nAB", V[idx], np.exp(d), V[idx])
        Fp_new[idx] = expm @ Fp_old[idx]

    G = np.einsum("nAa,na,nBa->nAB", V, g, V)
    FpiT = np.swapaxes(Fpi, -1, -2)
    Finv = np.linalg.inv(F)
    FinvT = np.swapaxes(Finv, -1, -2)
    P = mu * (Fe_tr @ G @ FpiT) + (lame * lnJ - mu)[:, None, None] * FinvT

    A = None
    if want_tangent:
        if tangent_mode == "fd":
            A = _fd_tangent(F, Fp_old, lam_old, params)
        elif tangent_mode == "exact":
            W = np.einsum("nLA,nAB,nJB->nLJ", Fpi, G, Fpi)
            A = mu * np.einsum("ik,nLJ->niJkL", _EYE3, W)
            A += lame * np.einsum("niJ,nkL->niJkL", FinvT, FinvT)
            A -= np.einsum("n,nJk,nLi->niJkL", lame * lnJ - mu, Finv, Finv)
            if plastic.any():
                idx = np.flatnonzero(plastic)
                dgdc = _eigenvalue_sensitivities(c[idx], g[idx], J_local)
                D = _isotropic_fn_derivative(c[idx], V[idx], g[idx], dgdc)
                # chain rule through Ce_trial = Fe_tr^T Fe_tr (symmetric in
                # (C, D), hence the factor 2)
                t = np.einsum("nABCD,nkC,nLD->nABkL", D, Fe_tr[idx], Fpi[idx])
                A[idx] += 2.0 * mu * np.einsum(
                    "niA,nJB,nABkL->niJkL", Fe_tr[idx], Fpi[idx], t)
        else:
            raise ValueError(f"unknown tangent_mode {tangent_mode!r}")

    return P, A, Fp_new, lam_new, dlam


def _return_map(eps_tr, lam_old, params: MaterialParams):
    """Coupled Newton on (principal elastic log strains, dlam).

    Residuals:  R_a = eps_a - eps_tr_a + dlam n_a(eps),
                R_4 = q(eps) - M0 - h (lam_old + dlam)^m.
    Returns the converged unknowns and the final local Jacobian (used by the
    consistent tangent).  The iteration drives the yield residual well below
    the nominal tolerance so that finite differences across the update stay
    clean.
    """
    mu, lame = params.mu, params.lam
    h, mexp, M0 = params.h, params.m, params.M0
    tol_y = 1e-13 * params.E
    tol_e = 1e-13

    npts = eps_tr.shape[0]
    eps = eps_tr.copy()
    dlam = np.zeros(npts)
    J = np.empty((npts, 4, 4))
    R = np.empty((npts, 4))

    for iteration in range(_LOCAL_MAX_ITER + 1):
        c2e = np.exp(2.0 * eps)
        m = mu * (c2e - 1.0) + lame * eps.sum(axis=-1, keepdims=True)
        mdev = m - m.mean(axis=-1, keepdims=True)
        q = np.sqrt(1.5 * np.einsum("na,na->n", mdev, mdev))
        nvec = 1.5 * mdev / q[:, None]
        lam_new = lam_old + dlam
        y = q - M0 - h * lam_new ** mexp

        R[:, :3] = eps - eps_tr + dlam[:, None] * nvec
        R[:, 3] = y
        done = (np.abs(y) <= tol_y) & (np.abs(R[:, :3]).max(axis=-1) <= tol_e)

        dq = 2.0 * mu * nvec * c2e                                     # (n,3)
        dn = (3.0 / (2.0 * q[:, None, None])
              * 2.0 * mu * c2e[:, None, :]
              * (_EYE3 - 1.0 / 3.0)[None]
              - nvec[:, :, None] * dq[:, None, :] / q[:, None, None])
        J[:, :3, :3] = _EYE3 + dlam[:, None, None] * dn
        J[:, :3, 3] = nvec
        J[:, 3, :3] = dq
        J[:, 3, 3] = -h * mexp * np.maximum(lam_new, 1e-16) ** (mexp - 1.0)

        if done.all():
            return eps, dlam, J
        if iteration == _LOCAL_MAX_ITER:
            break

        act = ~done
        step = np.linalg.solve(J[act], R[act][..., None])[..., 0]
        np.clip(step, -1.0, 1.0, out=step)
        eps[act] -= step[:, :3]
        dlam[act] -= step[:, 3]
        np.maximum(dlam, 0.0, out=dlam)

    bad = ~done
    raise ReturnMappingError(
        f"return mapping failed at {int(bad.sum())} of {npts} point(s) "
        f"after {_LOCAL_MAX_ITER} iterations; "
        f"max |yield residual| = {np.abs(R[bad, 3]).max():.3e}, "
        f"max |strain residual| = {np.abs(R[bad, :3]).max():.3e}")


def _eigenvalue_sensitivities(c, g, J_local):
    """dg_a/dc_b of the updated eigenvalue function through the local solve.

    Implicit differentiation of the converged local system gives
    d eps_a / d eps_tr_b = (J^-1)_{ab}; with eps_tr_b = ln(c_b)/2 and
    g_a = exp(2 eps_a)/c_a this yields the 3x3 sensitivity matrix.
    """
    Jinv = np.linalg.inv(J_local)
    dgdc = g[:, :, None] * Jinv[:, :3, :3] / c[:, None, :]
    dgdc -= np.einsum("ab,na->nab", _EYE3, g / c)
    return dgdc


def _isotropic_fn_derivative(c, V, g, dgdc):
    """Spectral derivative dG/dC of G = sum_a g_a v_a v_a^T.

    Standard two-part formula: eigenvalue sensitivities on the dyad products
    M_a x M_b plus eigenvector rotation terms with the divided differences
    (g_a - g_b)/(c_a - c_b), replaced by their analytic limit when two
    eigenvalues (nearly) coincide.  Minor-symmetric in both index pairs.
    """
    Ma = np.einsum("nAa,nBa->naAB", V, V)
    D = np.einsum("nab,naAB,nbCD->nABCD", dgdc, Ma, Ma)
    cmax = np.abs(c).max(axis=-1)
    for a, b in ((0, 1), (0, 2), (1, 2)):
        dc = c[:, a] - c[:, b]
        limit = 0.5 * (dgdc[:, a, a] - dgdc[:, a, b]
                       + dgdc[:, b, b] - dgdc[:, b, a])
        safe = np.abs(dc) > _EIG_COINCIDENCE_RTOL * cmax
        theta = np.where(safe, (g[:, a] - g[:, b]) / np.where(safe, dc, 1.0),
                         limit)
        S = (np.einsum("nA,nB->nAB", V[:, :, a], V[:, :, b])
             + np.einsum("nA,nB->nAB", V[:, :, b], V[:, :, a]))
        D += 0.5 * np.einsum("n,nAB,nCD->nABCD", theta, S, S)
    return D


def _fd_tangent(F, Fp_old, lam_old, params, step: float = 1e-7):
    """Central-difference tangent of the discrete update (debug fallback)."""
    n = F.shape[0]
    A = np.empty((n, 3, 3, 3, 3))
    for k in range(3):
        for l in range(3):
            Fp = F.copy()
            Fp[:, k, l] += step
            Pp, _, _, _, _ = stress_update_batch(
                Fp, Fp_old, lam_old, params, want_tangent=False)
            Fm = F.copy()
            Fm[:, k, l] -= step
            Pm, _, _, _, _ = stress_update_batch(
                Fm, Fp_old, lam_old, params, want_tangent=False)
            A[:, :, :, k, l] = (Pp - Pm) / (2.0 * step)
    return A


# ---------------------------------------------------------------------------
# scalar wrappers
# ---------------------------------------------------------------------------

def stress_update(F_bar: np.ndarray, state_old: QuadPointState,
                  params: MaterialParams, want_tangent: bool = True,
                  tangent_mode: str = "exact") -> StressResult:
    """Single-point stress update; see :func:`stress_update_batch`."""
    detFp = np.linalg.det(state_old.Fp)
    if abs(detFp - 1.0) > 1e-8:
        raise ValueError(f"plastic part must be unimodular, det(Fp) = {detFp}")
    if state_old.lam < 0.0:
        raise ValueError(f"negative plastic multiplier {state_old.lam}")
    P, A, Fp_new, lam_new, dlam = stress_update_batch(
        np.asarray(F_bar, dtype=float)[None], state_old.Fp[None],
        np.array([state_old.lam]), params,
        want_tangent=want_tangent, tangent_mode=tangent_mode)
    return StressResult(P[0], None if A is None else A[0],
                        QuadPointState(Fp_new[0], float(lam_new[0])),
                        float(dlam[0]))


def tangent_check(F_bar: np.ndarray, state_old: QuadPointState,
                  params: MaterialParams, step: float = 1e-6) -> float:
    """Max relative deviation between the analytic tangent and a central
    finite difference of the discrete update, component-wise scaled by
    max(1, |tangent component|)."""
    res = stress_update(F_bar, state_old, params, want_tangent=True)
    F_bar = np.asarray(F_bar, dtype=float)
    worst = 0.0
    for k in range(3):
        for l in range(3):
            Fp = F_bar.copy()
            Fp[k, l] += step
            Fm = F_bar.copy()
            Fm[k, l] -= step
            Pp = stress_update(Fp, state_old, params, want_tangent=False).P
            Pm = stress_update(Fm, state_old, params, want_tangent=False).P
            fd = (Pp - Pm) / (2.0 * step)
            dev = np.abs(res.tangent[:, :, k, l] - fd)
            scale = np.maximum(1.0, np.abs(res.tangent[:, :, k, l]))
            worst = max(worst, float((dev / scale).max()))
    return worst
