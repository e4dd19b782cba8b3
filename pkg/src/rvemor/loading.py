"""Macroscopic loading programs and the homogeneous displacement interpolator.

Loading is a path of symmetric, isochoric in-plane macro stretches

    U = [[U11, U12], [U12, U22]],   det U = U11 U22 - U12^2 = 1,

so (U11, U12) are the free components and U22 = (1 + U12^2)/U11 follows from
the unit-determinant constraint.  Components stay inside the box
0.75 <= U11, U22 <= 1.25 and |U12| <= 0.75 (bounds inclusive).

Two kinds of paths are produced: cyclic ramps (linear from identity to a
target and back, equal number of increments each way) and fixed-step random
walks in the (U11, U12) plane.

The homogeneous part of the displacement field is Psi @ omega with
omega = (U11 - 1, U22 - 1, U12) and Psi the three nodal fields
(X1, 0), (0, X2) and (X2, X1).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

__all__ = [
    "MacroStretch",
    "LoadPath",
    "complete_stretch",
    "cyclic_path",
    "random_path",
    "cyclic_target_fan",
    "build_psi",
    "homogeneous_field",
]

U_MIN, U_MAX = 0.75, 1.25
U12_MAX = 0.75
_BOUND_TOL = 1e-12
_DET_TOL = 1e-12


def _in_bounds(U11: float, U22: float, U12: float) -> bool:
    return (U_MIN - _BOUND_TOL <= U11 <= U_MAX + _BOUND_TOL
            and U_MIN - _BOUND_TOL <= U22 <= U_MAX + _BOUND_TOL
            and abs(U12) <= U12_MAX + _BOUND_TOL)


def feasible_point(U11: float, U12: float) -> bool:
    """Whether (U11, U12) and the derived U22 all satisfy the bounds."""
    if not U11 > 0.0:
        return False
    U22 = (1.0 + U12 * U12) / U11
    return _in_bounds(U11, U22, U12)


@dataclass(frozen=True)
class MacroStretch:
    """Symmetric isochoric in-plane macro stretch."""

    U11: float
    U22: float
    U12: float

    def __post_init__(self):
        # plain floats so repr() round-trips exactly in delimited output
        object.__setattr__(self, "U11", float(self.U11))
        object.__setattr__(self, "U22", float(self.U22))
        object.__setattr__(self, "U12", float(self.U12))
        det = self.U11 * self.U22 - self.U12 * self.U12
        if abs(det - 1.0) > _DET_TOL:
            raise ConfigError(f"macro stretch must have unit determinant, "
                              f"got det = {det!r}")
        if not _in_bounds(self.U11, self.U22, self.U12):
            raise ConfigError(f"macro stretch out of bounds: "
                              f"({self.U11}, {self.U22}, {self.U12})")

    @staticmethod
    def identity() -> "MacroStretch":
        return MacroStretch(1.0, 1.0, 0.0)

    def tensor(self) -> np.ndarray:
        """3x3 embedding with unit out-of-plane stretch."""
        return np.array([[self.U11, self.U12, 0.0],
                         [self.U12, self.U22, 0.0],
                         [0.0, 0.0, 1.0]])

    def omega(self) -> np.ndarray:
        return np.array([self.U11 - 1.0, self.U22 - 1.0, self.U12])


def complete_stretch(U11: float, U12: float) -> MacroStretch:
    """Fill in U22 from the unit-determinant constraint and validate."""
    if U11 <= 0.0:
        raise ConfigError(f"U11 must be positive, got {U11}")
    U22 = (1.0 + U12 * U12) / U11
    if not _in_bounds(U11, U22, U12):
        raise ConfigError(f"completed stretch out of bounds: "
                          f"U11={U11}, U22={U22}, U12={U12}")
    return MacroStretch(U11, U22, U12)


@dataclass
class LoadPath:
    """Sequence of macro stretches, one per increment; the state before the
    first increment is always the identity."""

    kind: str
    increments: list[MacroStretch]
    seed: int | None = None

    @property
    def n_inc(self) -> int:
        return len(self.increments)

    def inputs(self) -> np.ndarray:
        """(n_inc, 2) array of the free components (U11, U12)."""
        return np.array([[u.U11, u.U12] for u in self.increments])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["inc", "U11", "U22", "U12"])
            for i, u in enumerate(self.increments, start=1):
                writer.writerow([i, repr(u.U11), repr(u.U22), repr(u.U12)])

    @staticmethod
    def from_csv(path, kind: str = "file") -> "LoadPath":
        incs = []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                incs.append(MacroStretch(float(row["U11"]), float(row["U22"]),
                                         float(row["U12"])))
        return LoadPath(kind, incs)


def cyclic_path(target: tuple[float, float], n_inc: int) -> LoadPath:
    """Linear ramp identity -> target over the first half of the increments,
    then back down; the final increment lands exactly on the identity."""
    if n_inc < 2 or n_inc % 2 != 0:
        raise ConfigError(f"cyclic paths need an even n_inc >= 2, got {n_inc}")
    t11, t12 = target
    if not feasible_point(t11, t12):
        raise ConfigError(f"cyclic target out of bounds: ({t11}, {t12})")
    half = n_inc // 2
    incs = []
    for k in range(1, n_inc + 1):
        t = k / half if k <= half else (n_inc - k) / half
        incs.append(complete_stretch(1.0 + t * (t11 - 1.0), t * t12))
    return LoadPath("cyclic", incs)


def random_path(step: float, n_inc: int, seed: int) -> LoadPath:
    """Fixed-step random walk in the (U11, U12) plane.

    Directions are drawn uniformly; a step leaving the admissible region is
    redrawn up to 100 times, after which it is reflected inward (negated
    direction, falling back to the identity direction if even that leaves
    the region).  Step length is always exactly `step`.
    """
    if step < 0.0:
        raise ConfigError(f"walk step must be non-negative, got {step}")
    rng = np.random.default_rng(seed)
    x = np.array([1.0, 0.0])
    incs = []
    for _ in range(n_inc):
        for _attempt in range(100):
            theta = rng.uniform(0.0, 2.0 * np.pi)
            direction = np.array([np.cos(theta), np.sin(theta)])
            cand = x + step * direction
            if feasible_point(cand[0], cand[1]):
                break
        else:
            cand = x - step * direction
            if not feasible_point(cand[0], cand[1]):
                inward = np.array([1.0, 0.0]) - x
                cand = x + step * inward / np.linalg.norm(inward)
        x = cand
        incs.append(complete_stretch(x[0], x[1]))
    return LoadPath("random", incs, seed=seed)


def cyclic_target_fan(n_rays: int, fill: float = 0.85,
                      angle_offset: float = 0.0) -> list[tuple[float, float]]:
    """Cyclic targets on a fan of rays from the identity in the
    (U11, U12) plane, each scaled to `fill` times the admissible extent of
    its direction."""
    if not 0.0 < fill <= 1.0:
        raise ConfigError(f"fill must lie in (0, 1], got {fill}")
    targets = []
    for j in range(n_rays):
        theta = angle_offset + 2.0 * np.pi * j / n_rays
        d = np.array([np.cos(theta), np.sin(theta)])
        lo, hi = 0.0, 1.0
        # grow the bracket, then bisect onto the feasibility boundary
        while feasible_point(1.0 + hi * d[0], hi * d[1]) and hi < 8.0:
            hi *= 2.0
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if feasible_point(1.0 + mid * d[0], mid * d[1]):
                lo = mid
            else:
                hi = mid
        t = fill * lo
        targets.append((1.0 + t * d[0], t * d[1]))
    return targets


def build_psi(mesh) -> np.ndarray:
    """Homogeneous interpolator Psi (n_dof x 3): columns are the nodal
    fields X1 e1, X2 e2 and X2 e1 + X1 e2, so Psi @ omega = (U - I) X."""
    X = np.asarray(mesh.nodes)
    n_nodes = X.shape[0]
    psi = np.zeros((2 * n_nodes, 3))
    psi[0::2, 0] = X[:, 0]
    psi[1::2, 1] = X[:, 1]
    psi[0::2, 2] = X[:, 1]
    psi[1::2, 2] = X[:, 0]
    return psi


def homogeneous_field(U: MacroStretch, mesh) -> tuple[np.ndarray, np.ndarray]:
    """(Psi, omega) such that Psi @ omega is the homogeneous displacement."""
    return build_psi(mesh), U.omega()
