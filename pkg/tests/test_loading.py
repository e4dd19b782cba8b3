"""Macro stretch paths: isochoric completion, cyclic/random generation,
homogeneous interpolator."""
import numpy as np
import pytest

from rvemor import fem
from rvemor.errors import ConfigError
from rvemor.loading import (LoadPath, MacroStretch, build_psi,
                            complete_stretch, cyclic_path, cyclic_target_fan,
                            homogeneous_field, random_path)


# ---------------------------------------------------------------------------
# MacroStretch / complete_stretch
# ---------------------------------------------------------------------------

def test_complete_stretch_examples():
    assert complete_stretch(1.0, 0.0).U22 == 1.0
    assert abs(complete_stretch(1.25, 0.0).U22 - 0.8) < 1e-15
    assert abs(complete_stretch(1.0, 0.5).U22 - 1.25) < 1e-15


def test_complete_stretch_det_one(rng):
    for _ in range(50):
        u11 = rng.uniform(0.95, 1.2)
        u12 = rng.uniform(-0.25, 0.25)
        U = complete_stretch(u11, u12)
        assert abs(U.U11 * U.U22 - U.U12 ** 2 - 1.0) < 1e-12


def test_bounds_are_closed():
    # the boundary itself is admissible (within 1e-12)
    complete_stretch(1.25, 0.0)
    complete_stretch(0.8, 0.0)  # gives U22 = 1.25 exactly
    with pytest.raises(ConfigError):
        complete_stretch(1.2500001, 0.0)
    with pytest.raises(ConfigError):
        complete_stretch(0.7, 0.0)  # U22 = 1/0.7 > 1.25
    with pytest.raises(ConfigError):
        MacroStretch(1.0, 1.0, 0.76)


def test_stretch_tensor_layout():
    U = complete_stretch(1.1, 0.2)
    T = U.tensor()
    assert T.shape == (3, 3)
    assert T[0, 0] == U.U11 and T[1, 1] == U.U22
    assert T[0, 1] == T[1, 0] == U.U12
    assert T[2, 2] == 1.0 and T[0, 2] == T[2, 0] == 0.0


# ---------------------------------------------------------------------------
# cyclic paths
# ---------------------------------------------------------------------------

def test_cyclic_path_peak_and_return():
    path = cyclic_path((1.2, 0.0), 1000)
    assert path.n_inc == 1000
    # 1-based increment k lives at increments[k-1]
    assert abs(path.increments[499].U11 - 1.2) < 1e-12
    I = path.increments[999]
    assert abs(I.U11 - 1.0) < 1e-12 and abs(I.U12) < 1e-15


def test_cyclic_path_four_increment_ramp():
    path = cyclic_path((1.0, 0.3), 4)
    u12 = [s.U12 for s in path.increments]
    assert np.allclose(u12, [0.15, 0.3, 0.15, 0.0], atol=1e-15)


def test_cyclic_path_palindrome_and_det():
    path = cyclic_path((1.18, -0.31), 24)
    n = path.n_inc
    for k in range(1, n // 2):
        a = path.increments[k - 1]
        b = path.increments[n - k - 1]
        assert a.U11 == b.U11 and a.U12 == b.U12
    for s in path.increments:
        assert abs(s.U11 * s.U22 - s.U12 ** 2 - 1.0) < 1e-12


def test_cyclic_path_requires_even_count():
    with pytest.raises(ConfigError):
        cyclic_path((1.1, 0.0), 5)


def test_cyclic_target_fan_properties():
    targets = cyclic_target_fan(8, 0.85)
    assert len(targets) == 8
    for (u11, u12) in targets:
        # targets must themselves be admissible
        complete_stretch(u11, u12)
    # distinct directions
    angles = sorted(np.arctan2(u12, u11 - 1.0) if abs(u11 - 1.0) + abs(u12)
                    else 0.0 for u11, u12 in targets)
    assert len(set(np.round(angles, 9))) == 8


# ---------------------------------------------------------------------------
# random paths
# ---------------------------------------------------------------------------

def test_random_path_zero_step():
    path = random_path(0.0, 25, seed=3)
    for s in path.increments:
        assert s.U11 == 1.0 and s.U12 == 0.0


def test_random_path_deterministic():
    a = random_path(0.002, 300, seed=42)
    b = random_path(0.002, 300, seed=42)
    for x, y in zip(a.increments, b.increments):
        assert x.U11 == y.U11 and x.U12 == y.U12
    c = random_path(0.002, 300, seed=43)
    assert any(x.U11 != y.U11 for x, y in zip(a.increments, c.increments))


def test_random_path_fixed_step_and_bounds():
    path = random_path(0.002, 1000, seed=11)
    prev = (1.0, 0.0)
    for s in path.increments:
        d = np.hypot(s.U11 - prev[0], s.U12 - prev[1])
        assert abs(d - 0.002) < 1e-12
        assert 0.75 - 1e-12 <= s.U11 <= 1.25 + 1e-12
        assert 0.75 - 1e-12 <= s.U22 <= 1.25 + 1e-12
        assert abs(s.U12) <= 0.75 + 1e-12
        prev = (s.U11, s.U12)


def test_random_path_rejects_negative_step():
    with pytest.raises(ConfigError):
        random_path(-0.001, 10, seed=0)


# ---------------------------------------------------------------------------
# LoadPath container + CSV
# ---------------------------------------------------------------------------

def test_load_path_csv_round_trip(tmp_path):
    path = random_path(0.002, 60, seed=9)
    f = tmp_path / "p.csv"
    path.to_csv(f)
    back = LoadPath.from_csv(f)
    assert back.n_inc == path.n_inc
    for x, y in zip(back.increments, path.increments):
        assert x.U11 == y.U11 and x.U22 == y.U22 and x.U12 == y.U12


def test_load_path_inputs_matrix():
    path = cyclic_path((1.1, 0.2), 10)
    X = path.inputs()
    assert X.shape == (10, 2)
    assert np.array_equal(X[:, 0], [s.U11 for s in path.increments])
    assert np.array_equal(X[:, 1], [s.U12 for s in path.increments])


# ---------------------------------------------------------------------------
# homogeneous interpolator
# ---------------------------------------------------------------------------

def test_homogeneous_field_identity():
    mesh = fem.build_rve_mesh(fem.MeshSpec(grid_n=3))
    psi, omega = homogeneous_field(MacroStretch.identity(), mesh)
    assert np.array_equal(omega, np.zeros(3))
    assert np.max(np.abs(psi @ omega)) == 0.0


def test_homogeneous_field_uniaxial_node():
    mesh = fem.build_rve_mesh(fem.MeshSpec(grid_n=2))
    U = MacroStretch(1.1, 1.0 / 1.1, 0.0)
    psi, omega = homogeneous_field(U, mesh)
    u = psi @ omega
    # node at X = (1, 0): displacement (0.1, 0)
    nd = int(np.argmin(np.linalg.norm(mesh.nodes - [1.0, 0.0], axis=1)))
    assert abs(u[2 * nd] - 0.1) < 1e-15
    assert abs(u[2 * nd + 1]) < 1e-15


def test_homogeneous_field_matches_tensor_product(rng):
    mesh = fem.build_rve_mesh(fem.MeshSpec(grid_n=4))
    psi = build_psi(mesh)
    for _ in range(10):
        U = complete_stretch(rng.uniform(0.9, 1.1), rng.uniform(-0.3, 0.3))
        u = psi @ np.array([U.U11 - 1.0, U.U22 - 1.0, U.U12])
        G = U.tensor()[:2, :2] - np.eye(2)
        for nd in rng.integers(0, mesh.n_nodes, size=8):
            ref = G @ mesh.nodes[nd]
            assert np.max(np.abs(u[2 * nd:2 * nd + 2] - ref)) < 1e-14
