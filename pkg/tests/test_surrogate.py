"""Equation-free online stage: reconstruction, counters, homogenization,
run comparison, delimited exports."""
import numpy as np
import pytest

import oracles
from conftest import MATRIX, PARTICLE
from rvemor import fem, instrument, pod, rnn, surrogate
from rvemor.errors import DataMismatchError
from rvemor.loading import LoadPath, MacroStretch, cyclic_path
from rvemor.material import QuadPointState, stress_update


@pytest.fixture(scope="module")
def setup():
    """Mesh, training path, DNS + reduced reference runs, basis, stub model."""
    mesh = fem.build_rve_mesh(fem.MeshSpec(grid_n=4,
                                           particles=((0.5, 0.5, 0.3),)))
    mats = [MATRIX, PARTICLE]
    path = cyclic_path((1.04, 0.02), 10)
    recs = fem.solve_dns(path, mesh, mats, lambda_landmarks=(5, 10))
    snaps = pod.collect_snapshots([(path, recs)], mesh)
    basis = pod.build_basis(snaps, 6, mesh_fingerprint=mesh.fingerprint())
    rrecs = pod.solve_reduced(path, basis, mesh, mats,
                              lambda_landmarks=(5, 10))
    model = rnn.init_model(4, 4, 4, 6, rnn.NormStats.identity(6), seed=0,
                           basis_fingerprint=basis.fingerprint())
    return mesh, mats, path, recs, rrecs, basis, model


# ---------------------------------------------------------------------------
# homogenization
# ---------------------------------------------------------------------------

def test_homogenize_uniform_stress(setup, rng):
    mesh = setup[0]
    P = rng.standard_normal((3, 3))
    fields = np.tile(P, (mesh.n_qp, 1, 1))
    assert np.max(np.abs(surrogate.homogenize_stress(fields, mesh) - P)) \
        < 1e-12
    zero = np.zeros((mesh.n_qp, 3, 3))
    assert np.max(np.abs(surrogate.homogenize_stress(zero, mesh))) == 0.0


def test_homogenize_matches_single_point_oracle():
    # homogeneous RVE driven by a macro stretch: the homogenized stress is
    # the single-point constitutive response
    mesh = fem.build_rve_mesh(fem.MeshSpec(grid_n=4))
    path = cyclic_path((1.08, 0.05), 6)
    recs = fem.solve_dns(path, mesh, [MATRIX])
    ref = oracles.single_point_stress_trace(path, MATRIX)
    for rec, P_ref in zip(recs, ref):
        scale = max(1.0, np.max(np.abs(P_ref)))
        assert np.max(np.abs(rec.P_macro - P_ref)) / scale < 1e-8


# ---------------------------------------------------------------------------
# run_online
# ---------------------------------------------------------------------------

def test_identity_path_zero_model(setup):
    mesh, mats, _, _, _, basis, model = setup
    idle = LoadPath("idle", [MacroStretch.identity()] * 4)
    res = surrogate.run_online(idle, basis, model, mesh, mats,
                               alpha_override=np.zeros((4, 6)))
    assert np.max(np.abs(res.P_macro)) < 1e-14
    assert np.max(res.lam) == 0.0
    assert np.max(np.abs(res.u)) == 0.0


def test_zero_solves_and_exact_update_count(setup):
    mesh, mats, path, _, rrecs, basis, model = setup
    before = instrument.snapshot()
    res = surrogate.run_online(path, basis, model, mesh, mats)
    delta = instrument.delta_since(before)
    assert delta.system_solves == 0
    assert res.system_solves == 0
    assert res.stress_updates == mesh.n_qp * path.n_inc
    assert delta.stress_updates == mesh.n_qp * path.n_inc


def test_alpha_override_replays_reduced_solution(setup):
    mesh, mats, path, _, rrecs, basis, model = setup
    alpha_ref = np.array([r.alpha for r in rrecs])
    res = surrogate.run_online(path, basis, model, mesh, mats,
                               alpha_override=alpha_ref)
    errP = max(np.max(np.abs(res.P_macro[k] - rrecs[k].P_macro))
               for k in range(path.n_inc))
    assert errP < 1e-12
    # committed per-point states agree too
    assert np.max(np.abs(res.lam[-1] - rrecs[-1].lam_field)) < 1e-12


def test_committed_states_stay_admissible(setup):
    mesh, mats, path, _, _, basis, model = setup
    res = surrogate.run_online(path, basis, model, mesh, mats)
    lam_prev = np.zeros(mesh.n_qp)
    for k in range(path.n_inc):
        assert np.all(res.lam[k] >= lam_prev - 1e-15)
        lam_prev = res.lam[k]
    # spot-check discrete consistency at the final increment
    assert np.all(np.abs(np.linalg.det(res.final_state.Fp) - 1.0) < 1e-8)


def test_residual_diagnostic_reported(setup):
    mesh, mats, path, _, rrecs, basis, model = setup
    alpha_ref = np.array([r.alpha for r in rrecs])
    res = surrogate.run_online(path, basis, model, mesh, mats,
                               alpha_override=alpha_ref, diagnostics=True)
    assert res.reduced_residual.shape == (path.n_inc,)
    # replaying converged coefficients keeps the projected residual tiny
    assert np.nanmax(res.reduced_residual) < 1e-6


def test_fingerprint_mismatch_rejected(setup):
    mesh, mats, path, _, _, basis, _ = setup
    wrong = rnn.init_model(4, 4, 4, 6, rnn.NormStats.identity(6), seed=0,
                           basis_fingerprint="not-this-basis")
    with pytest.raises(DataMismatchError):
        surrogate.run_online(path, basis, wrong, mesh, mats)


def test_online_timings_recorded(setup):
    mesh, mats, path, _, _, basis, model = setup
    res = surrogate.run_online(path, basis, model, mesh, mats)
    for stage in ("rnn", "reconstruct", "stress", "homogenize"):
        assert stage in res.timings
        assert len(res.timings[stage]) == path.n_inc
        assert all(t >= 0.0 for t in res.timings[stage])


# ---------------------------------------------------------------------------
# comparisons
# ---------------------------------------------------------------------------

def test_compare_self_is_zero(setup):
    _, _, path, recs, rrecs, _, _ = setup
    d = surrogate.RunData.from_reduced(path, rrecs, label="mor")
    rep = surrogate.compare_fields(d, d, lam_at=(5, 10))
    assert rep.stress_rel_l2 == 0.0
    assert rep.alpha_mse == 0.0
    assert rep.max_lam_diff == 0.0


def test_compare_alpha_override_mse(setup):
    mesh, mats, path, recs, rrecs, basis, model = setup
    alpha_ref = np.array([r.alpha for r in rrecs])
    res = surrogate.run_online(path, basis, model, mesh, mats,
                               alpha_override=alpha_ref)
    a = surrogate.RunData.from_online(res, label="rnn")
    b = surrogate.RunData.from_reduced(path, rrecs, label="mor")
    rep = surrogate.compare_fields(a, b)
    assert rep.alpha_mse < 1e-16
    assert rep.stress_rel_l2 < 1e-10


def test_compare_triangle_inequality(setup):
    mesh, mats, path, recs, rrecs, basis, model = setup
    res = surrogate.run_online(path, basis, model, mesh, mats)
    d_rnn = surrogate.RunData.from_online(res, label="rnn")
    d_mor = surrogate.RunData.from_reduced(path, rrecs, label="mor")
    d_dns = surrogate.RunData.from_dns(path, recs, label="dns")
    e_ab = surrogate.compare_fields(d_rnn, d_mor).stress_rel_l2
    e_bc = surrogate.compare_fields(d_mor, d_dns).stress_rel_l2
    e_ac = surrogate.compare_fields(d_rnn, d_dns).stress_rel_l2
    fix = (np.linalg.norm(d_dns.P_macro[:, :2, :2])
           / np.linalg.norm(d_mor.P_macro[:, :2, :2]))
    assert e_ac <= (e_ab * fix + e_bc) * (1.0 + 1e-12)


def test_compare_shape_mismatch(setup):
    _, _, path, recs, rrecs, _, _ = setup
    d = surrogate.RunData.from_dns(path, recs, label="dns")
    short = surrogate.RunData(label="x", inputs=d.inputs[:3],
                              P_macro=d.P_macro[:3])
    with pytest.raises(DataMismatchError):
        surrogate.compare_fields(d, short)


def test_compare_lambda_fields(setup):
    mesh, mats, path, recs, rrecs, basis, model = setup
    a = surrogate.RunData.from_reduced(path, rrecs, label="mor")
    b = surrogate.RunData.from_dns(path, recs, label="dns")
    rep = surrogate.compare_fields(a, b, lam_at=(5, 10))
    assert set(rep.lam_diff) == {5, 10}
    assert rep.lam_diff[10].shape == (mesh.n_qp,)
    assert rep.max_lam_diff >= 0.0


# ---------------------------------------------------------------------------
# delimited exports
# ---------------------------------------------------------------------------

def test_stress_csv_round_trip(setup, tmp_path):
    _, _, path, recs, rrecs, _, _ = setup
    d = surrogate.RunData.from_reduced(path, rrecs, label="mor")
    f = tmp_path / "trace.csv"
    surrogate.write_stress_csv(f, d)
    back = surrogate.read_stress_csv(f, label="mor")
    assert np.array_equal(back.inputs, d.inputs)
    for i, j in ((0, 0), (1, 1), (0, 1), (1, 0)):
        assert np.array_equal(back.P_macro[:, i, j], d.P_macro[:, i, j])
    header = f.read_text().splitlines()[0]
    assert header == "inc,U11,U22,U12,P11,P22,P12,P21"


def test_lambda_csv_round_trip(setup, tmp_path):
    mesh, mats, path, _, rrecs, basis, model = setup
    res = surrogate.run_online(path, basis, model, mesh, mats)
    f = tmp_path / "lam.csv"
    surrogate.write_lambda_csv(f, res.lam[-1])
    lines = f.read_text().splitlines()
    assert lines[0] == "element,gp,lam"
    assert len(lines) == 1 + mesh.n_qp


def test_timing_csv_layout(setup, tmp_path):
    mesh, mats, path, _, _, basis, model = setup
    res = surrogate.run_online(path, basis, model, mesh, mats)
    f = tmp_path / "timing.csv"
    surrogate.write_timing_csv(f, res.timings)
    lines = f.read_text().splitlines()
    assert lines[0].startswith("inc,")
    assert lines[0].endswith("total_seconds")
    assert len(lines) == 1 + path.n_inc


# ---------------------------------------------------------------------------
# end-to-end with a genuinely trained miniature network
# ---------------------------------------------------------------------------

def test_trained_model_tracks_training_path(setup):
    mesh, mats, path, recs, rrecs, basis, _ = setup
    alpha_ref = np.array([r.alpha for r in rrecs])
    samples = [rnn.SequenceSample(path.inputs(), alpha_ref)]
    nm = rnn.compute_norm_stats(samples, basis.n_b)
    m0 = rnn.init_model(8, 16, 16, basis.n_b, nm, seed=2,
                        basis_fingerprint=basis.fingerprint())
    result = rnn.train(samples, rnn.TrainConfig(epochs=3000, stop_loss=1e-7),
                       m0)
    res = surrogate.run_online(path, basis, result.model, mesh, mats)
    rep = surrogate.compare_fields(
        surrogate.RunData.from_online(res, label="rnn"),
        surrogate.RunData.from_reduced(path, rrecs, label="mor"))
    assert rep.stress_rel_l2 < 0.2
