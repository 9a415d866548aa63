import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from enclasso.admm import LassoProblem, admm_central, admm_distributed, admm_hetero, fista_oracle
from enclasso.deepc import (ControlWeights, InsufficientDataError, SolverResult, TrajectoryData,
                            build_hankel, build_lasso, building_plant, check_persistency,
                            closed_loop, collect_offline, exact_solver, hankel, hetero_split)


def test_hankel_examples():
    assert np.array_equal(hankel([1, 2, 3, 4], 1, 2), [[1, 2, 3], [2, 3, 4]])
    assert np.array_equal(hankel([1, 2, 3, 4], 1, 4), [[1], [2], [3], [4]])
    with pytest.raises(InsufficientDataError):
        hankel([1, 2, 3], 1, 4)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 6), st.integers(6, 15), st.integers(0, 2 ** 32 - 1))
def test_hankel_columns_match_slicing(dim, L, T, seed):
    sig = np.random.default_rng(seed).standard_normal(dim * T)
    H = hankel(sig, dim, L)
    assert H.shape == (dim * L, T - L + 1)
    for j in range(T - L + 1):
        assert np.array_equal(H[:, j], sig[j * dim:(j + L) * dim])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2 ** 32 - 1))
def test_hankel_window_consistency(m, M, N, seed):
    T = M + N + 8
    sig = np.random.default_rng(seed).standard_normal(m * T)
    H = hankel(sig, m, M + N)
    assert np.array_equal(H[m * M:], hankel(sig[m * M:], m, N)[:, : T - M - N + 1])


def test_persistency():
    assert not check_persistency(np.ones(4 * 84), 4, 2).full_row_rank
    u = np.random.default_rng(0).standard_normal(4 * 84)
    rep = check_persistency(u, 4, 16)
    assert rep.full_row_rank and rep.length_ok and bool(rep)
    # (m + 1)(M + N + n) - 2 samples is one short of the richness requirement
    short = check_persistency(u[: 4 * (5 * 16 - 2)], 4, 16)
    assert not short.length_ok and short.required_length == 79


def test_building_example_dimensions(building):
    h = building["h"]
    assert h.S == 84 - 4 - 8 + 1
    assert h.U_p.shape == (16, h.S) and h.U_f.shape == (32, h.S)
    assert h.Y_p.shape == (16, h.S) and h.Y_f.shape == (32, h.S)
    assert h.H.shape == (96, h.S)
    assert np.allclose(h.H, h.J @ np.vstack([h.Y_p, h.Y_f, h.U_p, h.U_f]))


def test_hankel_blocks_match_direct(building):
    traj, h = building["traj"], building["h"]
    Hu = hankel(traj.u_d, 4, 12)
    assert np.array_equal(np.vstack([h.U_p, h.U_f]), Hu)


def test_hetero_split_sizes(building):
    h = building["h"]
    assert hetero_split(h, 3) == [64, 16, 16]
    assert hetero_split(h, 2) == [64, 32]
    with pytest.raises(ValueError):
        hetero_split(h, 1)
    sizes = hetero_split(h, 3)
    bounds = np.cumsum([0] + sizes)
    assert np.array_equal(np.vstack([h.H[bounds[i]:bounds[i + 1]] for i in range(3)]), h.H)
    assert not np.any(building["Jf"][64:])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_objective_equivalence(seed):
    rng = np.random.default_rng(seed)
    w = ControlWeights(np.diag(rng.uniform(1, 5, 2)), np.diag(rng.uniform(0.5, 2, 2)),
                       rng.uniform(1, 10), rng.uniform(1, 10), rng.uniform(0.1, 2),
                       mu_g=rng.uniform(0, 1))
    traj = TrajectoryData(rng.standard_normal(2 * 30), rng.standard_normal(2 * 30), 2, 2, 2)
    ybar, ubar, r = rng.standard_normal(6), rng.standard_normal(6), rng.standard_normal(8)
    h, p = build_lasso(traj, w, 3, 4, ubar, ybar, r)
    g = rng.standard_normal(h.S)
    assert abs(p.objective(g) - h.objective_expanded(g, ybar, r, ubar, w)) < 1e-9 * max(1, p.objective(g))


def test_zero_reference_zero_history(building):
    h, w = building["h"], building["w"]
    Jf = h.Jf(np.zeros(16), np.zeros(32), np.zeros(16))
    assert not np.any(Jf)
    assert not np.any(fista_oracle(LassoProblem(h.H, Jf, w.lambda_g)))


def test_noiseless_prediction_matches_plant():
    plant = building_plant(0, noise_std=0.0)
    traj = collect_offline(plant, 84, 0)
    w = ControlWeights(300 * np.eye(4), np.eye(4), 1e6, 1e6, 300)
    rng = np.random.default_rng(1)
    u_past = rng.uniform(-1, 1, (4, 4))
    y_past = np.array([plant.step(u) for u in u_past])
    h, p = build_lasso(traj, w, 4, 8, u_past.ravel(), y_past.ravel(), np.zeros(32))
    g = fista_oracle(p, tol=1e-14)
    u_f = (h.U_f @ g).reshape(8, 4)
    y_true = np.array([plant.step(u) for u in u_f])
    assert np.abs((h.Y_f @ g).reshape(8, 4) - y_true).max() < 1e-3


def test_ridge_rows():
    rng = np.random.default_rng(0)
    traj = TrajectoryData(rng.standard_normal(60), rng.standard_normal(60), 2, 2)
    w = ControlWeights(np.eye(2), np.eye(2), 1, 1, 1, mu_g=0.5)
    h = build_hankel(traj, w, 3, 4)
    assert h.H.shape[0] == 2 * 2 * 7 + h.S
    assert np.allclose(h.H[-h.S:], np.eye(h.S))


def test_split_solution_invariance(building):
    h, Jf = building["h"], building["Jf"]
    p = LassoProblem(h.H, Jf, 300, 1200)
    _, tc = admm_central(p, 500)
    _, th = admm_hetero(h.H, Jf, hetero_split(h, 3), 300, 1200, 500)
    f = p.objective(fista_oracle(p))
    assert abs(p.objective(th.z[-1]) - f) / f < 1e-3
    assert abs(p.objective(tc.z[-1]) - f) / f < 1e-3


def _iters_to_gap(p, trace, f_opt, gap):
    for k, z in enumerate(trace.z, 1):
        if (p.objective(z) - f_opt) / f_opt < gap:
            return k
    return len(trace.z) + 1


def test_hetero_beats_random_equal_split(building):
    h, Jf = building["h"], building["Jf"]
    p = LassoProblem(h.H, Jf, 300, 1200)
    f = p.objective(fista_oracle(p))
    _, th = admm_hetero(h.H, Jf, hetero_split(h, 3), 300, 1200, 400)
    het = _iters_to_gap(p, th, f, 1e-2)
    homo = []
    for seed in range(5):
        perm = np.random.default_rng(seed).permutation(96)
        _, td = admm_distributed(p, [perm[:32], perm[32:64], perm[64:]], 400)
        homo.append(_iters_to_gap(p, td, f, 1e-2))
    assert het < np.mean(homo), (het, homo)


def test_closed_loop_offline_prefix_and_csv(building):
    w = building["w"]
    log = closed_loop(building_plant(0), w, lambda h, Jf, t: exact_solver(h, Jf, t, w.lambda_g), 8, 0)
    assert [r["offline"] for r in log.rows] == [True] * 4 + [False] * 4
    lines = log.to_csv().splitlines()
    assert lines[0].startswith("t,offline,u1") and len(lines) == 9


def test_closed_loop_decays_without_noise_or_reference(building):
    w = building["w"]
    plant = building_plant(0, noise_std=0.0)
    log = closed_loop(plant, w, lambda h, Jf, t: exact_solver(h, Jf, t, w.lambda_g), 40, 0,
                      reference=np.zeros((48, 4)))
    assert np.linalg.norm(log.rows[39]["y"]) < np.linalg.norm(log.rows[4]["y"])


def test_closed_loop_solver_error_names_step(building):
    def broken(h, Jf, t):
        raise ValueError("boom")
    with pytest.raises(RuntimeError, match="t=4"):
        closed_loop(building_plant(0), building["w"], broken, 6, 0)


def test_solver_result_input_override(building):
    log = closed_loop(building_plant(0), building["w"],
                      lambda h, Jf, t: SolverResult(u=np.full(32, 0.5), iterations=3), 6, 0)
    assert np.allclose(log.rows[5]["u"], 0.5) and log.rows[5]["iterations"] == 3


def test_plant_default_noise_covariance():
    plant = building_plant(0)
    assert plant.process_std ** 2 == pytest.approx(0.01)
    assert max(abs(np.linalg.eigvals(plant.A))) == pytest.approx(0.98)
