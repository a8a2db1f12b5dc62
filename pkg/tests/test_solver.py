import numpy as np
import pytest

from leognss.solver import (
    DivergenceError,
    GTParams,
    NodeProblem,
    SolverError,
    centralized_wls,
    consensus,
    gt_solve,
    hessian_whitening,
    metrics,
    standalone_wls,
)
from leognss.topology import GraphSnapshot, knn_graph, metropolis, second_singular_value


def toy(rng, L=5, n=4, p=3, m=12, noise=0.01):
    x = [rng.normal(size=n) for _ in range(L)]
    z = rng.normal(size=p)
    probs = []
    for l in range(L):
        A, B = rng.normal(size=(m, n)), rng.normal(size=(m, p))
        w = rng.uniform(0.5, 2.0, size=m)
        y = A @ x[l] + B @ z + noise * rng.normal(size=m) / np.sqrt(w)
        probs.append(NodeProblem(A, B, w, y, l))
    return probs, x, z


def stacked_lstsq(probs):
    """Brute-force oracle: whiten, stack the block-arrow system and call lstsq."""
    L, p = len(probs), probs[0].p
    ns = [pb.A.shape[1] for pb in probs]
    rows = []
    rhs = []
    for l, pb in enumerate(probs):
        s = np.sqrt(pb.w)[:, None]
        blocks = [pb.A * s if q == l else np.zeros((len(pb.y), ns[q])) for q in range(L)]
        rows.append(np.hstack(blocks + [pb.B * s]))
        rhs.append(pb.y * s[:, 0])
    sol = np.linalg.lstsq(np.vstack(rows), np.concatenate(rhs), rcond=None)[0]
    return sol[-p:], np.split(sol[:-p], np.cumsum(ns)[:-1])


def ring(L):
    return GraphSnapshot(0, L, tuple(sorted({(min(i, (i + 1) % L), max(i, (i + 1) % L)) for i in range(L)})))


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    pb = toy(rng, L=1)[0][0]
    x, z = rng.normal(size=4), rng.normal(size=3)
    h = 1e-6
    gz = [(pb.value(x, z + h * e) - pb.value(x, z - h * e)) / (2 * h) for e in np.eye(3)]
    gx = [(pb.value(x + h * e, z) - pb.value(x - h * e, z)) / (2 * h) for e in np.eye(4)]
    assert np.allclose(pb.grad_z(x, z), gz, rtol=1e-6, atol=1e-6)
    assert np.allclose(pb.grad_x(x, z), gx, rtol=1e-6, atol=1e-6)


def test_local_solve_zeroes_x_gradient():
    rng = np.random.default_rng(1)
    pb = toy(rng, L=1)[0][0]
    z = rng.normal(size=3)
    assert np.abs(pb.grad_x(pb.local_solve(z), z)).max() < 1e-10


def test_rank_deficient_local_design_rejected():
    A = np.ones((5, 2))
    with pytest.raises(SolverError, match="rank"):
        NodeProblem(A, np.eye(5, 1), np.ones(5), np.zeros(5))
    with pytest.raises(SolverError, match="positive"):
        NodeProblem(np.eye(3), np.eye(3), np.array([1.0, 0.0, 1.0]), np.zeros(3))


def test_consensus_examples():
    W = np.full((2, 2), 0.5)
    assert np.allclose(consensus(np.array([[0.0], [2.0]]), W, 1), 1.0)
    assert np.array_equal(consensus(np.array([[5.0], [5.0]]), W, 3), [[5.0], [5.0]])
    with pytest.raises(ValueError):
        consensus(np.zeros((2, 1)), W, 0)


def test_consensus_contraction_bound():
    rng = np.random.default_rng(2)
    g = knn_graph(rng.normal(size=(12, 3)), 2)
    W = metropolis(g)
    s2 = second_singular_value(W)
    V = rng.normal(size=(12, 4))
    for K in (1, 3, 10):
        out = consensus(V, W, K)
        assert np.allclose(out.mean(axis=0), V.mean(axis=0))
        dev = np.linalg.norm(out - out.mean(axis=0))
        assert dev <= s2 ** K * np.linalg.norm(V - V.mean(axis=0)) * (1 + 1e-12)


def test_central_matches_stacked_oracle_and_both_paths_agree():
    probs, _, _ = toy(np.random.default_rng(3), L=6)
    z_ref, x_ref = stacked_lstsq(probs)
    dense = centralized_wls(probs, full_covariance=True)
    schur = centralized_wls(probs, full_covariance=False)
    for sol in (dense, schur):
        assert np.allclose(sol.z, z_ref, atol=1e-10)
        assert all(np.allclose(a, b, atol=1e-10) for a, b in zip(sol.x, x_ref))
    assert np.allclose(dense.Cz, schur.Cz, rtol=1e-9, atol=1e-12)
    for l in range(6):
        a, b = dense.node_covariance(probs, l), schur.node_covariance(probs, l)
        assert np.allclose(a[0], b[0], rtol=1e-9, atol=1e-12)
        assert np.allclose(a[1], b[1], rtol=1e-9, atol=1e-12)


def test_two_node_normal_equations_by_hand():
    # node l observes y = x_l + z and y = x_l - z (unit weights)
    probs = []
    ys = [(3.0, 1.0), (5.0, -1.0)]
    for l, (a, b) in enumerate(ys):
        probs.append(NodeProblem(np.array([[1.0], [1.0]]), np.array([[1.0], [-1.0]]), np.ones(2), np.array([a, b]), l))
    sol = centralized_wls(probs)
    # per node: x = (a+b)/2, z = (a-b)/2 ; z is shared, so z = mean of the two
    assert np.isclose(sol.z[0], ((3 - 1) / 2 + (5 + 1) / 2) / 2)
    assert np.allclose(np.concatenate(sol.x), [2.0, 2.0])


def test_duplicated_rows_give_same_minimiser():
    probs, _, _ = toy(np.random.default_rng(4), L=3)
    doubled = [NodeProblem(np.vstack([pb.A, pb.A]), np.vstack([pb.B, pb.B]), np.r_[pb.w, pb.w],
                           np.r_[pb.y, pb.y], pb.node) for pb in probs]
    a, b = centralized_wls(probs), centralized_wls(doubled)
    assert np.allclose(a.z, b.z, atol=1e-12)
    assert np.allclose(b.Cz, a.Cz / 2, rtol=1e-9)


def test_standalone_bias_identity():
    rng = np.random.default_rng(5)
    probs, x_true, z_true = toy(rng, L=1, noise=0.0)
    pb = probs[0]
    dz = rng.normal(size=3)
    xs = standalone_wls(pb, z_true + dz)
    Wsq = np.sqrt(pb.w)[:, None]
    K = np.linalg.lstsq(pb.A * Wsq, pb.B * Wsq, rcond=None)[0]
    assert np.allclose(xs - x_true[0], -K @ dz, atol=1e-10)


def test_metrics_zero_at_consensus_optimum():
    z = np.arange(3.0)
    m = metrics(np.tile(z, (4, 1)), np.zeros((4, 3)), z)
    assert m == {"avg_grad_norm": 0.0, "disagreement": 0.0, "msd": 0.0}
    assert np.isnan(metrics(np.zeros((2, 1)), np.zeros((2, 1)), None)["msd"])


def _reference_vanilla(probs, W, gamma, iters):
    L, p = len(probs), probs[0].p
    Z = np.zeros((L, p))
    X = [pb.local_solve(z) for pb, z in zip(probs, Z)]
    g = np.array([pb.grad_z(x, z) for pb, x, z in zip(probs, X, Z)])
    tracker = g.copy()
    for _ in range(iters):
        Zn = W @ (Z - gamma * tracker)
        Xn = [pb.local_solve(z) for pb, z in zip(probs, Zn)]
        gn = np.array([pb.grad_z(x, z) for pb, x, z in zip(probs, Xn, Zn)])
        tracker = W.T @ tracker + gn - g
        Z, g = Zn, gn
    return Z


@pytest.mark.parametrize("workers", [1, 3])
def test_vanilla_matches_reference_loop_bitwise(workers):
    probs, _, _ = toy(np.random.default_rng(6), L=5)
    W = metropolis(ring(5))
    tr = gt_solve(probs, [W], GTParams(gamma=0.01, theta=0.0, rounds=1, max_iter=200), workers=workers)
    assert np.array_equal(tr.z, _reference_vanilla(probs, W, 0.01, 200))


def test_zero_step_keeps_z_frozen():
    probs, _, _ = toy(np.random.default_rng(7), L=4)
    z0 = np.array([1.0, -2.0, 0.5])
    tr = gt_solve(probs, [metropolis(ring(4))], GTParams(gamma=0.0, theta=0.5, rounds=2, max_iter=30, z0=z0))
    assert np.array_equal(tr.z, np.tile(z0, (4, 1)))


def test_gradient_tracking_reaches_central_solution():
    probs, _, _ = toy(np.random.default_rng(8), L=6)
    ref = centralized_wls(probs)
    D = hessian_whitening(probs)
    tr = gt_solve(probs, [metropolis(ring(6))], GTParams(gamma=0.5, theta=0.3, rounds=5, max_iter=600),
                  reference=ref.z, scaling=D)
    assert tr.msd[-1] < 1e-16
    assert max(tr.tracker_gap) < 1e-9
    assert all(np.allclose(x, r, atol=1e-7) for x, r in zip(tr.x, ref.x))


def test_whitening_gives_identity_averaged_hessian():
    probs, _, _ = toy(np.random.default_rng(9), L=4)
    D = hessian_whitening(probs)
    H = sum(pb.reduced_hessian() for pb in probs) / 4
    assert np.allclose(D @ H @ D, np.eye(3), atol=1e-10)


def test_divergence_is_detected():
    probs, _, _ = toy(np.random.default_rng(10), L=4)
    params = GTParams(gamma=50.0, theta=0.0, rounds=1, max_iter=500)
    with pytest.raises(DivergenceError):
        gt_solve(probs, [metropolis(ring(4))], params, reference=centralized_wls(probs).z)
    tr = gt_solve(probs, [metropolis(ring(4))], params, reference=centralized_wls(probs).z,
                  raise_on_divergence=False)
    assert tr.diverged_at is not None and tr.diverged_at < 500


def test_start_at_optimum_does_not_trip_divergence():
    probs, _, _ = toy(np.random.default_rng(11), L=3, noise=0.0)
    ref = centralized_wls(probs).z
    tr = gt_solve(probs, [metropolis(ring(3))], GTParams(gamma=0.01, max_iter=20, rounds=2, z0=ref), reference=ref)
    assert tr.diverged_at is None and tr.msd[-1] < 1e-20


def test_trace_csv_header_and_rows(tmp_path):
    probs, _, _ = toy(np.random.default_rng(12), L=3)
    tr = gt_solve(probs, [metropolis(ring(3))], GTParams(gamma=0.01, rounds=1, max_iter=10, record_every=5))
    tr.write_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "k,msd,avg_grad_norm,disagreement"
    assert [int(r.split(",")[0]) for r in lines[1:]] == [0, 5, 10]


def test_invalid_params_rejected():
    for kw in (dict(gamma=-1.0), dict(theta=1.0), dict(rounds=0), dict(max_iter=-1)):
        with pytest.raises(ValueError):
            GTParams(**kw)
