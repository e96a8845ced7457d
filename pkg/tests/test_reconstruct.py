from dataclasses import replace

import numpy as np
import pytest
from scipy.optimize import nnls

from kktunlearn import diffnet, reconstruct, trainer
from kktunlearn.data_io import LabeledDataset
from kktunlearn.diffnet import NetworkSpec
from kktunlearn.reconstruct import CandidateSet, ReconstructConfig
from kktunlearn.trainer import TrainConfig

from conftest import TOY_X, TOY_Y, central_diff, kink_free_instance, pre_activations, rel_err

CENTERED_TOY = NetworkSpec(2, (8,), 1, tuple(TOY_X.mean(axis=0)))
TOY_RECON = ReconstructConfig(m=8, T1=3000, T2=500, step_size_x=0.1, step_size_lambda=0.01)


def toy_model(seed, spec=CENTERED_TOY):
    ds = LabeledDataset(TOY_X, TOY_Y)
    theta, _ = trainer.train(spec, ds, TrainConfig(seed=seed))
    return ds, theta


def cands(X, lam, labels, anchor=None):
    return CandidateSet(np.asarray(X, float), np.asarray(lam, float), np.asarray(labels), anchor)


def test_stationarity_with_zero_multipliers_is_weight_norm(rng):
    spec = NetworkSpec(3, (4,))
    theta = rng.normal(size=spec.num_params)
    c = cands(rng.uniform(0, 1, (5, 3)), np.zeros(5), [1, 1, 1, -1, -1])
    assert reconstruct.loss_stationary(spec, theta, c) == theta @ theta


def test_stationarity_bilinear_case():
    spec = NetworkSpec(2, ())
    theta = np.array([0.3, 0.8])
    assert reconstruct.loss_stationary(spec, theta, cands([theta], [1.0], [1])) == 0.0
    other = cands([[0.5, 0.5]], [1.0], [1])
    assert np.isclose(reconstruct.loss_stationary(spec, theta, other), np.sum((theta - 0.5) ** 2))


def test_stationarity_multiclass_uses_strongest_rival():
    spec = NetworkSpec(3, (), 3)
    theta = np.eye(3).ravel()
    x = np.array([[0.9, 0.5, 0.2]])
    c = cands(x, [1.0], [2])
    # rival of class 2 is class 0; gradient of M_2 - M_0 wrt W is e_2 x^T - e_0 x^T
    g = np.zeros((3, 3))
    g[2] = x[0]
    g[0] = -x[0]
    assert np.isclose(reconstruct.loss_stationary(spec, theta, c), np.sum((np.eye(3) - g) ** 2))


def test_loss_lambda_examples():
    assert reconstruct.loss_lambda(cands(np.zeros((3, 1)), [1, 2, 3], [1, 1, 1])) == 0
    assert reconstruct.loss_lambda(cands(np.zeros((2, 1)), [-0.5, 1.0], [1, 1])) == 0.5
    assert reconstruct.loss_lambda(cands(np.zeros((2, 1)), [-1, -2], [1, 1])) == 3


def test_loss_prior_examples():
    spec = NetworkSpec(1, ())
    assert reconstruct.loss_prior(spec, np.array([-3.0]), cands([[1.0]], [0.1], [1])) == -3.0
    assert reconstruct.loss_prior(spec, np.array([2.0]), cands([[0.0]], [0.1], [1])) == 0.0
    multi = NetworkSpec(2, (), 3)
    theta = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]]).ravel()
    # predicted class is the argmax logit (0.2), whatever the assigned label
    assert np.isclose(reconstruct.loss_prior(multi, theta, cands([[0.2, 0.1]], [0.1], [2])), -0.2)


def test_projection_examples():
    c = cands([[0.9, 0.6, 1.3]], [1.0], [1], anchor=[[0.5, 0.55, 0.95]])
    out = reconstruct.project_to_bounds(c, 0.2)
    np.testing.assert_allclose(out.candidates, [[0.7, 0.6, 1.0]])
    with pytest.raises(reconstruct.MissingAnchorError):
        reconstruct.project_to_bounds(cands([[0.5]], [1.0], [1]), 0.1)


def test_zero_iterations_return_initialization():
    spec = NetworkSpec(4, (3,))
    cfg = ReconstructConfig(m=6, T1=0, T2=0, seed=9)
    out, traj = reconstruct.recover(spec, np.ones(spec.num_params), cfg)
    init = reconstruct.init_candidates(spec, cfg)
    assert out.candidates.tobytes() == init.candidates.tobytes()
    assert out.multipliers.tobytes() == init.multipliers.tobytes()
    assert traj == []


def test_label_assignment():
    np.testing.assert_array_equal(reconstruct.assigned_labels(NetworkSpec(2, ()), 5), [1, 1, 1, -1, -1])
    np.testing.assert_array_equal(reconstruct.assigned_labels(NetworkSpec(2, (), 3), 5), [0, 1, 2, 0, 1])


def _total(spec, theta, X, lam, labels, a3):
    b, _, _ = reconstruct.loss_and_gradients(spec, theta, cands(X, lam, labels), 1.0, 1.0, a3)
    return b.total


@pytest.mark.parametrize("k,a3", [(1, 0.0), (1, 1.0), (3, 0.0), (3, 1.0)])
def test_total_loss_gradient_matches_finite_differences(rng, k, a3):
    checked = 0
    while checked < 10:
        spec = NetworkSpec(3, (5,), k, tuple(rng.uniform(0, 1, 3)))
        theta = rng.normal(size=spec.num_params)
        m = 4
        X = rng.uniform(0, 1, (m, 3))
        lam = rng.uniform(-1, 1, m)
        labels = reconstruct.assigned_labels(spec, m)
        if np.min(np.abs(lam)) < 1e-2:
            continue
        if any(np.min(np.abs(pre_activations(spec, theta, x))) < 1e-3 for x in X):
            continue
        out = diffnet.forward_batch(spec, theta, X)
        if k > 1:
            srt = np.sort(out, axis=1)
            if np.min(srt[:, -1] - srt[:, -2]) < 1e-3:  # argmax/rival ties are kinks too
                continue
        _, gx, gl = reconstruct.loss_and_gradients(spec, theta, cands(X, lam, labels), 1.0, 1.0, a3)
        fx = central_diff(lambda v: _total(spec, theta, v.reshape(X.shape), lam, labels, a3), X.ravel())
        fl = central_diff(lambda v: _total(spec, theta, X, v, labels, a3), lam)
        assert rel_err(gx.ravel(), fx) < 1e-4
        assert rel_err(gl, fl) < 1e-4
        checked += 1


def test_stationarity_is_permutation_invariant(rng):
    spec = NetworkSpec(3, (4,), 3)
    theta = rng.normal(size=spec.num_params)
    X = rng.uniform(0, 1, (6, 3))
    lam = rng.uniform(0, 1, 6)
    labels = np.array([0, 1, 2, 0, 1, 2])
    p = rng.permutation(6)
    a = reconstruct.loss_stationary(spec, theta, cands(X, lam, labels))
    b = reconstruct.loss_stationary(spec, theta, cands(X[p], lam[p], labels[p]))
    assert np.isclose(a, b, rtol=1e-12)


def test_nonfinite_residual_names_candidate(rng):
    spec = NetworkSpec(2, (3,))
    X = rng.uniform(0, 1, (3, 2))
    X[1, 0] = np.inf
    with pytest.raises(reconstruct.NonFiniteError) as err, np.errstate(invalid="ignore"):
        reconstruct.loss_stationary(spec, rng.normal(size=spec.num_params), cands(X, [1, 1, 1], [1, 1, -1]))
    assert err.value.candidate == 1


def test_divergence_aborts_with_trajectory():
    ds, theta = toy_model(0)
    cfg = replace(TOY_RECON, step_size_x=1e3, step_size_lambda=1e3, T1=200, T2=0)
    with pytest.raises(reconstruct.RecoveryDivergedError) as err:
        reconstruct.recover(CENTERED_TOY, theta, cfg)
    assert len(err.value.trajectory) == err.value.step + 1


def test_recovery_is_bit_reproducible():
    _, theta = toy_model(1)
    cfg = replace(TOY_RECON, T1=300, T2=100, seed=4)
    a, ta = reconstruct.recover(CENTERED_TOY, theta, cfg)
    b, tb = reconstruct.recover(CENTERED_TOY, theta, cfg)
    assert a.candidates.tobytes() == b.candidates.tobytes()
    assert a.multipliers.tobytes() == b.multipliers.tobytes()
    assert ta == tb


def test_phase_two_respects_box_and_reuses_phase_one():
    _, theta = toy_model(2)
    cfg = replace(TOY_RECON, seed=2)
    p1 = reconstruct.run_phase1(CENTERED_TOY, theta, cfg)
    out, traj = reconstruct.recover(CENTERED_TOY, theta, cfg, phase1=p1)
    assert len(traj) == cfg.T1 + cfg.T2
    assert np.all(out.candidates <= out.anchor + cfg.epsilon)
    assert np.all(out.candidates >= out.anchor - cfg.epsilon)
    assert out.candidates.min() >= 0 and out.candidates.max() <= 1
    fresh, _ = reconstruct.recover(CENTERED_TOY, theta, cfg)
    assert fresh.candidates.tobytes() == out.candidates.tobytes()


def _toy_runs():
    for seed in range(5):
        ds, theta = toy_model(seed)
        out, traj = reconstruct.recover(CENTERED_TOY, theta, replace(TOY_RECON, seed=seed))
        yield seed, theta, out, traj


def test_toy_recovery_trajectory_properties():
    for seed, theta, _, traj in _toy_runs():
        assert traj[TOY_RECON.T1 - 1].l_lambda <= 1e-6
        # the toy problem settles within a few hundred steps, so look at a short phase one
        short = replace(TOY_RECON, T1=200, T2=0, seed=seed)
        phase1 = [b.total for b in reconstruct.recover(CENTERED_TOY, theta, short)[1]]
        tenth = len(phase1) // 10
        assert np.median(phase1[-tenth:]) < np.median(phase1[:tenth])
        prior = [b.l_prior for b in traj[TOY_RECON.T1:]]
        assert prior[-1] < prior[0]


def _aligned_points(out):
    c = CENTERED_TOY.offset_array()
    U = out.candidates - c
    V = TOY_X - c
    cos = (U / np.linalg.norm(U, axis=1, keepdims=True)) @ (V / np.linalg.norm(V, axis=1, keepdims=True)).T
    return set(np.argmax(cos, axis=1)[cos.max(axis=1) > 0.99])


def test_toy_recovery_finds_training_directions():
    # stationarity pins down each candidate only up to its distance from the input offset,
    # so the identifiable quantity is the direction of (x - offset)
    hits = []
    for seed in range(5):
        _, theta = toy_model(seed)
        out, _ = reconstruct.recover(CENTERED_TOY, theta, replace(TOY_RECON, T2=0, seed=seed))
        hits.append(len(_aligned_points(out)) >= 2)
    assert sum(hits) >= 3


@pytest.mark.xfail(reason="candidates are identified only up to scale along rays from the input offset",
                   strict=False)
def test_toy_recovery_lands_near_training_points():
    passes = 0
    for _, _, out, _ in _toy_runs():
        D = np.linalg.norm(out.candidates[:, None] - TOY_X[None], axis=2)
        passes += len(set(np.argmin(D, axis=1)[D.min(axis=1) < 0.1])) >= 2
    assert passes >= 3


def test_nnls_fit_on_converged_toy_run():
    # the fitted multipliers come from an NNLS problem built independently of kkt_report
    good = 0
    for seed in range(5):
        ds, theta = toy_model(seed)
        G = diffnet.param_gradient_batch(CENTERED_TOY, theta, TOY_X) * TOY_Y[:, None]
        lam, _ = nnls(G.T, theta)
        c = cands(TOY_X, lam, TOY_Y)
        good += reconstruct.loss_stationary(CENTERED_TOY, theta, c) <= 1e-2 * (theta @ theta)
        rep = reconstruct.kkt_report(CENTERED_TOY, theta, ds, normalize=False)
        np.testing.assert_allclose(rep.multipliers, lam, rtol=1e-8, atol=1e-10)
    assert good >= 3


def test_kkt_report_on_exact_kkt_point():
    # linear model: theta = 16 x1 - 16 x2 puts x1, x2 on the unit margin and x3 at margin 2
    spec = NetworkSpec(3, ())
    x1, x2, x3 = np.array([0.25, 0.0, 0.0]), np.array([0.0, 0.25, 0.0]), np.array([0.5, 0.0, 0.4])
    theta = 16 * x1 - 16 * x2
    ds = LabeledDataset(np.stack([x1, x2, x3]), np.array([1, -1, 1]))
    rep = reconstruct.kkt_report(spec, theta, ds)
    np.testing.assert_allclose(rep.margins, [1.0, 1.0, 2.0])
    assert rep.multipliers[2] <= 1e-3
    np.testing.assert_allclose(rep.multipliers[:2], [16.0, 16.0], rtol=1e-9)
    assert rep.relative_residual < 1e-10
    assert np.all(rep.slackness <= 1e-3)


def test_kkt_report_untrained_weights(rng):
    spec = NetworkSpec(4, (16,))
    X = rng.uniform(0, 1, (10, 4))
    ds = LabeledDataset(X, np.where(np.arange(10) < 5, 1, -1))
    theta = trainer.init_params(spec, 1.0, 3)
    assert reconstruct.kkt_report(spec, theta, ds).relative_residual > 0.5


def test_zero_multiplier_residual_is_weight_norm(rng):
    spec = NetworkSpec(4, (6,))
    theta = rng.normal(size=spec.num_params)
    r = reconstruct.stationarity_residual(spec, theta, cands(rng.uniform(0, 1, (3, 4)), np.zeros(3), [1, -1, 1]))
    assert np.linalg.norm(r) == np.linalg.norm(theta)
