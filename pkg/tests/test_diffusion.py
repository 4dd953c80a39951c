import math

import numpy as np
import pytest

from risksim.diffusion import (
    AnalyticGaussianPredictor,
    DivergenceError,
    WindowCodec,
    NoisePredictor,
    SamplerConfig,
    ToyPredictor,
    TrainingConfig,
    analytic_eps,
    denoise_step,
    fit_codec,
    window_anchors,
    forward_noise,
    guided_noise,
    label_dataset,
    load_model,
    make_schedule,
    prepare_batch,
    sample,
    sample_free,
    save_model,
    train,
    training_loss,
)
from risksim.scene import (
    JointTrajectory,
    Recording,
    RiskLevel,
    SceneConfig,
    VehicleState,
)

SCHED = make_schedule("cosine", 100)


class ConstantPredictor(NoisePredictor):
    """Returns a fixed value conditioned, another unconditioned."""

    def __init__(self, uncond, cond):
        self.uncond = uncond
        self.cond = cond

    def predict(self, noisy, condition, k, mask=None, anchors=None):
        value = self.uncond if condition.is_unconditional else self.cond
        return np.full_like(np.asarray(noisy, dtype=float), value)


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

def test_schedule_base_case_and_terminal():
    for kind in ("cosine", "linear"):
        sched = make_schedule(kind, 100)
        assert sched.alpha_bars[1] == pytest.approx(1 - sched.betas[1], rel=1e-12)
        assert sched.alpha_bars[-1] < 0.01
        assert (np.diff(sched.alpha_bars) < 0).all()
        assert ((sched.betas[1:] > 0) & (sched.betas[1:] < 1)).all()


def test_schedule_posterior_variance_formula():
    sched = make_schedule("cosine", 50)
    k = 20
    expected = (
        (1 - sched.alpha_bars[k - 1]) / (1 - sched.alpha_bars[k]) * sched.betas[k]
    )
    assert sched.posterior_vars[k] == pytest.approx(expected, rel=1e-12)
    assert sched.posterior_vars[1] == 0.0  # final reverse step is deterministic


def test_schedule_rejects_unknown_kind_and_small_K():
    with pytest.raises(ValueError):
        make_schedule("exotic", 100)
    with pytest.raises(ValueError):
        make_schedule("cosine", 1)


# ---------------------------------------------------------------------------
# forward_noise
# ---------------------------------------------------------------------------

def test_forward_noise_zero_noise_shrinkage():
    tau0 = np.ones((2, 3, 4))
    out = forward_noise(tau0, 10, np.zeros_like(tau0), SCHED)
    assert np.allclose(out, math.sqrt(SCHED.alpha_bars[10]) * tau0)


def test_forward_noise_terminal_is_noise():
    tau0 = np.ones((1, 2, 4)) * 5.0
    eps = np.random.default_rng(0).standard_normal((1, 2, 4))
    out = forward_noise(tau0, SCHED.num_steps, eps, SCHED)
    ab = SCHED.alpha_bars[-1]
    # the signal part shrinks to sqrt(alpha_bar_K) of the clean sample
    tol = math.sqrt(ab) * 5.0 + (1 - math.sqrt(1 - ab)) * 3.0 + 1e-9
    assert np.abs(out - eps).max() < tol


def test_forward_noise_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        forward_noise(np.zeros((1, 2, 4)), 5, np.zeros((1, 3, 4)), SCHED)
    with pytest.raises(ValueError):
        forward_noise(np.zeros((1, 2, 4)), 0, np.zeros((1, 2, 4)), SCHED)


def test_forward_noise_monte_carlo_moments():
    rng = np.random.default_rng(1)
    tau0 = np.full((1, 1, 4), 2.0)
    k = 40
    n = 10_000
    draws = np.stack(
        [forward_noise(tau0, k, rng.standard_normal(tau0.shape), SCHED) for _ in range(n)]
    ).reshape(n, 4)
    ab = SCHED.alpha_bars[k]
    se_mean = math.sqrt((1 - ab) / n)
    assert np.abs(draws.mean(axis=0) - math.sqrt(ab) * 2.0).max() < 3 * se_mean
    se_var = (1 - ab) * math.sqrt(2.0 / n)
    assert np.abs(draws.var(axis=0) - (1 - ab)).max() < 3 * se_var


def test_forward_noise_matches_composed_stepwise_noising():
    # iterating the one-step kernel must match the closed-form marginal
    rng = np.random.default_rng(2)
    k = 30
    n = 10_000
    tau0 = 1.5
    x = np.full(n, tau0)
    for j in range(1, k + 1):
        x = math.sqrt(1 - SCHED.betas[j]) * x + math.sqrt(SCHED.betas[j]) * rng.standard_normal(n)
    ab = SCHED.alpha_bars[k]
    assert abs(x.mean() - math.sqrt(ab) * tau0) < 3 * math.sqrt((1 - ab) / n)
    assert abs(x.var() - (1 - ab)) < 3 * (1 - ab) * math.sqrt(2.0 / n)


# ---------------------------------------------------------------------------
# guided noise
# ---------------------------------------------------------------------------

def test_guidance_identities_bit_exact():
    pred = ConstantPredictor(0.1, 0.3)
    tau = np.zeros((1, 2, 4))
    r = RiskLevel(0.5)
    uncond = pred.predict(tau, RiskLevel.unconditional(), 5)
    cond = pred.predict(tau, r, 5)
    assert np.array_equal(guided_noise(pred, tau, r, 5, 0.0), uncond)
    assert np.array_equal(guided_noise(pred, tau, r, 5, 1.0), cond)


def test_guidance_scalar_probe():
    pred = ConstantPredictor(0.1, 0.3)
    out = guided_noise(pred, np.zeros((1, 1, 4)), RiskLevel(0.9), 3, 2.0)
    assert np.allclose(out, 0.5)


def test_guidance_rejects_unconditional_target():
    pred = ConstantPredictor(0.1, 0.3)
    with pytest.raises(ValueError):
        guided_noise(pred, np.zeros((1, 1, 4)), RiskLevel.unconditional(), 3, 1.0)


# ---------------------------------------------------------------------------
# denoise_step
# ---------------------------------------------------------------------------

def test_denoise_no_noise_limit():
    tau = np.random.default_rng(3).standard_normal((2, 2, 4))
    k = 1  # smallest beta in the cosine schedule
    mu, var = denoise_step(tau, np.zeros_like(tau), k, SCHED)
    assert np.allclose(mu, tau / math.sqrt(1 - SCHED.betas[k]))
    # mu -> tau as beta -> 0: the relative deviation is bounded by beta
    assert np.allclose(mu, tau, rtol=SCHED.betas[k])
    assert var == 0.0


def test_single_step_inversion_identity():
    rng = np.random.default_rng(4)
    tau0 = rng.standard_normal((3, 4, 4))
    eps = rng.standard_normal(tau0.shape)
    tau1 = forward_noise(tau0, 1, eps, SCHED)
    mu, _ = denoise_step(tau1, eps, 1, SCHED)
    assert np.abs(mu - tau0).max() < 1e-9


def test_denoise_preserves_shape():
    tau = np.zeros((5, 8, 4))
    mu, var = denoise_step(tau, np.ones_like(tau), 17, SCHED)
    assert mu.shape == tau.shape
    assert var == SCHED.posterior_vars[17]


# ---------------------------------------------------------------------------
# analytic_eps
# ---------------------------------------------------------------------------

def test_analytic_eps_zero_at_shrunk_mean():
    m = np.full((1, 1, 4), 1.7)
    k = 25
    tau_k = math.sqrt(SCHED.alpha_bars[k]) * m
    assert np.allclose(analytic_eps(m, 0.49, tau_k, k, SCHED), 0.0)


def test_analytic_eps_unit_variance_simplification():
    rng = np.random.default_rng(5)
    m = rng.standard_normal((1, 1, 4))
    tau_k = rng.standard_normal((1, 1, 4))
    k = 33
    ab = SCHED.alpha_bars[k]
    got = analytic_eps(m, 1.0, tau_k, k, SCHED)
    # with unit data variance the denominator collapses to 1
    want = math.sqrt(1 - ab) * (tau_k - math.sqrt(ab) * m)
    assert np.allclose(got, want, rtol=1e-12)


def test_analytic_eps_matches_regression_oracle():
    rng = np.random.default_rng(6)
    n = 100_000
    m, s = 0.8, 0.7
    k = 40
    ab = SCHED.alpha_bars[k]
    tau0 = rng.normal(m, s, size=n)
    eps = rng.standard_normal(n)
    tau_k = math.sqrt(ab) * tau0 + math.sqrt(1 - ab) * eps
    slope, intercept = np.polyfit(tau_k, eps, 1)
    denom = ab * s * s + 1 - ab
    want_slope = math.sqrt(1 - ab) / denom
    want_intercept = -math.sqrt(1 - ab) * math.sqrt(ab) * m / denom
    assert slope == pytest.approx(want_slope, rel=0.01)
    assert intercept == pytest.approx(want_intercept, rel=0.05, abs=0.01)


# ---------------------------------------------------------------------------
# sampler
# ---------------------------------------------------------------------------

def test_sample_free_gaussian_moments_small():
    rng = np.random.default_rng(7)
    m = rng.uniform(-1, 1, size=(1, 2, 4))
    s = 0.7
    pred = AnalyticGaussianPredictor(m, s * s, SCHED)
    cfg = SamplerConfig(omega=1.0, alpha=1.0, num_steps=100)
    out = sample_free(pred, (2000, 2, 4), RiskLevel(0.5), cfg, SCHED, seed=8)
    mean_err = np.abs(out.mean(axis=0) - m[0]).max()
    assert mean_err < 0.08 * s  # looser than the acceptance gate at n=2000
    var_rel = np.abs(out.var(axis=0) / (s * s) - 1).max()
    assert var_rel < 0.15


def test_sample_deterministic_given_seed():
    pred = AnalyticGaussianPredictor(np.zeros((1, 4, 4)), 0.5, SCHED)
    cfg = SamplerConfig(omega=1.0, alpha=0.5, num_steps=100)
    current = np.array([[1.0, 2.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]])
    present = np.array([True, True])
    a = sample(pred, current, present, RiskLevel(0.4), cfg, SCHED, 4, 0.4, seed=42)
    b = sample(pred, current, present, RiskLevel(0.4), cfg, SCHED, 4, 0.4, seed=42)
    assert np.array_equal(a.data, b.data)
    c = sample(pred, current, present, RiskLevel(0.4), cfg, SCHED, 4, 0.4, seed=43)
    assert not np.array_equal(a.data, c.data)


def test_sample_inpaints_first_slot_at_every_step():
    codec = WindowCodec(np.array([1.0, -0.5, 0.2, 0.0]), np.array([3.0, 3.0, 0.8, 0.8]))
    pred = ToyPredictor(horizon=4, hidden=16, codec=codec, seed=0)
    cfg = SamplerConfig(omega=1.5, alpha=0.5, num_steps=100)
    current = np.array([[4.0, 1.0, 1.0, 0.0], [0.0, -3.0, 0.0, 1.0], [9.0, 9.0, 1.0, 0.0]])
    present = np.array([True, True, False])
    anchors = window_anchors(current[:, None, :], present[:, None])
    expected_slot0 = codec.encode(current[:, None, :], present[:, None], anchors)[:, 0, :]

    seen = []

    def on_step(k, tau):
        seen.append((k, tau[:, 0, :].copy()))

    out = sample(
        pred, current, present, RiskLevel(0.7), cfg, SCHED, 4, 0.4, seed=9, on_step=on_step
    )
    assert len(seen) == SCHED.num_steps + 1
    for _, slot0 in seen:
        assert np.array_equal(slot0[present], expected_slot0[present])
        assert np.array_equal(slot0[~present], np.zeros((1, 4)))
    # the returned world-space slot 0 is bit-exact the current state
    assert np.array_equal(out.data[present, 0, :], current[present])
    assert np.array_equal(out.data[~present], np.zeros((1, 4, 4)))


def test_sample_alpha_zero_is_noise_free():
    pred = AnalyticGaussianPredictor(np.zeros((1, 3, 4)), 0.3, SCHED)
    cfg = SamplerConfig(omega=1.0, alpha=0.0, num_steps=100)
    current = np.array([[0.5, 0.5, 1.0, 0.0]])
    present = np.array([True])
    a = sample(pred, current, present, RiskLevel(0.5), cfg, SCHED, 3, 0.4, seed=1)
    b = sample(pred, current, present, RiskLevel(0.5), cfg, SCHED, 3, 0.4, seed=2)
    assert np.array_equal(a.data, b.data)  # different seeds, same result


def test_sample_rejects_empty_agent_set():
    pred = AnalyticGaussianPredictor(np.zeros((1, 3, 4)), 0.3, SCHED)
    cfg = SamplerConfig(omega=1.0, alpha=1.0, num_steps=100)
    with pytest.raises(ValueError):
        sample(
            pred,
            np.zeros((2, 4)),
            np.array([False, False]),
            RiskLevel(0.5),
            cfg,
            SCHED,
            3,
            0.4,
            seed=1,
        )


# ---------------------------------------------------------------------------
# training loss
# ---------------------------------------------------------------------------

def _window(rng, n=3, T=8, dt=0.4):
    jt = JointTrajectory.empty(n, T, dt)
    for i in range(n):
        for t in range(T):
            st = VehicleState.from_pose(*rng.uniform(-5, 5, 2), rng.uniform(-3, 3))
            jt.data[i, t] = st.as_array()
            jt.mask[i, t] = True
    return jt


class CheatingPredictor(NoisePredictor):
    """Inverts the closed-form noising using the known clean windows."""

    def __init__(self, windows, sched):
        self.clean = {id(w): w for w, _ in windows}
        self.windows = [w for w, _ in windows]
        self.sched = sched
        self._cursor = 0

    def predict(self, noisy, condition, k, mask=None, anchors=None):
        # match the window by shape and mask; test batches keep them unique
        for w in self.windows:
            if w.data.shape == noisy.shape:
                ab = self.sched.alpha_bars[k]
                tau0 = np.where(w.mask[..., None], w.data, 0.0)
                return (noisy - math.sqrt(ab) * tau0) / math.sqrt(1 - ab)
        raise AssertionError("unknown window")


def test_training_loss_zero_for_cheating_predictor():
    rng = np.random.default_rng(10)
    batch = [(_window(rng, n=2 + i), 0.5) for i in range(3)]
    pred = CheatingPredictor(batch, SCHED)
    loss = training_loss(pred, batch, dropout_p=0.25, sched=SCHED, seed=11)
    assert loss < 1e-18


def test_training_loss_unit_for_zero_predictor():
    rng = np.random.default_rng(12)
    batch = [(_window(rng, n=4, T=8), 0.2) for _ in range(30)]
    pred = ConstantPredictor(0.0, 0.0)
    loss = training_loss(pred, batch, dropout_p=0.25, sched=SCHED, seed=13)
    assert loss == pytest.approx(1.0, abs=0.1)


class ConditionRecorder(NoisePredictor):
    def __init__(self):
        self.conditions = []

    def predict(self, noisy, condition, k, mask=None, anchors=None):
        self.conditions.append(condition)
        return np.zeros_like(np.asarray(noisy, dtype=float))


def test_training_condition_dropout_degenerate():
    rng = np.random.default_rng(14)
    batch = [(_window(rng), 0.9) for _ in range(20)]
    rec = ConditionRecorder()
    training_loss(rec, batch, dropout_p=1.0 - 1e-12, sched=SCHED, seed=15)
    assert all(c.is_unconditional for c in rec.conditions)
    rec2 = ConditionRecorder()
    training_loss(rec2, batch, dropout_p=0.0, sched=SCHED, seed=15)
    assert all(not c.is_unconditional for c in rec2.conditions)


# ---------------------------------------------------------------------------
# ToyPredictor
# ---------------------------------------------------------------------------

def test_toy_gradient_matches_finite_differences():
    rng = np.random.default_rng(16)
    pred = ToyPredictor(horizon=8, hidden=24, seed=17)
    batch = [(_window(rng, n=2), 0.3), (_window(rng, n=3), 0.8)]
    prepared = prepare_batch(pred, batch, 0.5, SCHED, np.random.default_rng(18))
    _, grads = pred.loss_and_grad(prepared)
    flat_grad = np.concatenate([grads[n].ravel() for n in pred.PARAM_NAMES])
    flat0 = pred.get_flat()

    def loss_at(w):
        pred.set_flat(w)
        val, _ = pred.loss_and_grad(prepared, want_grad=False)
        return val

    coords = rng.choice(flat0.size, size=100, replace=False)
    for idx in coords:
        h = 1e-6 * max(1.0, abs(flat0[idx]))
        wp = flat0.copy()
        wp[idx] += h
        wm = flat0.copy()
        wm[idx] -= h
        numeric = (loss_at(wp) - loss_at(wm)) / (2 * h)
        denom = max(abs(numeric), abs(flat_grad[idx]), 1e-8)
        assert abs(numeric - flat_grad[idx]) / denom < 1e-4, idx
    pred.set_flat(flat0)


def _motion_window(rng, n=3, T=8, dt=0.4):
    """Constant-velocity windows with jitter: structure the model can learn."""
    jt = JointTrajectory.empty(n, T, dt)
    for i in range(n):
        x, y = rng.uniform(-10, 10, 2)
        heading = rng.uniform(-math.pi, math.pi)
        speed = rng.uniform(2, 8)
        for t in range(T):
            px = x + speed * dt * t * math.cos(heading) + rng.normal(0, 0.03)
            py = y + speed * dt * t * math.sin(heading) + rng.normal(0, 0.03)
            jt.data[i, t] = VehicleState.from_pose(px, py, heading).as_array()
            jt.mask[i, t] = True
    return jt


def test_toy_overfits_single_sample():
    rng = np.random.default_rng(19)
    w = _window(rng, n=2)
    dataset = [(w, 0.6)] * 48  # one repeated training sample
    codec = fit_codec([w])
    pred = ToyPredictor(horizon=8, hidden=192, codec=codec, seed=20)
    cfg = TrainingConfig(dropout_p=0.2, lr=5e-3, batch_size=48, epochs=2500, seed=21)
    train(pred, dataset, cfg, SCHED)
    evals = [training_loss(pred, [(w, 0.6)], 0.2, SCHED, seed=5000 + i) for i in range(100)]
    assert np.mean(evals) < 0.05, np.mean(evals)


def test_train_deterministic_and_decreasing():
    rng = np.random.default_rng(22)
    windows = [_motion_window(rng, n=2) for _ in range(16)]
    codec = fit_codec(windows)
    dataset = [(w, float(rng.uniform(0, 1))) for w in windows]
    p1 = ToyPredictor(horizon=8, hidden=48, codec=codec, seed=23)
    p2 = ToyPredictor(horizon=8, hidden=48, codec=codec, seed=23)
    cfg = TrainingConfig(lr=3e-3, batch_size=8, epochs=120, seed=24)
    h1 = train(p1, dataset, cfg, SCHED)
    h2 = train(p2, dataset, cfg, SCHED)
    assert np.array_equal(p1.get_flat(), p2.get_flat())
    assert h1["epoch_loss"] == h2["epoch_loss"]
    assert h1["epoch_loss"][-1] < 0.5 * h1["epoch_loss"][0]


def test_train_divergence_detection():
    rng = np.random.default_rng(25)
    dataset = [(_window(rng), 0.5)]
    pred = ToyPredictor(horizon=8, hidden=8, seed=26)
    pred.params["w3"][:] = 1e200  # squared residuals overflow to inf
    with np.errstate(all="ignore"), pytest.raises(DivergenceError):
        train(pred, dataset, TrainingConfig(epochs=1, batch_size=1), SCHED)


def test_toy_permutation_equivariance():
    rng = np.random.default_rng(27)
    pred = ToyPredictor(horizon=8, hidden=32, seed=28)
    w = _window(rng, n=5)
    perm = np.array([3, 0, 4, 1, 2])
    out = pred.predict(w.data, RiskLevel(0.4), 12, w.mask)
    out_perm = pred.predict(w.data[perm], RiskLevel(0.4), 12, w.mask[perm])
    assert np.allclose(out[perm], out_perm, atol=1e-12)


def test_toy_unconditional_embedding_is_zero_vector():
    pred = ToyPredictor(horizon=8, hidden=16, seed=29)
    emb = pred._risk_embedding(RiskLevel.unconditional())
    assert np.array_equal(emb, np.zeros(pred.risk_dim))
    emb_zero_risk = pred._risk_embedding(RiskLevel(0.0))
    assert not np.array_equal(emb_zero_risk, np.zeros(pred.risk_dim))


# ---------------------------------------------------------------------------
# dataset labeling
# ---------------------------------------------------------------------------

def _recording_from_paths(paths, dt=0.4):
    n = len(paths)
    T = max(len(p) for p in paths)
    jt = JointTrajectory.empty(n, T, dt)
    for i, path in enumerate(paths):
        for t, pose in enumerate(path):
            if pose is None:
                continue
            jt.data[i, t] = VehicleState.from_pose(*pose).as_array()
            jt.mask[i, t] = True
    dims = np.tile([3.6, 1.8], (n, 1))
    return Recording(jt, dims, list(range(1, n + 1)))


def test_label_dataset_co_occupied_window_is_max_risk():
    scene = SceneConfig(bounds=(-20, -20, 20, 20))
    rec = _recording_from_paths([[(0, 0, 0)] * 10, [(1.0, 0.3, 0.1)] * 10])
    labels = label_dataset([rec], scene)
    assert len(labels) == 3  # 10 - 8 + 1
    assert all(r == 1.0 for _, r in labels)


def test_label_dataset_single_vehicle_floor_risk():
    scene = SceneConfig(bounds=(-20, -20, 20, 20))
    rec = _recording_from_paths([[(0, 0, 0)] * 9])
    labels = label_dataset([rec], scene)
    assert len(labels) == 2
    floor = math.exp(-4.75)
    assert all(r == pytest.approx(floor, rel=1e-9) for _, r in labels)
    assert labels[0][1] == pytest.approx(0.00866, abs=2e-5)


def test_label_dataset_window_count_arithmetic():
    scene = SceneConfig(bounds=(-20, -20, 20, 20))
    recs = [
        _recording_from_paths([[(0, 0, 0)] * 20]),
        _recording_from_paths([[(5, 5, 0)] * 8]),
        _recording_from_paths([[(5, 5, 0)] * 5]),  # shorter than the horizon
    ]
    labels = label_dataset(recs, scene)
    assert len(labels) == (20 - 8 + 1) + (8 - 8 + 1) + 0


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def test_model_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(30)
    codec = WindowCodec(np.array([1, 0.5, 0, 0.0]), np.array([3, 3, 1, 1.0]))
    pred = ToyPredictor(horizon=8, hidden=16, codec=codec, seed=31)
    p1, p2 = tmp_path / "m.json", tmp_path / "m2.json"
    save_model(pred, SCHED, p1)
    loaded, sched = load_model(p1)
    save_model(loaded, sched, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert sched.num_steps == SCHED.num_steps
    w = _window(rng, n=2)
    a = pred.predict(w.data, RiskLevel(0.5), 10, w.mask)
    b = loaded.predict(w.data, RiskLevel(0.5), 10, w.mask)
    assert np.allclose(a, b, atol=1e-7)


def test_fit_codec_moments_and_round_trip():
    rng = np.random.default_rng(32)
    windows = [_window(rng) for _ in range(5)]
    codec = fit_codec(windows)
    pooled = []
    for w in windows:
        anchors = window_anchors(w.data, w.mask)
        z = codec.encode(w.data, w.mask, anchors)
        pooled.append(z[w.mask])
        # anchored slot-0 encodes the identity transition for every agent
        start = z[:, 0, :] * codec.std + codec.mean
        present0 = w.mask[:, 0]
        assert np.allclose(start[present0], [0.0, 0.0, 1.0, 0.0], atol=1e-12)
        # lossless round trip on masked-in entries
        back = codec.decode(z, w.mask, anchors)
        assert np.allclose(back[w.mask], w.data[w.mask], atol=1e-9)
    pooled = np.concatenate(pooled)
    # z-scored up to the std floors
    assert np.allclose(pooled.mean(axis=0), 0.0, atol=1e-9)
    assert (pooled.std(axis=0) <= 1.0 + 1e-9).all()
