import math

import numpy as np
import pytest

import steady.trainer as trainer
from steady.data import ObservedTrajectory, make_hov_dataset
from steady.hovercraft import TrueModel, sample_initial_states
from steady.neural import DynamicsParams, NeuralDynamics, init_params, transition_log_density
from steady.observation import ObservationSequence
from steady.particle_filter import FilterConfig, filter_forward
from steady.trainer import (
    AdamState,
    TrainConfig,
    TrainingError,
    adam_update,
    em_step,
    m_step_objective,
    new_run,
    train,
    validate,
    w_obs_at,
)


@pytest.fixture(scope="module")
def small():
    return make_hov_dataset(seed=3, n_train=3, n_valid=2, n_test=1, duration=3.0)


def random_grad(seed, scale=1.0):
    rng = np.random.default_rng(seed)
    return DynamicsParams.zeros().map(lambda z: scale * rng.normal(size=z.shape))


def adam_reference(theta, grads, lr=1e-4, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook scalar ADAM ascent, one component at a time."""
    out = []
    for j, th in enumerate(theta):
        m = v = 0.0
        for t, g in enumerate(grads, start=1):
            m = b1 * m + (1 - b1) * g[j]
            v = b2 * v + (1 - b2) * g[j] ** 2
            th = th + lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        out.append(th)
    return np.array(out)


class TestAdam:
    def test_first_step_is_signed_lr(self):
        p = init_params(0)
        g = random_grad(1)
        _, new = adam_update(AdamState.fresh(1e-4), p, g)
        step, gf = new.flat() - p.flat(), g.flat()
        big = np.abs(gf) > 1e-3  # |g| >> eps_hat
        np.testing.assert_allclose(step[big], 1e-4 * np.sign(gf[big]), rtol=1e-5)
        assert np.all(np.abs(step) <= 1e-4)

    def test_zero_gradient_leaves_params(self):
        p = init_params(0)
        adam = AdamState.fresh()
        q = p
        for _ in range(20):
            adam, q = adam_update(adam, q, DynamicsParams.zeros())
        assert q.equals(p)
        assert adam.t == 20

    def test_matches_reference(self):
        p = init_params(2)
        grads = [random_grad(10 + k, scale=10.0 ** (k % 3 - 1)) for k in range(8)]
        adam, q = AdamState.fresh(1e-3), p
        for g in grads:
            adam, q = adam_update(adam, q, g)
        idx = np.random.default_rng(0).choice(p.flat().size, 40, replace=False)
        ref = adam_reference(p.flat()[idx], [g.flat()[idx] for g in grads], lr=1e-3)
        np.testing.assert_allclose(q.flat()[idx], ref, rtol=1e-12, atol=1e-15)

    def test_deterministic(self):
        seqs = []
        for _ in range(2):
            adam, q = AdamState.fresh(), init_params(4)
            for k in range(5):
                adam, q = adam_update(adam, q, random_grad(k))
            seqs.append(q.flat())
        np.testing.assert_array_equal(*seqs)

    def test_non_finite_gradient_rejected(self):
        g = random_grad(0)
        g.b1[3] = np.nan
        with pytest.raises(FloatingPointError):
            adam_update(AdamState.fresh(), init_params(0), g)


class TestSchedule:
    def test_piecewise_linear(self):
        assert w_obs_at(0, 100) == 0.0
        assert w_obs_at(25, 100) == 0.25
        assert w_obs_at(100, 100) == 1.0
        assert w_obs_at(1000, 100) == 1.0

    def test_disabled_flattening(self):
        assert w_obs_at(0, 0) == 1.0

    def test_default_anneal_is_half(self):
        assert TrainConfig(max_steps=300).anneal_steps == 150

    @pytest.mark.parametrize("bad", [dict(n_particles=0), dict(n_traj_samples=0), dict(max_steps=-1),
                                     dict(max_steps=10, anneal_steps=20), dict(patience=0)])
    def test_invalid_config(self, bad):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


class TestEmStep:
    def test_single_adam_step_bound(self, small):
        cfg = TrainConfig(max_steps=10, n_particles=200)
        run = new_run(cfg)
        before = run.params.copy()
        em_step(run, small.train, cfg)
        delta = np.abs(run.params.flat() - before.flat())
        assert delta.max() <= cfg.lr * (1 + 1e-6)
        assert run.adam.t == 1 and run.step == 1

    def test_first_step_is_prior_rollout(self, small):
        cfg = TrainConfig(max_steps=10, n_particles=200, anneal_steps=4)
        run = new_run(cfg)
        em_step(run, small.train, cfg)
        assert run.history[0]["w_obs"] == 0.0
        assert run.history[0]["log_marginal"] == 0.0
        assert run.w_obs == 0.25

    def test_round_robin(self, small):
        cfg = TrainConfig(max_steps=10, n_particles=50, n_traj_samples=2)
        run = new_run(cfg)
        for _ in range(7):
            em_step(run, small.train, cfg)
        assert [h["traj"] for h in run.history] == [0, 1, 2, 0, 1, 2, 0]

    def test_single_particle_objective(self, small):
        cfg = TrainConfig(max_steps=10, n_particles=1, n_traj_samples=5, anneal_steps=0)
        run = new_run(cfg)
        params = run.params.copy()
        em_step(run, small.train, cfg)
        item = small.train[0]
        seed = (cfg.seed * 1_000_003) & 0x7FFFFFFF
        r = filter_forward(NeuralDynamics(params, item.dt), item.obs, item.controls,
                           sample_initial_states, FilterConfig(1, 1.0, seed))
        x = r.cloud.states[:, :, 0]
        expected = transition_log_density(params, x[:-1].T, item.controls.T, x[1:].T, item.dt).mean()
        assert run.history[0]["objective"] == pytest.approx(expected, rel=1e-12)

    def test_identical_samples_average(self, small):
        item = small.train[1]
        traj = item.truth.states
        p = init_params(5)
        single = transition_log_density(p, traj[:-1].T, item.controls.T, traj[1:].T, item.dt).mean()
        value, _ = m_step_objective(p, np.stack([traj] * 4), item.controls, item.dt, 1.0)
        assert value == pytest.approx(single, rel=1e-12)

    def test_particle_death_reports_context(self, small):
        cfg = TrainConfig(max_steps=10, n_particles=5, anneal_steps=0)
        run = new_run(cfg)
        item = small.train[0]
        b = item.obs.bearings.copy()
        b[5] = np.nan  # marked present but unusable: every particle scores NaN
        broken = ObservedTrajectory(ObservationSequence(b, item.obs.present, item.obs.sigma, item.obs.lmap),
                                    item.controls, item.dt)
        with pytest.raises(TrainingError, match="step 0 on training trajectory 0"):
            em_step(run, [broken], cfg)


class TestValidate:
    def test_deterministic(self, small):
        cfg = TrainConfig(n_particles=300)
        p = init_params(0)
        assert validate(p, small.valid, cfg) == validate(p, small.valid, cfg)

    def test_true_model_beats_init(self, small, monkeypatch):
        cfg = TrainConfig(n_particles=500)
        init_score = validate(init_params(0), small.valid, cfg)
        monkeypatch.setattr(trainer, "model_for", lambda params, item, cfg: TrueModel(small.hov))
        true_score = validate(None, small.valid, cfg)
        assert true_score > init_score

    def test_misspecified_noise_lowers_score(self, small, monkeypatch):
        monkeypatch.setattr(trainer, "model_for", lambda params, item, cfg: TrueModel(small.hov))
        cfg = TrainConfig(n_particles=500)
        right = validate(None, small.valid, cfg)
        for factor in (4.0, 0.25):
            wrong = [ObservedTrajectory(it.obs.with_sigma(it.obs.sigma * factor), it.controls, it.dt)
                     for it in small.valid]
            assert validate(None, wrong, cfg) < right

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            validate(init_params(0), [], TrainConfig())


class TestTrain:
    def test_zero_steps_returns_init(self, small):
        cfg = TrainConfig(max_steps=0)
        best, run = train(small.train, small.valid, cfg)
        assert best.equals(init_params(cfg.seed, cfg.sigma0))
        assert run.history == []

    def test_best_is_argmax_of_history(self, small):
        cfg = TrainConfig(max_steps=12, n_particles=100, validation_every=4, patience=10)
        seen = {}
        best, run = train(small.train, small.valid, cfg,
                          on_check=lambda r, b: seen.setdefault(r.step, r.params.copy()))
        vals = run.validations()
        assert [s for s, _ in vals] == [0, 4, 8, 12]
        best_step = max(vals, key=lambda v: v[1])[0]
        assert best.equals(seen[best_step])
        assert validate(best, small.valid, cfg) == max(v for _, v in vals)

    def test_history_row_count(self, small):
        cfg = TrainConfig(max_steps=10, n_particles=50, validation_every=3, patience=10)
        _, run = train(small.train, small.valid, cfg)
        kinds = [h["kind"] for h in run.history]
        assert kinds.count("train") == 10
        assert kinds.count("valid") == 5  # steps 0, 3, 6, 9 and the final 10

    def test_patience_stops_early(self, small, monkeypatch):
        scores = iter([1.0, 2.0, 1.5, 1.9, 1.8, 5.0])
        monkeypatch.setattr(trainer, "validate", lambda *a, **k: next(scores))
        cfg = TrainConfig(max_steps=100, n_particles=20, validation_every=2, patience=3)
        best, run = train(small.train, small.valid, cfg)
        assert run.step == 8
        assert [v for _, v in run.validations()] == [1.0, 2.0, 1.5, 1.9, 1.8]

    def test_resume_continues_identically(self, small):
        cfg = TrainConfig(max_steps=8, n_particles=60, validation_every=4)
        best_full, full = train(small.train, small.valid, cfg)
        short = TrainConfig(max_steps=4, n_particles=60, validation_every=4, anneal_steps=cfg.anneal_steps)
        _, part = train(small.train, small.valid, short)
        best_res, resumed = train(small.train, small.valid, cfg, run=part)
        assert resumed.params.equals(full.params)
        assert best_res.equals(best_full)
        assert [h["step"] for h in resumed.history] == [h["step"] for h in full.history]
