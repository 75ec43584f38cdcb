from dataclasses import replace

import numpy as np
import pytest

import badfu.unlearn as ul
from badfu.errors import ConfigError, UnlearnRequestRejected
from badfu.evaluate import accuracy
from badfu.fl import aggregate, reweight, run_training, update_displacement
from badfu.rng import derive_seed, make_rng
from badfu.unlearn import (ForgetSpec, calibrate_update, federaser_from_setup, fedu_influence_step,
                           retained_setup, run_unlearning, sifu_from_setup, sifu_noise_std, unlearn_federaser,
                           unlearn_fedu, unlearn_retrain, unlearn_sifu)
from badfu.nn import Batch, loss_and_param_grads

from helpers import attacked_setup, max_abs, oracle_mean_grad, small_setup


@pytest.fixture(scope="module")
def attacked():
    setup, artifacts, trigger, test = attacked_setup(rounds=6, local_epochs=2)
    history = run_training(setup)
    request = ForgetSpec(1, frozenset(artifacts.c_ids.tolist()))
    return history, request, test


class TestRequests:
    def test_empty_forget_set(self):
        with pytest.raises(UnlearnRequestRejected):
            ForgetSpec(1, frozenset())

    def test_ids_never_present(self, attacked):
        history, _, _ = attacked
        with pytest.raises(UnlearnRequestRejected, match="never"):
            unlearn_retrain(history, ForgetSpec(1, {10**12}))

    def test_ids_of_another_client(self, attacked):
        history, _, _ = attacked
        other = int(history.setup.client(2).data.ids[0])
        with pytest.raises(UnlearnRequestRejected):
            unlearn_fedu(history, ForgetSpec(1, {other}))

    def test_unknown_client(self, attacked):
        history, request, _ = attacked
        with pytest.raises(UnlearnRequestRejected, match="unknown client"):
            unlearn_sifu(history, ForgetSpec(9, request.forget_ids))

    def test_dispatch_errors(self, attacked):
        history, request, _ = attacked
        with pytest.raises(ConfigError):
            run_unlearning("scrub", history, request)
        with pytest.raises(ConfigError, match="unknown fedu"):
            run_unlearning("fedu", history, request, {"sigma_scale": 1.0})

    def test_retained_setup_drops_exactly_the_ids(self, attacked):
        history, request, _ = attacked
        reduced = retained_setup(history.setup, request)
        before = set(history.setup.client(1).data.ids.tolist())
        after = set(reduced.client(1).data.ids.tolist())
        assert before - after == request.forget_ids
        assert sum(c.weight for c in reduced.clients) == pytest.approx(1.0)


class TestRetrain:
    def test_equals_training_on_retained_data(self, attacked):
        history, request, _ = attacked
        result = unlearn_retrain(history, request)
        expected = run_training(retained_setup(history.setup, request), seed=derive_seed(history.seed, "retrain"))
        assert result.model.values.tobytes() == expected.final.values.tobytes()
        assert result.rounds_executed == history.setup.n_rounds

    def test_forget_all_of_one_client(self):
        s = small_setup(K=2, rounds=3)
        history = run_training(s)
        result = unlearn_retrain(history, ForgetSpec(2, frozenset(s.client(2).data.ids.tolist())))
        solo = replace(s, clients=reweight([s.client(1)]))
        expected = run_training(solo, seed=derive_seed(s.seed, "retrain"))
        assert max_abs(result.model.values, expected.final.values) < 1e-12


class TestFedEraser:
    def test_calibration_keeps_magnitude(self):
        rng = np.random.default_rng(0)
        rec, fresh = rng.normal(size=50), rng.normal(size=50)
        out = calibrate_update(rec, fresh)
        assert np.linalg.norm(out) == pytest.approx(np.linalg.norm(rec), abs=1e-10)
        assert np.dot(out, fresh) / (np.linalg.norm(out) * np.linalg.norm(fresh)) == pytest.approx(1.0)
        assert np.array_equal(calibrate_update(rec, np.zeros(50)), np.zeros(50))

    def test_applied_updates_have_recorded_norms(self, attacked, monkeypatch):
        history, request, _ = attacked
        seen = []
        real = ul.aggregate

        def spy(updates, global_p, rule):
            seen.append([(u.client_id, np.linalg.norm(update_displacement(u, global_p, rule))) for u in updates])
            return real(updates, global_p, rule)

        monkeypatch.setattr(ul, "aggregate", spy)
        unlearn_federaser(history, request)
        assert len(seen) == len(history.records)
        for rec, applied in zip(history.records, seen):
            recorded = {u.client_id: np.linalg.norm(update_displacement(u, rec.global_before, history.setup.rule))
                        for u in rec.updates}
            for cid, norm in applied:
                assert norm == pytest.approx(recorded[cid], abs=1e-10)

    def test_forget_free_replay_keeps_accuracy(self, attacked):
        history, _, test = attacked
        model = federaser_from_setup(history, history.setup, cal_epochs=history.setup.hp.local_epochs)
        assert abs(accuracy(model, test) - accuracy(history.final, test)) <= 0.02

    def test_fedsgd_history(self):
        setup, artifacts, _, _ = attacked_setup(rounds=3, rule="fedsgd")
        history = run_training(setup)
        result = unlearn_federaser(history, ForgetSpec(1, frozenset(artifacts.c_ids.tolist())))
        assert result.model.is_finite()

    def test_needs_full_history(self, attacked):
        history, request, _ = attacked
        partial = replace(history, records=history.records[:2])
        with pytest.raises(ConfigError):
            unlearn_federaser(partial, request)
        with pytest.raises(ConfigError):
            unlearn_federaser(history, request, cal_epochs=0)


class TestFedU:
    def test_influence_gradient_matches_oracle(self, attacked):
        history, request, _ = attacked
        corrected, g_f = fedu_influence_step(history, request, lam=0.5)
        forget = history.setup.client(1).data.select_ids(request.forget_ids)
        g = oracle_mean_grad(history.final, forget)
        assert max_abs(g_f, g) < 1e-12
        lr = history.setup.hp.lr
        assert max_abs(corrected, history.final.values + 0.5 * lr * len(forget) * g) < 1e-12

    def test_zero_lambda_beta_is_one_benign_round(self, attacked):
        history, request, _ = attacked
        result = unlearn_fedu(history, request, lam=0.0, beta=0.0)
        setup = retained_setup(history.setup, request)
        theta, hp = history.final, setup.hp
        seed = derive_seed(history.seed, "fedu")
        updates = []
        for c in setup.clients:
            idx = make_rng(seed, "client", c.client_id).choice(c.n_samples, size=hp.batch_size, replace=False)
            if c.client_id == request.requesting_client_id:
                theta_k = theta.values
            else:
                _, g = loss_and_param_grads(theta, Batch(c.data.features[idx], c.data.labels[idx]))
                theta_k = theta.values - hp.lr * g
            updates.append(ul.ClientUpdate(c.client_id, "weights", theta_k, c.n_samples))
        expected = aggregate(updates, theta, setup.rule)
        assert max_abs(result.model.values, expected.values) < 1e-12


class TestSifu:
    def test_deterministic(self, attacked):
        history, request, _ = attacked
        a = unlearn_sifu(history, request, sigma_scale=0.1)
        b = unlearn_sifu(history, request, sigma_scale=0.1)
        assert a.model.values.tobytes() == b.model.values.tobytes()
        assert a.rounds_executed == 2  # ceil(6 / 4)

    def test_noise_scale_formula(self, attacked):
        history, _, _ = attacked
        t_u = len(history.records) // 2
        snap = history.records[t_u - 1].global_after.values
        s_f = np.mean([rec.sensitivities[1] for rec in history.records[t_u:]])
        expected = 0.3 * np.sqrt(np.mean(snap ** 2)) * s_f
        assert sifu_noise_std(history, 1, 0.3) == pytest.approx(expected, rel=1e-12)

    def test_no_forgetting_replays_tail(self, attacked):
        history, _, test = attacked
        n = len(history.records)
        model = sifu_from_setup(history, history.setup, 1, 0.0, n - n // 2)
        assert abs(accuracy(model, test) - accuracy(history.final, test)) <= 0.02

    def test_short_history(self):
        s = small_setup(rounds=1)
        history = run_training(s)
        with pytest.raises(ConfigError):
            unlearn_sifu(history, ForgetSpec(1, {int(s.client(1).data.ids[0])}))
