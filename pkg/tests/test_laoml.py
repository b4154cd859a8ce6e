import copy
import json

import numpy as np
import pytest

from ahl import controller as ct
from ahl import laoml
from ahl.errors import ConfigurationError, NumericalError


def stub_cfg(**overrides):
    defaults = dict(mode="laoml", total_epochs=250, t_prime=5, k_samples=10,
                    warmup=5, sigma_init=5.0, early_stop=False, seed=0)
    defaults.update(overrides)
    return laoml.TrainConfig(**defaults)


class QuadraticStubTrainer:
    """Validation error is a deterministic bowl in each landmark's width."""

    def __init__(self, n_landmarks: int, best: float = 7.0):
        self.n = n_landmarks
        self.best = best

    def clone(self):
        return copy.deepcopy(self)

    def train_block(self, sigmas, epoch_indices, sample_tag):
        sigmas = np.asarray(sigmas, dtype=np.float64)
        losses = [0.01 * sigmas.copy() for _ in epoch_indices]
        eps = 2.0 + 0.5 * (sigmas - self.best) ** 2
        return losses, [eps.copy() for _ in epoch_indices]


def make_loop(cfg, n_landmarks=3, trainer=None):
    controllers = []
    for i in range(n_landmarks):
        controllers.append(ct.build_controller(1000 + i, input_dim=cfg.t_prime,
                                               eta=cfg.controller_lr))
        for v in (0.5, 0.4, 0.3, 0.2, 0.1)[:cfg.t_prime]:
            ct.push_history(controllers[-1], v)
    return laoml.LoopState(
        cfg=cfg,
        trainer=trainer or QuadraticStubTrainer(n_landmarks),
        controllers=controllers,
        sigmas=np.full(n_landmarks, float(cfg.sigma_init)),
        early=laoml.EarlyStopState(n_landmarks, cfg.t_prime),
        epoch=cfg.resolved_warmup(),
    )


# ---------------------------------------------------------------------------
# TrainConfig schedule
# ---------------------------------------------------------------------------

def test_default_schedule_at_reference_budget():
    cfg = laoml.TrainConfig()
    assert cfg.resolved_warmup() == 30
    assert cfg.resolved_early_stop_start() == 100
    assert cfg.n_iterations() == 44


def test_scaled_schedule_at_100_epochs():
    cfg = laoml.TrainConfig(total_epochs=100)
    assert cfg.resolved_warmup() == 10
    assert cfg.resolved_early_stop_start() == 40
    assert cfg.n_iterations() == 18


def test_explicit_warmup_beyond_budget_rejected():
    cfg = laoml.TrainConfig(mode="laoml", total_epochs=30, warmup=40)
    with pytest.raises(ConfigurationError):
        cfg.validate_schedule()


def test_window_must_be_multiple_of_t_prime():
    with pytest.raises(ConfigurationError):
        laoml.TrainConfig(t_prime=4, early_stop_window=30)


def test_sigma_ordering_validated():
    with pytest.raises(ConfigurationError):
        laoml.TrainConfig(sigma_init=0.5)


def test_config_echo_round_trip():
    cfg = laoml.TrainConfig(total_epochs=100, k_samples=4, seed=3)
    echo = cfg.echo()
    again = laoml.TrainConfig.from_dict(echo)
    assert again.resolved_warmup() == cfg.resolved_warmup()
    assert again.echo() == echo


# ---------------------------------------------------------------------------
# sample_sigma_sets
# ---------------------------------------------------------------------------

def test_sigma_steps_and_clamping():
    cfg = stub_cfg(k_samples=50)
    loop = make_loop(cfg)
    rng = np.random.default_rng(0)
    sets, actions, _ = laoml.sample_sigma_sets(loop.controllers, np.full(3, 5.0), 50,
                                               rng, cfg.sigma_min, cfg.sigma_max)
    assert set(np.unique(sets)) <= {4.0, 5.0, 6.0}
    for j in range(50):
        for i in range(3):
            assert sets[j, i] == 5.0 + actions[j][i].action
    sets, _, _ = laoml.sample_sigma_sets(loop.controllers, np.full(3, 1.0), 50,
                                         rng, 1.0, 20.0)
    assert sets.min() >= 1.0
    sets, _, _ = laoml.sample_sigma_sets(loop.controllers, np.full(3, 20.0), 50,
                                         rng, 1.0, 20.0)
    assert sets.max() <= 20.0


def test_frozen_landmarks_keep_sigma_in_all_samples():
    cfg = stub_cfg(k_samples=8)
    loop = make_loop(cfg)
    for ctrl in loop.controllers:
        ctrl.frozen = True
    sets, actions, hist = laoml.sample_sigma_sets(loop.controllers,
                                                  np.array([4.0, 9.0, 12.0]),
                                                  8, np.random.default_rng(1), 1.0, 20.0)
    for j in range(8):
        np.testing.assert_array_equal(sets[j], [4.0, 9.0, 12.0])
        assert actions[j] == [None, None, None]
    assert hist == [None, None, None]


# ---------------------------------------------------------------------------
# select_best
# ---------------------------------------------------------------------------

def test_select_best_hand_example():
    j_star, sources = laoml.select_best(np.array([[2.0, 4.0], [3.0, 1.0]]))
    assert j_star == 1
    np.testing.assert_array_equal(sources, [0, 1])


def test_select_best_single_landmark_indices_agree():
    eps = np.array([[3.0], [1.5], [2.0]])
    j_star, sources = laoml.select_best(eps)
    assert j_star == 1 and sources[0] == 1


def test_select_best_all_equal_tie_breaks_low():
    j_star, sources = laoml.select_best(np.ones((4, 3)))
    assert j_star == 0
    np.testing.assert_array_equal(sources, [0, 0, 0])


def test_select_best_rejects_non_finite():
    with pytest.raises(NumericalError):
        laoml.select_best(np.array([[1.0, np.nan]]))


# ---------------------------------------------------------------------------
# early_stop_check
# ---------------------------------------------------------------------------

def test_constant_errors_freeze():
    state = laoml.EarlyStopState(2, epochs_per_record=5)
    for _ in range(6):
        state.append(np.array([2.0, 2.0]))
    newly = laoml.early_stop_check(state, 30, 0.01)
    assert newly == [0, 1]
    assert state.frozen.all()
    assert (state.variances == 0).all()


def test_alternating_errors_do_not_freeze():
    state = laoml.EarlyStopState(1, epochs_per_record=5)
    for i in range(8):
        state.append(np.array([1.0 if i % 2 == 0 else 3.0]))
    assert laoml.early_stop_check(state, 30, 0.01) == []
    assert abs(state.variances[0] - 1.0) <= 1e-12


def test_short_window_is_noop():
    state = laoml.EarlyStopState(1, epochs_per_record=5)
    for _ in range(5):
        state.append(np.array([2.0]))
    assert laoml.early_stop_check(state, 30, 0.01) == []
    assert not state.frozen.any()


# ---------------------------------------------------------------------------
# run_iteration on the stub trainer
# ---------------------------------------------------------------------------

def test_iteration_broadcast_picks_argmin_mean():
    cfg = stub_cfg(k_samples=4, t_prime=5)
    loop = make_loop(cfg)
    result = laoml.run_iteration(loop)
    means = result.eps.mean(axis=1)
    assert result.j_star == int(means.argmin())
    assert loop.trainer is not None
    np.testing.assert_array_equal(result.rewards, cfg.reward_c - result.eps)


def test_k1_iteration_is_identity_broadcast():
    cfg = stub_cfg(k_samples=1)
    loop = make_loop(cfg)
    trainer_before = loop.trainer
    result = laoml.run_iteration(loop)
    assert result.j_star == 0
    assert loop.epoch == cfg.resolved_warmup() + cfg.t_prime


def test_update_frequency_coupling_buffers_hold_winner_losses():
    cfg = stub_cfg(k_samples=4)
    loop = make_loop(cfg)
    result = laoml.run_iteration(loop)
    for i, ctrl in enumerate(loop.controllers):
        expected = [float(vec[i]) for vec in result.winner_losses]
        assert ctrl.history[-len(expected):] == expected


def test_reward_bookkeeping_is_exact():
    cfg = stub_cfg(k_samples=6)
    loop = make_loop(cfg)
    result = laoml.run_iteration(loop)
    assert result.rewards.tobytes() == (cfg.reward_c - result.eps).tobytes()
    assert len(result.reward_records) == 6 * 3
    for record in result.reward_records:
        assert record.reward == cfg.reward_c - record.epsilon
        assert record.sigma == result.sigma_sets[record.sample, record.landmark]


def test_broadcast_index_from_mean_errors():
    # two samples with mean validation errors [3.0, 2.0] -> broadcast 1
    j_star, _ = laoml.select_best(np.array([[3.5, 2.5], [2.0, 2.0]]))
    assert j_star == 1


def test_frozen_landmark_never_changes():
    cfg = stub_cfg(k_samples=5, sigma_init=9.0)
    loop = make_loop(cfg)
    loop.controllers[1].frozen = True
    params_before = {n: t.data.copy() for n, t in loop.controllers[1].params.items()}
    for _ in range(10):
        laoml.run_iteration(loop)
    assert loop.sigmas[1] == 9.0
    for name in params_before:
        assert loop.controllers[1].params[name].data.tobytes() \
            == params_before[name].tobytes()


def test_inner_numerical_error_aborts_with_diagnostic():
    class ExplodingTrainer(QuadraticStubTrainer):
        def train_block(self, sigmas, epoch_indices, sample_tag):
            raise NumericalError("loss went non-finite")

    cfg = stub_cfg(k_samples=3)
    loop = make_loop(cfg, trainer=ExplodingTrainer(3))
    with pytest.raises(NumericalError) as err:
        laoml.run_iteration(loop)
    assert "iteration 0" in str(err.value)
    assert "epochs 5..9" in str(err.value)


def test_sigma_bounds_hold_throughout():
    cfg = stub_cfg(k_samples=6, sigma_init=1.0, sigma_min=1.0, sigma_max=3.0)
    loop = make_loop(cfg)
    for _ in range(30):
        laoml.run_iteration(loop)
        assert (loop.sigmas >= 1.0).all() and (loop.sigmas <= 3.0).all()


def test_early_stop_freezes_on_stub():
    # the stub's errors are deterministic, so once widths settle the window
    # variance collapses and landmarks freeze
    cfg = stub_cfg(k_samples=10, early_stop=True, warmup=5,
                   early_stop_start=10, early_stop_window=30,
                   early_stop_threshold=0.05)
    loop = make_loop(cfg)
    frozen_sigma = None
    for _ in range(60):
        laoml.run_iteration(loop)
        if loop.early.frozen.all() and frozen_sigma is None:
            frozen_sigma = loop.sigmas.copy()
    assert loop.early.frozen.all()
    np.testing.assert_array_equal(loop.sigmas, frozen_sigma)


@pytest.mark.parametrize("seed", range(10))
def test_stub_bilevel_recovers_best_width(seed):
    cfg = stub_cfg(k_samples=10, seed=seed, controller_lr=1e-3)
    loop = make_loop(cfg, n_landmarks=3)
    history = []
    for _ in range(60):
        laoml.run_iteration(loop)
        history.append(loop.sigmas.copy())
    history = np.asarray(history)
    within = np.abs(history - 7.0) <= 1.0
    entered = within.all(axis=1).argmax()
    assert within.all(axis=1).any() and entered <= 40
    assert within[entered:].all()


# ---------------------------------------------------------------------------
# run_training on real data
# ---------------------------------------------------------------------------

def test_pure_warmup_run(tiny_dataset):
    cfg = laoml.TrainConfig(mode="laoml", total_epochs=4, warmup=4, t_prime=2,
                            k_samples=2, early_stop_window=2, seed=0)
    art = laoml.run_training(cfg, tiny_dataset)
    iterations = {row[0] for row in art.sigma_rows}
    assert iterations == {0}
    assert all(row[2] == 5.0 for row in art.sigma_rows)
    assert len(art.epoch_rows) == 4 * 3


def test_overlapping_splits_rejected(tiny_dataset):
    with pytest.raises(ConfigurationError):
        type(tiny_dataset)(train=tiny_dataset.train,
                           validation=tiny_dataset.train[:2],
                           test=tiny_dataset.test)


def test_run_training_deterministic_replay(tiny_dataset, tmp_path):
    cfg = laoml.TrainConfig(mode="laoml", total_epochs=8, warmup=4, t_prime=2,
                            k_samples=2, early_stop_window=2, seed=3, threads=1)
    a = laoml.run_training(cfg, tiny_dataset, out_dir=tmp_path / "a")
    b = laoml.run_training(cfg, tiny_dataset, out_dir=tmp_path / "b")
    for name in laoml.RunArtifacts.DETERMINISTIC_FILES + ("learner.ckpt", "controllers.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_k1_laoml_with_pinned_actions_matches_fixed_mode(tiny_dataset, tmp_path, monkeypatch):
    # A K=1 search whose policy always draws "keep" must replay fixed-width
    # training exactly: same learner parameters, same per-epoch records.
    def always_keep(probs, rng):
        return ct.ActionSample(action=0.0, probs=np.asarray(probs), index=1)

    monkeypatch.setattr(laoml, "sample_action", always_keep)
    base = dict(total_epochs=10, warmup=4, t_prime=2, k_samples=1,
                early_stop=False, early_stop_window=2, seed=5, augment=True)
    cfg_laoml = laoml.TrainConfig(mode="laoml", **base)
    cfg_fixed = laoml.TrainConfig(mode="fixed", **base)
    laoml.run_training(cfg_laoml, tiny_dataset, out_dir=tmp_path / "laoml")
    laoml.run_training(cfg_fixed, tiny_dataset, out_dir=tmp_path / "fixed")
    assert (tmp_path / "laoml" / "learner.ckpt").read_bytes() \
        == (tmp_path / "fixed" / "learner.ckpt").read_bytes()
    assert (tmp_path / "laoml" / "epochs.csv").read_bytes() \
        == (tmp_path / "fixed" / "epochs.csv").read_bytes()


def test_serial_and_threaded_runs_identical(tiny_dataset, tmp_path):
    # every result file is bitwise identical; the config echo may differ
    # only in the requested thread count itself
    base = dict(mode="laoml", total_epochs=8, warmup=4, t_prime=2, k_samples=4,
                early_stop_window=2, seed=2)
    laoml.run_training(laoml.TrainConfig(threads=1, **base), tiny_dataset,
                       out_dir=tmp_path / "serial")
    laoml.run_training(laoml.TrainConfig(threads=4, **base), tiny_dataset,
                       out_dir=tmp_path / "threaded")
    for name in ("sigma.csv", "reward.csv", "epochs.csv", "summary.json",
                 "learner.ckpt", "controllers.ckpt"):
        assert (tmp_path / "serial" / name).read_bytes() \
            == (tmp_path / "threaded" / name).read_bytes()
    echo_a = json.loads((tmp_path / "serial" / "config.echo.json").read_text())
    echo_b = json.loads((tmp_path / "threaded" / "config.echo.json").read_text())
    assert echo_a.pop("threads") == 1 and echo_b.pop("threads") == 4
    assert echo_a == echo_b


def test_coordreg_summary_uses_its_own_decode(tiny_dataset, tmp_path):
    import numpy as _np
    from ahl import heatmap as hm
    from ahl import learner as ln
    from ahl import metrics
    from ahl import numkernel as nk

    cfg = laoml.TrainConfig(mode="coordreg", total_epochs=4, t_prime=1,
                            early_stop_window=1, seed=0)
    art = laoml.run_training(cfg, tiny_dataset, out_dir=tmp_path)
    state = ln.load_learner(tmp_path / "learner.ckpt")
    samples = list(tiny_dataset.test)
    preds, gts = [], []
    with nk.no_grad():
        for start in range(0, len(samples), 32):
            chosen = samples[start:start + 32]
            images = _np.stack([s.image for s in chosen])
            coords = hm.soft_argmax_decode_batch(ln.forward(state, images)).data
            preds.append(coords.reshape(len(chosen), 3, 2))
            gts.append(_np.stack([s.landmarks.coords for s in chosen]))
    table = metrics.radial_errors(_np.concatenate(preds), _np.concatenate(gts))
    assert art.summary["mean_mre"] == metrics.mre(table).mean


def test_run_writes_expected_layout(tiny_dataset, tmp_path):
    cfg = laoml.TrainConfig(mode="laoml", total_epochs=6, warmup=2, t_prime=2,
                            k_samples=2, early_stop_window=2, seed=0)
    art = laoml.run_training(cfg, tiny_dataset, out_dir=tmp_path)
    for name in ("config.echo.json", "sigma.csv", "reward.csv", "epochs.csv",
                 "summary.json", "timings.json", "learner.ckpt", "controllers.ckpt"):
        assert (tmp_path / name).exists()
    echo = json.loads((tmp_path / "config.echo.json").read_text())
    assert echo["warmup"] == 2 and echo["mode"] == "laoml"
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert len(summary["per_landmark_mre"]) == 3
    assert summary["mean_mre"] >= 0
    assert set(summary["pck"]) == {"2.0", "3.0", "5.0"}
