import json

import numpy as np
import pytest

import oracles
from boxmil import segmodel
from boxmil.milloss import LossConfig
from boxmil.synthgen import DatasetSpec, generate
from boxmil.trainer import (
    AdamState,
    BagCache,
    ExperimentConfig,
    OptimConfig,
    RunLog,
    TrainingError,
    adam_step,
    load_run_config,
    save_run,
    train,
    training_samples,
)


@pytest.fixture(scope="module")
def small_data():
    return generate(DatasetSpec(n_train=3, n_val=2, height=24, width=24, size_range=(4.0, 7.0), seed=2))


# -------------------------------------------------------------------- Adam


def test_adam_matches_scalar_oracle_for_constant_gradient():
    cfg = OptimConfig(lr=1e-2)
    p, state = [np.array([0.7])], AdamState.zeros_like([np.zeros(1)])
    for _ in range(25):
        p, state = adam_step(p, [np.array([0.3])], state, cfg)
    want, m, v = oracles.adam_scalar([0.3] * 25, 1e-2, 0.9, 0.99, 1e-8, x0=0.7)
    assert p[0][0] == pytest.approx(want, rel=1e-14)
    assert state.m[0][0] == pytest.approx(m, rel=1e-14)
    assert state.v[0][0] == pytest.approx(v, rel=1e-14)
    assert state.t == 25


def test_adam_matches_oracle_for_varying_gradients():
    rng = np.random.default_rng(0)
    gs = rng.normal(size=40)
    cfg = OptimConfig(lr=3e-3, beta1=0.8, beta2=0.95)
    p, state = [np.array([1.0])], AdamState.zeros_like([np.zeros(1)])
    for g in gs:
        p, state = adam_step(p, [np.array([g])], state, cfg)
    want, _, _ = oracles.adam_scalar(gs, 3e-3, 0.8, 0.95, 1e-8, x0=1.0)
    assert p[0][0] == pytest.approx(want, rel=1e-13)


def test_adam_zero_gradient_and_zero_lr():
    p0 = [np.array([1.5, -2.0])]
    state = AdamState([np.array([0.2, 0.1])], [np.array([0.04, 0.01])], 3)
    p, s = adam_step(p0, [np.zeros(2)], state, OptimConfig(lr=0.0))
    np.testing.assert_array_equal(p[0], p0[0])
    np.testing.assert_allclose(s.m[0], 0.9 * state.m[0])
    np.testing.assert_allclose(s.v[0], 0.99 * state.v[0])
    p, _ = adam_step(p0, [np.array([5.0, -1.0])], AdamState.zeros_like(p0), OptimConfig(lr=0.0))
    np.testing.assert_array_equal(p[0], p0[0])


def test_adam_rejects_non_finite_gradients():
    p = [np.zeros(2)]
    with pytest.raises(TrainingError):
        adam_step(p, [np.array([np.nan, 0.0])], AdamState.zeros_like(p), OptimConfig())


def test_adam_first_step_moves_by_lr():
    p, _ = adam_step([np.array([0.0])], [np.array([123.0])], AdamState.zeros_like([np.zeros(1)]),
                     OptimConfig(lr=0.01))
    assert p[0][0] == pytest.approx(-0.01, rel=1e-6)


# ------------------------------------------------------------------ configs


def test_experiment_config_json_round_trip():
    cfg = ExperimentConfig(name="x", bag_mode="baseline", angles=None,
                           loss=LossConfig(bag_reduce="alpha-quasimax", alpha=4.0),
                           optim=OptimConfig(lr=1e-3, iterations=5))
    back = ExperimentConfig.from_json(json.loads(json.dumps(cfg.to_json())))
    assert back == cfg


def test_experiment_config_overrides_and_validation():
    cfg = ExperimentConfig().with_overrides({"optim": {"lr": 0.5}, "loss": {"gamma": 0.0}})
    assert cfg.optim.lr == 0.5 and cfg.optim.beta2 == 0.99 and cfg.loss.gamma == 0.0
    with pytest.raises(ValueError):
        ExperimentConfig.from_json({"nmae": "typo"})
    with pytest.raises(ValueError):
        ExperimentConfig(supervision="points")
    with pytest.raises(ValueError):
        OptimConfig(beta1=1.0)


def test_default_optimizer_settings():
    o = OptimConfig()
    assert (o.lr, o.beta1, o.beta2) == (1e-4, 0.9, 0.99)


# ------------------------------------------------------------------ training


def test_loss_decreases_over_windows():
    spec = DatasetSpec(n_train=1, n_val=0, shapes=["disc"], seed=0)
    cfg = ExperimentConfig(bag_mode="baseline", angles=None, optim=OptimConfig(iterations=500))
    losses = train(generate(spec), cfg).log.losses()
    assert len(losses) == 500
    steps = np.diff(losses)
    assert np.mean(steps >= 0) <= 0.05
    for start in range(0, 400, 100):
        assert losses[start + 100] < losses[start]


def test_zero_iterations_return_initial_parameters(small_data):
    cfg = ExperimentConfig(model_kind="tiny-conv", optim=OptimConfig(iterations=0, seed=7))
    result = train(small_data, cfg)
    init = segmodel.init("tiny-conv", 7)
    for name in init.names():
        np.testing.assert_array_equal(result.models["*"].tensors[name].data, init.tensors[name].data)
    assert result.log.records == []


def test_training_is_deterministic(small_data):
    cfg = ExperimentConfig(model_kind="tiny-conv", optim=OptimConfig(iterations=6, lr=1e-2, batch_size=2))
    a, b = train(small_data, cfg), train(small_data, cfg, threads=3)
    for name in a.models["*"].names():
        np.testing.assert_array_equal(a.models["*"].tensors[name].data, b.models["*"].tensors[name].data)
    np.testing.assert_array_equal(a.log.losses(), b.log.losses())


def test_direct_logit_runs_are_bit_identical_with_threads(small_data):
    cfg = ExperimentConfig(loss=LossConfig(bag_reduce="alpha-softmax", alpha=6.0),
                           optim=OptimConfig(iterations=10, lr=1e-2))
    a, b = train(small_data, cfg), train(small_data, cfg, threads=2)
    for sid in a.models:
        np.testing.assert_array_equal(a.models[sid].tensors["logits"].data,
                                      b.models[sid].tensors["logits"].data)


def test_bag_cache_builds_once_per_sample_and_category(small_data):
    cache = BagCache()
    cfg = ExperimentConfig(optim=OptimConfig(iterations=4))
    train(small_data, cfg, cache=cache)
    assert cache.builds == len(small_data)
    assert cache.hits >= 4 * len(small_data)
    train(small_data, cfg, cache=cache)
    assert cache.builds == len(small_data)
    train(small_data, cfg.with_overrides({"bag_mode": "baseline"}), cache=cache)
    assert cache.builds == 2 * len(small_data)


def test_full_supervision_fits_masks(small_data):
    cfg = ExperimentConfig(supervision="full", optim=OptimConfig(iterations=50, lr=0.1))
    result = train(small_data[:1], cfg)
    pred = result.models[small_data[0].id].tensors["logits"].data > 0
    np.testing.assert_array_equal(pred, small_data[0].masks.astype(bool))


def test_samples_must_agree_on_categories(small_data):
    other = generate(DatasetSpec(n_train=1, n_val=0, n_categories=2, seed=1))
    with pytest.raises(ValueError):
        train([small_data[0], other[0]], ExperimentConfig(optim=OptimConfig(iterations=1)))


def test_training_samples_split_rules(small_data):
    assert len(training_samples(small_data, ExperimentConfig())) == 5
    assert len(training_samples(small_data, ExperimentConfig(model_kind="tiny-conv"))) == 3


def test_run_log_rules_and_csv():
    log = RunLog(2)
    log.append(1, 0.5, [0.1, 0.2], [0.01, 0.02], 0.0)
    with pytest.raises(ValueError):
        log.append(1, 0.4, [0.1, 0.2], [0.01, 0.02], 0.0)
    lines = log.to_csv().splitlines()
    assert lines[0] == "iteration,total_loss,unary_c1,pairwise_c1,unary_c2,pairwise_c2,wall_time"
    assert lines[1].startswith("1,0.5,0.1,0.01,0.2,0.02,")


def test_save_run_and_reload(tmp_path, small_data):
    cfg = ExperimentConfig(name="r", optim=OptimConfig(iterations=3))
    result = train(small_data, cfg)
    save_run(tmp_path, result, cfg)
    assert load_run_config(tmp_path) == cfg
    models = segmodel.load_checkpoint(tmp_path / "checkpoint.json")
    assert sorted(models) == sorted(s.id for s in small_data)
    assert (tmp_path / "runlog.csv").read_text().count("\n") == 4
    assert json.loads((tmp_path / "final.json").read_text())["iterations"] == 3
