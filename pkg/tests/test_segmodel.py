import json

import numpy as np
import pytest

from boxmil import ndgrad as nd
from boxmil import segmodel
from boxmil.segmodel import DIRECT_LOGIT, TINY_CONV, CheckpointError
from boxmil.selfcheck import gradient_error


def test_direct_logit_starts_at_zero():
    p = segmodel.init(DIRECT_LOGIT, seed=0, n_categories=2, image_shape=(5, 7))
    assert p.tensors["logits"].shape == (2, 5, 7)
    assert not p.tensors["logits"].data.any()
    np.testing.assert_array_equal(segmodel.forward(p, np.zeros((5, 7))).data, 0.5)


def test_direct_logit_checks_image_shape():
    p = segmodel.init(DIRECT_LOGIT, image_shape=(4, 4))
    with pytest.raises(nd.ShapeError):
        segmodel.forward(p, np.zeros((4, 5)))


def test_tiny_conv_zero_weights_give_half_everywhere():
    p = segmodel.init(TINY_CONV, seed=0, n_categories=3)
    for t in p.parameters():
        t.data[...] = 0.0
    out = segmodel.forward(p, np.random.default_rng(0).uniform(size=(6, 6))).data
    assert out.shape == (3, 6, 6)
    np.testing.assert_array_equal(out, 0.5)


def test_tiny_conv_layer_one_init_spread():
    # uniform(-s, s) has standard deviation s / sqrt(3); pool many seeds
    draws = np.concatenate([
        segmodel.init(TINY_CONV, seed=k).tensors["conv1.weight"].data.ravel() for k in range(140)
    ])
    assert draws.size >= 10_000
    s = np.sqrt(1.0 / 9.0)
    assert abs(draws.std() - s / np.sqrt(3.0)) < 0.1 * s / np.sqrt(3.0)
    assert np.abs(draws).max() <= s


def test_tiny_conv_init_is_seeded():
    a = segmodel.init(TINY_CONV, seed=3)
    b = segmodel.init(TINY_CONV, seed=3)
    c = segmodel.init(TINY_CONV, seed=4)
    for name in a.names():
        np.testing.assert_array_equal(a.tensors[name].data, b.tensors[name].data)
    assert not np.array_equal(a.tensors["conv1.weight"].data, c.tensors["conv1.weight"].data)


@pytest.mark.parametrize("name", ["conv1.weight", "conv2.bias", "conv3.weight"])
def test_tiny_conv_gradient_against_finite_differences(name):
    rng = np.random.default_rng(5)
    image = rng.uniform(size=(5, 5))
    weights = rng.uniform(-1, 1, size=(1, 5, 5))
    params = segmodel.init(TINY_CONV, seed=1)

    def build(t):
        params.tensors[name] = t
        return nd.sum(segmodel.forward(params, image) * weights)

    x = params.tensors[name].data.copy()
    assert gradient_error(build, x) < 1e-5


def test_unknown_kind():
    with pytest.raises(ValueError):
        segmodel.init("unet")


def test_checkpoint_round_trip(tmp_path):
    models = {segmodel.SHARED_KEY: segmodel.init(TINY_CONV, seed=2, n_categories=2)}
    path = tmp_path / "ck.json"
    segmodel.save_checkpoint(path, models)
    back = segmodel.load_checkpoint(path)
    for name in models["*"].names():
        np.testing.assert_array_equal(back["*"].tensors[name].data, models["*"].tensors[name].data)
    assert back["*"].n_categories == 2


def test_direct_logit_checkpoint_is_per_sample(tmp_path):
    a = segmodel.init(DIRECT_LOGIT, image_shape=(3, 3))
    a.tensors["logits"].data[0, 1, 1] = 0.1 + 1e-17
    models = {"val_0000": a}
    segmodel.save_checkpoint(tmp_path / "ck.json", models)
    back = segmodel.load_checkpoint(tmp_path / "ck.json")
    assert segmodel.model_for(back, "val_0000").tensors["logits"].data[0, 1, 1] == 0.1 + 1e-17
    with pytest.raises(CheckpointError):
        segmodel.model_for(back, "val_0001")


def test_corrupt_checkpoints_are_reported(tmp_path):
    with pytest.raises(CheckpointError, match="missing"):
        segmodel.load_checkpoint(tmp_path / "nope.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(CheckpointError, match="byte"):
        segmodel.load_checkpoint(bad)
    bad.write_text(json.dumps({"format": "other"}))
    with pytest.raises(CheckpointError):
        segmodel.load_checkpoint(bad)
    bad.write_text(json.dumps({"format": "boxmil-checkpoint", "version": 1, "kind": "direct-logit",
                               "models": {"a": [{"name": "logits", "shape": [2, 2], "data": [1.0]}]}}))
    with pytest.raises(CheckpointError, match="values for shape"):
        segmodel.load_checkpoint(bad)
