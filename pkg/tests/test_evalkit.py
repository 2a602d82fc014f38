import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from boxmil import segmodel
from boxmil.boxbags import BoxLabel, baseline_positive_bags, category_bags
from boxmil.evalkit import (
    EvalReport,
    bag_overlay,
    binarize,
    compare,
    decode_overlay,
    dice,
    dump_bags,
    evaluate,
    read_report,
    report_csv,
)
from boxmil.milloss import LossConfig
from boxmil.synthgen import DatasetSpec, Sample, generate, read_pgm
from boxmil.trainer import ExperimentConfig, OptimConfig, save_run, train

masks = st.integers(0, 2**16 - 1).map(
    lambda v: np.array([(v >> i) & 1 for i in range(16)], dtype=bool).reshape(4, 4))


def test_dice_hand_cases():
    a = np.zeros((4, 4), bool)
    a[0:2, 0:2] = True
    assert dice(a, a) == 1.0
    b = np.zeros((4, 4), bool)
    b[0:2, 1:3] = True
    assert dice(a, b) == 0.5
    c = np.zeros((4, 4), bool)
    c[3, 3] = True
    assert dice(a, c) == 0.0
    assert dice(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0


@settings(max_examples=100, deadline=None)
@given(masks, masks)
def test_dice_is_symmetric_and_bounded(a, b):
    assert dice(a, b) == dice(b, a)
    assert 0.0 <= dice(a, b) <= 1.0
    if a.any():
        assert dice(a, a) == 1.0


def test_dice_shape_mismatch():
    with pytest.raises(ValueError):
        dice(np.zeros((2, 2)), np.zeros((2, 3)))


def test_binarize_counts_match_scan():
    probs = np.random.default_rng(0).uniform(size=(7, 9))
    got = binarize(probs, 0.5)
    assert got.sum() == sum(1 for v in probs.ravel() if v >= 0.5)
    assert not binarize(np.zeros((3, 3))).any()


def test_report_statistics_and_csv():
    r = EvalReport("m", ["a", "b", "c"], np.array([[0.5], [0.7], [0.9]]))
    assert r.mean == pytest.approx(0.7)
    assert r.std == pytest.approx(0.2)
    text = report_csv([r], 0.5)
    assert text.splitlines()[0].startswith("# dice: 2D per-sample")
    assert text.splitlines()[1] == "method,mean_dice,std_dice,n_samples"


def test_report_csv_round_trip(tmp_path):
    r = EvalReport("m", ["a", "b"], np.array([[1.0, 0.5], [0.0, 0.5]]))
    (tmp_path / "report.csv").write_text(report_csv([r]))
    rows = read_report(tmp_path / "report.csv")
    assert rows == [{"method": "m", "mean_dice": 0.5, "std_dice": pytest.approx(0.353553, abs=1e-6),
                     "n_samples": 2}]


def test_single_method_single_sample_equals_dice():
    s = generate(DatasetSpec(n_train=0, n_val=1, seed=3))[0]
    params = segmodel.init("direct-logit", image_shape=s.shape)
    params.tensors["logits"].data[0] = np.where(s.masks[0], 5.0, -5.0)
    params.tensors["logits"].data[0, :, :3] = 5.0
    report = evaluate({s.id: params}, [s], "hand")
    pred = params.tensors["logits"].data[0] > 0
    assert report.mean == dice(pred, s.masks[0])
    assert report.std == 0.0


def test_compare_is_deterministic_and_reads_run_dirs(tmp_path):
    data = generate(DatasetSpec(n_train=2, n_val=2, height=24, width=24, size_range=(4.0, 7.0), seed=6))
    cfgs = [ExperimentConfig(name="base", bag_mode="baseline", angles=None,
                             optim=OptimConfig(iterations=30, lr=1e-2)),
            ExperimentConfig(name="gen", loss=LossConfig(bag_reduce="alpha-softmax", alpha=6.0),
                             optim=OptimConfig(iterations=30, lr=1e-2))]
    first = compare(cfgs, data)
    second = compare(cfgs, data)
    assert [r.method for r in first] == ["base", "gen"]
    assert report_csv(first) == report_csv(second)
    assert all(r.sample_ids == ["val_0000", "val_0001"] for r in first)

    val = [s for s in data if s.split == "val"]
    save_run(tmp_path / "run", train(val, cfgs[1]), cfgs[1])
    from_dir = compare([tmp_path / "run"], data)
    np.testing.assert_array_equal(from_dir[0].dice, first[1].dice)
    with pytest.raises(FileNotFoundError):
        compare([tmp_path / "missing"], data)


# ---------------------------------------------------------------- overlays


def test_zero_angle_overlay_of_three_by_four_box():
    box = BoxLabel(1, 1, 4, 3)  # 3 rows, 4 columns
    bags = baseline_positive_bags(box)
    assert len(bags) == 7
    parts = decode_overlay(bag_overlay((6, 7), [box], bags))
    # every box pixel lies on exactly one row line and one column line
    inside = np.zeros((6, 7), bool)
    inside[1:4, 1:5] = True
    assert parts["coverage"].sum() == sum(len(b) for b in bags) == 24
    np.testing.assert_array_equal(parts["coverage"][inside], 2)
    assert not parts["coverage"][~inside].any()
    assert parts["edge"].sum() == 10
    assert not parts["negative"].any()


def test_empty_bag_list_draws_only_the_box():
    box = BoxLabel(0, 0, 2, 2)
    parts = decode_overlay(bag_overlay((4, 4), [box], []))
    assert not parts["coverage"].any() and not parts["negative"].any()
    assert parts["edge"].sum() == 8


def test_overlay_marks_negatives_and_stays_in_bounds(tmp_path):
    s = generate(DatasetSpec(n_train=1, n_val=0, height=24, width=24, size_range=(4.0, 7.0)))[0]
    pos, neg = category_bags(s.boxes, 1, s.shape, "generalized", [-40.0, 0.0, 40.0])
    overlay = dump_bags(s, pos + neg, tmp_path / "o.pgm")
    back, maxval = read_pgm(tmp_path / "o.pgm")
    np.testing.assert_array_equal(back, overlay)
    assert back.shape == s.shape and maxval == 255
    parts = decode_overlay(back)
    assert parts["negative"].sum() == len(neg)


def test_overlay_caps_coverage():
    box = BoxLabel(0, 0, 0, 0)
    bags = baseline_positive_bags(box) * 50
    assert decode_overlay(bag_overlay((2, 2), [box], bags))["coverage"][0, 0] == 63


def test_evaluate_needs_samples():
    with pytest.raises(ValueError):
        evaluate({}, [])


def test_prediction_shape_mismatch():
    s = Sample("x", np.zeros((4, 4)), np.zeros((2, 4, 4), np.uint8), [])
    with pytest.raises(ValueError):
        evaluate({"x": segmodel.init("direct-logit", image_shape=(4, 4))}, [s])
