import numpy as np
import pytest

from nlab import evaluation as ev
from nlab.evaluation import Protocol, RunSummary
from nlab.nn_core import TwoHeadNetwork, softmax

from conftest import TINY


@pytest.fixture
def net():
    return TwoHeadNetwork.initialize(TINY, seed=2, dtype=np.float64)


def test_four_rotation_recomposition(net):
    x = np.random.default_rng(0).normal(size=(5, 8, 8, 3))
    got = ev.class_probabilities(net, x, Protocol.FOUR_ROTATION)
    ref = np.mean([softmax(net.forward(np.rot90(x, k, axes=(1, 2)))[0]) for k in range(4)], axis=0)
    np.testing.assert_allclose(got, ref, atol=1e-14)
    np.testing.assert_allclose(got.sum(axis=1), 1.0, atol=1e-9)


def test_constant_image_protocols_agree(net):
    x = np.full((3, 8, 8, 3), 0.7)
    x[1] = -0.2
    assert np.array_equal(ev.predict(net, x, "one_image"), ev.predict(net, x, "four_rotation"))


def test_constant_features_protocols_agree(net):
    net.params["fc.w"][...] = 0  # trunk output no longer depends on the input
    x = np.random.default_rng(1).normal(size=(6, 8, 8, 3))
    assert np.array_equal(ev.predict(net, x, "one_image"), ev.predict(net, x, "four_rotation"))


def test_single_image_returns_int(net):
    out = ev.predict(net, np.zeros((8, 8, 3)))
    assert isinstance(out, int)


def test_four_rotation_needs_square():
    net = TwoHeadNetwork.initialize(TINY.__class__(input_shape=(8, 4, 3), conv_channels=(4,), hidden=8))
    with pytest.raises(ValueError):
        ev.class_probabilities(net, np.zeros((1, 8, 4, 3)), Protocol.FOUR_ROTATION)


def test_accuracy_bounds_and_permutation(net):
    rng = np.random.default_rng(3)
    x = rng.normal(size=(40, 8, 8, 3))
    pred = ev.predict(net, x)
    assert ev.accuracy(net, x, pred) == 100.0
    y = rng.integers(0, 10, 40)
    perm = rng.permutation(40)
    assert ev.accuracy(net, x, y) == ev.accuracy(net, x[perm], y[perm])
    with pytest.raises(ValueError):
        ev.accuracy(net, x[:0], y[:0])


def test_accuracy_chance_level():
    class Coin:
        def __init__(self):
            self.arch = TINY
            self.rng = np.random.default_rng(0)

        def forward(self, x):
            return self.rng.normal(size=(len(x), 10)), None

    y = np.arange(20000) % 10
    acc = ev.accuracy(Coin(), np.zeros((20000, 8, 8, 3)), y)
    assert abs(acc - 10.0) < 1.0


def test_accuracies_share_pass(net):
    rng = np.random.default_rng(4)
    x, y = rng.normal(size=(30, 8, 8, 3)), rng.integers(0, 10, 30)
    both = ev.accuracies(net, x, y, list(Protocol), batch_size=7)
    for p in Protocol:
        assert both[p.value] == ev.accuracy(net, x, y, p)


# -- reports ----------------------------------------------------------------

def _rows(n):
    return [{"epoch": i, "train_loss": 1.0 / (i + 1), "val_acc_one_image": 50.0 + i,
             "lambda_epoch": i or None} for i in range(n)]


def test_single_baseline_table(tmp_path):
    s = RunSummary("baseline", "loss_only", best_val={"one_image": 61.5}, test_at_best={"one_image": 60.25})
    files = ev.build_report([(_rows(3), s)], tmp_path)
    table = ev.read_csv(files["table"])
    assert len(table) == 1
    assert table[0]["val_one_image"] == "61.500000" and table[0]["val_four_rotation"] == ""
    assert len(ev.read_csv(files["series_baseline"])) == 3


def test_duplicate_names_suffixed(tmp_path):
    s = RunSummary("reg", "hard")
    files = ev.build_report([(_rows(1), s), (_rows(2), s)], tmp_path)
    assert "series_reg" in files and "series_reg_2" in files
    assert [r["model"] for r in ev.read_csv(files["table"])] == ["reg", "reg_2"]


def test_report_round_trip(tmp_path):
    s = RunSummary("sep", "elastic", {"one_image": 40.0, "four_rotation": 41.5},
                   {"one_image": 39.0, "four_rotation": 40.125}, {"one_image": 38.0}, {"one_image": 3})
    a = ev.build_report([(_rows(4), s)], tmp_path / "a")
    ev.write_csv(tmp_path / "summary.csv", ev.SUMMARY_COLUMNS, [ev.summary_row(s)])
    s2 = ev.summary_from_row(ev.read_csv(tmp_path / "summary.csv")[0])
    assert s2 == s
    b = ev.build_report([(ev.load_series(a["series_sep"]), s2)], tmp_path / "b")
    for k in a:
        assert a[k].read_bytes() == b[k].read_bytes()


def test_empty_report_rejected(tmp_path):
    with pytest.raises(ValueError):
        ev.build_report([], tmp_path)
