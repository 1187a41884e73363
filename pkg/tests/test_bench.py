import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from meshclass.bench import (
    ASSUMED,
    TABLE_COLUMNS,
    RunConfig,
    TrainingDivergence,
    collect_runs,
    confusion_metrics,
    evaluate,
    format_table,
    mean_epoch_time,
    results_row,
    train,
)
from meshclass.models import build_model
from meshclass.synth import SynthSpec, generate_dataset


@pytest.fixture(scope="module")
def tiny():
    return generate_dataset(SynthSpec(subdivision=1, counts_per_class=(20, 20), seed=1))


def pointnet_config(**kw):
    return RunConfig.for_model("pointnet", widths=[8, 8], head=[8], **kw)


# --- metrics -------------------------------------------------------------------


def test_confusion_example():
    y_true = [1] * 6 + [0] * 4
    y_pred = [1, 1, 1, 1, 0, 0] + [1, 0, 0, 0]
    m = confusion_metrics(y_true, y_pred)
    assert (m.tp, m.fp, m.fn, m.tn) == (4, 1, 2, 3)
    assert m.accuracy == pytest.approx(0.7)
    assert m.precision == pytest.approx(0.8)
    assert m.recall == pytest.approx(2 / 3)


def test_all_correct_and_all_positive():
    y = np.array([0, 1] * 5)
    m = confusion_metrics(y, y)
    assert (m.accuracy, m.precision, m.recall) == (1.0, 1.0, 1.0)
    m = confusion_metrics(y, np.ones(10))
    assert (m.accuracy, m.precision, m.recall) == (0.5, 0.5, 1.0)


def test_no_predicted_positives():
    m = confusion_metrics([0, 1, 1], [0, 0, 0])
    assert m.precision == 0.0 and m.recall == 0.0


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=60))
def test_metric_identities(pairs):
    y_true, y_pred = map(np.array, zip(*pairs))
    m = confusion_metrics(y_true, y_pred)
    assert m.tp + m.fp + m.fn + m.tn == len(pairs)
    for v in (m.accuracy, m.precision, m.recall):
        assert 0.0 <= v <= 1.0
    assert m.accuracy == pytest.approx((y_true == y_pred).mean())
    if m.tp + m.fp:
        assert m.precision == m.tp / (m.tp + m.fp)


def test_empty_split_rejected(tiny):
    with pytest.raises(ValueError):
        confusion_metrics([], [])
    model = build_model(pointnet_config())
    with pytest.raises(ValueError):
        evaluate(model, [])


# --- config --------------------------------------------------------------------


def test_provenance_and_round_trip():
    config = RunConfig.for_model("come")
    d = config.to_dict()
    assert all(note.startswith(ASSUMED) for note in d["provenance"].values())
    assert "lr" in d["provenance"] and "widths" in d["provenance"]
    assert RunConfig.from_dict(json.loads(json.dumps(d))) == config


def test_unknown_keys_and_models():
    with pytest.raises(KeyError):
        RunConfig.from_dict({"model": "come", "learning_rate": 0.1})
    with pytest.raises(ValueError):
        RunConfig(model="resnet")


# --- training --------------------------------------------------------------------


def test_zero_epochs_is_chance(tiny):
    config = pointnet_config(epochs=0)
    _, history = train(build_model(config), tiny, config)
    assert len(history) == 1 and history[0]["epoch"] == 0
    for split in ("train", "test"):
        assert abs(history[0][split]["accuracy"] - 0.5) <= 0.15
    assert history[0]["loss"] is None


def test_training_is_deterministic(tiny):
    config = pointnet_config(epochs=3, lr=1e-2)
    runs = []
    for _ in range(2):
        _, h = train(build_model(config), tiny, config)
        for entry in h:
            entry["train"].pop("epoch_time")
            entry["test"].pop("epoch_time")
        runs.append(h)
    assert runs[0] == runs[1]
    assert len(runs[0]) == 3


def test_training_reduces_loss(tiny):
    config = pointnet_config(epochs=8, lr=1e-2)
    _, h = train(build_model(config), tiny, config)
    assert h[-1]["loss"] < h[0]["loss"]
    assert mean_epoch_time(h) > 0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_names_epoch(tiny):
    config = pointnet_config(epochs=3, lr=1e200)
    with pytest.raises(TrainingDivergence) as err:
        train(build_model(config), tiny, config)
    assert err.value.epoch >= 1 and f"epoch {err.value.epoch}" in str(err.value)


# --- reporting -------------------------------------------------------------------


def test_table_layout(tmp_path):
    for k, model in enumerate(("spiralnet", "pointnet", "come", "meshnet", "meshcnn")):
        run = tmp_path / model
        run.mkdir()
        final = confusion_metrics([0, 1, 1, 0], [0, 1, 0, 0], n_params=1000 * (k + 1)).to_dict()
        (run / "metrics.json").write_text(json.dumps({"model": model, "final": {"test": final}}))
    rows = collect_runs(tmp_path)
    assert [r["Method"] for r in rows] == ["PointNet", "MeshCNN", "MeshNet", "CoME", "SpiralNet++"]
    assert [r["Template"] for r in rows] == ["no", "no", "no", "yes", "yes"]
    assert rows[0] == {"Method": "PointNet", "Template": "no", "Acc": 75.0, "Prec": 1.0, "Rec": 0.5, "#Params": 2000}
    text = format_table(rows).splitlines()
    assert len(text) == 2 + 5
    for col in ("Method", "Template", "Acc", "Prec", "Rec", "#Params"):
        assert col in text[0]
    assert tuple(results_row("come", final)) == TABLE_COLUMNS
