import json

import numpy as np
import pytest

from shapereg.data import Dataset, DatasetManifest, SyntheticConfig, generate_synthetic
from shapereg.experiment import (
    ABLATION_HEADER,
    AblationRow,
    ExperimentConfig,
    RunReport,
    TrainingError,
    ablate,
    build_model,
    evaluate,
    load_run,
    median_curves,
    read_ablation,
    save_run,
    split_validation,
    summarize,
    train,
    write_ablation,
)
from shapereg.geometry import mean_shape
from shapereg.models import MeanShapeModel

TINY_GNN = {"feature_dim": 16, "attn_hidden": 8, "k_neighbors": 8, "pointnet_hidden": [16, 16]}
TINY_ENC = {"widths": [4, 8, 8, 8]}


def tiny_cfg(**kw):
    gnn = dict(TINY_GNN, input_dim=8)
    base = dict(model="pointnet", head="disp", epochs=2, encoder=TINY_ENC, gnn=gnn, decoder_channels=8, n_initial_shapes=2)
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def tiny_ds():
    return generate_synthetic(SyntheticConfig(n_train=8, n_test=3), seed=1)


def constant_dataset(n_train=4, n_test=3):
    """Every sample shares one ground-truth shape and a blank image."""
    base = generate_synthetic(SyntheticConfig(n_train=2, n_test=1), seed=2).shapes[0]
    n = n_train + n_test
    man = DatasetManifest(n, 64, base.spacing_mm, [(s, b - a) for s, a, b in base.structure_slices], list(range(n_train)), list(range(n_train, n)))
    return Dataset(man, [np.zeros((64, 64), np.uint8)] * n, [base] * n)


# -- configuration ----------------------------------------------------------
def test_config_round_trip_and_unknown_keys(tmp_path):
    cfg = tiny_cfg(head="heatmap")
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert ExperimentConfig.from_json(path) == cfg
    with pytest.raises(ValueError, match="colour"):
        ExperimentConfig.from_dict({"colour": "red"})
    with pytest.raises(ValueError, match="depth"):
        ExperimentConfig.from_dict({"gnn": {"depth": 3}})


@pytest.mark.parametrize(
    "bad", [{"lr": 0.0}, {"patience": 0}, {"n_initial_shapes": 0}, {"model": "unet"}, {"head": "pca"}, {"lambda_R": 2.0}]
)
def test_config_invariants(bad):
    with pytest.raises(ValueError):
        ExperimentConfig(**bad)


def test_split_validation_is_disjoint():
    fit, val = split_validation(list(range(160)), 0.1, np.random.default_rng(0))
    assert len(val) == 16 and len(fit) == 144 and not set(fit) & set(val)
    assert sorted(fit + val) == list(range(160))


# -- training ---------------------------------------------------------------
def test_training_is_deterministic(tiny_ds):
    cfg = tiny_cfg(model="point_transformer")
    _, a = train(cfg, tiny_ds)
    _, b = train(cfg, tiny_ds)
    assert a.to_dict() == b.to_dict()
    assert len(a.loss_history) == 2 and len(a.lr_history) == 2


@pytest.mark.parametrize("head", ["heatmap", "shape"])
def test_other_heads_train(tiny_ds, head):
    _, rep = train(tiny_cfg(head=head, epochs=1), tiny_ds)
    assert np.isfinite(rep.loss_history[0]) and 0 <= rep.average["dsc_mean"] <= 100


def test_pixel_baseline_trains(tiny_ds):
    _, rep = train(tiny_cfg(model="pixel_baseline", epochs=1), tiny_ds)
    assert rep.n_evaluations == 3 and np.isfinite(rep.loss_history[0])


def test_overfits_a_single_sample():
    ds = generate_synthetic(SyntheticConfig(n_train=2, n_test=1), seed=4)
    # half of two training samples is held out, leaving one to fit
    cfg = tiny_cfg(model="point_transformer", epochs=200, val_fraction=0.5, patience=1000)
    _, rep = train(cfg, ds)
    assert rep.loss_history[-1] < 0.05 * rep.loss_history[0]


def test_mean_shape_needs_no_training(tiny_ds):
    model, rep = train(ExperimentConfig(model="mean_shape"), tiny_ds)
    assert isinstance(model, MeanShapeModel) and rep.loss_history == []
    assert np.array_equal(model.points, mean_shape(tiny_ds.train_shapes).points)


def test_non_finite_loss_aborts(tiny_ds):
    with np.errstate(all="ignore"), pytest.raises(TrainingError, match=r"epoch \d+, sample \d+"):
        train(tiny_cfg(lr=1e300, epochs=3), tiny_ds)


# -- evaluation -------------------------------------------------------------
def test_mean_shape_on_constant_dataset_is_perfect():
    ds = constant_dataset()
    rep = evaluate(MeanShapeModel(mean_shape(ds.train_shapes).points), ds, 5)
    assert rep.average["dsc_mean"] == 100.0 and rep.average["asd_mean"] == 0.0
    assert all(s["dsc_mean"] == 100.0 for s in rep.structures.values())


def test_ground_truth_prediction_scores_100(tiny_ds):
    answers = {tiny_ds.pixels(i).tobytes(): tiny_ds.shapes[i].points for i in tiny_ds.manifest.test}

    class Oracle:
        kind = "oracle"

        def predict(self, pixels, init_points, rng):
            return answers[pixels.tobytes()]

    rep = evaluate(Oracle(), tiny_ds, 2)
    assert rep.average["dsc_mean"] == 100.0 and rep.average["asd_mean"] == 0.0


def test_mean_shape_ignores_initialization_count(tiny_ds):
    model = MeanShapeModel(mean_shape(tiny_ds.train_shapes).points)
    one, five = evaluate(model, tiny_ds, 1).average, evaluate(model, tiny_ds, 5).average
    assert one["dsc_mean"] == five["dsc_mean"] and one["asd_mean"] == five["asd_mean"]


def test_summary_average_is_landmark_weighted():
    slices = (("a", 0, 3), ("b", 3, 10))
    records = [{"a": (80.0, 1.0), "b": (90.0, 2.0)}, {"a": (60.0, 3.0), "b": (70.0, 1.0)}]
    rep = summarize(records, slices, "m")
    for key in ("dsc_mean", "asd_mean"):
        recomputed = sum(rep.structures[n][key] * rep.structures[n]["landmarks"] for n in ("a", "b")) / 10
        assert abs(rep.average[key] - recomputed) < 1e-12
    assert rep.average["dsc_mean"] == pytest.approx((3 * 80 + 7 * 90 + 3 * 60 + 7 * 70) / 20)


def test_report_json_excludes_wall_time(tmp_path):
    rep = RunReport("m", {}, {"dsc_mean": 1.0}, 1, wall_time=12.5)
    rep.write(tmp_path / "report.json")
    assert "wall_time" not in json.loads((tmp_path / "report.json").read_text())
    assert json.loads((tmp_path / "timing.json").read_text()) == {"wall_time": 12.5}


@pytest.mark.parametrize("model", ["pointnet", "pixel_baseline", "mean_shape"])
def test_saved_run_reloads_identically(tiny_ds, tmp_path, model):
    cfg = tiny_cfg(model=model, epochs=1, head="shape")
    trained, rep = train(cfg, tiny_ds)
    save_run(tmp_path, cfg, trained, rep)
    _, loaded = load_run(tmp_path / "weights.bin", tiny_ds)
    assert evaluate(loaded, tiny_ds, 2).to_dict() == evaluate(trained, tiny_ds, 2).to_dict()
    assert (tmp_path / "history.csv").read_text().startswith("epoch,train_loss,val_loss,lr")


# -- ablation ---------------------------------------------------------------
@pytest.fixture(scope="module")
def ablation_rows(tiny_ds):
    models = {
        "mean_shape": build_model(ExperimentConfig(model="mean_shape"), tiny_ds, np.random.default_rng(0)),
        "pointnet-disp": build_model(tiny_cfg(), tiny_ds, np.random.default_rng(0)),
        "pixel_baseline": build_model(tiny_cfg(model="pixel_baseline"), tiny_ds, np.random.default_rng(0)),
    }
    return models, ablate(models, tiny_ds, [0.0, 0.5, 1.0], seeds=[0, 1], n_initial_shapes=2)


def test_ablation_fraction_zero_matches_evaluate(tiny_ds, ablation_rows):
    models, rows = ablation_rows
    for r in rows:
        if r.fraction == 0.0:
            assert r.dsc_rel == 1.0
            assert r.dsc_abs == evaluate(models[r.model], tiny_ds, 2).average["dsc_mean"]


def test_ablation_mean_shape_curve_is_constant(ablation_rows):
    _, rows = ablation_rows
    curve = median_curves(rows)["mean_shape"]
    assert set(curve.values()) == {1.0}


def test_fully_masked_predictions_ignore_the_image(tiny_ds, ablation_rows):
    models, rows = ablation_rows
    model = models["pointnet-disp"]
    blank = np.zeros((1, 64, 64))
    init = tiny_ds.shapes[0].points
    a = model.predict(blank, init, np.random.default_rng(3))
    b = model.predict(blank.copy(), init, np.random.default_rng(3))
    assert np.array_equal(a, b)
    at_one = {r.seed: r.dsc_abs for r in rows if r.model == "pointnet-disp" and r.fraction == 1.0}
    assert len(set(at_one.values())) == 1  # every seed blanks the same way


def test_ablation_csv_round_trip(tmp_path, ablation_rows):
    _, rows = ablation_rows
    write_ablation(rows, tmp_path / "a.csv")
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == ",".join(ABLATION_HEADER)
    assert read_ablation(tmp_path / "a.csv") == rows


def test_median_curves():
    rows = [AblationRow("m", 0.5, s, 0.0, v, 0.0) for s, v in enumerate([0.2, 0.9, 0.4])]
    assert median_curves(rows) == {"m": {0.5: 0.4}}
