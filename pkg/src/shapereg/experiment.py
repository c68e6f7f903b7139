"""Training, five-initial-shape evaluation, and the occlusion ablation."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Dataset, ablation_fractions, corrupt_mask, load_dataset
from .encoder import EncoderConfig, positive_weights
from .geometry import asd, asd_mask, dice, mean_shape, pick_initial_shape, rasterize
from .gnn import GnnConfig
from .models import HEAD_KINDS, MODEL_KINDS, SHAPE_MODELS, MeanShapeModel, PixelBaseline, ShapeRegressor
from .optim import Adam, NonFiniteGradient, PlateauScheduler
from .serialize import load_weights, save_weights
from . import tensor as T

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def _nested(cls, value):
    if isinstance(value, cls):
        return value
    known = {f.name for f in fields(cls)}
    unknown = set(value) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**value)


@dataclass
class ExperimentConfig:
    model: str = "point_transformer"
    head: str = "disp"
    lr: float = 1e-3
    lr_factor: float = 0.1
    patience: int = 30
    epochs: int = 150
    lambda_R: float = 0.2
    sigma_offset: float | None = None
    seed: int = 0
    corruption_seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    n_initial_shapes: int = 5
    val_fraction: float = 0.1
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    gnn: GnnConfig = field(default_factory=GnnConfig)
    decoder_channels: int = 64
    dataset: str | None = None
    output: str | None = None

    def __post_init__(self):
        self.encoder = _nested(EncoderConfig, self.encoder)
        self.gnn = _nested(GnnConfig, self.gnn)
        self.corruption_seeds = [int(s) for s in self.corruption_seeds]
        if self.model not in MODEL_KINDS:
            raise ValueError(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        if self.head not in HEAD_KINDS:
            raise ValueError(f"head must be one of {HEAD_KINDS}, got {self.head!r}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.n_initial_shapes < 1:
            raise ValueError("n_initial_shapes must be >= 1")
        if not 0.0 <= self.lambda_R <= 1.0:
            raise ValueError("lambda_R must lie in [0, 1]")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")

    @property
    def label(self) -> str:
        if self.model in SHAPE_MODELS:
            return f"{self.model}-{self.head}"
        return self.model

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _nested(cls, d)

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"]["widths"] = list(d["encoder"]["widths"])
        d["gnn"]["pointnet_hidden"] = list(d["gnn"]["pointnet_hidden"])
        return d


@dataclass
class RunReport:
    model: str
    structures: dict[str, dict]
    average: dict
    n_evaluations: int
    loss_history: list[float] = field(default_factory=list)
    val_loss_history: list[float] = field(default_factory=list)
    lr_history: list[float] = field(default_factory=list)
    wall_time: float = 0.0

    def to_dict(self, include_timing: bool = False) -> dict:
        d = asdict(self)
        if not include_timing:
            d.pop("wall_time")
        return d

    def write(self, path: str | Path) -> None:
        """Write report.json; the wall time goes to a sibling timing.json so the report stays reproducible."""
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        (path.parent / "timing.json").write_text(json.dumps({"wall_time": self.wall_time}))

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        return cls(**d)


# -- model construction -----------------------------------------------------
def build_model(cfg: ExperimentConfig, dataset: Dataset, rng: np.random.Generator):
    man = dataset.manifest
    train_shapes = dataset.train_shapes
    if cfg.model == "mean_shape":
        return MeanShapeModel(mean_shape(train_shapes).points)
    if cfg.model == "pixel_baseline":
        pw = positive_weights([rasterize(s, man.image_size) for s in train_shapes])
        return PixelBaseline(man.image_size, len(man.structures), cfg.encoder, cfg.decoder_channels, rng, pw)
    dictionary = np.stack([s.points for s in train_shapes]) if cfg.head == "shape" else None
    return ShapeRegressor(
        cfg.model,
        cfg.head,
        man.image_size,
        man.slices,
        cfg.encoder,
        cfg.gnn,
        rng,
        dictionary=dictionary,
        sigma=cfg.sigma_offset,
        lambda_r=cfg.lambda_R,
    )


def model_state(model) -> dict[str, np.ndarray]:
    state = model.state_dict()
    state.update(model.extra_state())
    return state


def load_model(cfg: ExperimentConfig, dataset: Dataset, state: dict[str, np.ndarray]):
    if cfg.model == "mean_shape":
        return MeanShapeModel(state["mean_shape"])
    model = build_model(cfg, dataset, np.random.default_rng(cfg.seed))
    if isinstance(model, ShapeRegressor) and model.dictionary is not None:
        model.dictionary = np.asarray(state["head.dictionary"], dtype=np.float64)
    if isinstance(model, PixelBaseline):
        model.pos_weight = np.asarray(state["decoder.pos_weight"], dtype=np.float64)
    model.load_state_dict(state)
    return model


# -- training ---------------------------------------------------------------
def split_validation(train_idx: Sequence[int], fraction: float, rng: np.random.Generator):
    idx = np.asarray(train_idx)
    n_val = int(round(fraction * len(idx)))
    if fraction > 0:
        n_val = min(max(n_val, 1), len(idx) - 1)
    perm = rng.permutation(len(idx))
    return sorted(idx[perm[n_val:]].tolist()), sorted(idx[perm[:n_val]].tolist())


def _sample_loss(model, dataset: Dataset, i: int, init_points, rng, masks_cache):
    pixels = dataset.pixels(i)
    if isinstance(model, PixelBaseline):
        return model.loss(model.forward(pixels), masks_cache[i])
    pred, u = model.forward(pixels, init_points, rng)
    return model.loss(dataset.shapes[i].points, init_points, pred, u)


def train(cfg: ExperimentConfig, dataset: Dataset | None = None, progress: bool = False):
    """Train the configured model; returns (model, RunReport evaluated on the test split)."""
    if dataset is None:
        if cfg.dataset is None:
            raise ValueError("no dataset given")
        dataset = load_dataset(cfg.dataset)
    start = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    model = build_model(cfg, dataset, rng)
    if isinstance(model, MeanShapeModel):
        report = evaluate(model, dataset, cfg.n_initial_shapes, seed=cfg.seed)
        report.wall_time = time.perf_counter() - start
        return model, report

    man = dataset.manifest
    train_idx = list(man.train)
    position = {idx: k for k, idx in enumerate(train_idx)}
    train_shapes = dataset.train_shapes
    fit_idx, val_idx = split_validation(train_idx, cfg.val_fraction, rng)
    masks_cache = {}
    if isinstance(model, PixelBaseline):
        masks_cache = {i: rasterize(dataset.shapes[i], man.image_size) for i in train_idx}

    val_rng = np.random.default_rng([cfg.seed, 1])
    val_inits = {i: pick_initial_shape(train_shapes, val_rng, position[i]).points for i in val_idx}
    val_cloud_seed = int(val_rng.integers(2**32))

    names, params = zip(*model.named_parameters().items())
    opt = Adam(params, cfg.lr, names)
    sched = PlateauScheduler(cfg.patience, cfg.lr_factor)
    loss_hist, val_hist, lr_hist = [], [], []

    for epoch in range(cfg.epochs):
        total = 0.0
        for i in rng.permutation(fit_idx):
            i = int(i)
            init = pick_initial_shape(train_shapes, rng, position[i]).points
            loss = _sample_loss(model, dataset, i, init, rng, masks_cache)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, sample {i}")
            opt.zero_grad()
            loss.backward()
            try:
                opt.step()
            except NonFiniteGradient as exc:
                raise TrainingError(f"{exc} at epoch {epoch}, sample {i}") from exc
            total += value
        train_loss = total / len(fit_idx)
        val_loss = train_loss
        if val_idx:
            cloud_rng = np.random.default_rng(val_cloud_seed)
            with T.no_grad():
                val_loss = float(
                    np.mean([_sample_loss(model, dataset, i, val_inits[i], cloud_rng, masks_cache).item() for i in val_idx])
                )
        loss_hist.append(train_loss)
        val_hist.append(val_loss)
        lr_hist.append(opt.lr)
        if sched.step(val_loss):
            opt.lr *= cfg.lr_factor
        if progress:
            log.info("epoch %d  train %.4f  val %.4f  lr %.2e", epoch, train_loss, val_loss, opt.lr)

    report = evaluate(model, dataset, cfg.n_initial_shapes, seed=cfg.seed)
    report.loss_history = loss_hist
    report.val_loss_history = val_hist
    report.lr_history = lr_hist
    report.wall_time = time.perf_counter() - start
    return model, report


# -- evaluation -------------------------------------------------------------
def eval_rng(seed: int, image: int, trial: int) -> np.random.Generator:
    return np.random.default_rng([seed, 7919, image, trial])


def predict_structures(model, dataset: Dataset, i: int, pixels: np.ndarray, init_points, rng):
    """Return per-structure (dsc %, asd mm) for one prediction."""
    gt = dataset.shapes[i]
    size = dataset.manifest.image_size
    gt_masks = rasterize(gt, size)
    out = {}
    if isinstance(model, PixelBaseline):
        masks = model.predict_masks(pixels)
        for k, name in enumerate(gt.names):
            out[name] = (100.0 * dice(masks[k], gt_masks[k]), asd_mask(masks[k], gt, name))
        return out
    pred = gt.with_points(model.predict(pixels, init_points, rng))
    pred_masks = rasterize(pred, size)
    for k, name in enumerate(gt.names):
        out[name] = (100.0 * dice(pred_masks[k], gt_masks[k]), asd(pred, gt, name))
    return out


def summarize(records: list[dict], slices, model_label: str) -> RunReport:
    counts = {name: b - a for name, a, b in slices}
    weights = np.array([counts[n] for n in counts], dtype=np.float64)
    structures = {}
    dsc = np.array([[r[n][0] for n in counts] for r in records])
    dist = np.array([[r[n][1] for n in counts] for r in records])
    for k, name in enumerate(counts):
        structures[name] = {
            "landmarks": counts[name],
            "dsc_mean": float(dsc[:, k].mean()),
            "dsc_sd": float(dsc[:, k].std()),
            "asd_mean": float(dist[:, k].mean()),
            "asd_sd": float(dist[:, k].std()),
        }
    avg_dsc = dsc @ weights / weights.sum()
    avg_asd = dist @ weights / weights.sum()
    average = {
        "landmarks": int(weights.sum()),
        "dsc_mean": float(avg_dsc.mean()),
        "dsc_sd": float(avg_dsc.std()),
        "asd_mean": float(avg_asd.mean()),
        "asd_sd": float(avg_asd.std()),
    }
    return RunReport(model=model_label, structures=structures, average=average, n_evaluations=len(records))


def _trial_mean(values: Sequence[float]) -> float:
    """Mean taken relative to the first value, so identical trials reproduce it exactly."""
    v = np.asarray(values, dtype=np.float64)
    return float(v[0] + np.mean(v - v[0]))


def model_label(model) -> str:
    if isinstance(model, ShapeRegressor):
        return f"{model.kind}-{model.head_kind}"
    return model.kind


def evaluate(
    model,
    dataset: Dataset,
    n_initial_shapes: int = 5,
    seed: int = 0,
    images: dict[int, np.ndarray] | None = None,
) -> RunReport:
    """DSC/ASD over test images, each averaged over ``n_initial_shapes`` random initial shapes.

    Means and standard deviations are taken across images. ``images``
    optionally replaces test pixels (1×H×W floats) by index.
    """
    man = dataset.manifest
    train_shapes = dataset.train_shapes
    records, n_pred = [], 0
    for i in man.test:
        pixels = images[i] if images is not None and i in images else dataset.pixels(i)
        trials = 1 if isinstance(model, PixelBaseline) else n_initial_shapes
        per_trial = []
        for j in range(trials):
            rng = eval_rng(seed, i, j)
            init = pick_initial_shape(train_shapes, rng).points
            per_trial.append(predict_structures(model, dataset, i, pixels, init, rng))
        records.append({name: tuple(_trial_mean([t[name][q] for t in per_trial]) for q in (0, 1)) for name in per_trial[0]})
        n_pred += trials
    report = summarize(records, man.slices, model_label(model))
    report.n_evaluations = n_pred
    return report


# -- ablation ---------------------------------------------------------------
@dataclass
class AblationRow:
    model: str
    fraction: float
    seed: int
    dsc_abs: float
    dsc_rel: float
    asd_mm: float


ABLATION_HEADER = ["model", "fraction", "seed", "dsc_abs", "dsc_rel", "asd_mm"]


def corrupted_test_images(dataset: Dataset, fraction: float, seed: int) -> dict[int, np.ndarray]:
    rng = np.random.default_rng([seed, int(round(fraction * 1000))])
    return {i: corrupt_mask(dataset.pixels(i), fraction, rng) for i in dataset.manifest.test}


def ablate(
    models: dict[str, object],
    dataset: Dataset,
    fractions: Sequence[float] | None = None,
    seeds: Sequence[int] = (0, 1, 2),
    n_initial_shapes: int = 5,
    eval_seed: int = 0,
) -> list[AblationRow]:
    """Evaluate every model on occluded test images for each fraction and corruption seed."""
    fractions = ablation_fractions() if fractions is None else list(fractions)
    rows: list[AblationRow] = []
    for seed in seeds:
        baseline: dict[str, float] = {}
        for fraction in fractions:
            images = corrupted_test_images(dataset, fraction, seed)
            for name, model in models.items():
                rep = evaluate(model, dataset, n_initial_shapes, eval_seed, images)
                dsc = rep.average["dsc_mean"]
                if name not in baseline:
                    baseline[name] = dsc if fraction == 0.0 else evaluate(model, dataset, n_initial_shapes, eval_seed).average["dsc_mean"]
                ref = baseline[name]
                rel = dsc / ref if ref > 0 else 0.0
                rows.append(AblationRow(name, float(fraction), int(seed), dsc, rel, rep.average["asd_mean"]))
    return rows


def median_curves(rows: Sequence[AblationRow], key: str = "dsc_rel") -> dict[str, dict[float, float]]:
    """Median over corruption seeds, per model and fraction."""
    grouped: dict[str, dict[float, list[float]]] = {}
    for r in rows:
        grouped.setdefault(r.model, {}).setdefault(r.fraction, []).append(getattr(r, key))
    return {m: {f: float(np.median(v)) for f, v in sorted(fs.items())} for m, fs in grouped.items()}


def write_ablation(rows: Sequence[AblationRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ABLATION_HEADER)
        for r in rows:
            writer.writerow([r.model, repr(r.fraction), r.seed, repr(r.dsc_abs), repr(r.dsc_rel), repr(r.asd_mm)])


def read_ablation(path: str | Path) -> list[AblationRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ABLATION_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        return [AblationRow(m, float(f), int(s), float(a), float(r), float(d)) for m, f, s, a, r, d in reader]


# -- run directories --------------------------------------------------------
def write_history(path: str | Path, report: RunReport) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for e, (a, b, c) in enumerate(zip(report.loss_history, report.val_loss_history, report.lr_history)):
            writer.writerow([e, repr(a), repr(b), repr(c)])


def save_run(out_dir: str | Path, cfg: ExperimentConfig, model, report: RunReport) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    save_weights(out / "weights.bin", model_state(model))
    report.write(out / "report.json")
    write_history(out / "history.csv", report)


def load_run(weights_path: str | Path, dataset: Dataset):
    """Rebuild a model from ``weights.bin`` and the ``config.json`` beside it."""
    weights_path = Path(weights_path)
    cfg = ExperimentConfig.from_json(weights_path.parent / "config.json")
    return cfg, load_model(cfg, dataset, load_weights(weights_path))
