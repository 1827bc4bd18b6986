"""Synthetic size-stratified task, training loop, factor sweeps, and the
correlation analysis over sweep results.

The task is a desk-scale stand-in for size-stratified detection metrics:
each image carries one colored shape (shape type = class) whose area falls
in a small/medium/large band, on a structured noise background.  Accuracy
is reported per band, and factor sweeps correlate a swept architecture
factor against small-object accuracy.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from . import tensor as T
from .backbone import Model, ModelConfig, build_variant, count_params, forward

__all__ = [
    "TaskConfig",
    "SyntheticTask",
    "TrainConfig",
    "TrainResult",
    "SweepRecord",
    "SweepAborted",
    "Metrics",
    "DepthCorrelations",
    "FACTORS",
    "gen_synthetic",
    "stratified_metrics",
    "evaluate",
    "train",
    "run_sweep",
    "pearson",
    "depth_correlation_report",
    "gradient_check",
]

FACTORS = ("CL", "TB", "NT", "delta")

_BAND_NAMES = ("small", "medium", "large")


@dataclass(frozen=True)
class TaskConfig:
    """Synthetic dataset shape: bands are area fractions of the image.

    Shapes in band 0 occupy up to band_fractions[0] of the image area,
    band 1 up to band_fractions[1], band 2 anything above that.
    """

    image_size: int = 32
    num_classes: int = 3
    num_samples: int = 2000
    band_fractions: tuple[float, float] = (0.02, 0.10)


@dataclass(frozen=True)
class SyntheticTask:
    config: TaskConfig
    seed: int
    images: np.ndarray   # [n, 3, H, W] float64 in [0, 1]
    labels: np.ndarray   # [n] ints in [0, num_classes)
    bands: np.ndarray    # [n] ints: 0 small, 1 medium, 2 large


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adamw"
    learning_rate: float = 2e-3
    weight_decay: float = 1e-4
    steps: int = 500
    batch: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adamw"):
            raise ValueError(
                f"optimizer must be 'sgd' or 'adamw', got {self.optimizer!r}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.steps < 1 or self.batch < 1:
            raise ValueError("steps and batch must be at least 1")


class Metrics(NamedTuple):
    """Stratified accuracy; band accuracies are None when the band is
    empty, ratio is None when small-band accuracy is missing or zero."""

    acc_total: float
    acc_small: Optional[float]
    acc_medium: Optional[float]
    acc_large: Optional[float]
    ratio: Optional[float]


@dataclass
class TrainResult:
    losses: list[float]
    evals: list[tuple[int, Metrics]]
    final_metrics: Optional[Metrics]
    aborted: bool


@dataclass(frozen=True)
class SweepRecord:
    factor: str
    value: float
    param_count: int
    final_loss: float
    acc_total: float
    acc_small: Optional[float]
    acc_medium: Optional[float]
    acc_large: Optional[float]
    ratio: Optional[float]


class SweepAborted(RuntimeError):
    """A sweep point failed; completed records are preserved on the
    exception."""

    def __init__(self, records: list[SweepRecord], cause: BaseException):
        super().__init__(f"sweep aborted after {len(records)} points: {cause}")
        self.records = records
        self.cause = cause


# ---------------------------------------------------------------------------
# synthetic task


def _draw_square(img: np.ndarray, rng, area: float, color: np.ndarray):
    h, w = img.shape[1:]
    side = max(2, int(round(math.sqrt(area))))
    side = min(side, h - 2)
    r = int(rng.integers(1, h - side))
    c = int(rng.integers(1, w - side))
    img[:, r:r + side, c:c + side] = color[:, None, None]


def _draw_disk(img: np.ndarray, rng, area: float, color: np.ndarray):
    h, w = img.shape[1:]
    rad = max(1.2, math.sqrt(area / math.pi))
    rad = min(rad, (h - 3) / 2)
    lo, hi = int(math.ceil(rad)) + 1, h - int(math.ceil(rad)) - 1
    cy = int(rng.integers(lo, hi + 1))
    cx = int(rng.integers(lo, hi + 1))
    yy, xx = np.mgrid[0:h, 0:w]
    mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= rad * rad
    img[:, mask] = color[:, None]


def _draw_cross(img: np.ndarray, rng, area: float, color: np.ndarray):
    h, w = img.shape[1:]
    bar = max(1, int(round(math.sqrt(area / 5.0))))
    span = max(bar * 2 + 1, int(round((area + bar * bar) / (2 * bar))))
    span = min(span, h - 2)
    r = int(rng.integers(1, h - span))
    c = int(rng.integers(1, w - span))
    mid_r = r + (span - bar) // 2
    mid_c = c + (span - bar) // 2
    img[:, mid_r:mid_r + bar, c:c + span] = color[:, None, None]
    img[:, r:r + span, mid_c:mid_c + bar] = color[:, None, None]


_SHAPES: tuple[Callable, ...] = (_draw_square, _draw_disk, _draw_cross)


def gen_synthetic(config: TaskConfig, seed: int) -> SyntheticTask:
    """Deterministic dataset: one bright shape per image on structured
    noise; band = shape area bracket.

    Class k draws shape type k in a class-keyed color (its dominant
    channel is channel k), so both a spatial cue and a spectral cue point
    at the label; the band split is what stratifies difficulty.
    """
    hs = config.image_size
    if hs < 16:
        raise ValueError(f"image_size must be at least 16, got {hs}")
    if not 0 < config.band_fractions[0] < config.band_fractions[1] < 1:
        raise ValueError(
            f"band fractions must be increasing in (0, 1), got "
            f"{config.band_fractions}")
    if config.band_fractions[1] > 0.5:
        raise ValueError(
            "medium band bound above half the image area leaves no room "
            "for the large band")
    if not 1 <= config.num_classes <= len(_SHAPES):
        raise ValueError(
            f"num_classes must be in [1, {len(_SHAPES)}], got "
            f"{config.num_classes}")
    n = config.num_samples
    rng = np.random.default_rng(seed)

    labels = np.tile(np.arange(config.num_classes),
                     n // config.num_classes + 1)[:n].copy()
    rng.shuffle(labels)
    bands = np.tile(np.arange(3), n // 3 + 1)[:n].copy()
    rng.shuffle(bands)

    area_total = hs * hs
    f_small, f_med = config.band_fractions
    band_ranges = ((0.4 * f_small, f_small), (f_small * 1.05, f_med),
                   (f_med * 1.05, min(2.2 * f_med, 0.5)))

    yy, xx = np.mgrid[0:hs, 0:hs] / hs
    images = np.zeros((n, 3, hs, hs))
    for i in range(n):
        img = images[i]
        for ch in range(3):
            fx, fy = rng.uniform(1.0, 4.0, 2)
            phase = rng.uniform(0.0, 2 * math.pi)
            img[ch] = 0.18 + 0.12 * np.sin(2 * math.pi * (fx * xx + fy * yy)
                                           + phase)
        img += rng.normal(0.0, 0.03, (3, hs, hs))
        np.clip(img, 0.0, 0.45, out=img)

        lo, hi = band_ranges[bands[i]]
        area = rng.uniform(lo, hi) * area_total
        color = rng.uniform(0.02, 0.22, 3)
        color[labels[i]] = rng.uniform(0.7, 1.0)
        _SHAPES[labels[i]](img, rng, area, color)
    return SyntheticTask(config=config, seed=seed, images=images,
                         labels=labels, bands=bands)


# ---------------------------------------------------------------------------
# metrics


def stratified_metrics(predictions: np.ndarray, labels: np.ndarray,
                       bands: np.ndarray) -> Metrics:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    bands = np.asarray(bands)
    if not (predictions.shape == labels.shape == bands.shape):
        raise ValueError(
            f"predictions, labels, and bands must align, got shapes "
            f"{predictions.shape}, {labels.shape}, {bands.shape}")
    if predictions.size == 0:
        raise ValueError("cannot compute metrics on an empty batch")
    hit = predictions == labels
    acc_total = float(hit.mean())
    per_band: list[Optional[float]] = []
    for b in range(3):
        mask = bands == b
        per_band.append(float(hit[mask].mean()) if mask.any() else None)
    acc_small = per_band[0]
    ratio = None
    if acc_small:  # missing or exactly zero both leave it undefined
        ratio = acc_total / acc_small
    return Metrics(acc_total, per_band[0], per_band[1], per_band[2], ratio)


def predict(model: Model, images: np.ndarray, batch: int = 64) -> np.ndarray:
    """Class predictions in evaluation chunks."""
    outs = []
    for start in range(0, images.shape[0], batch):
        _, logits = forward(model, images[start:start + batch])
        outs.append(np.argmax(logits.data, axis=1))
    return np.concatenate(outs)


def evaluate(model: Model, task: SyntheticTask) -> Metrics:
    return stratified_metrics(predict(model, task.images), task.labels,
                              task.bands)


# ---------------------------------------------------------------------------
# training


class _AdamW:
    """Decoupled weight decay variant of Adam."""

    def __init__(self, lr, wd, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.wd = lr, wd
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray],
             grads: dict[str, np.ndarray]):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for path, p in params.items():
            g = grads[path]
            m = self.m.setdefault(path, np.zeros_like(p))
            v = self.v.setdefault(path, np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            p -= self.lr * update + self.lr * self.wd * p


class _Sgd:
    """Plain gradient descent with L2 regularization folded in."""

    def __init__(self, lr, wd):
        self.lr, self.wd = lr, wd

    def step(self, params, grads):
        for path, p in params.items():
            p -= self.lr * (grads[path] + self.wd * p)


def _make_optimizer(tc: TrainConfig):
    if tc.optimizer == "adamw":
        return _AdamW(tc.learning_rate, tc.weight_decay)
    return _Sgd(tc.learning_rate, tc.weight_decay)


def train(model: Model, task: SyntheticTask, tc: TrainConfig, *,
          eval_every: int = 0, eval_task: Optional[SyntheticTask] = None,
          stop_at_accuracy: Optional[float] = None,
          checkpoint_path: Optional[str] = None) -> TrainResult:
    """Minibatch training on the synthetic task.

    A non-finite loss aborts before the update is applied, keeping the last
    finite parameter state (saved to checkpoint_path when given).  eval_every
    > 0 evaluates periodically on eval_task (default: the training task);
    stop_at_accuracy ends early once a periodic eval reaches it.
    """
    if model.config.num_classes < task.config.num_classes:
        raise ValueError(
            f"model head has {model.config.num_classes} classes but the "
            f"task needs {task.config.num_classes}")
    rng = np.random.default_rng(tc.seed)
    opt = _make_optimizer(tc)
    target = eval_task if eval_task is not None else task
    losses: list[float] = []
    evals: list[tuple[int, Metrics]] = []
    aborted = False

    for step in range(tc.steps):
        idx = rng.integers(0, task.images.shape[0], tc.batch)
        rec = T.DiffRecord()
        _, logits = forward(model, task.images[idx], record=rec)
        loss = T.cross_entropy(logits, task.labels[idx])
        value = loss.item()
        if not math.isfinite(value):
            aborted = True
            break
        losses.append(value)
        grads = rec.backward(loss)
        opt.step(model.params, {p: g.data for p, g in grads.items()})

        if eval_every and (step + 1) % eval_every == 0:
            m = evaluate(model, target)
            evals.append((step + 1, m))
            if stop_at_accuracy is not None and m.acc_total >= stop_at_accuracy:
                break

    final = evaluate(model, target) if not aborted else None
    if checkpoint_path is not None:
        from .fileio import save_checkpoint
        save_checkpoint(model, checkpoint_path)
    return TrainResult(losses=losses, evals=evals, final_metrics=final,
                       aborted=aborted)


# ---------------------------------------------------------------------------
# sweeps


def _apply_factor(cfg: ModelConfig, factor: str, value: float) -> ModelConfig:
    if factor == "CL":
        v = int(value)
        return dataclasses.replace(cfg, cnn_layers=(v,) * 4)
    if factor == "TB":
        v = int(value)
        return dataclasses.replace(cfg, transformer_blocks=(v,) * 4)
    if factor == "NT":
        return dataclasses.replace(cfg, image_size=int(value))
    if factor == "delta":
        return dataclasses.replace(cfg, delta=float(value))
    raise ValueError(f"unknown sweep factor {factor!r}; valid: "
                     + ", ".join(FACTORS))


def run_sweep(factor: str, values: Sequence[float], model_cfg: ModelConfig,
              task_cfg: TaskConfig, train_cfg: TrainConfig
              ) -> list[SweepRecord]:
    """Train one model per factor value; evaluation uses a freshly seeded
    task (seed+1) so reported accuracy is out-of-sample.

    Raises SweepAborted, carrying the completed records, if a point fails.
    """
    if factor not in FACTORS:
        raise ValueError(f"unknown sweep factor {factor!r}; valid: "
                         + ", ".join(FACTORS))
    records: list[SweepRecord] = []
    for value in sorted(values):
        try:
            cfg = _apply_factor(model_cfg, factor, value)
            point_task = dataclasses.replace(
                task_cfg, image_size=cfg.image_size,
                num_classes=min(task_cfg.num_classes, cfg.num_classes))
            model = build_variant(cfg, seed=train_cfg.seed)
            task = gen_synthetic(point_task, train_cfg.seed)
            result = train(model, task, train_cfg)
            if result.aborted or not result.losses:
                raise RuntimeError(
                    f"training diverged at {factor}={value}")
            heldout = gen_synthetic(point_task, train_cfg.seed + 1)
            m = evaluate(model, heldout)
            records.append(SweepRecord(
                factor=factor, value=float(value),
                param_count=count_params(model),
                final_loss=result.losses[-1], acc_total=m.acc_total,
                acc_small=m.acc_small, acc_medium=m.acc_medium,
                acc_large=m.acc_large, ratio=m.ratio))
        except SweepAborted:
            raise
        except Exception as exc:
            raise SweepAborted(records, exc) from exc
    return records


# ---------------------------------------------------------------------------
# correlation


def pearson(xs: Sequence[float], ys: Sequence[float]) -> Optional[float]:
    """Sample Pearson coefficient; None when either side has zero
    variance."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1 or xs.size < 2:
        raise ValueError(
            f"need two equal-length vectors of at least 2 points, got "
            f"shapes {xs.shape} and {ys.shape}")
    mx, my = xs.mean(), ys.mean()
    dx, dy = xs - mx, ys - my
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        return None
    return float((dx @ dy) / math.sqrt(sxx * syy))


@dataclass(frozen=True)
class DepthCorrelations:
    """Per-seed correlations of a factor against small-object accuracy."""

    cl_rhos: tuple[Optional[float], ...]
    tb_rhos: tuple[Optional[float], ...]
    cl_median: Optional[float]
    tb_median: Optional[float]


def _median(values: Sequence[Optional[float]]) -> Optional[float]:
    usable = sorted(v for v in values if v is not None)
    if not usable:
        return None
    mid = len(usable) // 2
    if len(usable) % 2:
        return usable[mid]
    return 0.5 * (usable[mid - 1] + usable[mid])


def depth_correlation_report(
        model_cfg: ModelConfig, task_cfg: TaskConfig,
        train_cfg: TrainConfig, seeds: Sequence[int],
        cl_values: Sequence[int] = (1, 2, 3),
        tb_values: Sequence[int] = (1, 2, 3)) -> DepthCorrelations:
    """Correlate conv-layer and block counts against small-object accuracy
    across seeds.  Expensive: trains one model per (seed, factor, value)."""
    cl_rhos: list[Optional[float]] = []
    tb_rhos: list[Optional[float]] = []
    for seed in seeds:
        tc = dataclasses.replace(train_cfg, seed=int(seed))
        for factor, values, sink in (("CL", cl_values, cl_rhos),
                                     ("TB", tb_values, tb_rhos)):
            records = run_sweep(factor, values, model_cfg, task_cfg, tc)
            xs = [r.value for r in records]
            ys = [r.acc_small if r.acc_small is not None else 0.0
                  for r in records]
            sink.append(pearson(xs, ys))
    return DepthCorrelations(cl_rhos=tuple(cl_rhos), tb_rhos=tuple(tb_rhos),
                      cl_median=_median(cl_rhos), tb_median=_median(tb_rhos))


# ---------------------------------------------------------------------------
# gradient checking


@dataclass(frozen=True)
class GradCheckResult:
    worst_rel_err: float
    checked: int
    worst_path: str


def gradient_check(model: Model, samples: int = 120, seed: int = 0,
                   batch: int = 2, h: float = 1e-5) -> GradCheckResult:
    """Compare analytic gradients against central differences at randomly
    sampled parameter coordinates, on a fixed random batch."""
    rng = np.random.default_rng(seed)
    images = rng.standard_normal((batch, 3, model.config.image_size,
                                  model.config.image_size))
    labels = rng.integers(0, model.config.num_classes, batch)

    rec = T.DiffRecord()
    _, logits = forward(model, images, record=rec)
    grads = rec.backward(T.cross_entropy(logits, labels))

    sizes = {path: arr.size for path, arr in model.params.items()}
    total = sum(sizes.values())
    picks = rng.choice(total, size=min(samples, total), replace=False)

    def locate(flat: int) -> tuple[str, tuple]:
        for path, size in sizes.items():
            if flat < size:
                return path, np.unravel_index(flat, model.params[path].shape)
            flat -= size
        raise AssertionError("offset out of range")

    def loss_at() -> float:
        _, lg = forward(model, images)
        return T.cross_entropy(lg, labels).item()

    worst, worst_path = 0.0, ""
    for flat in sorted(int(v) for v in picks):
        path, idx = locate(flat)
        arr = model.params[path]
        keep = arr[idx]
        arr[idx] = keep + h
        up = loss_at()
        arr[idx] = keep - h
        down = loss_at()
        arr[idx] = keep
        numeric = (up - down) / (2 * h)
        analytic = float(grads[path].data[idx])
        err = abs(analytic - numeric) / max(abs(analytic) + abs(numeric),
                                            1e-6)
        if err > worst:
            worst, worst_path = err, path
    return GradCheckResult(worst_rel_err=worst, checked=len(picks),
                           worst_path=worst_path)
