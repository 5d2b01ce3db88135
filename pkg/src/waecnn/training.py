"""Initialization, SGD with momentum, augmentation, and the staged schedule.

Training happens in three stages: (1) the auto-encoder alone under the
transform loss, (2) the classifier under cross-entropy with the encoder
frozen, (3) joint fine-tuning of everything under classification loss plus a
small multiple of the transform loss.  The same epoch loop also trains the
reference baselines through their pipeline objects.

Desk-scale defaults target 32x32 datasets on a CPU; the original
ImageNet-scale hyperparameters remain available as the "paper-imagenet"
preset.  With a fixed seed in deterministic mode, metrics logs and final
parameters are reproducible run to run.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, fields, replace

import numpy as np

from .baselines import downsample_bilinear
from .classifier import TwoStreamPipeline, predict_topk
from .tensor_core import xavier_init  # noqa: F401  (initialization surface)
from .wae import WaeFrontend, WaeParams, wae_backward

METRICS_HEADER = "epoch,stage,lr,l_r,l_e,l_t,L_c,top1,top5"


class TrainingDiverged(RuntimeError):
    """Raised when a loss stops being finite; carries the offending epoch."""

    def __init__(self, epoch: int, message: str):
        super().__init__(message)
        self.epoch = epoch


# ---------------------------------------------------------------------------
# SGD with momentum and weight decay


def sgd_update(param, grad, velocity, lr, momentum, weight_decay):
    """v <- momentum*v + grad + wd*param; param <- param - lr*v (in place)."""
    if grad.shape != param.shape or velocity.shape != param.shape:
        raise ValueError(
            f"shape mismatch: param {param.shape}, grad {grad.shape}, "
            f"velocity {velocity.shape}"
        )
    velocity *= momentum
    velocity += grad
    if weight_decay:
        velocity += weight_decay * param
    param -= lr * velocity
    return param, velocity


class SgdState:
    """One zero-initialized velocity buffer per named parameter."""

    def __init__(self, params: dict[str, np.ndarray]):
        self.velocities = {k: np.zeros_like(v) for k, v in params.items()}

    def apply(self, params, grads, lr, momentum, weight_decay):
        for name, param in params.items():
            sgd_update(
                param, grads[name], self.velocities[name], lr, momentum,
                weight_decay,
            )


# ---------------------------------------------------------------------------
# Configuration


@dataclass
class TrainConfig:
    """Hyperparameters for one training stage.

    Desk-scale defaults; `preset(stage, "paper-imagenet")` restores the
    original large-scale values (stage 1: lr 1e-6, batch 4; stage 2: lr 0.01,
    batch 256; stage 3: lr 1e-4; momentum 0.9, weight decay 5e-4 throughout).
    """

    stage: int = 1
    lr: float = 1e-4
    lr_decay_factor: float = 10.0
    lr_decay_epochs: tuple[int, ...] = ()
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lam: float = 1.0
    gamma: float = 0.001
    epochs: int = 5
    seed: int = 0
    base_resize: int = 40
    crop_size: int = 32
    augment: bool = True
    plateau_decay: bool = False
    plateau_min_delta: float = 0.001  # top-1 error improvement, fraction
    plateau_patience: int = 3
    plateau_max_decays: int = 2
    train_subset: int = 0  # 0 keeps the whole split (file order)
    eval_subset: int = 0
    reduction: str = "mean"
    deterministic: bool = True

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ValueError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.lam < 0 or self.gamma < 0:
            raise ValueError("lambda and gamma must be >= 0")
        if self.base_resize < self.crop_size:
            raise ValueError(
                f"base_resize {self.base_resize} smaller than crop "
                f"{self.crop_size}"
            )

    @staticmethod
    def preset(stage: int, name: str = "desk") -> "TrainConfig":
        if name == "desk":
            per_stage = {
                1: dict(lr=1e-4, batch_size=4, epochs=5),
                2: dict(lr=0.01, batch_size=64, epochs=20, plateau_decay=True),
                3: dict(lr=1e-4, batch_size=64, epochs=5),
            }
            common = dict(base_resize=40, crop_size=32)
        elif name == "paper-imagenet":
            per_stage = {
                1: dict(lr=1e-6, batch_size=4, epochs=20, lr_decay_epochs=(10,)),
                2: dict(lr=0.01, batch_size=256, epochs=60, plateau_decay=True),
                3: dict(lr=1e-4, batch_size=256, epochs=20),
            }
            common = dict(base_resize=256, crop_size=224)
        else:
            raise ValueError(f"unknown preset {name!r}")
        return TrainConfig(stage=stage, **per_stage[stage], **common)


# Config files are flat `key = value` lines; the loss weight keeps its
# conventional name "lambda" there (a keyword in Python, hence the alias).
_CONFIG_ALIASES = {"lambda": "lam"}
_FIELD_TO_KEY = {"lam": "lambda"}


def _parse_config_value(name: str, raw: str):
    kind = {f.name: f.type for f in fields(TrainConfig)}[name]
    raw = raw.strip()
    if name == "lr_decay_epochs":
        if not raw:
            return ()
        return tuple(int(part) for part in raw.split(",") if part.strip())
    if kind == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"config key {name!r}: expected a boolean, got {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def config_from_pairs(
    pairs: dict[str, str], base: TrainConfig | None = None
) -> TrainConfig:
    """Apply `key=value` settings over a base config; unknown keys rejected."""
    known = {f.name for f in fields(TrainConfig)}
    updates = {}
    for key, raw in pairs.items():
        name = _CONFIG_ALIASES.get(key, key)
        if name not in known:
            raise ValueError(f"unknown config key {key!r}")
        updates[name] = _parse_config_value(name, raw)
    if base is None:
        base = TrainConfig(stage=updates.get("stage", 1))
    return replace(base, **updates)


def parse_config_file(path: str, base: TrainConfig | None = None) -> TrainConfig:
    """Flat `key = value` file, one entry per line, `#` starts a comment."""
    pairs: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, _, value = stripped.partition("=")
            pairs[key.strip()] = value.strip()
    return config_from_pairs(pairs, base)


def config_to_pairs(config: TrainConfig) -> dict[str, str]:
    pairs = {}
    for f in fields(TrainConfig):
        value = getattr(config, f.name)
        if f.name == "lr_decay_epochs":
            value = ",".join(str(v) for v in value)
        pairs[_FIELD_TO_KEY.get(f.name, f.name)] = str(value)
    return pairs


def config_hash(config: TrainConfig) -> str:
    text = "\n".join(f"{k}={v}" for k, v in sorted(config_to_pairs(config).items()))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def lr_at(config: TrainConfig, epoch: int, plateau_decays: int = 0) -> float:
    """lr0 / factor^n after the n-th decay (scheduled plus plateau-driven)."""
    n = sum(1 for e in config.lr_decay_epochs if epoch >= e) + plateau_decays
    return config.lr / config.lr_decay_factor**n


def _epoch_rng(config: TrainConfig, epoch: int, salt: int = 0):
    return np.random.default_rng([config.seed, config.stage, epoch, salt])


# ---------------------------------------------------------------------------
# Augmentation and evaluation


def resize_short_side(image: np.ndarray, base: int) -> np.ndarray:
    """Scale a (C,H,W) image so its short side equals `base` (bilinear)."""
    _, h, w = image.shape
    if min(h, w) == base:
        return image
    scale = base / min(h, w)
    out_h, out_w = max(base, round(h * scale)), max(base, round(w * scale))
    return downsample_bilinear(image[None], out_h, out_w)[0]


def augment_sample(
    image: np.ndarray,
    target_crop: int,
    train_mode: bool,
    rng,
    base_resize: int = 40,
) -> np.ndarray:
    """Resize-shortest-side, then random crop + coin-flip mirror (train mode)
    or center crop (eval mode)."""
    resized = resize_short_side(image, base_resize)
    _, h, w = resized.shape
    if h < target_crop or w < target_crop:
        raise ValueError(
            f"image {h}x{w} smaller than crop {target_crop} after resize"
        )
    if train_mode:
        i = int(rng.integers(0, h - target_crop + 1))
        j = int(rng.integers(0, w - target_crop + 1))
        out = resized[:, i : i + target_crop, j : j + target_crop]
        if rng.random() < 0.5:
            out = out[:, :, ::-1]
        return np.ascontiguousarray(out)
    i = (h - target_crop) // 2
    j = (w - target_crop) // 2
    return np.ascontiguousarray(
        resized[:, i : i + target_crop, j : j + target_crop]
    )


def _resize_all(images: np.ndarray, base: int) -> np.ndarray:
    n, c, h, w = images.shape
    if min(h, w) == base:
        return images
    scale = base / min(h, w)
    return downsample_bilinear(
        images, max(base, round(h * scale)), max(base, round(w * scale))
    )


def _crop_flip_batch(resized, crop, rng, train_mode):
    n, c, h, w = resized.shape
    out = np.empty((n, c, crop, crop), dtype=resized.dtype)
    if train_mode:
        offs_i = rng.integers(0, h - crop + 1, size=n)
        offs_j = rng.integers(0, w - crop + 1, size=n)
        flips = rng.random(n) < 0.5
    else:
        offs_i = np.full(n, (h - crop) // 2)
        offs_j = np.full(n, (w - crop) // 2)
        flips = np.zeros(n, dtype=bool)
    for idx in range(n):
        view = resized[idx, :, offs_i[idx] : offs_i[idx] + crop,
                       offs_j[idx] : offs_j[idx] + crop]
        out[idx] = view[:, :, ::-1] if flips[idx] else view
    return out


def eval_preprocess(images: np.ndarray, config: TrainConfig) -> np.ndarray:
    """Deterministic test-time path: resize then center crop."""
    resized = _resize_all(images, config.base_resize)
    return _crop_flip_batch(resized, config.crop_size, None, train_mode=False)


def add_gaussian_noise(image: np.ndarray, variance: float, rng) -> np.ndarray:
    """Add i.i.d. zero-mean noise of the given variance, then clamp to [0,1]."""
    if variance < 0:
        raise ValueError(f"variance must be >= 0, got {variance}")
    if variance == 0:
        return np.clip(image, 0.0, 1.0)
    noisy = image + rng.normal(0.0, math.sqrt(variance), size=image.shape)
    return np.clip(noisy, 0.0, 1.0).astype(image.dtype)


def evaluate_topk(
    pipeline,
    dataset,
    k: int,
    batch_size: int = 250,
    mode: str = "avg",
    preprocess=None,
) -> float:
    """Fraction of samples whose label is missing from the top-k prediction."""
    images, labels = dataset.images, dataset.labels
    n = images.shape[0]
    if n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    misses = 0
    for start in range(0, n, batch_size):
        x = images[start : start + batch_size]
        if preprocess is not None:
            x = preprocess(x)
        scores = pipeline.scores(x, mode=mode)
        top = predict_topk(scores, k)
        y = labels[start : start + batch_size]
        misses += int((top != y[:, None]).all(axis=1).sum())
    return misses / n


# ---------------------------------------------------------------------------
# Epoch records and the stage runners


@dataclass
class EpochRecord:
    epoch: int
    stage: int
    lr: float
    l_r: float | None = None
    l_e: float | None = None
    l_t: float | None = None
    L_c: float | None = None
    top1: float | None = None
    top5: float | None = None

    def csv_line(self) -> str:
        def fmt(v):
            return "" if v is None else f"{v:.8g}"

        return (
            f"{self.epoch},{self.stage},{self.lr:.8g},{fmt(self.l_r)},"
            f"{fmt(self.l_e)},{fmt(self.l_t)},{fmt(self.L_c)},"
            f"{fmt(self.top1)},{fmt(self.top5)}"
        )


def _append_log(log_path, record: EpochRecord) -> None:
    if log_path is None:
        return
    import os

    write_header = not os.path.exists(log_path) or os.path.getsize(log_path) == 0
    with open(log_path, "a", encoding="utf-8") as fh:
        if write_header:
            fh.write(METRICS_HEADER + "\n")
        fh.write(record.csv_line() + "\n")


def _subset(dataset, count: int):
    if count and count < dataset.images.shape[0]:
        return dataset.take(count)
    return dataset


def _check_finite(value: float, epoch: int, what: str) -> None:
    if not math.isfinite(value):
        raise TrainingDiverged(epoch, f"{what} became {value} at epoch {epoch}")


def train_wae(
    params: WaeParams,
    train_data,
    config: TrainConfig,
    log_path=None,
) -> list[EpochRecord]:
    """Stage 1: optimize the transform loss over the auto-encoder alone."""
    train_data = _subset(train_data, config.train_subset)
    named = dict(params.named_arrays("wae"))
    state = SgdState(named)
    resized = _resize_all(train_data.images, config.base_resize)
    n = resized.shape[0]
    records = []
    for epoch in range(config.epochs):
        lr = lr_at(config, epoch)
        rng = _epoch_rng(config, epoch)
        order = rng.permutation(n) if config.augment else np.arange(n)
        sums = {"l_r": 0.0, "l_e": 0.0, "l_t": 0.0}
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            x = _crop_flip_batch(
                resized[idx], config.crop_size, rng, train_mode=config.augment
            )
            grads, parts = wae_backward(x, params, config.lam, config.reduction)
            _check_finite(parts.l_t, epoch, "transform loss")
            for key in sums:
                sums[key] += getattr(parts, key) * len(idx)
            state.apply(named, grads, lr, config.momentum, config.weight_decay)
        record = EpochRecord(
            epoch=epoch, stage=1, lr=lr,
            l_r=sums["l_r"] / n, l_e=sums["l_e"] / n, l_t=sums["l_t"] / n,
        )
        records.append(record)
        _append_log(log_path, record)
    return records


def train_pipeline(
    pipeline: TwoStreamPipeline,
    train_data,
    config: TrainConfig,
    eval_data=None,
    log_path=None,
) -> list[EpochRecord]:
    """Classifier-style epoch loop shared by stages 2/3 and the baselines."""
    train_data = _subset(train_data, config.train_subset)
    if eval_data is not None:
        eval_data = _subset(eval_data, config.eval_subset)
    named = pipeline.named_params()
    state = SgdState(named)
    resized = _resize_all(train_data.images, config.base_resize)
    labels = train_data.labels
    n = resized.shape[0]
    records = []
    plateau_decays = 0
    best_error = None
    stall = 0
    for epoch in range(config.epochs):
        lr = lr_at(config, epoch, plateau_decays)
        rng = _epoch_rng(config, epoch)
        order = rng.permutation(n) if config.augment else np.arange(n)
        sums: dict[str, float] = {}
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            x = _crop_flip_batch(
                resized[idx], config.crop_size, rng, train_mode=config.augment
            )
            metrics, grads = pipeline.batch_loss_and_grads(x, labels[idx])
            _check_finite(metrics["loss"], epoch, "training loss")
            for key, value in metrics.items():
                sums[key] = sums.get(key, 0.0) + value * len(idx)
            state.apply(named, grads, lr, config.momentum, config.weight_decay)
        record = EpochRecord(
            epoch=epoch, stage=config.stage, lr=lr,
            l_r=(sums["l_r"] / n) if "l_r" in sums else None,
            l_e=(sums["l_e"] / n) if "l_e" in sums else None,
            l_t=(sums["l_t"] / n) if "l_t" in sums else None,
            L_c=sums["L_c"] / n,
        )
        if eval_data is not None:
            prep = lambda x: eval_preprocess(x, config)  # noqa: E731
            record.top1 = evaluate_topk(pipeline, eval_data, 1, preprocess=prep)
            record.top5 = evaluate_topk(pipeline, eval_data, 5, preprocess=prep)
            if config.plateau_decay and not config.lr_decay_epochs:
                if best_error is None or record.top1 < best_error - config.plateau_min_delta:
                    best_error = record.top1
                    stall = 0
                else:
                    stall += 1
                    if (
                        stall >= config.plateau_patience
                        and plateau_decays < config.plateau_max_decays
                    ):
                        plateau_decays += 1
                        stall = 0
        records.append(record)
        _append_log(log_path, record)
    return records


def run_stage(
    stage: int,
    wae_params,
    cls_params,
    train_data,
    config: TrainConfig,
    eval_data=None,
    log_path=None,
):
    """Dispatch one training stage; returns (wae, cls, per-epoch records).

    Stage 1 ignores cls_params; stage 2 trains the classifier against the
    frozen encoder; stage 3 fine-tunes everything jointly under
    L_c + gamma * L_t.
    """
    if stage != config.stage:
        config = replace(config, stage=stage)
    if stage == 1:
        if wae_params is None:
            raise ValueError("stage 1 requires initialized WAE parameters")
        records = train_wae(wae_params, train_data, config, log_path)
        return wae_params, cls_params, records
    if wae_params is None:
        raise ValueError(f"stage {stage} requires a trained WAE checkpoint")
    if cls_params is None:
        raise ValueError(f"stage {stage} requires initialized classifier parameters")
    if stage == 2:
        frontend = WaeFrontend(wae_params, trainable=False)
    elif stage == 3:
        frontend = WaeFrontend(
            wae_params,
            trainable=True,
            transform_weight=config.gamma,
            lam=config.lam,
            reduction=config.reduction,
        )
    else:
        raise ValueError(f"unknown stage {stage}")
    pipeline = TwoStreamPipeline(frontend, cls_params)
    records = train_pipeline(pipeline, train_data, config, eval_data, log_path)
    return wae_params, cls_params, records


def noise_robustness(
    pipeline,
    dataset,
    variances,
    noise_seeds=(0, 1, 2),
    k: int = 1,
    config: TrainConfig | None = None,
) -> dict[float, float]:
    """Mean top-k accuracy per noise variance (noise added before the
    deterministic eval preprocessing)."""
    config = config or TrainConfig(stage=2)
    results: dict[float, float] = {}
    for variance in variances:
        accs = []
        for seed in noise_seeds:
            rng = np.random.default_rng([seed, int(variance * 1e6)])
            noisy_images = add_gaussian_noise(dataset.images, variance, rng)
            noisy = dataset.with_images(noisy_images)
            err = evaluate_topk(
                pipeline, noisy, k,
                preprocess=lambda x: eval_preprocess(x, config),
            )
            accs.append(1.0 - err)
        results[float(variance)] = float(np.mean(accs))
    return results
