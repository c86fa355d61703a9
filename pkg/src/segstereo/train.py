"""Training loop: poly learning rate, SGD with momentum, checkpoints and metric logs."""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import losses as L
from . import metrics
from . import model as M
from . import tensor as T
from .data import Batch, StereoSample, batch_iterator, collate
from .nn import resize_labels, softmax_cross_entropy
from .stereo import warp_horizontal

log = logging.getLogger(__name__)

MODES = ("unsupervised", "supervised")


@dataclass
class TrainConfig:
    mode: str = "unsupervised"
    base_lr: float = 0.003
    power: float = 0.9
    max_iter: int = 2000
    momentum: float = 0.9
    weight_decay: float = 0.0001
    batch_size: int = 4
    seed: int = 0
    crop: tuple = (64, 128)
    resize_range: tuple = (1.0, 1.0)
    checkpoint_every: int = 0
    eval_every: int = 0
    seg_pretrain_iters: int = 200
    seg_lr: float = 0.01
    weights: L.LossWeights = field(default_factory=L.LossWeights.unsupervised)
    model: M.ModelConfig = field(default_factory=M.ModelConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be > 0")
        self.crop = tuple(int(c) for c in self.crop)
        self.resize_range = tuple(float(c) for c in self.resize_range)


# Named overrides applied on top of the defaults. "finetune" mirrors a short
# unsupervised fine-tune: 500 iterations, batch 16, no resize augmentation.
PRESETS: dict[str, dict[str, str]] = {
    "finetune": {"mode": "unsupervised", "max_iter": "500", "batch_size": "16", "resize_range": "1.0,1.0"},
    "reference": {"base_lr": "0.01", "power": "0.9", "momentum": "0.9", "weight_decay": "0.0001",
              "batch_size": "16", "resize_range": "0.5,2.0"},
}


# ---------------------------------------------------------------------------
# config file: flat key=value lines, '#' comments, nested fields as model.x / weights.x

def _coerce(raw, default):
    if not isinstance(raw, str):
        if isinstance(default, tuple):
            return tuple(raw)
        return type(default)(raw) if default is not None else raw
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        parts = [p for p in raw.replace("x", ",").split(",") if p.strip()]
        kind = type(default[0]) if default else float
        return tuple(kind(p) for p in parts)
    return raw


def apply_overrides(cfg: TrainConfig, items: dict) -> TrainConfig:
    """Values may be strings (as read from a file or flag) or already-typed."""
    top, model_kw, weight_kw = {}, {}, {}
    model_defaults = dataclasses.asdict(cfg.model)
    weight_defaults = dataclasses.asdict(cfg.weights)
    for key, raw in items.items():
        if key.startswith("model."):
            name = key[6:]
            if name not in model_defaults:
                raise KeyError(f"unknown config key {key!r}")
            model_kw[name] = _coerce(raw, model_defaults[name])
        elif key.startswith("weights."):
            name = key[8:]
            if name not in weight_defaults:
                raise KeyError(f"unknown config key {key!r}")
            weight_kw[name] = _coerce(raw, weight_defaults[name])
        else:
            if key in ("model", "weights") or key not in {f.name for f in dataclasses.fields(cfg)}:
                raise KeyError(f"unknown config key {key!r}")
            top[key] = _coerce(raw, getattr(cfg, key))
    mode = top.get("mode", cfg.mode)
    weights = cfg.weights
    if mode != cfg.mode:
        weights = L.LossWeights.unsupervised() if mode == "unsupervised" else L.LossWeights.supervised()
    return dataclasses.replace(
        cfg, **top,
        model=dataclasses.replace(cfg.model, **model_kw),
        weights=dataclasses.replace(weights, **weight_kw),
    )


def parse_config_text(text: str) -> dict[str, str]:
    items = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        items[k.strip()] = v.strip()
    return items


def load_config(path=None, overrides: dict[str, str] | None = None, preset: str | None = None) -> TrainConfig:
    cfg = TrainConfig()
    if preset:
        if preset not in PRESETS:
            raise KeyError(f"unknown preset {preset!r}")
        cfg = apply_overrides(cfg, PRESETS[preset])
    if path is not None:
        cfg = apply_overrides(cfg, parse_config_text(Path(path).read_text()))
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if f.name in ("model", "weights"):
            for k, sub in dataclasses.asdict(v).items():
                lines.append(f"{f.name}.{k}={_show(sub)}")
        else:
            lines.append(f"{f.name}={_show(v)}")
    return "\n".join(lines) + "\n"


def _show(v):
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


# ---------------------------------------------------------------------------
# optimisation

def poly_lr(it: int, base_lr: float, power: float, max_iter: int) -> float:
    if not 0 <= it <= max_iter:
        raise ValueError(f"iteration {it} outside [0, {max_iter}]")
    return base_lr * (1.0 - it / max_iter) ** power


@dataclass
class TrainState:
    iter: int
    model: M.ModelState
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    seed: int = 0


def sgd_step(state: TrainState, grads: dict[str, np.ndarray], lr: float, momentum: float,
             weight_decay: float, names: Sequence[str] | None = None) -> TrainState:
    """In-place momentum SGD: ``v = m*v + (g + wd*p)``, ``p -= lr*v``. Frozen names are skipped."""
    params = state.model.params
    names = [n for n in (names if names is not None else params) if n not in state.model.frozen]
    for n in names:
        g = grads.get(n)
        if g is None:
            raise KeyError(f"no gradient for trainable parameter {n}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {n}")
    for n in names:
        p = params[n]
        g = grads[n].astype(p.dtype, copy=False)
        v = state.velocity.get(n)
        if v is None:
            v = np.zeros_like(p)
        v = momentum * v + (g + weight_decay * p)
        state.velocity[n] = v.astype(p.dtype, copy=False)
        params[n] = (p - lr * state.velocity[n]).astype(p.dtype, copy=False)
    return state


# ---------------------------------------------------------------------------
# losses for one batch

def compute_losses(model: M.ModelState, batch: Batch, mode: str, weights: L.LossWeights,
                   p: dict[str, T.Tensor]):
    """Forward the batch and assemble the mode's weighted total."""
    out = M.forward(model, batch.left, batch.right, p)
    disp = out.disparity
    dtype = disp.dtype
    smooth = L.smoothness_loss(disp, weights.charbonnier)
    semantic = None
    if weights.lambda_seg > 0 and batch.labels is not None and (batch.labels != 255).any():
        semantic = L.semantic_loss(out.right_sem_feat, disp, M.classifier_params(model, p), batch.labels)
    if mode == "unsupervised":
        right = T.Tensor._wrap(batch.right.astype(dtype), False)
        left = T.Tensor._wrap(batch.left.astype(dtype), False)
        warped, validity = warp_horizontal(right, disp)
        photo, delta = L.photometric_loss(warped, left, validity, weights.photometric_threshold, return_mask=True)
        total, report = L.total_loss(mode, weights, photometric=photo, smoothness=smooth,
                                     semantic=semantic, masked_fraction=float(1.0 - delta.mean()))
    else:
        if batch.gt is None:
            raise ValueError("supervised training needs ground-truth disparity")
        reg = L.regression_loss(disp, batch.gt.astype(dtype), batch.valid)
        total, report = L.total_loss(mode, weights, regression=reg, smoothness=smooth, semantic=semantic)
    return total, report, out


# ---------------------------------------------------------------------------
# evaluation

def predict(model: M.ModelState, samples: Sequence[StereoSample], batch_size: int = 8) -> list[np.ndarray]:
    preds = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        left = np.stack([s.left for s in chunk])
        right = np.stack([s.right for s in chunk])
        d = M.forward(model, left, right).disparity.data
        preds.extend(np.asarray(x[0], dtype=np.float64) for x in d)
    return preds


def evaluate_model(model: M.ModelState, samples: Sequence[StereoSample]) -> metrics.EvalResult:
    preds = predict(model, samples)
    nocs = [s.noc_mask for s in samples] if all(s.noc_mask is not None for s in samples) else None
    return metrics.evaluate(preds, [s.gt_disparity for s in samples], [s.valid for s in samples], nocs)


# ---------------------------------------------------------------------------
# segmentation pretraining (the branch is frozen afterwards)

def pretrain_segmentation(model: M.ModelState, samples: Sequence[StereoSample], cfg: TrainConfig,
                          logger: "MetricsLog | None" = None) -> M.ModelState:
    names = [n for n in model.params if n.startswith((M.SHALLOW, M.SEGMENTATION))]
    if cfg.seg_pretrain_iters <= 0:
        return model
    if any(s.left_labels is None for s in samples):
        raise ValueError("segmentation pretraining needs label maps on every sample")
    frozen = model.frozen
    model.frozen = set()
    opt = TrainState(0, model, {}, cfg.seed)
    stream = batch_iterator(samples, cfg.batch_size, cfg.crop, (1.0, 1.0), seed=cfg.seed + 7919)
    for it in range(cfg.seg_pretrain_iters):
        batch = next(stream)
        p = model.tensors(names)
        with T.Tape() as tape:
            logits = M.segment(model, batch.left, p)
            h, w = logits.shape[2:]
            loss = softmax_cross_entropy(logits, resize_labels(batch.labels, h, w))
        g = T.backward(tape, loss)
        grads = {n: g[p[n].node_id].data for n in names}
        lr = poly_lr(it, cfg.seg_lr, cfg.power, cfg.seg_pretrain_iters)
        sgd_step(opt, grads, lr, cfg.momentum, cfg.weight_decay, names)
        if logger is not None:
            logger.write(event="seg_pretrain", iter=it + 1, lr=lr, loss=loss.item())
    model.frozen = frozen
    model.params["classifier.w"] = model.params["seg.head.w"].copy()
    model.params["classifier.b"] = model.params["seg.head.b"].copy()
    return model


# ---------------------------------------------------------------------------
# the loop

class MetricsLog:
    """One ``key=value`` line per event, flushed immediately."""

    def __init__(self, path=None, echo: Callable[[str], None] | None = None):
        self.path = Path(path) if path else None
        self._fh = open(self.path, "a") if self.path else None
        self.echo = echo
        self.records: list[dict] = []

    def write(self, **kv):
        self.records.append(kv)
        line = " ".join(f"{k}={_fmt(v)}" for k, v in kv.items())
        if self._fh:
            self._fh.write(line + "\n")
            self._fh.flush()
        if self.echo:
            self.echo(line)

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def checkpoint_extra(state: TrainState) -> dict[str, np.ndarray]:
    extra = {"train.iter": np.asarray([float(state.iter)], dtype=np.float32)}
    extra.update({"velocity." + k: v for k, v in state.velocity.items()})
    return extra


def save_train_state(path, state: TrainState) -> None:
    M.save_checkpoint(path, state.model, checkpoint_extra(state))


def load_train_state(path) -> TrainState:
    model, extra = M.load_checkpoint(path)
    it = int(extra.get("train.iter", np.zeros(1))[0])
    velocity = {k[len("velocity."):]: v for k, v in extra.items() if k.startswith("velocity.")}
    return TrainState(it, model, velocity)


def train(cfg: TrainConfig, samples: Sequence[StereoSample], out_dir=None,
          val_samples: Sequence[StereoSample] | None = None, resume: TrainState | str | None = None,
          stop_after: int | None = None, logger: MetricsLog | None = None) -> tuple[TrainState, MetricsLog]:
    """Pretrain the segmentation branch (fresh runs only), then train disparity.

    ``stop_after`` ends the run early at that iteration without changing the
    schedule, which is how a run is split for checkpoint/resume.
    """
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    if logger is None:
        logger = MetricsLog(out / "metrics.log" if out else None)
    if isinstance(resume, (str, Path)):
        resume = load_train_state(resume)

    if resume is None:
        model = M.build(cfg.model, seed=cfg.seed)
        if cfg.seg_pretrain_iters > 0 and all(s.left_labels is not None for s in samples):
            pretrain_segmentation(model, samples, cfg, logger)
        state = TrainState(0, model, {}, cfg.seed)
    else:
        state = resume
        state.seed = cfg.seed

    names = state.model.trainable()
    stream = batch_iterator(samples, cfg.batch_size, cfg.crop, cfg.resize_range, seed=cfg.seed,
                            start_step=state.iter)
    end = cfg.max_iter if stop_after is None else min(stop_after, cfg.max_iter)
    last_ckpt = None
    while state.iter < end:
        batch = next(stream)
        p = state.model.tensors(names)
        with T.Tape() as tape:
            total, report, _ = compute_losses(state.model, batch, cfg.mode, cfg.weights, p)
        if not math.isfinite(report.total):
            logger.write(event="abort", iter=state.iter, reason="non-finite loss")
            raise FloatingPointError(f"loss diverged at iteration {state.iter}; last checkpoint: {last_ckpt}")
        g = T.backward(tape, total)
        grads = {n: g[p[n].node_id].data for n in names if p[n].node_id in g}
        for n in names:
            grads.setdefault(n, np.zeros_like(state.model.params[n]))
        lr = poly_lr(state.iter, cfg.base_lr, cfg.power, cfg.max_iter)
        sgd_step(state, grads, lr, cfg.momentum, cfg.weight_decay, names)
        state.iter += 1
        terms = {k: v for k, v in report.items()}
        logger.write(event="step", iter=state.iter, lr=lr, total=report.total, **terms,
                     masked_fraction=report.masked_fraction if report.masked_fraction is not None else "-")
        if out and cfg.checkpoint_every and state.iter % cfg.checkpoint_every == 0:
            last_ckpt = out / f"ckpt_{state.iter:06d}.ssm"
            save_train_state(last_ckpt, state)
        if val_samples and cfg.eval_every and state.iter % cfg.eval_every == 0:
            res = evaluate_model(state.model, val_samples)
            logger.write(event="eval", iter=state.iter, **res.as_dict())
    if out:
        save_train_state(out / "final.ssm", state)
    return state, logger
