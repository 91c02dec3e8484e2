"""Losses, Adam, the staged learning-rate schedule and the two training drivers."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import nn
from . import tensor as T
from .dataset import Dataset
from .fatigue import window_arrays
from .tensor import Tensor

log = logging.getLogger(__name__)


class FitError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    stage_lrs: tuple[float, ...] = (1e-2, 1e-3, 1e-4)
    final_lr: float = 1e-5
    epochs_per_stage: int = 50
    final_patience: int = 10
    final_max_epochs: int = 200
    min_delta: float = 1e-6  # relative improvement needed in the final stage
    batch_size: int = 4096
    val_fraction: float = 0.05
    window_stride: int = 1
    eval_batch_size: int = 2048
    seed: int = 0

    def __post_init__(self):
        lrs = list(self.stage_lrs) + [self.final_lr]
        if any(b >= a for a, b in zip(lrs, lrs[1:])):
            raise ValueError(f"learning rates must be strictly decreasing, got {lrs}")
        if self.batch_size < 1 or self.window_stride < 1:
            raise ValueError("batch_size and window_stride must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")

    def to_dict(self):
        d = asdict(self)
        d["stage_lrs"] = list(self.stage_lrs)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        if "stage_lrs" in d:
            d["stage_lrs"] = tuple(d["stage_lrs"])
        return cls(**d)


PRETRAIN_DEFAULTS = TrainConfig()
FINETUNE_DEFAULTS = TrainConfig(batch_size=32, val_fraction=0.2)


# -- losses and metrics -------------------------------------------------------

def mse_loss(pred, target) -> Tensor:
    return T.mse(pred, target)


def mape(pred, target, warn=True) -> tuple[float, int]:
    """Mean absolute percentage error (in %) and the number of zero targets skipped."""
    pred = np.asarray(pred, dtype=float).ravel()
    target = np.asarray(target, dtype=float).ravel()
    if pred.shape != target.shape:
        raise T.ShapeError("mape", pred.shape, target.shape)
    ok = target != 0
    skipped = int(target.size - ok.sum())
    if skipped and warn:
        log.warning("mape: %d zero targets excluded", skipped)
    if not ok.any():
        return float("nan"), skipped
    return float(np.mean(np.abs((target[ok] - pred[ok]) / target[ok])) * 100.0), skipped


# -- optimiser --------------------------------------------------------------------

class Adam:
    """Adam with bias correction (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float):
        """Update every array in ``params`` that has an entry in ``grads``."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            p = params[name]
            data = p.data if isinstance(p, Tensor) else p
            if name not in self.m:
                self.m[name] = np.zeros_like(data)
                self.v[name] = np.zeros_like(data)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def adam_step(params, grads, state: Adam, lr: float) -> Adam:
    state.step(params, grads, lr)
    return state


# -- normalisation ----------------------------------------------------------------

@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, seqs) -> "Normalizer":
        allm = np.concatenate([s.measurements for s in seqs], axis=0)
        std = allm.std(axis=0)
        if np.any(std <= 0):
            raise FitError("a gauge has zero variance on the normalisation split")
        return cls(allm.mean(axis=0), std)

    def apply(self, x):
        return (x - self.mean) / self.std

    def invert(self, x):
        return x * self.std + self.mean

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["std"], dtype=float))


# -- checkpoints ------------------------------------------------------------------

@dataclass
class Checkpoint:
    spec: nn.ModelSpec
    params: dict[str, np.ndarray]
    normalizer: Normalizer
    pretext: str  # "AE" | "AR" | "MSPA" | "none"
    frozen: list[str] = field(default_factory=list)
    training_log: list[dict] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)
    rul_scale: float = 1.0

    def tensors(self, requires_grad=True) -> dict[str, Tensor]:
        return {n: Tensor(np.array(a, dtype=np.float64), requires_grad=requires_grad, name=n)
                for n, a in self.params.items()}

    @property
    def trainable(self) -> int:
        return nn.count_params(self.params, self.frozen)


def snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {n: t.data.copy() for n, t in params.items()}


def restore(params: dict[str, Tensor], snap: dict[str, np.ndarray]):
    for n, a in snap.items():
        params[n].data[...] = a


# -- fitting ----------------------------------------------------------------------

@dataclass
class FitResult:
    params: dict[str, Tensor]
    log: list[dict]
    epoch_seconds: list[float]


def predict(model_fn, params, X, batch_size=2048) -> np.ndarray:
    out = []
    with T.no_grad():
        for i in range(0, X.shape[0], batch_size):
            out.append(model_fn(X[i:i + batch_size], False, None).data)
    return np.concatenate(out) if out else np.empty(0)


def fit(model_fn, params: dict[str, Tensor], train, val, config: TrainConfig, frozen=(),
        val_metric=None) -> FitResult:
    """Staged-lr training with best-on-validation restoration.

    ``model_fn(X, training, rng) -> Tensor`` closes over ``params``.
    ``train``/``val`` are (X, Y) array pairs; ``val`` may be None or empty, in
    which case selection falls back to the epoch's training loss.
    """
    X, Y = train
    if X.shape[0] == 0:
        raise FitError("empty training split")
    has_val = val is not None and val[0].shape[0] > 0
    frozen = set(frozen)
    trainable = [n for n in params if n not in frozen]
    for n, t in params.items():
        t.requires_grad = n not in frozen
        t.grad = None
    shuffle_rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(101,)))
    drop_rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(102,)))
    history, timings = [], []

    def run_epoch(Xe, Ye, lr, opt):
        if not trainable:
            return float(np.mean((predict(model_fn, params, Xe, config.eval_batch_size) - Ye) ** 2))
        order = shuffle_rng.permutation(Xe.shape[0])
        total, count = 0.0, 0
        for i in range(0, len(order), config.batch_size):
            idx = order[i:i + config.batch_size]
            loss = mse_loss(model_fn(Xe[idx], True, drop_rng), Ye[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise FitError(f"non-finite loss {value} at lr={lr}")
            T.backward(loss)
            grads = {n: params[n].grad for n in trainable if params[n].grad is not None}
            opt.step(params, grads, lr)
            for n in trainable:
                params[n].grad = None
            total += value * len(idx)
            count += len(idx)
        return total / count

    def evaluate(Xv, Yv):
        pred = predict(model_fn, params, Xv, config.eval_batch_size)
        loss = float(np.mean((pred - Yv) ** 2))
        metric = val_metric(pred, Yv) if val_metric else None
        return loss, metric

    for stage, lr in enumerate(config.stage_lrs):
        opt = Adam()
        best, best_snap = math.inf, snapshot(params)
        for epoch in range(config.epochs_per_stage):
            t0 = time.perf_counter()
            train_loss = run_epoch(X, Y, lr, opt)
            timings.append(time.perf_counter() - t0)
            if has_val:
                val_loss, val_mape = evaluate(*val)
            else:
                val_loss, val_mape = train_loss, None
            improved = val_loss < best
            if improved:
                best, best_snap = val_loss, snapshot(params)
            history.append({"stage": stage, "lr": lr, "epoch": epoch, "train_loss": train_loss,
                            "val_loss": val_loss, "val_mape": val_mape, "improved": improved})
        restore(params, best_snap)
        log.info("stage %d (lr=%g): best val loss %.6g", stage, lr, best)

    # final stage: train + validation data, low lr, patience on training loss
    if has_val:
        Xa, Ya = np.concatenate([X, val[0]]), np.concatenate([Y, val[1]])
    else:
        Xa, Ya = X, Y
    opt = Adam()
    best, best_snap, stale = math.inf, snapshot(params), 0
    for epoch in range(config.final_max_epochs):
        if stale >= config.final_patience:
            break
        t0 = time.perf_counter()
        train_loss = run_epoch(Xa, Ya, config.final_lr, opt)
        timings.append(time.perf_counter() - t0)
        improved = train_loss < best * (1.0 - config.min_delta)
        if improved:
            best, best_snap, stale = train_loss, snapshot(params), 0
        else:
            stale += 1
        history.append({"stage": len(config.stage_lrs), "lr": config.final_lr, "epoch": epoch,
                        "train_loss": train_loss, "val_loss": None, "val_mape": None, "improved": improved})
    restore(params, best_snap)
    return FitResult(params, history, timings)


# -- drivers ---------------------------------------------------------------------

def split_ids(ids, fraction, rng) -> tuple[list[str], list[str]]:
    """Split structure ids into (train, val); val gets round(fraction*n) >= 1 when n >= 2."""
    ids = list(ids)
    if fraction <= 0 or len(ids) < 2:
        return ids, []
    n_val = min(max(1, int(round(fraction * len(ids)))), len(ids) - 1)
    perm = rng.permutation(len(ids))
    val = sorted(ids[i] for i in perm[:n_val])
    train = [i for i in ids if i not in set(val)]
    return train, val


def _pretext_arrays(seqs, task, spec, norm, stride):
    normed = [_normed(s, norm) for s in seqs]
    X, Y, _, _ = window_arrays(normed, spec.h, task, spec.q, stride)
    return X, Y


def _normed(seq, norm):
    return replace(seq, measurements=norm.apply(seq.measurements))


def pretrain(task: str, data: Dataset, config: TrainConfig = PRETRAIN_DEFAULTS, q: int = 1,
             spec: nn.ModelSpec | None = None) -> Checkpoint:
    """Self-supervised pre-training on an unlabelled dataset."""
    task = task.upper()
    if task not in ("AE", "AR", "MSPA"):
        raise ValueError(f"unknown pretext task {task!r}")
    if data.kind != "unlabelled":
        raise ValueError("pre-training needs an unlabelled dataset")
    spec = spec or nn.ModelSpec.default(task, q=q if task == "MSPA" else 1,
                                        n_g=data.structures[0].measurements.shape[1])
    split_rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(100,)))
    train_ids, val_ids = split_ids(data.ids, config.val_fraction, split_rng)
    train_seqs = data.subset(train_ids).structures
    val_seqs = data.subset(val_ids).structures
    norm = Normalizer.fit(train_seqs)
    train = _pretext_arrays(train_seqs, task, spec, norm, config.window_stride)
    val = _pretext_arrays(val_seqs, task, spec, norm, config.window_stride) if val_seqs else None
    log.info("pretrain %s: %d train / %d val windows", task, train[0].shape[0],
             0 if val is None else val[0].shape[0])

    init_rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(1,)))
    params = nn.init_params(spec, init_rng)
    fwd = nn.FORWARD[task]

    def model_fn(Xb, training, rng):
        return fwd(Xb, spec, params, training, rng)

    def metric(pred, target):
        return mape(norm.invert(pred), norm.invert(target), warn=False)[0]

    res = fit(model_fn, params, train, val, config, val_metric=metric)
    return Checkpoint(spec=spec, params=snapshot(res.params), normalizer=norm, pretext=task,
                      training_log=res.log,
                      provenance={"train_config": config.to_dict(), "dataset_seed": data.seed,
                                  "d": data.d_ratio, "n_structures": len(data),
                                  "train_ids": train_ids, "val_ids": val_ids,
                                  "epoch_seconds": res.epoch_seconds})


def rul_arrays(seqs, spec, norm, stride=1, scale=1.0):
    X, Y, _, _ = window_arrays([_normed(s, norm) for s in seqs], spec.h, "RUL", 1, stride)
    return X, Y / scale


def finetune(backbone: Checkpoint | None, data: Dataset, config: TrainConfig = FINETUNE_DEFAULTS,
             freeze: bool = True, train_ids=None, val_ids=None, rul_scale: float = 1.0,
             spec: nn.ModelSpec | None = None) -> Checkpoint:
    """Fit the RUL head on labelled structures.

    ``backbone=None`` trains the same architecture from scratch (the
    non-pre-trained counterpart); ``spec`` then selects the family (AR by
    default). Without explicit ids the data are split by ``config.val_fraction``.
    """
    if data.kind != "labelled":
        raise ValueError("fine-tuning needs a labelled dataset")
    if backbone is None and freeze:
        raise ValueError("freezing a randomly initialised backbone leaves nothing meaningful to "
                         "train; use freeze=False for the non-pre-trained counterpart")
    if backbone is not None and backbone.pretext == "none":
        raise ValueError("backbone checkpoint is not a pre-trained pretext model")
    if train_ids is None:
        split_rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(100,)))
        train_ids, val_ids = split_ids(data.ids, config.val_fraction, split_rng)
    val_ids = list(val_ids or [])
    train_seqs = data.subset(train_ids).structures
    val_seqs = data.subset(val_ids).structures

    init_rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(2,)))
    if backbone is not None:
        ft_spec = backbone.spec.finetune()
        params = nn.transfer_backbone(backbone.params, ft_spec, init_rng)
        norm = backbone.normalizer
        pretext = backbone.pretext
    else:
        ft_spec = (spec or nn.ModelSpec.default("AR", n_g=data.structures[0].measurements.shape[1])).finetune()
        params = nn.init_params(ft_spec, init_rng)
        norm = Normalizer.fit(train_seqs)
        pretext = "none"
    frozen = nn.backbone_names(ft_spec) if freeze else []

    train = rul_arrays(train_seqs, ft_spec, norm, config.window_stride, rul_scale)
    val = rul_arrays(val_seqs, ft_spec, norm, 1, rul_scale) if val_seqs else None

    def model_fn(Xb, training, rng):
        return nn.finetune_forward(Xb, ft_spec, params, training, rng,
                                   backbone_training=training and not freeze)

    def metric(pred, target):
        return mape(pred * rul_scale, target * rul_scale, warn=False)[0]

    res = fit(model_fn, params, train, val, config, frozen=frozen, val_metric=metric)
    return Checkpoint(spec=ft_spec, params=snapshot(res.params), normalizer=norm, pretext=pretext,
                      frozen=list(frozen), training_log=res.log, rul_scale=rul_scale,
                      provenance={"train_config": config.to_dict(), "freeze": freeze,
                                  "train_ids": list(train_ids), "val_ids": val_ids,
                                  "backbone_provenance": None if backbone is None else backbone.provenance.get("dataset_seed"),
                                  "epoch_seconds": res.epoch_seconds})


def predict_rul(ckpt: Checkpoint, X_raw: np.ndarray, batch_size=2048) -> np.ndarray:
    """RUL in measurement steps for raw (unnormalised) windows (B, h, n_g)."""
    params = ckpt.tensors(requires_grad=False)
    Xn = ckpt.normalizer.apply(np.asarray(X_raw, dtype=float))

    def model_fn(Xb, training, rng):
        return nn.finetune_forward(Xb, ckpt.spec, params, False, None)

    return predict(model_fn, params, Xn, batch_size) * ckpt.rul_scale
