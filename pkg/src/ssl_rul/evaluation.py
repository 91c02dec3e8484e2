"""Test protocol, k-fold cross validation and experiment-grid reports."""
from __future__ import annotations

import csv
import io
import logging
import math
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .dataset import Dataset, build_dataset
from .fatigue import MaterialConfig
from .training import (FINETUNE_DEFAULTS, PRETRAIN_DEFAULTS, Checkpoint, TrainConfig, finetune, mape,
                       predict_rul, pretrain)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TestProtocolConfig:
    __test__ = False  # not a pytest test class

    n_test_structures: int = 100
    t_star_range: tuple[float, float] = (0.33, 0.90)
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.t_star_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError(f"t_star_range must satisfy 0 < lo <= hi <= 1, got {self.t_star_range}")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown protocol keys: {sorted(unknown)}")
        if "t_star_range" in d:
            d["t_star_range"] = tuple(d["t_star_range"])
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["t_star_range"] = list(self.t_star_range)
        return d


def sample_t_star(rng: np.random.Generator, L: int, t_range=(0.33, 0.90), h: int = 30) -> int | None:
    """Prediction time as a 1-based measurement count.

    t* = floor(u * L) with u ~ U(t_range), clamped to [h, L - 1] so that a full
    window ends at t* and the true RUL is positive. Returns None when the
    structure is too short (floor(hi * L) < h).
    """
    lo, hi = t_range
    u = rng.uniform(lo, hi) if hi > lo else lo
    if int(math.floor(hi * L + 1e-9)) < h:
        return None
    t = int(math.floor(u * L + 1e-9))
    return min(max(t, h), L - 1)


def protocol_pairs(test: Dataset, protocol: TestProtocolConfig, h: int = 30) -> list[tuple[str, int]]:
    """Fixed (structure id, t*) pairs shared by every model evaluated."""
    rng = np.random.default_rng(np.random.SeedSequence(protocol.seed, spawn_key=(7,)))
    pairs = []
    for s in test.structures:
        t = sample_t_star(rng, s.length, protocol.t_star_range, h)
        if t is None:
            log.warning("test structure %s too short for the protocol; excluded", s.id)
            continue
        pairs.append((s.id, t))
    return pairs


def test_windows(test: Dataset, pairs, h: int = 30):
    by_id = {s.id: s for s in test.structures}
    X = np.stack([by_id[i].measurements[t - h:t] for i, t in pairs])
    y = np.array([by_id[i].length - t for i, t in pairs], dtype=float)
    return X, y


def evaluate_rul(model, test: Dataset, protocol: TestProtocolConfig, pairs=None) -> dict:
    """MAPE of one RUL prediction per test structure at its t*.

    ``model`` is a fine-tuned Checkpoint or any callable mapping raw windows
    (B, h, n_g) to RUL in measurement steps.
    """
    if test.kind != "labelled":
        raise ValueError("the test set must be labelled")
    h = model.spec.h if isinstance(model, Checkpoint) else 30
    pairs = pairs if pairs is not None else protocol_pairs(test, protocol, h)
    X, y = test_windows(test, pairs, h)
    pred = predict_rul(model, X) if isinstance(model, Checkpoint) else np.asarray(model(X), dtype=float)
    value, skipped = mape(pred, y)
    return {"mape": value, "n": len(pairs), "skipped": skipped, "pred": pred, "true": y}


@dataclass
class MetricsReport:
    task: str
    N_U: int
    d: float
    q: int
    freeze: bool
    N_L: int
    fold_mape: list[float] = field(default_factory=list)
    wall_seconds: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    trainable: int = 0

    @property
    def mean(self) -> float:
        return statistics.fmean(self.fold_mape)

    @property
    def std(self) -> float:
        return statistics.stdev(self.fold_mape) if len(self.fold_mape) > 1 else 0.0

    @property
    def key(self):
        return (self.task, self.N_U, self.d, self.q, self.freeze, self.N_L)


def make_folds(ids, k, seed) -> list[list[str]]:
    """Seeded shuffle of structure ids cut into k contiguous blocks."""
    ids = list(ids)
    if len(ids) < k:
        raise ValueError(f"{len(ids)} labelled structures cannot fill {k} folds; use k <= {len(ids)}")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(8,)))
    perm = [ids[i] for i in rng.permutation(len(ids))]
    return [list(b) for b in np.array_split(np.array(perm, dtype=object), k)]


def kfold_runs(backbone: Checkpoint | None, labelled: Dataset, test: Dataset, config: TrainConfig,
               protocol: TestProtocolConfig, k: int = 5, freeze: bool = True, cell=None,
               rul_scale: float = 1.0, spec=None) -> MetricsReport:
    """Fine-tune k models (fold i validates, the rest train) and test each."""
    folds = make_folds(labelled.ids, k, config.seed)
    h = (backbone.spec if backbone is not None else (spec or nn.ModelSpec.default("AR"))).h
    pairs = protocol_pairs(test, protocol, h)
    task = backbone.pretext if backbone is not None else "none"
    cell = cell or {}
    report = MetricsReport(task=cell.get("task", task), N_U=cell.get("N_U", 0), d=cell.get("d", 1.0),
                           q=cell.get("q", 1), freeze=freeze, N_L=len(labelled))
    for i, val_ids in enumerate(folds):
        train_ids = [x for j, f in enumerate(folds) if j != i for x in f]
        t0 = time.perf_counter()
        ckpt = finetune(backbone, labelled, config, freeze=freeze, train_ids=train_ids, val_ids=val_ids,
                        rul_scale=rul_scale, spec=spec)
        wall = time.perf_counter() - t0
        res = evaluate_rul(ckpt, test, protocol, pairs)
        report.fold_mape.append(res["mape"])
        report.wall_seconds.append(wall)
        report.epoch_seconds.extend(ckpt.provenance["epoch_seconds"])
        report.trainable = ckpt.trainable
        log.info("%s fold %d/%d: MAPE %.2f%% (%.1fs)", report.key, i + 1, k, res["mape"], wall)
    return report


# -- experiment grid -------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    tasks: tuple[str, ...] = ("AR", "none")
    d_values: tuple[float, ...] = (0.9,)
    n_unlabelled: tuple[int, ...] = (100, 500)
    n_labelled: tuple[int, ...] = (10, 50)
    freeze: tuple[bool, ...] = (True,)
    q_values: tuple[int, ...] = (10,)
    k: int = 5
    seed: int = 0
    rul_scale: float = 1.0
    material: MaterialConfig = MaterialConfig()
    pretrain: TrainConfig = PRETRAIN_DEFAULTS
    finetune: TrainConfig = FINETUNE_DEFAULTS
    protocol: TestProtocolConfig = TestProtocolConfig()

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d.pop("version", None)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown grid keys: {sorted(unknown)}")
        for key in ("tasks", "d_values", "n_unlabelled", "n_labelled", "freeze", "q_values"):
            if key in d:
                d[key] = tuple(d[key])
        if "material" in d:
            d["material"] = MaterialConfig.from_dict(d["material"])
        if "pretrain" in d:
            d["pretrain"] = TrainConfig.from_dict({**PRETRAIN_DEFAULTS.to_dict(), **d["pretrain"]})
        if "finetune" in d:
            d["finetune"] = TrainConfig.from_dict({**FINETUNE_DEFAULTS.to_dict(), **d["finetune"]})
        if "protocol" in d:
            d["protocol"] = TestProtocolConfig.from_dict(d["protocol"])
        return cls(**d)

    def to_dict(self):
        return {"version": 1, "tasks": list(self.tasks), "d_values": list(self.d_values),
                "n_unlabelled": list(self.n_unlabelled), "n_labelled": list(self.n_labelled),
                "freeze": list(self.freeze), "q_values": list(self.q_values), "k": self.k,
                "seed": self.seed, "rul_scale": self.rul_scale, "material": self.material.to_dict(),
                "pretrain": self.pretrain.to_dict(), "finetune": self.finetune.to_dict(),
                "protocol": self.protocol.to_dict()}

    def cells(self) -> list[dict]:
        """Experiment cells in deterministic order; 'none' cells ignore N_U, d, q and freeze."""
        out = []
        for task in self.tasks:
            for n_l in self.n_labelled:
                if task == "none":
                    out.append({"task": "none", "N_U": 0, "d": 1.0, "q": 1, "freeze": False, "N_L": n_l})
                    continue
                for d in self.d_values:
                    for n_u in self.n_unlabelled:
                        for q in (self.q_values if task == "MSPA" else (1,)):
                            for fr in self.freeze:
                                out.append({"task": task, "N_U": n_u, "d": d, "q": q, "freeze": fr, "N_L": n_l})
        return out


def grid_data(grid: GridSpec, h: int = 30):
    """Datasets for a grid run, generated from disjoint seed streams.

    Labelled training sets are nested (the first N_L structures of one pool)
    and unlabelled sets likewise.
    """
    n_l = max(grid.n_labelled)
    labelled = build_dataset(grid.material, n_l, "labelled", seed=grid.seed, h=h)
    test = build_dataset(grid.material, grid.protocol.n_test_structures, "labelled", seed=grid.seed,
                         h=h, stream="test")
    return labelled, test


def _pretrain_key(cell):
    return (cell["task"], cell["N_U"], cell["d"], cell["q"])


def _run_pretrain(grid: GridSpec, key):
    task, n_u, d, q = key
    unl = build_dataset(grid.material, n_u, "unlabelled", d, seed=grid.seed)
    return key, pretrain(task, unl, grid.pretrain, q=q)


def _run_cell(grid: GridSpec, cell, backbone, labelled, test):
    lab = labelled.head(cell["N_L"])
    t0 = time.perf_counter()
    rep = kfold_runs(backbone, lab, test, grid.finetune, grid.protocol, grid.k,
                     freeze=cell["freeze"], cell=cell, rul_scale=grid.rul_scale)
    log.info("cell %s done in %.1fs: %.2f +- %.2f", rep.key, time.perf_counter() - t0, rep.mean, rep.std)
    return rep


RESULT_COLUMNS = ["task", "N_U", "d", "q", "freeze", "N_L", "fold", "mape", "wall_seconds"]
SUMMARY_COLUMNS = ["task", "N_U", "d", "q", "freeze", "N_L", "folds", "mape_mean", "mape_std", "trainable"]


def _fmt(x):
    return repr(float(x)) if isinstance(x, float) else str(x)


def results_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for r in reports:
        for i, (m, s) in enumerate(zip(r.fold_mape, r.wall_seconds)):
            w.writerow([r.task, r.N_U, r.d, r.q, str(r.freeze).lower(), r.N_L, i, _fmt(m), f"{s:.3f}"])
    return buf.getvalue()


def summary_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for r in reports:
        w.writerow([r.task, r.N_U, r.d, r.q, str(r.freeze).lower(), r.N_L, len(r.fold_mape),
                    f"{r.mean:.6f}", f"{r.std:.6f}", r.trainable])
    return buf.getvalue()


def run_experiment_grid(grid: GridSpec, out_dir=None, jobs: int = 1, figures: bool = True) -> list[MetricsReport]:
    """Run every cell of ``grid`` and write results.csv / summary.csv (+ figure)."""
    cells = grid.cells()
    labelled, test = grid_data(grid)
    test_ids, train_ids = set(test.ids), set(labelled.ids)
    if test_ids & train_ids:
        raise RuntimeError("test structures overlap the labelled training pool")

    keys = sorted({_pretrain_key(c) for c in cells if c["task"] != "none"})
    backbones = {}
    if jobs > 1 and len(keys) > 1:
        with ProcessPoolExecutor(jobs) as ex:
            for key, ck in ex.map(_run_pretrain, [grid] * len(keys), keys):
                backbones[key] = ck
    else:
        for key in keys:
            backbones[key] = _run_pretrain(grid, key)[1]

    args = [(grid, c, backbones.get(_pretrain_key(c)) if c["task"] != "none" else None, labelled, test)
            for c in cells]
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(jobs) as ex:
            reports = list(ex.map(_run_cell, *zip(*args)))
    else:
        reports = [_run_cell(*a) for a in args]

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "results.csv").write_text(results_csv(reports))
        (out / "summary.csv").write_text(summary_csv(reports))
        if figures:
            from .plotting import plot_summary
            plot_summary(reports, out / "mape_vs_nl.png")
    return reports
