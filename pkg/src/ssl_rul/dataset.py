"""Dataset directories: ``structures.jsonl`` plus ``manifest.json``."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fatigue import CrackParams, MaterialConfig, StrainSequence, generate_population, truncate

log = logging.getLogger(__name__)

RECORDS = "structures.jsonl"
MANIFEST = "manifest.json"


@dataclass
class Dataset:
    kind: str  # "unlabelled" | "labelled"
    d_ratio: float
    structures: list[StrainSequence]
    config: MaterialConfig
    seed: int
    stream: str = "labelled"
    excluded: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("unlabelled", "labelled"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if not 0.0 < self.d_ratio <= 1.0:
            raise ValueError("d_ratio must lie in (0, 1]")

    def __len__(self):
        return len(self.structures)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.structures]

    def subset(self, ids) -> "Dataset":
        wanted = set(ids)
        keep = [s for s in self.structures if s.id in wanted]
        return Dataset(self.kind, self.d_ratio, keep, self.config, self.seed, self.stream)

    def head(self, n: int) -> "Dataset":
        return Dataset(self.kind, self.d_ratio, self.structures[:n], self.config, self.seed, self.stream)


def build_dataset(config: MaterialConfig, n: int, kind: str, d: float = 1.0, *, seed: int | None = None,
                  h: int = 30, stream: str | None = None) -> Dataset:
    """Generate ``n`` structures; unlabelled ones are truncated at ratio ``d``.

    Truncated sequences shorter than h + 1 are dropped and listed in
    ``excluded``.
    """
    seed = config.rng_seed if seed is None else seed
    stream = stream or kind
    if kind == "labelled" and d != 1.0:
        raise ValueError("labelled datasets hold complete sequences (d = 1)")
    seqs = generate_population(config, n, stream=stream, seed=seed, min_length=h + 1)
    excluded = []
    if kind == "unlabelled":
        kept = []
        for s in seqs:
            t = truncate(s, d)
            if t.length < h + 1:
                excluded.append(s.id)
                continue
            kept.append(t)
        if excluded:
            log.warning("excluded %d structures shorter than h+1 after truncation", len(excluded))
        seqs = kept
    return Dataset(kind, d, seqs, config, seed, stream, excluded)


def structure_record(seq: StrainSequence, kind: str) -> dict:
    rec = {
        "id": seq.id,
        "sigma_max": seq.params.sigma_max,
        "m": seq.params.m,
        "C": seq.params.C,
        "a0": seq.params.a0,
    }
    if kind == "labelled":
        rec["failure_cycles"] = seq.failure_cycles
    rec["measurements"] = seq.measurements.tolist()
    return rec


def _record_to_structure(rec: dict, kind: str) -> StrainSequence:
    allowed = {"id", "sigma_max", "m", "C", "a0", "measurements"}
    if kind == "labelled":
        allowed.add("failure_cycles")
    extra = set(rec) - allowed
    if extra:
        raise ValueError(f"record {rec.get('id')!r} has unexpected fields {sorted(extra)}")
    params = CrackParams(a0=rec["a0"], m=rec["m"], C=rec["C"], sigma_max=rec["sigma_max"])
    meas = np.asarray(rec["measurements"], dtype=float)
    if meas.ndim != 2 or meas.shape[0] < 1 or not np.all(np.isfinite(meas)):
        raise ValueError(f"record {rec['id']!r}: measurements must be a finite non-empty matrix")
    return StrainSequence(id=rec["id"], params=params, measurements=meas,
                          failure_cycles=rec.get("failure_cycles") if kind == "labelled" else None)


def manifest_dict(ds: Dataset) -> dict:
    return {
        "kind": ds.kind,
        "d": ds.d_ratio,
        "seed": ds.seed,
        "stream": ds.stream,
        "n_structures": len(ds),
        "n_measurements": int(sum(s.length for s in ds.structures)),
        "excluded": list(ds.excluded),
        "ids": ds.ids,
        "config": ds.config.to_dict(),
    }


def dumps_records(ds: Dataset) -> str:
    return "".join(json.dumps(structure_record(s, ds.kind)) + "\n" for s in ds.structures)


def save_dataset(ds: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / RECORDS).write_text(dumps_records(ds))
    (out / MANIFEST).write_text(json.dumps(manifest_dict(ds), indent=2) + "\n")
    return out


def load_dataset(path) -> Dataset:
    path = Path(path)
    if not (path / MANIFEST).exists():
        raise FileNotFoundError(f"{path} is not a dataset directory (missing {MANIFEST}); "
                                "create one with `ssl-rul generate`")
    man = json.loads((path / MANIFEST).read_text())
    kind = man["kind"]
    seqs = []
    with open(path / RECORDS) as fh:
        for line in fh:
            if line.strip():
                seqs.append(_record_to_structure(json.loads(line), kind))
    if len(seqs) != man["n_structures"]:
        raise ValueError(f"{path}: manifest lists {man['n_structures']} structures, found {len(seqs)}")
    return Dataset(kind, man["d"], seqs, MaterialConfig.from_dict(man["config"]), man["seed"],
                   man.get("stream", kind), man.get("excluded", []))
