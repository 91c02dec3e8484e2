"""Checkpoint directories: ``manifest.json`` + ``params.bin`` (float32 LE)."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .nn import ModelSpec
from .training import Checkpoint, Normalizer

FORMAT = "ssl-rul-checkpoint"
VERSION = 1
PARAMS = "params.bin"
MANIFEST = "manifest.json"


def _blob(ckpt: Checkpoint) -> tuple[bytes, list[dict]]:
    table, chunks, offset = [], [], 0
    for name, arr in ckpt.params.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        table.append({"name": name, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
        chunks.append(a.tobytes())
        offset += a.size
    return b"".join(chunks), table


def manifest(ckpt: Checkpoint, table) -> dict:
    return {
        "format": FORMAT,
        "version": VERSION,
        "spec": ckpt.spec.to_dict(),
        "pretext": ckpt.pretext,
        "tensors": table,
        "normalizer": ckpt.normalizer.to_dict(),
        "frozen": list(ckpt.frozen),
        "rul_scale": ckpt.rul_scale,
        "training_log": ckpt.training_log,
        "provenance": ckpt.provenance,
    }


def save_checkpoint(ckpt: Checkpoint, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    blob, table = _blob(ckpt)
    (out / PARAMS).write_bytes(blob)
    (out / MANIFEST).write_text(json.dumps(manifest(ckpt, table), indent=1) + "\n")
    return out


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not (path / MANIFEST).exists():
        raise FileNotFoundError(f"{path} is not a checkpoint directory (missing {MANIFEST}); "
                                "create one with `ssl-rul pretrain` or `ssl-rul finetune`")
    man = json.loads((path / MANIFEST).read_text())
    if man.get("format") != FORMAT or man.get("version") != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format {man.get('format')!r} v{man.get('version')}")
    flat = np.frombuffer((path / PARAMS).read_bytes(), dtype="<f4")
    expected = 0
    params = {}
    for entry in man["tensors"]:
        if entry["offset"] != expected:
            raise ValueError(f"{path}: tensor table does not tile the blob at {entry['name']}")
        n = entry["count"]
        params[entry["name"]] = flat[expected:expected + n].astype(np.float64).reshape(entry["shape"])
        expected += n
    if expected != flat.size:
        raise ValueError(f"{path}: blob holds {flat.size} values, tensor table covers {expected}")
    names = set(params)
    missing = set(man["frozen"]) - names
    if missing:
        raise ValueError(f"{path}: frozen names not in tensor table: {sorted(missing)}")
    norm = Normalizer.from_dict(man["normalizer"])
    if np.any(norm.std <= 0):
        raise ValueError(f"{path}: normaliser std must be positive")
    return Checkpoint(spec=ModelSpec.from_dict(man["spec"]), params=params, normalizer=norm,
                      pretext=man["pretext"], frozen=man["frozen"], training_log=man["training_log"],
                      provenance=man["provenance"], rul_scale=man.get("rul_scale", 1.0))
