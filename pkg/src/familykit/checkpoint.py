"""Checkpoint directory format.

`manifest.json` carries the model config, a parameter table (name, dtype,
shape, byte offset/length, trainable flag), the seed and format_version;
`weights.bin` is the concatenation of all parameters as row-major
little-endian binary32. Optimizer moments (when present) use the same
entry scheme in `optim.bin` so training resumes bit-exactly. Saving is
deterministic: save -> load -> save reproduces files byte for byte.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IntegrityError
from .model import (BLOCK_MATRICES, BLOCK_NORMS, BlockWeights, ExitHead, Factored,
                    FamilialModel, FamilyConfig, Weight, named_parameters)
from .tensor import Tensor

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
WEIGHTS = "weights.bin"
OPTIM = "optim.bin"


@dataclass
class OptimizerSnapshot:
    step: int
    moments_m: dict[str, np.ndarray] = field(default_factory=dict)
    moments_v: dict[str, np.ndarray] = field(default_factory=dict)


def config_fingerprint(config: FamilyConfig | dict) -> str:
    d = config.to_dict() if isinstance(config, FamilyConfig) else config
    blob = json.dumps(d, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def ensure_compatible(expected: FamilyConfig, found: FamilyConfig, what: str) -> None:
    if expected.to_dict() != found.to_dict():
        raise IntegrityError(
            f"{what}: config mismatch (expected fingerprint "
            f"{config_fingerprint(expected)}, checkpoint has {config_fingerprint(found)})")


def _pack(entries: list[tuple[str, np.ndarray, bool]]):
    table = []
    blobs = []
    offset = 0
    for name, arr, trainable in entries:
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        table.append({
            "name": name,
            "dtype": "f32",
            "shape": [int(s) for s in arr.shape],
            "byte_offset": offset,
            "byte_length": len(raw),
            "trainable": bool(trainable),
        })
        blobs.append(raw)
        offset += len(raw)
    return table, b"".join(blobs)


def save_checkpoint(path: str | Path, model: FamilialModel, seed: int,
                    optimizer: OptimizerSnapshot | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    params = [(name, p.data, not model.freeze_mask.get(name, False))
              for name, p in named_parameters(model)]
    table, blob = _pack(params)
    manifest = {
        "format_version": FORMAT_VERSION,
        "seed": int(seed),
        "config": model.config.to_dict(),
        "params": table,
    }
    if optimizer is not None:
        moment_entries = []
        for pname in optimizer.moments_m:
            moment_entries.append((f"{pname}::m", optimizer.moments_m[pname], True))
            moment_entries.append((f"{pname}::v", optimizer.moments_v[pname], True))
        otable, oblob = _pack(moment_entries)
        manifest["optimizer"] = {"step": int(optimizer.step), "entries": otable}
        (path / OPTIM).write_bytes(oblob)
    (path / WEIGHTS).write_bytes(blob)
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


def _read_entries(table: list[dict], blob: bytes) -> dict[str, np.ndarray]:
    out = {}
    for entry in table:
        if entry.get("dtype") != "f32":
            raise IntegrityError(f"unsupported dtype {entry.get('dtype')!r} for {entry['name']}")
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count,
                            offset=entry["byte_offset"]).copy()
        out[entry["name"]] = arr.reshape(entry["shape"])
    return out


def _require(arrays: dict[str, np.ndarray], name: str) -> np.ndarray:
    if name not in arrays:
        raise IntegrityError(f"checkpoint is missing parameter {name!r}")
    return arrays[name]


def _weight_from(arrays: dict[str, np.ndarray], trainable: dict[str, bool],
                 base: str) -> Weight:
    if base in arrays:
        return Tensor(arrays[base], requires_grad=trainable[base])
    if f"{base}.A" in arrays and f"{base}.B" in arrays:
        return Factored(
            b=Tensor(arrays[f"{base}.B"], requires_grad=trainable[f"{base}.B"]),
            a=Tensor(arrays[f"{base}.A"], requires_grad=trainable[f"{base}.A"]),
        )
    raise IntegrityError(f"checkpoint is missing parameter {base!r}")


def load_checkpoint(path: str | Path) -> tuple[FamilialModel, int, OptimizerSnapshot | None]:
    path = Path(path)
    manifest_path = path / MANIFEST
    if not manifest_path.exists():
        raise IntegrityError(f"no manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise IntegrityError(f"unsupported checkpoint format_version {version!r}")
    config = FamilyConfig.from_dict(manifest["config"])
    blob = (path / WEIGHTS).read_bytes()
    arrays = _read_entries(manifest["params"], blob)
    trainable = {e["name"]: bool(e.get("trainable", True)) for e in manifest["params"]}

    def block_from(prefix: str) -> BlockWeights:
        kwargs = {m: _weight_from(arrays, trainable, f"{prefix}.{m}") for m in BLOCK_MATRICES}
        for m in BLOCK_NORMS:
            kwargs[m] = Tensor(_require(arrays, f"{prefix}.{m}"),
                               requires_grad=trainable[f"{prefix}.{m}"])
        return BlockWeights(**kwargs)

    backbone = [block_from(f"backbone.{i}") for i in range(config.n_layers)]
    exits = []
    for k in range(config.n_branches):
        blocks = [block_from(f"exits.{k}.blocks.{j}") for j in range(config.branch_blocks[k])]
        exits.append(ExitHead(
            blocks=blocks,
            final_norm=Tensor(_require(arrays, f"exits.{k}.final_norm"),
                              requires_grad=trainable[f"exits.{k}.final_norm"]),
            lm_proj=_weight_from(arrays, trainable, f"exits.{k}.lm_proj"),
        ))
    model = FamilialModel(
        config=config,
        embedding=Tensor(_require(arrays, "embedding"),
                         requires_grad=trainable["embedding"]),
        backbone=backbone,
        exits=exits,
    )
    model.freeze_mask = {name: not trainable[name] for name, _ in named_parameters(model)}
    missing = set(arrays) - {name for name, _ in named_parameters(model)}
    if missing:
        raise IntegrityError(f"checkpoint has parameters the config cannot place: {sorted(missing)}")

    optimizer = None
    if "optimizer" in manifest:
        oblob = (path / OPTIM).read_bytes()
        oarrays = _read_entries(manifest["optimizer"]["entries"], oblob)
        optimizer = OptimizerSnapshot(step=int(manifest["optimizer"]["step"]))
        for name, arr in oarrays.items():
            pname, kind = name.rsplit("::", 1)
            (optimizer.moments_m if kind == "m" else optimizer.moments_v)[pname] = arr
    return model, int(manifest["seed"]), optimizer
