"""Run configuration: one JSON document, strict keys, dotted overrides.

Every command takes `--config run.json` plus any number of
`--section.key=value` overrides; unknown keys anywhere are an error so a
typo can never silently fall back to a default.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .expansion import ExpansionSpec
from .model import FamilyConfig
from .training import LAMBDA_KINDS, LambdaSchedule, TrainConfig

ENV_SEED = "FAMILYKIT_SEED"

_TRAIN_KEYS = {"peak_lr", "warmup_steps", "total_steps", "batch", "seq_len",
               "weight_decay", "beta1", "beta2", "adam_eps", "grad_clip_norm", "seed"}
_LAMBDA_KEYS = {"kind", "initial", "final"}
_EXPANSION_KEYS = {"target_branch", "n_new_blocks", "init_mode", "clone_source",
                   "gaussian_std", "seed"}
_COMPRESSION_KEYS = {"ratio", "calib_sequences", "calib_tokens"}
_PATH_KEYS = {"corpus", "eval_corpus", "checkpoint", "out"}
_TOP_KEYS = {"seed", "model", "train", "lambda", "expansion", "compression", "paths"}


@dataclass(frozen=True)
class CompressionConfig:
    ratio: float = 0.4
    calib_sequences: int = 64
    calib_tokens: int = 64

    def __post_init__(self):
        if not 0.0 < self.ratio < 1.0:
            raise ConfigError("compression ratio must be in (0, 1)")
        if self.calib_sequences < 1 or self.calib_tokens < 2:
            raise ConfigError("calibration size must be positive")


@dataclass
class RunConfig:
    seed: int
    model: FamilyConfig
    train: TrainConfig | None = None
    lambda_schedule: LambdaSchedule | None = None
    expansion: ExpansionSpec | None = None
    compression: CompressionConfig | None = None
    corpus: str | None = None
    eval_corpus: str | None = None
    checkpoint: str | None = None
    out: str | None = None

    def schedule_or_default(self) -> LambdaSchedule:
        if self.lambda_schedule is not None:
            return self.lambda_schedule
        if self.train is None:
            raise ConfigError("a train section is required to build a schedule")
        return LambdaSchedule.default(self.model.n_branches, self.train.total_steps)


def _check_keys(section: dict, allowed: set, where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def _apply_override(doc: dict, dotted: str, raw: str) -> None:
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = dotted.split(".")
    node = doc
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            node[part] = {}
        node = node[part]
    node[parts[-1]] = value


def parse_overrides(args: list[str]) -> list[tuple[str, str]]:
    """`--a.b.c=value` pairs; anything else is a config error."""
    out = []
    for arg in args:
        if not arg.startswith("--") or "=" not in arg:
            raise ConfigError(f"unrecognized argument {arg!r} (overrides look like --a.b=v)")
        key, _, value = arg[2:].partition("=")
        out.append((key, value))
    return out


def build_run_config(doc: dict, overrides: list[tuple[str, str]] = ()) -> RunConfig:
    doc = json.loads(json.dumps(doc))  # deep copy, JSON-typed
    for key, value in overrides:
        _apply_override(doc, key, value)
    _check_keys(doc, _TOP_KEYS, "config")
    if "model" not in doc:
        raise ConfigError("config needs a model section")
    model = FamilyConfig.from_dict(doc["model"])

    seed = doc.get("seed")
    if seed is None:
        env = os.environ.get(ENV_SEED)
        if env is None:
            raise ConfigError(f"seed is mandatory (set it in the config or via {ENV_SEED})")
        seed = int(env)
    seed = int(seed)

    train = None
    if "train" in doc:
        _check_keys(doc["train"], _TRAIN_KEYS, "train")
        tdoc = dict(doc["train"])
        tdoc.setdefault("seed", seed)
        train = TrainConfig(**tdoc)

    schedule = None
    if "lambda" in doc:
        _check_keys(doc["lambda"], _LAMBDA_KEYS, "lambda")
        if train is None:
            raise ConfigError("a lambda section requires a train section")
        ldoc = doc["lambda"]
        kind = ldoc.get("kind", "linear_decay")
        if kind not in LAMBDA_KINDS:
            raise ConfigError(f"lambda kind must be one of {LAMBDA_KINDS}")
        initial = tuple(ldoc.get("initial", (1.0,) * model.n_branches))
        final = tuple(ldoc.get("final", initial))
        if len(initial) != model.n_branches or len(final) != model.n_branches:
            raise ConfigError("lambda weights must list one value per branch")
        schedule = LambdaSchedule(kind=kind, initial=initial, final=final,
                                  total_steps=train.total_steps)

    expansion = None
    if "expansion" in doc:
        _check_keys(doc["expansion"], _EXPANSION_KEYS, "expansion")
        edoc = dict(doc["expansion"])
        edoc.setdefault("seed", seed)
        expansion = ExpansionSpec(**edoc)

    compression = None
    if "compression" in doc:
        _check_keys(doc["compression"], _COMPRESSION_KEYS, "compression")
        compression = CompressionConfig(**doc["compression"])

    paths = doc.get("paths", {})
    _check_keys(paths, _PATH_KEYS, "paths")

    return RunConfig(seed=seed, model=model, train=train, lambda_schedule=schedule,
                     expansion=expansion, compression=compression,
                     corpus=paths.get("corpus"), eval_corpus=paths.get("eval_corpus"),
                     checkpoint=paths.get("checkpoint"), out=paths.get("out"))


def load_run_config(path: str | Path, overrides: list[tuple[str, str]] = ()) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {p} is not valid JSON: {exc}") from exc
    return build_run_config(doc, overrides)
