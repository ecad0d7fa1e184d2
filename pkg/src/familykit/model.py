"""Shared-backbone decoder transformer with multiple exit heads.

One stack of pre-norm GQA blocks is shared by every branch; branch k taps
the residual stream after backbone layer `exit_depths[k]`, runs its own
branch blocks, and projects to the vocabulary through an untied head.
Sub-models at different exits are therefore nested prefixes of one
parameter store, never copies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator, Sequence, Union

import numpy as np

from .errors import ConfigError, InputError
from .rng import SplitRng
from .tensor import (Tensor, add, causal_mask, embedding, masked_softmax, matmul, mul,
                     repeat_heads, reshape, rmsnorm, rope, rope_tables, scale, silu,
                     transpose)

INIT_STD = 0.02

BLOCK_MATRICES = ("w_q", "w_k", "w_v", "w_o", "w_gate", "w_up", "w_down")
BLOCK_NORMS = ("attn_norm", "mlp_norm")


@dataclass(frozen=True)
class FamilyConfig:
    """Architecture description for one model family."""

    n_layers: int
    hidden: int
    q_heads: int
    kv_heads: int
    vocab: int
    ctx_len: int
    exit_depths: tuple[int, ...]
    branch_blocks: tuple[int, ...]
    mlp_mult: int = 4
    rms_eps: float = 1e-5
    rope_base: float = 10000.0

    def __post_init__(self):
        object.__setattr__(self, "exit_depths", tuple(int(d) for d in self.exit_depths))
        bb = self.branch_blocks
        if isinstance(bb, int):
            bb = (bb,) * len(self.exit_depths)
        object.__setattr__(self, "branch_blocks", tuple(int(b) for b in bb))
        self.validate()

    def validate(self) -> None:
        if self.vocab < 2:
            raise ConfigError("vocab must be >= 2")
        if self.ctx_len < 1:
            raise ConfigError("ctx_len must be >= 1")
        if self.q_heads < 1 or self.kv_heads < 1 or self.q_heads % self.kv_heads:
            raise ConfigError("q_heads must be a positive multiple of kv_heads")
        if self.hidden % self.q_heads:
            raise ConfigError("hidden must be divisible by q_heads")
        if self.head_dim % 2:
            raise ConfigError("head dimension must be even for rotary embedding")
        if not self.exit_depths:
            raise ConfigError("at least one exit is required")
        if len(self.branch_blocks) != len(self.exit_depths):
            raise ConfigError("branch_blocks must give one count per exit")
        if any(b < 0 for b in self.branch_blocks):
            raise ConfigError("branch_blocks counts must be >= 0")
        depths = self.exit_depths
        if list(depths) != sorted(set(depths)):
            raise ConfigError("exit_depths must be strictly increasing")
        if depths[-1] != self.n_layers:
            raise ConfigError("last exit depth must equal n_layers")
        # n_layers == 0 with exit_depths == (0,) is the degenerate head-only
        # model used for parameter accounting; otherwise depths start at 1.
        if self.n_layers > 0 and depths[0] < 1:
            raise ConfigError("exit depths must be >= 1")
        if self.n_layers < 0:
            raise ConfigError("n_layers must be >= 0")
        if self.mlp_mult < 1:
            raise ConfigError("mlp_mult must be >= 1")
        if self.rms_eps <= 0 or self.rope_base <= 0:
            raise ConfigError("rms_eps and rope_base must be positive")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.q_heads

    @property
    def n_branches(self) -> int:
        return len(self.exit_depths)

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers, "hidden": self.hidden,
            "q_heads": self.q_heads, "kv_heads": self.kv_heads,
            "vocab": self.vocab, "ctx_len": self.ctx_len,
            "exit_depths": list(self.exit_depths),
            "branch_blocks": list(self.branch_blocks),
            "mlp_mult": self.mlp_mult, "rms_eps": self.rms_eps,
            "rope_base": self.rope_base,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FamilyConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        missing = {"n_layers", "hidden", "q_heads", "kv_heads", "vocab", "ctx_len",
                   "exit_depths", "branch_blocks"} - set(d)
        if missing:
            raise ConfigError(f"missing model config keys: {sorted(missing)}")
        d = dict(d)
        d["exit_depths"] = tuple(d["exit_depths"])
        bb = d["branch_blocks"]
        d["branch_blocks"] = tuple(bb) if isinstance(bb, (list, tuple)) else bb
        return cls(**d)


def desk_config(**overrides) -> FamilyConfig:
    """Smallest configuration exercising sharing, GQA grouping and nesting."""
    base = dict(n_layers=4, hidden=32, q_heads=4, kv_heads=2, vocab=259,
                ctx_len=64, exit_depths=(2, 4), branch_blocks=(1, 1))
    base.update(overrides)
    return FamilyConfig(**base)


@dataclass
class Factored:
    """Low-rank replacement for a weight matrix: y = (x @ b) @ a."""

    b: Tensor  # (in, r), applied first
    a: Tensor  # (r, out), applied second


Weight = Union[Tensor, Factored]


@dataclass
class BlockWeights:
    w_q: Weight
    w_k: Weight
    w_v: Weight
    w_o: Weight
    w_gate: Weight
    w_up: Weight
    w_down: Weight
    attn_norm: Tensor
    mlp_norm: Tensor


@dataclass
class ExitHead:
    blocks: list[BlockWeights]
    final_norm: Tensor
    lm_proj: Weight


@dataclass
class FamilialModel:
    config: FamilyConfig
    embedding: Tensor
    backbone: list[BlockWeights]
    exits: list[ExitHead]
    freeze_mask: dict[str, bool] = field(default_factory=dict)  # True = frozen


class CallCounter:
    """Counts block applications; attach one to a forward call to audit reuse."""

    def __init__(self):
        self.blocks = 0

    def tick(self):
        self.blocks += 1


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def _gaussian_tensor(rng: SplitRng, label: str, shape, std: float = INIT_STD) -> Tensor:
    return Tensor(rng.split(label).gaussian(shape, std=std), requires_grad=True)


def _block_shapes(cfg: FamilyConfig) -> dict[str, tuple[int, int]]:
    h, dh = cfg.hidden, cfg.head_dim
    kv = cfg.kv_heads * dh
    m = cfg.mlp_mult * h
    return {"w_q": (h, h), "w_k": (h, kv), "w_v": (h, kv), "w_o": (h, h),
            "w_gate": (h, m), "w_up": (h, m), "w_down": (m, h)}


def init_block(cfg: FamilyConfig, rng: SplitRng, label: str,
               std: float = INIT_STD) -> BlockWeights:
    shapes = _block_shapes(cfg)
    mats = {m: _gaussian_tensor(rng, f"{label}.{m}", shapes[m], std) for m in BLOCK_MATRICES}
    return BlockWeights(**mats,
                        attn_norm=Tensor(np.ones(cfg.hidden, np.float32), requires_grad=True),
                        mlp_norm=Tensor(np.ones(cfg.hidden, np.float32), requires_grad=True))


def copy_block(block: BlockWeights) -> BlockWeights:
    return BlockWeights(**{name: _copy_weight(getattr(block, name))
                           for name in BLOCK_MATRICES + BLOCK_NORMS})


def _copy_weight(w: Weight) -> Weight:
    if isinstance(w, Factored):
        return Factored(b=_copy_weight(w.b), a=_copy_weight(w.a))
    return Tensor(w.data.copy(), requires_grad=w.requires_grad)


def init_model(config: FamilyConfig, seed: int) -> FamilialModel:
    """Gaussian(0, 0.02^2) projections, unit norm gains; branch block j of
    exit k starts as a copy of backbone layer exit_depths[k] + j when that
    layer exists, else fresh Gaussian."""
    rng = SplitRng(seed).split("init")
    emb = _gaussian_tensor(rng, "embedding", (config.vocab, config.hidden))
    backbone = [init_block(config, rng, f"backbone.{i}") for i in range(config.n_layers)]
    exits = []
    for k, depth in enumerate(config.exit_depths):
        blocks = []
        for j in range(config.branch_blocks[k]):
            src = depth + j
            if src < config.n_layers:
                blocks.append(copy_block(backbone[src]))
            else:
                blocks.append(init_block(config, rng, f"exits.{k}.blocks.{j}"))
        exits.append(ExitHead(
            blocks=blocks,
            final_norm=Tensor(np.ones(config.hidden, np.float32), requires_grad=True),
            lm_proj=_gaussian_tensor(rng, f"exits.{k}.lm_proj", (config.hidden, config.vocab)),
        ))
    model = FamilialModel(config=config, embedding=emb, backbone=backbone, exits=exits)
    model.freeze_mask = {name: False for name, _ in named_parameters(model)}
    return model


# ---------------------------------------------------------------------------
# parameter traversal
# ---------------------------------------------------------------------------

def _weight_params(name: str, w: Weight) -> Iterator[tuple[str, Tensor]]:
    if isinstance(w, Factored):
        yield f"{name}.A", w.a
        yield f"{name}.B", w.b
    else:
        yield name, w


def named_parameters(model: FamilialModel) -> list[tuple[str, Tensor]]:
    out: list[tuple[str, Tensor]] = [("embedding", model.embedding)]
    for i, block in enumerate(model.backbone):
        for m in BLOCK_MATRICES:
            out.extend(_weight_params(f"backbone.{i}.{m}", getattr(block, m)))
        for m in BLOCK_NORMS:
            out.append((f"backbone.{i}.{m}", getattr(block, m)))
    for k, head in enumerate(model.exits):
        for j, block in enumerate(head.blocks):
            for m in BLOCK_MATRICES:
                out.extend(_weight_params(f"exits.{k}.blocks.{j}.{m}", getattr(block, m)))
            for m in BLOCK_NORMS:
                out.append((f"exits.{k}.blocks.{j}.{m}", getattr(block, m)))
        out.append((f"exits.{k}.final_norm", head.final_norm))
        out.extend(_weight_params(f"exits.{k}.lm_proj", head.lm_proj))
    return out


def _weight_slots(model: FamilialModel) -> list[tuple[str, object, str]]:
    """(base name, owner object, attribute) for every matrix slot that can
    hold either a plain or a factored weight."""
    slots: list[tuple[str, object, str]] = []
    for i, block in enumerate(model.backbone):
        for m in BLOCK_MATRICES:
            slots.append((f"backbone.{i}.{m}", block, m))
    for k, head in enumerate(model.exits):
        for j, block in enumerate(head.blocks):
            for m in BLOCK_MATRICES:
                slots.append((f"exits.{k}.blocks.{j}.{m}", block, m))
        slots.append((f"exits.{k}.lm_proj", head, "lm_proj"))
    return slots


def get_weight_slot(model: FamilialModel, name: str) -> Weight:
    for slot_name, owner, attr in _weight_slots(model):
        if slot_name == name:
            return getattr(owner, attr)
    raise KeyError(name)

def set_weight_slot(model: FamilialModel, name: str, value: Weight) -> None:
    for slot_name, owner, attr in _weight_slots(model):
        if slot_name == name:
            setattr(owner, attr, value)
            return
    raise KeyError(name)


def param_count(model: FamilialModel) -> dict:
    """Exact integer parameter counts by component."""
    def count(names_params):
        return int(sum(p.data.size for _, p in names_params))

    named = named_parameters(model)
    backbone = count((n, p) for n, p in named if n.startswith("backbone."))
    emb = count((n, p) for n, p in named if n == "embedding")
    exits = []
    for k in range(len(model.exits)):
        exits.append(count((n, p) for n, p in named if n.startswith(f"exits.{k}.")))
    return {"embedding": emb, "backbone": backbone, "exits": exits,
            "total": emb + backbone + sum(exits)}


def set_freeze(model: FamilialModel, freeze_predicate: Callable[[str], bool]) -> dict[str, bool]:
    """Set the freeze mask from a predicate over parameter names (True = freeze).

    Mirrors the mask into each tensor's requires_grad so frozen subgraphs
    drop out of backward entirely.
    """
    mask = {}
    for name, p in named_parameters(model):
        frozen = bool(freeze_predicate(name))
        mask[name] = frozen
        p.requires_grad = not frozen
    model.freeze_mask = mask
    return mask


def trainable_names(model: FamilialModel) -> list[str]:
    return [n for n, _ in named_parameters(model) if not model.freeze_mask.get(n, False)]


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def apply_linear(x: Tensor, w: Weight, name: str | None = None,
                 tap: Callable[[str, np.ndarray], None] | None = None) -> Tensor:
    if tap is not None and name is not None:
        tap(name, x.data)
    if isinstance(w, Factored):
        return matmul(matmul(x, w.b), w.a)
    return matmul(x, w)


def block_forward(block: BlockWeights, h: Tensor, cfg: FamilyConfig,
                  cos: np.ndarray, sin: np.ndarray, allowed: np.ndarray,
                  counter: CallCounter | None = None, name: str = "",
                  tap: Callable[[str, np.ndarray], None] | None = None) -> Tensor:
    """One pre-norm decoder block: causal GQA attention then gated MLP."""
    if counter is not None:
        counter.tick()
    b, t, _ = h.data.shape
    dh, hq, hkv = cfg.head_dim, cfg.q_heads, cfg.kv_heads

    a = rmsnorm(h, block.attn_norm, cfg.rms_eps)
    q = apply_linear(a, block.w_q, f"{name}.w_q", tap)
    k = apply_linear(a, block.w_k, f"{name}.w_k", tap)
    v = apply_linear(a, block.w_v, f"{name}.w_v", tap)
    q = transpose(reshape(q, (b, t, hq, dh)), (0, 2, 1, 3))
    k = transpose(reshape(k, (b, t, hkv, dh)), (0, 2, 1, 3))
    v = transpose(reshape(v, (b, t, hkv, dh)), (0, 2, 1, 3))
    q = rope(q, cos, sin)
    k = rope(k, cos, sin)
    k = repeat_heads(k, hq // hkv)
    v = repeat_heads(v, hq // hkv)

    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    probs = masked_softmax(scores, allowed[None, None])
    ctx = reshape(transpose(matmul(probs, v), (0, 2, 1, 3)), (b, t, cfg.hidden))
    h = add(h, apply_linear(ctx, block.w_o, f"{name}.w_o", tap))

    m = rmsnorm(h, block.mlp_norm, cfg.rms_eps)
    gate = silu(apply_linear(m, block.w_gate, f"{name}.w_gate", tap))
    up = apply_linear(m, block.w_up, f"{name}.w_up", tap)
    h = add(h, apply_linear(mul(gate, up), block.w_down, f"{name}.w_down", tap))
    return h


def head_forward(head: ExitHead, h: Tensor, cfg: FamilyConfig, cos: np.ndarray,
                 sin: np.ndarray, allowed: np.ndarray, branch: int,
                 counter: CallCounter | None = None,
                 tap: Callable[[str, np.ndarray], None] | None = None) -> Tensor:
    for j, block in enumerate(head.blocks):
        h = block_forward(block, h, cfg, cos, sin, allowed, counter,
                          name=f"exits.{branch}.blocks.{j}", tap=tap)
    h = rmsnorm(h, head.final_norm, cfg.rms_eps)
    return apply_linear(h, head.lm_proj, f"exits.{branch}.lm_proj", tap)


def _check_tokens(cfg: FamilyConfig, tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.shape[1] > cfg.ctx_len:
        raise InputError(f"sequence length {tokens.shape[1]} exceeds ctx_len {cfg.ctx_len}")
    return tokens


def forward_branch(model: FamilialModel, tokens, branch: int,
                   counter: CallCounter | None = None, pos_offset: int = 0,
                   tap: Callable[[str, np.ndarray], None] | None = None) -> Tensor:
    """Logits (B, T, vocab) of one branch: backbone prefix plus its head."""
    cfg = model.config
    if not 0 <= branch < cfg.n_branches:
        raise InputError(f"branch {branch} out of range")
    tokens = _check_tokens(cfg, tokens)
    t = tokens.shape[1]
    cos, sin = rope_tables(np.arange(pos_offset, pos_offset + t), cfg.head_dim,
                           cfg.rope_base, dtype=model.embedding.data.dtype)
    allowed = causal_mask(t, t)
    h = embedding(model.embedding, tokens)
    for i in range(cfg.exit_depths[branch]):
        h = block_forward(model.backbone[i], h, cfg, cos, sin, allowed, counter,
                          name=f"backbone.{i}", tap=tap)
    return head_forward(model.exits[branch], h, cfg, cos, sin, allowed, branch,
                        counter, tap=tap)


def forward_all_branches(model: FamilialModel, tokens,
                         counter: CallCounter | None = None,
                         tap: Callable[[str, np.ndarray], None] | None = None) -> list[Tensor]:
    """All branch logits from exactly one backbone pass (hidden states are
    tapped at each exit depth, never recomputed)."""
    cfg = model.config
    tokens = _check_tokens(cfg, tokens)
    t = tokens.shape[1]
    cos, sin = rope_tables(np.arange(t), cfg.head_dim, cfg.rope_base,
                           dtype=model.embedding.data.dtype)
    allowed = causal_mask(t, t)
    h = embedding(model.embedding, tokens)
    outs: list[Tensor | None] = [None] * cfg.n_branches
    for k, depth in enumerate(cfg.exit_depths):
        if depth == 0:
            outs[k] = head_forward(model.exits[k], h, cfg, cos, sin, allowed, k, counter, tap=tap)
    for i in range(cfg.n_layers):
        h = block_forward(model.backbone[i], h, cfg, cos, sin, allowed, counter,
                          name=f"backbone.{i}", tap=tap)
        for k, depth in enumerate(cfg.exit_depths):
            if depth == i + 1:
                outs[k] = head_forward(model.exits[k], h, cfg, cos, sin, allowed, k,
                                       counter, tap=tap)
    return outs  # type: ignore[return-value]


def cast_model(model: FamilialModel, dtype) -> FamilialModel:
    """Copy of the model with every parameter in `dtype` (test twins)."""
    def cast_w(w: Weight) -> Weight:
        if isinstance(w, Factored):
            return Factored(b=cast_w(w.b), a=cast_w(w.a))
        return Tensor(w.data, requires_grad=w.requires_grad, dtype=dtype)

    def cast_block(b: BlockWeights) -> BlockWeights:
        return BlockWeights(**{m: cast_w(getattr(b, m))
                               for m in BLOCK_MATRICES + BLOCK_NORMS})

    out = FamilialModel(
        config=model.config,
        embedding=cast_w(model.embedding),
        backbone=[cast_block(b) for b in model.backbone],
        exits=[ExitHead(blocks=[cast_block(b) for b in h.blocks],
                        final_norm=cast_w(h.final_norm),
                        lm_proj=cast_w(h.lm_proj)) for h in model.exits],
    )
    out.freeze_mask = dict(model.freeze_mask)
    return out


def extract_submodel(model: FamilialModel, branch: int) -> FamilialModel:
    """Standalone single-exit copy: backbone prefix plus the chosen head."""
    cfg = model.config
    if not 0 <= branch < cfg.n_branches:
        raise InputError(f"branch {branch} out of range")
    depth = cfg.exit_depths[branch]
    head = model.exits[branch]
    sub_cfg = replace(cfg, n_layers=depth, exit_depths=(depth,),
                      branch_blocks=(len(head.blocks),))
    sub = FamilialModel(
        config=sub_cfg,
        embedding=_copy_weight(model.embedding),
        backbone=[copy_block(b) for b in model.backbone[:depth]],
        exits=[ExitHead(blocks=[copy_block(b) for b in head.blocks],
                        final_norm=_copy_weight(head.final_norm),
                        lm_proj=_copy_weight(head.lm_proj))],
    )
    sub.freeze_mask = {name: False for name, _ in named_parameters(sub)}
    for _, p in named_parameters(sub):
        p.requires_grad = True
    return sub
