"""Stabilized block expansion: append zero-residual blocks to one branch.

New blocks are grafted after the branch's existing blocks with their
attention output projection and MLP down projection zeroed, so at step 0
each new block contributes exactly nothing and the expanded branch is a
bit-exact identity extension of the original. Internal projections are
either freshly Gaussian ("randomized") or copied from an existing layer
("clone"); the two arms of that ablation differ in nothing else.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .data import ByteTokenizer
from .errors import ConfigError, IntegrityError
from .model import (BLOCK_MATRICES, BLOCK_NORMS, CallCounter, ExitHead, FamilialModel,
                    FamilyConfig, block_forward, copy_block, embedding, head_forward,
                    init_block, named_parameters, param_count, set_freeze)
from .rng import SplitRng
from .tensor import Tensor, causal_mask, rope_tables
from .training import (LambdaSchedule, TrainConfig, TrainState, run_training)

log = logging.getLogger(__name__)

INIT_MODES = ("randomized", "clone")


@dataclass(frozen=True)
class ExpansionSpec:
    target_branch: int
    n_new_blocks: int = 3
    init_mode: str = "randomized"
    clone_source: int = 0
    gaussian_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.n_new_blocks < 1:
            raise ConfigError("n_new_blocks must be >= 1")
        if self.init_mode not in INIT_MODES:
            raise ConfigError(f"init_mode must be one of {INIT_MODES}")

    def to_dict(self) -> dict:
        return {"target_branch": self.target_branch, "n_new_blocks": self.n_new_blocks,
                "init_mode": self.init_mode, "clone_source": self.clone_source,
                "gaussian_std": self.gaussian_std, "seed": self.seed}


@dataclass
class ExpansionReport:
    identity_deviation: float
    added_params: int
    trainable: list[str]
    frozen_count: int

    def to_dict(self) -> dict:
        return {"identity_deviation": self.identity_deviation,
                "added_params": self.added_params,
                "trainable": self.trainable,
                "frozen_count": self.frozen_count}


def _copy_model(model: FamilialModel) -> FamilialModel:
    from .model import _copy_weight  # structured copy, keeps Factored slots
    clone = FamilialModel(
        config=model.config,
        embedding=_copy_weight(model.embedding),
        backbone=[copy_block(b) for b in model.backbone],
        exits=[ExitHead(blocks=[copy_block(b) for b in h.blocks],
                        final_norm=_copy_weight(h.final_norm),
                        lm_proj=_copy_weight(h.lm_proj)) for h in model.exits],
    )
    clone.freeze_mask = dict(model.freeze_mask)
    return clone


def _new_block(cfg: FamilyConfig, model: FamilialModel, spec: ExpansionSpec, index: int):
    rng = SplitRng(spec.seed).split(f"expand/block/{index}")
    if spec.init_mode == "clone":
        if not 0 <= spec.clone_source < cfg.n_layers:
            raise ConfigError(f"clone_source {spec.clone_source} outside backbone "
                              f"[0, {cfg.n_layers})")
        block = copy_block(model.backbone[spec.clone_source])
    else:
        block = init_block(cfg, rng, f"new.{index}", std=spec.gaussian_std)
    # zero-residual constraint: the block's two output projections start at
    # zero, so its residual contribution is exactly zero at step 0
    block.w_o = Tensor(np.zeros_like(block.w_o.data), requires_grad=True)
    block.w_down = Tensor(np.zeros_like(block.w_down.data), requires_grad=True)
    return block


def expand(model: FamilialModel, spec: ExpansionSpec) -> tuple[FamilialModel, ExpansionReport]:
    """Append spec.n_new_blocks zero-residual blocks to the target branch.

    Returns a new model; everything except the new blocks and the target
    branch's vocabulary projection is frozen.
    """
    cfg = model.config
    if not 0 <= spec.target_branch < cfg.n_branches:
        raise ConfigError(f"target_branch {spec.target_branch} out of range")
    expanded = _copy_model(model)
    head = expanded.exits[spec.target_branch]
    before = param_count(expanded)["total"]
    for i in range(spec.n_new_blocks):
        head.blocks.append(_new_block(cfg, expanded, spec, i))

    bb = list(cfg.branch_blocks)
    bb[spec.target_branch] += spec.n_new_blocks
    expanded.config = replace(cfg, branch_blocks=tuple(bb))

    new_names = {f"exits.{spec.target_branch}.blocks.{j}.{m}"
                 for j in range(len(head.blocks) - spec.n_new_blocks, len(head.blocks))
                 for m in BLOCK_MATRICES + BLOCK_NORMS}
    head_name = f"exits.{spec.target_branch}.lm_proj"
    set_freeze(expanded, lambda name: not (
        name in new_names or name == head_name or name.startswith(head_name + ".")))

    added = param_count(expanded)["total"] - before
    report = ExpansionReport(
        identity_deviation=0.0,
        added_params=added,
        trainable=sorted(n for n, f in expanded.freeze_mask.items() if not f),
        frozen_count=sum(1 for f in expanded.freeze_mask.values() if f),
    )
    return expanded, report


def verify_identity(base_model: FamilialModel, expanded_model: FamilialModel,
                    probe_batch: np.ndarray, branch: int | None = None) -> float:
    """Max |logit difference| between base and expanded branch on a probe.

    Must be exactly 0.0 before any training step: the zeroed projections
    make each new block's output exactly zero even in binary32.
    """
    from .model import forward_branch
    if base_model.config.vocab != expanded_model.config.vocab:
        raise ConfigError("models have different vocabularies")
    if branch is None:  # infer the expanded branch from the block counts
        diffs = [k for k, (a, b) in enumerate(zip(base_model.config.branch_blocks,
                                                  expanded_model.config.branch_blocks))
                 if a != b]
        branch = diffs[0] if diffs else base_model.config.n_branches - 1
    base = forward_branch(base_model, probe_batch, branch)
    grown = forward_branch(expanded_model, probe_batch, branch)
    return float(np.max(np.abs(grown.data - base.data)))


def token_cosines(h_in: np.ndarray, h_out: np.ndarray) -> tuple[np.ndarray, bool]:
    """Per-token cosine between input and output hidden rows; zero-norm rows
    score 0 and raise the degenerate flag. Bit-identical rows score exactly
    1.0 (an identity block must not lose that to rounding)."""
    h_in = np.asarray(h_in, np.float64)
    h_out = np.asarray(h_out, np.float64)
    scores = np.zeros(h_in.shape[0])
    degenerate = False
    for t in range(h_in.shape[0]):
        ni = np.linalg.norm(h_in[t])
        no = np.linalg.norm(h_out[t])
        if ni == 0.0 or no == 0.0:
            degenerate = True
        elif np.array_equal(h_in[t], h_out[t]):
            scores[t] = 1.0
        else:
            scores[t] = float(h_in[t] @ h_out[t] / (ni * no))
    return scores, degenerate


def layer_cosine_similarity(model: FamilialModel, text_tokens: np.ndarray,
                            branch: int | None = None) -> tuple[np.ndarray, list[str], bool]:
    """cos(h_in, h_out) per block and token along one branch's forward path.

    Returns (matrix[layers, tokens], layer labels, degenerate flag); rows
    cover the backbone prefix then the branch blocks. Zero-norm hidden
    vectors score 0 and set the degenerate flag.
    """
    cfg = model.config
    if branch is None:
        branch = cfg.n_branches - 1
    tokens = np.asarray(text_tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.size == 0:
        raise ConfigError("text must be nonempty")
    t = tokens.shape[1]
    cos_t, sin_t = rope_tables(np.arange(t), cfg.head_dim, cfg.rope_base)
    allowed = causal_mask(t, t)
    h = embedding(model.embedding, tokens)
    blocks = list(model.backbone[:cfg.exit_depths[branch]])
    labels = [f"backbone.{i}" for i in range(cfg.exit_depths[branch])]
    head = model.exits[branch]
    blocks += head.blocks
    labels += [f"exits.{branch}.blocks.{j}" for j in range(len(head.blocks))]

    scores = np.zeros((len(blocks), t))
    degenerate = False
    for i, block in enumerate(blocks):
        h_in = h.data[0]
        h = block_forward(block, h, cfg, cos_t, sin_t, allowed)
        row, bad = token_cosines(h_in, h.data[0])
        scores[i] = row
        degenerate = degenerate or bad
    if degenerate:
        log.warning("zero-norm hidden state encountered; cosine set to 0")
    return scores, labels, degenerate


def cosine_csv_rows(scores: np.ndarray, tokens: np.ndarray) -> list[str]:
    tok = ByteTokenizer()
    rows = ["layer,token_index,token_text,cosine"]
    flat = np.asarray(tokens).reshape(-1)
    for layer in range(scores.shape[0]):
        for t in range(scores.shape[1]):
            text = tok.decode_text([flat[t]]) if flat[t] < 256 else f"<{int(flat[t])}>"
            text = text.replace('"', '""')
            rows.append(f'{layer},{t},"{text}",{scores[layer, t]:.9g}')
    return rows


@dataclass
class AblationResult:
    traces: dict[str, list[float]]          # arm -> per-step target-branch loss
    states: dict[str, TrainState]


def ablation_run(model: FamilialModel, corpus_ids: np.ndarray, spec: ExpansionSpec,
                 train_config: TrainConfig) -> AblationResult:
    """Train two expansions that differ only in internal init.

    Both arms share seeds, schedules and data order; step-0 losses are
    identical because both start as exact identity extensions.
    """
    result = AblationResult(traces={}, states={})
    for mode in INIT_MODES:
        arm_spec = replace(spec, init_mode=mode)
        grown, _ = expand(model, arm_spec)
        schedule = LambdaSchedule.branch_only(grown.config.n_branches,
                                              spec.target_branch, train_config.total_steps)
        state = run_training(grown, corpus_ids, train_config, schedule, log_every=0)
        result.traces[mode] = [m.branch_losses[spec.target_branch] for m in state.metrics]
        result.states[mode] = state
    return result
