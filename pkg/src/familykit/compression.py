"""Post-training low-rank decomposition with activation whitening.

A calibration pass accumulates per-matrix input Gram matrices; each target
matrix W is factorized by truncated SVD of W @ F, where F is a whitening
factor with F @ F.T equal to the Gram (Cholesky when definite, symmetric
SVD otherwise). Truncating in the whitened basis minimizes the activation
reconstruction error ||W X - W' X||_F rather than plain weight error.

Per-matrix removal ratios are distributed within a group proportionally to
inverted-log truncation losses, then integer ranks are nudged until the
achieved parameter removal lands within 2% of the requested target.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DefinitenessError, IntegrityError, NumericError
from .evaluation import branch_perplexity
from .linalg import cholesky_array, invert_lower_triangular, svd_array
from .model import (Factored, FamilialModel, forward_all_branches, get_weight_slot,
                    named_parameters, param_count, set_weight_slot)
from .tensor import Tensor

log = logging.getLogger(__name__)

RIDGE_FACTOR = 1e-6
SVD_CLAMP = 1e-8
RATIO_BOUNDS = (0.05, 0.95)
BUDGET_TOLERANCE = 0.02
SCORE_CLAMP = 1.0 + 1e-6


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------

@dataclass
class CalibrationSet:
    """Per-matrix input Gram = sum over positions of x x^T, in binary64."""

    grams: dict[str, np.ndarray] = field(default_factory=dict)
    samples: dict[str, int] = field(default_factory=dict)

    def add(self, name: str, x: np.ndarray) -> None:
        x2d = x.reshape(-1, x.shape[-1]).astype(np.float64)
        gram = x2d.T @ x2d
        if name in self.grams:
            self.grams[name] += gram
            self.samples[name] += x2d.shape[0]
        else:
            self.grams[name] = gram
            self.samples[name] = x2d.shape[0]


def capture_activations(model: FamilialModel, calib_tokens: np.ndarray,
                        scope) -> CalibrationSet:
    """Accumulate input Grams for every matrix selected by `scope` over
    calibration forward passes (all branches, fixed order)."""
    calib_tokens = np.asarray(calib_tokens, dtype=np.int64)
    if calib_tokens.ndim == 1:
        calib_tokens = calib_tokens[None, :]
    if calib_tokens.size == 0:
        raise ConfigError("calibration set is empty")
    calib = CalibrationSet()

    def tap(name: str, x: np.ndarray) -> None:
        if scope(name):
            calib.add(name, x)

    for start in range(0, calib_tokens.shape[0], 8):
        forward_all_branches(model, calib_tokens[start:start + 8], tap=tap)
    if not calib.grams:
        raise ConfigError("scope selected no matrices during calibration")
    return calib


def ridged(gram: np.ndarray) -> np.ndarray:
    """Add the standard diagonal ridge: 1e-6 * trace / dim."""
    dim = gram.shape[0]
    return gram + (RIDGE_FACTOR * np.trace(gram) / dim) * np.eye(dim)


# ---------------------------------------------------------------------------
# whitening and decomposition
# ---------------------------------------------------------------------------

@dataclass
class WhitenFactors:
    factor: np.ndarray   # F with F @ F.T == gram
    inverse: np.ndarray  # F^-1
    path: str            # "cholesky" or "svd"


def whiten(gram: np.ndarray, method: str = "auto") -> WhitenFactors:
    """Whitening factor of a symmetric Gram matrix.

    Primary path is Cholesky (F = L, inverse by triangular solve); on a
    non-positive-definite pivot it falls back to the symmetric SVD path
    F = U_s sqrt(S_s), whose inverse clamps singular values below
    1e-8 * max before inverting.
    """
    gram = np.asarray(gram, dtype=np.float64)
    if method not in ("auto", "cholesky", "svd"):
        raise ConfigError(f"unknown whitening method {method!r}")
    if method in ("auto", "cholesky"):
        try:
            lower = cholesky_array(gram)
            return WhitenFactors(factor=lower, inverse=invert_lower_triangular(lower),
                                 path="cholesky")
        except DefinitenessError:
            if method == "cholesky":
                raise
            log.info("gram not positive definite; falling back to SVD whitening")
    u_s, s_s, _ = svd_array(gram)
    s_clamped = np.maximum(s_s, SVD_CLAMP * (s_s[0] if s_s[0] > 0 else 1.0))
    root = np.sqrt(s_clamped)
    factor = u_s * root[None, :]
    inverse = (1.0 / root)[:, None] * u_s.T
    return WhitenFactors(factor=factor, inverse=inverse, path="svd")


def rank_for_ratio(out_dim: int, in_dim: int, ratio: float) -> int:
    """Rank whose factored size (out+in)*r fits the (1-ratio) budget, >= 1."""
    r = int(math.floor((1.0 - ratio) * out_dim * in_dim / (out_dim + in_dim)))
    if r < 1:
        log.warning("ratio %.3f leaves no rank for %dx%d; clamping to 1", ratio, out_dim, in_dim)
        r = 1
    return min(r, min(out_dim, in_dim))


def decompose(w: np.ndarray, gram: np.ndarray, ratio: float | None = None,
              rank: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Whitened truncated factorization of W (out x in): returns (A, B) with
    A (out x r), B (r x in) and A @ B the rank-r minimizer of ||W X - W' X||_F.

    `rank` overrides the ratio-derived budget (the budget can never express
    a full-rank factorization, since (out+in)*min(out,in) >= out*in).
    """
    w = np.asarray(w, dtype=np.float64)
    if rank is None:
        if ratio is None:
            raise ConfigError("decompose needs a ratio or an explicit rank")
        if not 0.0 <= ratio < 1.0:
            raise ConfigError("ratio must be in [0, 1)")
        rank = rank_for_ratio(w.shape[0], w.shape[1], ratio)
    rank = max(1, min(int(rank), min(w.shape)))
    wf = whiten(gram)
    u, s, vt = svd_array(w @ wf.factor)
    root = np.sqrt(s[:rank])
    a = u[:, :rank] * root[None, :]
    b = (root[:, None] * vt[:rank, :]) @ wf.inverse
    return a, b


def truncation_loss(w: np.ndarray, gram: np.ndarray, rank: int) -> float:
    """||W X - W' X||_F at the given retained rank, via the Gram identity
    ||M X||_F^2 == trace(M Gram M^T)."""
    w = np.asarray(w, dtype=np.float64)
    a, b = decompose(w, gram, rank=rank)
    diff = w - a @ b
    val = float(np.trace(diff @ np.asarray(gram, np.float64) @ diff.T))
    return math.sqrt(max(val, 0.0))


# ---------------------------------------------------------------------------
# ratio allocation (grouped, inverted-log scores)
# ---------------------------------------------------------------------------

@dataclass
class MatrixGroup:
    group_id: str
    members: list[str]
    losses: dict[str, float]                    # member -> L_min
    scores: dict[str, float] = field(default_factory=dict)  # member -> 1/log(L_min)

    def __post_init__(self):
        for name in self.members:
            l_min = max(self.losses[name], SCORE_CLAMP)
            self.scores[name] = 1.0 / math.log(l_min)


def allocate_ratios(groups: list[MatrixGroup], target_ratio: float) -> dict[str, float]:
    """Per-matrix removal ratio: len(G) * R * s_i / sum(s), clamped to
    [0.05, 0.95]. The unclamped group mean equals R exactly."""
    if not 0.0 < target_ratio < 1.0:
        raise ConfigError("target ratio must be in (0, 1)")
    lo, hi = RATIO_BOUNDS
    out: dict[str, float] = {}
    for group in groups:
        scores = [group.scores[m] for m in group.members]
        if any(not np.isfinite(s) or s <= 0 for s in scores):
            raise NumericError(f"group {group.group_id} has degenerate scores")
        total = math.fsum(scores)
        # evaluation order makes the symmetric case exact: len * s / total
        # is exactly 1.0 when every score is equal
        raw = {m: len(group.members) * group.scores[m] / total * target_ratio
               for m in group.members}
        clamped = {m: min(max(r, lo), hi) for m, r in raw.items()}
        if all(clamped[m] != raw[m] for m in group.members):
            log.warning("group %s: every ratio clamped; using uniform %.3f",
                        group.group_id, target_ratio)
            clamped = {m: target_ratio for m in group.members}
        out.update(clamped)
    return out


# ---------------------------------------------------------------------------
# plan construction and application
# ---------------------------------------------------------------------------

@dataclass
class PlanEntry:
    name: str
    l_min: float
    score: float
    ratio: float
    rank: int
    params_before: int
    params_after: int

    def to_dict(self) -> dict:
        return {"name": self.name, "L_min": self.l_min, "score": self.score,
                "ratio": self.ratio, "rank": self.rank,
                "params_before": self.params_before, "params_after": self.params_after}


@dataclass
class CompressionPlan:
    target_ratio: float
    entries: list[PlanEntry]
    factors: dict[str, tuple[np.ndarray, np.ndarray]]  # name -> (A, B), math layout
    params_before: int
    params_after: int

    @property
    def achieved_ratio(self) -> float:
        return 1.0 - self.params_after / self.params_before

    def to_dict(self) -> dict:
        return {"target_ratio": self.target_ratio,
                "achieved_ratio": self.achieved_ratio,
                "params_before": self.params_before,
                "params_after": self.params_after,
                "matrices": [e.to_dict() for e in self.entries]}


def group_of(name: str) -> str:
    """One group per decoder block, one shared group for vocabulary heads."""
    if ".blocks." in name:
        return name.rsplit(".", 1)[0]
    return "heads"


def _matrix_dims(model: FamilialModel, name: str) -> tuple[int, int]:
    slot = get_weight_slot(model, name)
    if isinstance(slot, Factored):
        raise ConfigError(f"{name} is already factored")
    in_dim, out_dim = slot.data.shape
    return out_dim, in_dim


def build_plan(model: FamilialModel, calib: CalibrationSet,
               target_ratio: float) -> CompressionPlan:
    """Eq-driven per-matrix ratios, floor ranks, then a rank repair pass so
    the achieved removal over the scope lands within 2% of target."""
    names = sorted(calib.grams)
    grams = {n: ridged(calib.grams[n]) for n in names}
    dims = {n: _matrix_dims(model, n) for n in names}
    weights = {n: get_weight_slot(model, n).data.T.astype(np.float64) for n in names}

    losses = {}
    for n in names:
        out_dim, in_dim = dims[n]
        ref_rank = rank_for_ratio(out_dim, in_dim, target_ratio)
        losses[n] = truncation_loss(weights[n], grams[n], ref_rank)

    by_group: dict[str, list[str]] = {}
    for n in names:
        by_group.setdefault(group_of(n), []).append(n)
    groups = [MatrixGroup(group_id=g, members=members,
                          losses={m: losses[m] for m in members})
              for g, members in sorted(by_group.items())]
    ratios = allocate_ratios(groups, target_ratio)

    ranks = {n: rank_for_ratio(dims[n][0], dims[n][1], ratios[n]) for n in names}
    before = sum(dims[n][0] * dims[n][1] for n in names)
    target_after = (1.0 - target_ratio) * before

    def after(rk: dict[str, int]) -> int:
        return sum((dims[n][0] + dims[n][1]) * rk[n] for n in names)

    # integer rank repair: floor rounding alone can overshoot the removal
    # target by more than 2% at small sizes
    while True:
        err = after(ranks) - target_after
        best = None
        for n in names:
            for delta in (-1, 1):
                r = ranks[n] + delta
                if not 1 <= r <= min(dims[n]):
                    continue
                new_err = err + delta * (dims[n][0] + dims[n][1])
                if abs(new_err) < abs(err) - 1e-9:
                    if best is None or abs(new_err) < abs(best[2]):
                        best = (n, delta, new_err)
        if best is None:
            break
        ranks[best[0]] += best[1]

    entries = []
    factors = {}
    scores = {g.group_id: g.scores for g in groups}
    for n in names:
        out_dim, in_dim = dims[n]
        a, b = decompose(weights[n], grams[n], rank=ranks[n])
        factors[n] = (a.astype(np.float32), b.astype(np.float32))
        entries.append(PlanEntry(
            name=n, l_min=losses[n], score=scores[group_of(n)][n], ratio=ratios[n],
            rank=ranks[n], params_before=out_dim * in_dim,
            params_after=(out_dim + in_dim) * ranks[n]))

    plan = CompressionPlan(target_ratio=target_ratio, entries=entries, factors=factors,
                           params_before=before, params_after=after(ranks))
    if abs(plan.achieved_ratio - target_ratio) > BUDGET_TOLERANCE:
        raise NumericError(
            f"achieved removal {plan.achieved_ratio:.4f} misses target "
            f"{target_ratio:.4f} by more than {BUDGET_TOLERANCE:.0%}")
    return plan


def apply_compression(model: FamilialModel, plan: CompressionPlan) -> FamilialModel:
    """Replace each planned matrix with its factored pair on a copy of the
    model; every parameter outside the plan is untouched bit for bit."""
    from .expansion import _copy_model
    compressed = _copy_model(model)
    for entry in plan.entries:
        try:
            slot = get_weight_slot(compressed, entry.name)
        except KeyError:
            raise IntegrityError(f"plan names {entry.name!r}, model has no such matrix")
        if isinstance(slot, Factored):
            raise IntegrityError(f"{entry.name} is already factored")
        a, b = plan.factors[entry.name]
        in_dim, out_dim = slot.data.shape
        if a.shape != (out_dim, entry.rank) or b.shape != (entry.rank, in_dim):
            raise IntegrityError(f"plan factors for {entry.name} do not fit the model")
        set_weight_slot(compressed, entry.name, Factored(
            b=Tensor(np.ascontiguousarray(b.T), requires_grad=True),
            a=Tensor(np.ascontiguousarray(a.T), requires_grad=True)))
    compressed.freeze_mask = {name: compressed.freeze_mask.get(name, False)
                              for name, _ in named_parameters(compressed)}
    return compressed


# ---------------------------------------------------------------------------
# measurement
# ---------------------------------------------------------------------------

@dataclass
class CompressionReport:
    branch: int
    ppl_base: float
    ppl_compressed: float
    params_base: int
    params_compressed: int
    plan: CompressionPlan

    @property
    def ppl_delta(self) -> float:
        return self.ppl_compressed - self.ppl_base

    def csv_rows(self) -> list[str]:
        rows = ["metric,value",
                f"branch,{self.branch}",
                f"ppl_base,{self.ppl_base:.9g}",
                f"ppl_compressed,{self.ppl_compressed:.9g}",
                f"ppl_delta,{self.ppl_delta:.9g}",
                f"params_base,{self.params_base}",
                f"params_compressed,{self.params_compressed}"]
        rows.append("matrix,L_min")
        for e in self.plan.entries:
            rows.append(f"{e.name},{e.l_min:.9g}")
        return rows

    def summary(self) -> str:
        return (f"branch {self.branch}: perplexity {self.ppl_base:.4f} -> "
                f"{self.ppl_compressed:.4f} (delta {self.ppl_delta:+.4f}), "
                f"params {self.params_base} -> {self.params_compressed} "
                f"({self.plan.achieved_ratio:.1%} of scope removed)")


def measure_compression(base: FamilialModel, compressed: FamilialModel,
                        eval_tokens: np.ndarray, branch: int,
                        plan: CompressionPlan) -> CompressionReport:
    if base.config.vocab != compressed.config.vocab:
        raise ConfigError("models have different vocabularies")
    return CompressionReport(
        branch=branch,
        ppl_base=branch_perplexity(base, eval_tokens, branch),
        ppl_compressed=branch_perplexity(compressed, eval_tokens, branch),
        params_base=param_count(base)["total"],
        params_compressed=param_count(compressed)["total"],
        plan=plan,
    )
