"""Seen/unseen compositional evaluation with a calibration-bias sweep.

A trained model is systematically biased toward seen compositions, so a
single accuracy number hides the trade-off. The protocol adds a calibration
bias to every non-seen candidate's score, sweeps it from -inf to +inf, and
records seen-sample and unseen-sample accuracy at each plateau. Reported
numbers: S and U are the curve's best seen and best unseen accuracy (the
-inf and +inf ends), H the best harmonic mean over the curve, AUC the area
under unseen-vs-seen accuracy.

Predictions only change where some sample's best biased candidate overtakes
its best unbiased one, so the sweep evaluates one bias inside each plateau
between consecutive critical values (plus one beyond each end and the two
infinite endpoints) rather than a dense grid; the resulting point set is
exactly what an arbitrarily fine grid attains, because evaluating at a
critical value itself can resolve ties in a mixture no finite grid sees.

Closed-world mode scores candidates over the dataset's test pairs;
open-world mode widens to the full state x object product and can prune it
with the label-transport feasibility filter. Samples whose ground truth is
pruned count as errors and are reported with a warning.
"""

from __future__ import annotations

import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from tsca.data import CompositionSpace, open_world_space
from tsca.env import worker_count
from tsca.errors import ConfigError, ContractError
from tsca.model import ImageScorer, ModelConfig, ModelParams, composition_primitive_plans
from tsca.transport import feasibility_scores, filter_compositions

Array = np.ndarray


@dataclass(frozen=True)
class EvalResult:
    """Sweep summary; candidate_count is after filtering, _unfiltered before."""

    S: float
    U: float
    H: float
    AUC: float
    curve: tuple
    candidate_count: int
    candidate_count_unfiltered: int

    def __post_init__(self):
        for name in ("S", "U", "H", "AUC"):
            v = float(getattr(self, name))
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"{name} must lie in [0, 1], got {v}")
            object.__setattr__(self, name, v)
        if self.H > 1.0:
            raise ContractError("H cannot exceed 1")
        curve = tuple((float(s), float(u)) for s, u in self.curve)
        if curve and self.AUC > max(s for s, _ in curve) + 1e-12:
            raise ContractError("AUC cannot exceed the best seen accuracy")
        object.__setattr__(self, "curve", curve)


def _accuracy(correct: Array, group: Array) -> float:
    n = int(group.sum())
    if n == 0:
        return 0.0
    return float(correct[group].sum()) / n


def bias_sweep(scores: Array, gt_positions, candidate_unseen, sample_unseen) -> list:
    """Accuracy trade-off curve from -inf to +inf calibration bias.

    scores is (n_samples, n_candidates); gt_positions holds each sample's
    ground-truth column, -1 if its pair is not a candidate (always wrong);
    candidate_unseen marks the columns that receive the bias; sample_unseen
    marks the samples counted in the unseen group. Returns [(seen_acc,
    unseen_acc), ...] with consecutive duplicates dropped.
    """
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] < 1 or scores.shape[1] < 1:
        raise ContractError(f"scores must be (n_samples, n_candidates), got {scores.shape}")
    gt = np.asarray(gt_positions, dtype=np.int64)
    cand_unseen = np.asarray(candidate_unseen, dtype=bool)
    samp_unseen = np.asarray(sample_unseen, dtype=bool)
    n, m = scores.shape
    if gt.shape != (n,) or samp_unseen.shape != (n,) or cand_unseen.shape != (m,):
        raise ContractError("input lengths disagree with the score matrix")
    if (gt >= m).any():
        raise ContractError("gt position out of candidate range")
    seen_group = ~samp_unseen
    unseen_group = samp_unseen

    def point(pred: Array):
        correct = pred == gt
        return (_accuracy(correct, seen_group), _accuracy(correct, unseen_group))

    def argmax_masked(mask_out: Array):
        masked = scores.copy()
        masked[:, mask_out] = -np.inf
        return np.argmax(masked, axis=1)

    if not cand_unseen.any() or cand_unseen.all():
        # one candidate family: the bias never reorders anything
        return [point(np.argmax(scores, axis=1))]

    curve = [point(argmax_masked(cand_unseen))]  # bias -> -inf

    best_seen = np.max(scores[:, ~cand_unseen], axis=1)
    best_unseen = np.max(scores[:, cand_unseen], axis=1)
    criticals = np.unique(best_seen - best_unseen)
    probes = [criticals[0] - 1.0]
    probes.extend((criticals[:-1] + criticals[1:]) / 2.0)
    probes.append(criticals[-1] + 1.0)
    bias_vec = np.where(cand_unseen, 1.0, 0.0)
    for b in probes:
        pred = np.argmax(scores + b * bias_vec, axis=1)
        p = point(pred)
        if p != curve[-1]:
            curve.append(p)

    endpoint = point(argmax_masked(~cand_unseen))  # bias -> +inf
    if endpoint != curve[-1]:
        curve.append(endpoint)
    return curve


def auc(curve) -> float:
    """Trapezoidal area of unseen accuracy as a function of seen accuracy.

    Ties in seen accuracy keep the sweep's traversal order (unseen accuracy
    descending), so vertical jumps sit after the area they cap and a
    rectangle curve integrates to its full height.
    """
    points = sorted(
        ((float(s), float(u)) for s, u in curve), key=lambda p: (p[0], -p[1])
    )
    if len(points) < 2:
        return 0.0
    total = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        total += (x1 - x0) * (y0 + y1) / 2.0
    return total


def best_h(curve) -> float:
    """Best harmonic mean 2su/(s+u) over the curve; 0 for the empty corner."""
    best = 0.0
    for s, u in curve:
        s, u = float(s), float(u)
        if s + u > 0:
            best = max(best, 2.0 * s * u / (s + u))
    return best


def _score_matrix(params: ModelParams, config: ModelConfig, space: CompositionSpace,
                  raws, candidates, gamma: float) -> Array:
    """Per-sample candidate scores, chunked over TSCA_THREADS workers.

    Each worker owns its own scorer (graphs are stateful), and rows land at
    fixed sample indices, so the result is identical at any thread count.
    """
    out = np.empty((len(raws), len(candidates)))
    workers = min(worker_count(), len(raws))

    def fill(indices):
        scorer = ImageScorer(params, config, space, candidates)
        for i in indices:
            out[i] = scorer.scores(raws[i], gamma)

    if workers <= 1:
        fill(range(len(raws)))
    else:
        chunks = np.array_split(np.arange(len(raws)), workers)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(fill, chunks))
    return out


def evaluate(params: ModelParams, config: ModelConfig, space: CompositionSpace,
             samples, mode: str = "closed", gamma: float = 0.5,
             quantile: float = None, threshold: float = None,
             keep_seen: bool = True, exclude_mode: bool = False) -> EvalResult:
    """Full protocol on the test split of `samples`.

    Closed mode restricts candidates to the dataset's test pairs; open mode
    widens to the full product, optionally pruned by the feasibility filter
    (give quantile or threshold). Filtering never removes the need to score
    a sample: pruned ground truths count as errors, with a warning.
    """
    if mode not in ("closed", "open"):
        raise ConfigError(f"mode must be 'closed' or 'open', got {mode!r}")
    test_samples = [s for s in samples if s.split == "test"]
    if not test_samples:
        raise ConfigError("no test samples to evaluate")

    if mode == "closed":
        eval_space = space
        candidates = list(space.test_pairs)
        if not candidates:
            raise ConfigError("the dataset declares no test pairs")
    else:
        eval_space = open_world_space(space)
        candidates = list(range(len(eval_space.pairs)))
    unfiltered_count = len(candidates)

    if quantile is not None or threshold is not None:
        fwd, bwd = composition_primitive_plans(params, config, eval_space)
        scores = feasibility_scores(fwd, bwd, eval_space)
        kept = set(
            int(i)
            for i in filter_compositions(
                scores, eval_space, threshold=threshold, quantile=quantile,
                keep_seen=keep_seen, exclude_mode=exclude_mode,
            )
        )
        candidates = [c for c in candidates if c in kept]
        if not candidates:
            raise ConfigError("feasibility filter removed every candidate pair")

    gt_open = []
    for s in test_samples:
        idx = eval_space.pair_index(s.gt_state, s.gt_object)
        if idx is None:
            raise ContractError(
                f"test sample's pair ({s.gt_state}, {s.gt_object}) is outside the space"
            )
        gt_open.append(idx)
    sample_unseen = np.array([not eval_space.seen_mask[i] for i in gt_open])

    if not sample_unseen.any():
        if mode == "closed":
            raise ConfigError("closed-world evaluation needs unseen test samples")
        warnings.warn("no unseen test samples; U is reported as 0", UserWarning,
                      stacklevel=2)
    if sample_unseen.all():
        if mode == "closed":
            raise ConfigError("closed-world evaluation needs seen test samples")
        warnings.warn("no seen test samples; S is reported as 0", UserWarning,
                      stacklevel=2)

    position = {c: i for i, c in enumerate(candidates)}
    gt_positions = np.array([position.get(i, -1) for i in gt_open], dtype=np.int64)
    dropped = int((gt_positions < 0).sum())
    if dropped:
        warnings.warn(
            f"{dropped} test samples' pairs are not in the candidate set and "
            "count as errors", UserWarning, stacklevel=2,
        )

    raws = [s.raw_patches for s in test_samples]
    matrix = _score_matrix(params, config, eval_space, raws, candidates, gamma)
    candidate_unseen = np.array([not eval_space.seen_mask[c] for c in candidates])
    curve = bias_sweep(matrix, gt_positions, candidate_unseen, sample_unseen)
    return EvalResult(
        S=max(s for s, _ in curve),
        U=max(u for _, u in curve),
        H=best_h(curve),
        AUC=auc(curve),
        curve=tuple(curve),
        candidate_count=len(candidates),
        candidate_count_unfiltered=unfiltered_count,
    )


def to_json(result: EvalResult) -> str:
    """Canonical six-decimal JSON with a fixed key order."""
    payload = {
        "S": round(result.S, 6),
        "U": round(result.U, 6),
        "H": round(result.H, 6),
        "AUC": round(result.AUC, 6),
        "candidate_count": result.candidate_count,
        "curve": [[round(s, 6), round(u, 6)] for s, u in result.curve],
    }
    return json.dumps(payload)
