"""End-to-end compositional recognition over aligned triple distributions.

The model embeds raw patches into a shared space (P1), builds candidate
composition embeddings from state and object tables through a pair composer
and patch cross-attention (P2), and primitive embeddings straight from the
tables (P3). A global visual feature (mean patch embedding plus a learned
token) drives the composition weights; two adapter heads split it into
state and object views that drive the primitive weights and classifiers.

Training minimizes a weighted sum of four terms per image: the
classification losses of composition, state and object heads; the
three-way conditional-transport total; the cycle-consistency gap of the
composition -> patch -> primitive -> composition chain; and the decoupling
penalty that pushes each adapter view orthogonal to the opposite
primitive's embedding. All terms share one differentiation graph per patch
count, rebound per sample, and are optimized with momentum SGD.

Inference blends the composition posterior over a candidate set with the
product of the primitive posteriors. The label-only transport plans
between composition and primitive embeddings (no image involved) provide
the feasibility scores used by the open-world filter. Checkpoints store
the header (dimensions, head count, temperature count, flag bits) followed
by the parameter blocks as little-endian float64 in declared field order.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, fields

import numpy as np

from tsca.data import CompositionSpace, Sample
from tsca.diffcore import Tape
from tsca.errors import ConfigError, ContractError, NumericError, ParseError
from tsca.sets import AdapterNodes, AdapterWeights, FusionNodes, FusionWeights, TriSet
from tsca.sets import attach_adapter, attach_composition_set, attach_primitive_set
from tsca.sets import adapt_visual, build_composition_set, build_patch_set
from tsca.sets import build_primitive_set
from tsca.transport import Temperature, attach_ct_pair, attach_cycle_loss
from tsca.transport import backward_plan, forward_plan

Array = np.ndarray

NLL_FLOOR = 1e-30
CHECKPOINT_MAGIC = b"TSCA1"


@dataclass(frozen=True)
class ModelConfig:
    n_states: int
    n_objects: int
    dim: int = 16
    raw_dim: int = 32
    heads: int = 2
    renorm_primitives: bool = False
    split_temperatures: bool = False
    psi_init: float = math.log(0.07)
    init_seed: int = 0

    def __post_init__(self):
        for name in ("n_states", "n_objects", "dim", "raw_dim", "heads"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.dim % self.heads != 0:
            raise ConfigError(f"heads={self.heads} must divide dim={self.dim}")
        if not math.isfinite(self.psi_init):
            raise ConfigError(f"psi_init must be finite, got {self.psi_init}")

    @property
    def n_temps(self) -> int:
        return 3 if self.split_temperatures else 1


@dataclass(frozen=True)
class ModelParams:
    """All trainable arrays; field order is the checkpoint block order."""

    state_table: Array
    object_table: Array
    comb_w: Array
    comb_b: Array
    vis_w: Array
    vis_b: Array
    cls_token: Array
    fusion_wq: Array
    fusion_wk: Array
    fusion_wv: Array
    fusion_wo: Array
    adapter_state_w: Array
    adapter_state_b: Array
    adapter_object_w: Array
    adapter_object_b: Array
    psi: Array

    def __post_init__(self):
        arrays = {}
        for field in fields(self):
            arr = np.array(getattr(self, field.name), dtype=np.float64, order="C")
            if not np.isfinite(arr).all():
                raise ContractError(f"{field.name} contains non-finite values")
            arrays[field.name] = arr
        d = arrays["state_table"].shape[0] if arrays["state_table"].ndim == 2 else 0
        expected = {
            "state_table": (d, None),
            "object_table": (d, None),
            "comb_w": (d, 2 * d),
            "comb_b": (d,),
            "vis_w": (d, None),
            "vis_b": (d,),
            "cls_token": (d,),
            "fusion_wq": (d, d),
            "fusion_wk": (d, d),
            "fusion_wv": (d, d),
            "fusion_wo": (d, d),
            "adapter_state_w": (d, d),
            "adapter_state_b": (d,),
            "adapter_object_w": (d, d),
            "adapter_object_b": (d,),
        }
        for name, shape in expected.items():
            arr = arrays[name]
            if arr.ndim != len(shape):
                raise ContractError(f"{name} must be {len(shape)}-d, got shape {arr.shape}")
            for axis, want in enumerate(shape):
                if want is not None and arr.shape[axis] != want:
                    raise ContractError(f"{name} has shape {arr.shape}, expected {shape}")
        psi = arrays["psi"]
        if psi.ndim != 1 or psi.shape[0] not in (1, 3):
            raise ContractError(f"psi must hold 1 or 3 temperatures, got shape {psi.shape}")
        for name, arr in arrays.items():
            object.__setattr__(self, name, arr)

    @property
    def dim(self) -> int:
        return self.state_table.shape[0]

    @property
    def n_states(self) -> int:
        return self.state_table.shape[1]

    @property
    def n_objects(self) -> int:
        return self.object_table.shape[1]

    @property
    def raw_dim(self) -> int:
        return self.vis_w.shape[1]

    @property
    def n_temps(self) -> int:
        return self.psi.shape[0]


def named_params(params: ModelParams) -> list:
    """(name, array) pairs in declared (checkpoint) order."""
    return [(f.name, getattr(params, f.name)) for f in fields(ModelParams)]


def init_params(config: ModelConfig) -> ModelParams:
    """Gaussian tables and projections; residual-neutral fusion output and
    identity adapters so the first forward pass is a plain embedding model."""
    rng = np.random.default_rng(config.init_seed)
    d, f = config.dim, config.raw_dim
    scale = 1.0 / math.sqrt(d)
    return ModelParams(
        state_table=rng.normal(scale=scale, size=(d, config.n_states)),
        object_table=rng.normal(scale=scale, size=(d, config.n_objects)),
        comb_w=rng.normal(scale=1.0 / math.sqrt(2 * d), size=(d, 2 * d)),
        comb_b=np.zeros(d),
        vis_w=rng.normal(scale=1.0 / math.sqrt(f), size=(d, f)),
        vis_b=np.zeros(d),
        cls_token=rng.normal(scale=scale, size=d),
        fusion_wq=rng.normal(scale=scale, size=(d, d)),
        fusion_wk=rng.normal(scale=scale, size=(d, d)),
        fusion_wv=rng.normal(scale=scale, size=(d, d)),
        fusion_wo=np.zeros((d, d)),
        adapter_state_w=np.eye(d),
        adapter_state_b=np.zeros(d),
        adapter_object_w=np.eye(d),
        adapter_object_b=np.zeros(d),
        psi=np.full(config.n_temps, config.psi_init),
    )


def _check_compat(params: ModelParams, config: ModelConfig) -> None:
    mismatches = []
    for name in ("dim", "n_states", "n_objects", "raw_dim", "n_temps"):
        if getattr(params, name) != getattr(config, name):
            mismatches.append(f"{name}: params {getattr(params, name)} vs config {getattr(config, name)}")
    if mismatches:
        raise ContractError("parameters do not fit the config: " + "; ".join(mismatches))


# ---------------------------------------------------------------------------
# graph construction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParamNodes:
    state_table: int
    object_table: int
    comb_w: int
    comb_b: int
    vis_w: int
    vis_b: int
    cls_token: int
    fusion_wq: int
    fusion_wk: int
    fusion_wv: int
    fusion_wo: int
    adapter_state_w: int
    adapter_state_b: int
    adapter_object_w: int
    adapter_object_b: int
    psi: int


def declare_params(tape: Tape, params: ModelParams, trainable: bool = True) -> ParamNodes:
    ids = {
        f.name: tape.leaf(getattr(params, f.name), name=f.name, trainable=trainable)
        for f in fields(ModelParams)
    }
    return ParamNodes(**ids)


def bind_params(tape: Tape, nodes: ParamNodes, values) -> None:
    """Rebind every parameter leaf; values is a ModelParams or a name->array map."""
    if isinstance(values, ModelParams):
        values = dict(named_params(values))
    for f in fields(ParamNodes):
        tape.bind(getattr(nodes, f.name), values[f.name])


def _selection(n_rows: int, indices) -> Array:
    sel = np.zeros((n_rows, len(indices)))
    sel[np.asarray(indices, dtype=np.intp), np.arange(len(indices))] = 1.0
    return sel


def _candidate_pairs(space: CompositionSpace, candidates) -> tuple:
    candidates = tuple(int(c) for c in candidates)
    if not candidates:
        raise ContractError("candidate set is empty")
    for c in candidates:
        if not 0 <= c < len(space.pairs):
            raise ContractError(f"candidate index {c} out of range")
    return candidates


@dataclass(frozen=True)
class TrunkNodes:
    raw: int
    patches: int
    patch_weights: int
    cls_c: int
    cls_s: int
    cls_o: int
    comp_points: int
    alpha: int
    prim_points: int
    beta: int
    beta_s: int
    beta_o: int
    pair_probs: int
    state_probs: int
    object_probs: int


def _attach_trunk(tape: Tape, pn: ParamNodes, config: ModelConfig,
                  space: CompositionSpace, candidates: tuple, n_patches: int) -> TrunkNodes:
    if n_patches < 1:
        raise ContractError("n_patches must be >= 1")
    raw = tape.leaf(shape=(config.raw_dim, n_patches), name="raw", trainable=False)
    x = tape.affine_cols(pn.vis_w, raw, pn.vis_b)
    weights = tape.const(np.full(n_patches, 1.0 / n_patches), "patch_weights")
    cls_c = tape.add(tape.weighted_sum(x, weights), pn.cls_token)

    sel_s = _selection(space.n_states, [space.pairs[c][0] for c in candidates])
    sel_o = _selection(space.n_objects, [space.pairs[c][1] for c in candidates])
    y_state = tape.matmul(pn.state_table, tape.const(sel_s, "sel_states"))
    y_object = tape.matmul(pn.object_table, tape.const(sel_o, "sel_objects"))
    y_in = tape.affine_cols(pn.comb_w, tape.concat_rows(y_state, y_object), pn.comb_b)

    fusion = FusionNodes(
        wq=pn.fusion_wq, wk=pn.fusion_wk, wv=pn.fusion_wv, wo=pn.fusion_wo,
        heads=config.heads,
    )
    adapter = AdapterNodes(
        state_w=pn.adapter_state_w, state_b=pn.adapter_state_b,
        object_w=pn.adapter_object_w, object_b=pn.adapter_object_b,
    )
    y, alpha = attach_composition_set(tape, fusion, y_in, x, cls_c)
    cls_s, cls_o = attach_adapter(tape, adapter, cls_c)
    z, beta, beta_s, beta_o = attach_primitive_set(
        tape, fusion, pn.state_table, pn.object_table, x, cls_s, cls_o,
        renorm=config.renorm_primitives,
    )

    inv_temp = tape.exp(tape.scale(tape.pick(pn.psi, 0), -1.0))
    pair_logits = tape.smul(
        tape.matvec(tape.transpose(tape.l2norm_cols(y)), tape.l2norm_vec(cls_c)), inv_temp
    )
    state_logits = tape.smul(
        tape.matvec(tape.transpose(tape.l2norm_cols(pn.state_table)), tape.l2norm_vec(cls_s)),
        inv_temp,
    )
    object_logits = tape.smul(
        tape.matvec(tape.transpose(tape.l2norm_cols(pn.object_table)), tape.l2norm_vec(cls_o)),
        inv_temp,
    )
    return TrunkNodes(
        raw=raw,
        patches=x,
        patch_weights=weights,
        cls_c=cls_c,
        cls_s=cls_s,
        cls_o=cls_o,
        comp_points=y,
        alpha=alpha,
        prim_points=z,
        beta=beta,
        beta_s=beta_s,
        beta_o=beta_o,
        pair_probs=tape.softmax_vec(pair_logits),
        state_probs=tape.softmax_vec(state_logits),
        object_probs=tape.softmax_vec(object_logits),
    )


@dataclass(frozen=True)
class ScoreNodes:
    raw: int
    pair_probs: int
    state_probs: int
    object_probs: int


def attach_scores(tape: Tape, pn: ParamNodes, config: ModelConfig,
                  space: CompositionSpace, candidates, n_patches: int) -> ScoreNodes:
    """Inference subgraph: the three posteriors, no loss terms."""
    candidates = _candidate_pairs(space, candidates)
    trunk = _attach_trunk(tape, pn, config, space, candidates, n_patches)
    return ScoreNodes(
        raw=trunk.raw,
        pair_probs=trunk.pair_probs,
        state_probs=trunk.state_probs,
        object_probs=trunk.object_probs,
    )


@dataclass(frozen=True)
class LossWeights:
    """Coefficients of the four per-image terms; zero disables a term."""

    lam_base: float = 1.0
    lam_ct: float = 0.1
    lam_cyc: float = 10.0
    lam_de: float = 0.1

    def __post_init__(self):
        for f in fields(self):
            v = float(getattr(self, f.name))
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"{f.name} must be finite and >= 0, got {v}")
            object.__setattr__(self, f.name, v)
        if self.lam_base == self.lam_ct == self.lam_cyc == self.lam_de == 0.0:
            raise ConfigError("all loss terms are disabled")


@dataclass(frozen=True)
class SampleLossNodes:
    raw: int
    onehot_c: int
    onehot_s: int
    onehot_o: int
    base: int
    ct: int
    cyc: int
    de: int
    total: int
    term_spans: tuple  # ((name, lo, hi), ...) node-id spans for error naming


def attach_sample_loss(tape: Tape, pn: ParamNodes, config: ModelConfig,
                       space: CompositionSpace, candidates, weights: LossWeights,
                       n_patches: int) -> SampleLossNodes:
    """Full training subgraph for one image with n_patches patches.

    The ground-truth selectors are non-trainable leaves, so one graph per
    patch count serves every sample by rebinding. Terms with zero weight
    are not built (their node ids are -1) and the transport pairs are still
    attached when only the cycle term needs their plans.
    """
    candidates = _candidate_pairs(space, candidates)
    spans = []
    lo = len(tape)
    trunk = _attach_trunk(tape, pn, config, space, candidates, n_patches)
    onehot_c = tape.leaf(shape=(len(candidates),), name="gt_composition", trainable=False)
    onehot_s = tape.leaf(shape=(space.n_states,), name="gt_state", trainable=False)
    onehot_o = tape.leaf(shape=(space.n_objects,), name="gt_object", trainable=False)
    spans.append(("encoder", lo, len(tape)))

    base = ct = cyc = de = -1
    if weights.lam_base > 0:
        lo = len(tape)
        nll = []
        for probs, onehot in (
            (trunk.pair_probs, onehot_c),
            (trunk.state_probs, onehot_s),
            (trunk.object_probs, onehot_o),
        ):
            gt_prob = tape.dot(probs, onehot)
            nll.append(tape.scale(tape.log(gt_prob, floor=NLL_FLOOR), -1.0))
        base = tape.add(tape.add(nll[0], nll[1]), nll[2])
        spans.append(("classification", lo, len(tape)))

    pairs = None
    if weights.lam_ct > 0 or weights.lam_cyc > 0:
        lo = len(tape)
        idx = (0, 1, 2) if config.split_temperatures else (0, 0, 0)
        psis = [tape.pick(pn.psi, k) for k in idx]
        p12 = attach_ct_pair(tape, trunk.patches, trunk.comp_points,
                             trunk.patch_weights, trunk.alpha, psis[0])
        p13 = attach_ct_pair(tape, trunk.patches, trunk.prim_points,
                             trunk.patch_weights, trunk.beta, psis[1])
        p23 = attach_ct_pair(tape, trunk.comp_points, trunk.prim_points,
                             trunk.alpha, trunk.beta, psis[2])
        pairs = (p12, p13, p23)
        if weights.lam_ct > 0:
            ct = tape.add(tape.add(p12.distance, p13.distance), p23.distance)
        spans.append(("transport", lo, len(tape)))
    if weights.lam_cyc > 0:
        lo = len(tape)
        cyc = attach_cycle_loss(
            tape, pairs[0].cond_bwd, pairs[1].cond_fwd, pairs[2].cond_bwd, onehot_c
        )
        spans.append(("cycle", lo, len(tape)))
    if weights.lam_de > 0:
        lo = len(tape)
        z_s_gt = tape.matvec(pn.state_table, onehot_s)
        z_o_gt = tape.matvec(pn.object_table, onehot_o)
        de = tape.add(
            tape.absval(tape.cosine(trunk.cls_s, z_o_gt)),
            tape.absval(tape.cosine(trunk.cls_o, z_s_gt)),
        )
        spans.append(("decoupler", lo, len(tape)))

    terms = [
        (lam, node)
        for lam, node in (
            (weights.lam_base, base),
            (weights.lam_ct, ct),
            (weights.lam_cyc, cyc),
            (weights.lam_de, de),
        )
        if node >= 0
    ]
    total = tape.lincomb(terms)
    return SampleLossNodes(
        raw=trunk.raw,
        onehot_c=onehot_c,
        onehot_s=onehot_s,
        onehot_o=onehot_o,
        base=base,
        ct=ct,
        cyc=cyc,
        de=de,
        total=total,
        term_spans=tuple(spans),
    )


def _forward_total(tape: Tape, nodes: SampleLossNodes) -> float:
    """Forward pass that names the failing loss term on numeric blowup."""
    try:
        return float(tape.forward(nodes.total))
    except NumericError as exc:
        node = getattr(exc, "node", None)
        term = "input"
        if node is not None:
            for name, lo, hi in nodes.term_spans:
                if lo <= node < hi:
                    term = name
                    break
        raise NumericError(f"{term} term diverged: {exc}") from exc


def _onehot(n: int, index: int) -> Array:
    v = np.zeros(n)
    v[index] = 1.0
    return v


def _bind_sample(tape: Tape, nodes: SampleLossNodes, sample: Sample,
                 space: CompositionSpace, gt_candidate: int, n_candidates: int) -> None:
    tape.bind(nodes.raw, sample.raw_patches)
    tape.bind(nodes.onehot_c, _onehot(n_candidates, gt_candidate))
    tape.bind(nodes.onehot_s, _onehot(space.n_states, sample.gt_state))
    tape.bind(nodes.onehot_o, _onehot(space.n_objects, sample.gt_object))


@dataclass(frozen=True)
class LossReport:
    """Unweighted term values (zero when disabled) and the weighted total."""

    base: float
    ct: float
    cyc: float
    de: float
    total: float


def _report(tape: Tape, nodes: SampleLossNodes, total: float) -> LossReport:
    def term(node):
        return float(tape.value(node)) if node >= 0 else 0.0

    return LossReport(
        base=term(nodes.base), ct=term(nodes.ct), cyc=term(nodes.cyc),
        de=term(nodes.de), total=total,
    )


def total_loss(params: ModelParams, config: ModelConfig, space: CompositionSpace,
               sample: Sample, weights: LossWeights, candidates=None) -> LossReport:
    """All four terms of one sample; the composition head is restricted to
    `candidates` (default: the seen pairs)."""
    _check_compat(params, config)
    if candidates is None:
        candidates = tuple(int(i) for i in space.seen_pairs())
    candidates = _candidate_pairs(space, candidates)
    if sample.gt_pair not in candidates:
        raise ContractError("sample's ground-truth pair is not in the candidate set")
    tape = Tape()
    pn = declare_params(tape, params, trainable=False)
    nodes = attach_sample_loss(tape, pn, config, space, candidates, weights,
                               sample.n_patches)
    _bind_sample(tape, nodes, sample, space, candidates.index(sample.gt_pair),
                 len(candidates))
    total = _forward_total(tape, nodes)
    return _report(tape, nodes, total)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    lr: float = 5e-2
    momentum: float = 0.9
    weights: LossWeights = LossWeights()

    def __post_init__(self):
        if int(self.epochs) < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if not math.isfinite(self.lr) or self.lr < 0:
            raise ConfigError(f"lr must be finite and >= 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")


def train(params: ModelParams, config: ModelConfig, space: CompositionSpace,
          samples, tcfg: TrainConfig):
    """Momentum SGD over the train split in sample order; returns
    (trained params, per-epoch trace rows).

    One loss graph is built per distinct patch count and reused by
    rebinding; each trace row holds the epoch's mean unweighted terms and
    mean weighted total, measured before the corresponding update.
    """
    _check_compat(params, config)
    train_samples = [s for s in samples if s.split == "train"]
    if not train_samples:
        raise ConfigError("no training samples in the provided list")
    candidates = tuple(int(i) for i in space.seen_pairs())
    if not candidates:
        raise ConfigError("the composition space has no seen pairs")
    position = {pair: i for i, pair in enumerate(candidates)}
    for s in train_samples:
        if s.gt_pair not in position:
            raise ContractError("train sample's pair is not seen")
        if s.raw_patches.shape[0] != config.raw_dim:
            raise ContractError(
                f"sample raw dimension {s.raw_patches.shape[0]} != config {config.raw_dim}"
            )

    current = {name: arr.copy() for name, arr in named_params(params)}
    buffers = {name: np.zeros_like(arr) for name, arr in current.items()}
    graphs = {}
    trace = []
    for epoch in range(tcfg.epochs):
        sums = {"base": 0.0, "ct": 0.0, "cyc": 0.0, "de": 0.0, "total": 0.0}
        for sample in train_samples:
            n = sample.n_patches
            if n not in graphs:
                tape = Tape()
                pn = declare_params(tape, ModelParams(**current))
                nodes = attach_sample_loss(tape, pn, config, space, candidates,
                                           tcfg.weights, n)
                graphs[n] = (tape, pn, nodes)
            tape, pn, nodes = graphs[n]
            bind_params(tape, pn, current)
            _bind_sample(tape, nodes, sample, space, position[sample.gt_pair],
                         len(candidates))
            total = _forward_total(tape, nodes)
            report = _report(tape, nodes, total)
            for key in sums:
                sums[key] += getattr(report, key)
            grads = tape.backward(nodes.total)
            for f in fields(ParamNodes):
                grad = grads[getattr(pn, f.name)]
                if not np.isfinite(grad).all():
                    raise NumericError(f"gradient for {f.name} is non-finite")
                buf = buffers[f.name]
                buf *= tcfg.momentum
                buf += grad
                current[f.name] = current[f.name] - tcfg.lr * buf
        count = len(train_samples)
        trace.append(
            {
                "epoch": epoch,
                "base": sums["base"] / count,
                "ct": sums["ct"] / count,
                "cyc": sums["cyc"] / count,
                "de": sums["de"] / count,
                "total": sums["total"] / count,
            }
        )
    return ModelParams(**current), trace


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Prediction:
    pair: int  # index into space.pairs
    state: int
    obj: int
    scores: Array  # blended score per candidate


class ImageScorer:
    """Reusable inference graphs over a fixed candidate set.

    Parameters are bound once per graph; scoring an image only rebinds the
    raw patch leaf, so repeated calls with equal patch counts are cheap.
    """

    def __init__(self, params: ModelParams, config: ModelConfig,
                 space: CompositionSpace, candidates):
        _check_compat(params, config)
        self.params = params
        self.config = config
        self.space = space
        self.candidates = _candidate_pairs(space, candidates)
        self._graphs = {}
        s_idx = [space.pairs[c][0] for c in self.candidates]
        o_idx = [space.pairs[c][1] for c in self.candidates]
        self._state_of = np.array(s_idx, dtype=np.intp)
        self._object_of = np.array(o_idx, dtype=np.intp)

    def probabilities(self, raw: Array):
        """(pair_probs over candidates, state_probs, object_probs) for one image."""
        raw = np.ascontiguousarray(raw, dtype=np.float64)
        if raw.ndim != 2 or raw.shape[0] != self.config.raw_dim:
            raise ContractError(
                f"raw patches must be ({self.config.raw_dim}, N), got {raw.shape}"
            )
        n = raw.shape[1]
        if n not in self._graphs:
            tape = Tape()
            pn = declare_params(tape, self.params, trainable=False)
            nodes = attach_scores(tape, pn, self.config, self.space,
                                  self.candidates, n)
            self._graphs[n] = (tape, nodes)
        tape, nodes = self._graphs[n]
        tape.bind(nodes.raw, raw)
        tape.forward(max(nodes.pair_probs, nodes.state_probs, nodes.object_probs))
        return (
            tape.value(nodes.pair_probs).copy(),
            tape.value(nodes.state_probs).copy(),
            tape.value(nodes.object_probs).copy(),
        )

    def scores(self, raw: Array, gamma: float) -> Array:
        """gamma-blend of the composition posterior with the primitive product."""
        if not 0.0 <= gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {gamma}")
        pair_probs, state_probs, object_probs = self.probabilities(raw)
        product = state_probs[self._state_of] * object_probs[self._object_of]
        return gamma * pair_probs + (1.0 - gamma) * product


def predict(params: ModelParams, config: ModelConfig, space: CompositionSpace,
            raw: Array, candidates, gamma: float) -> Prediction:
    """Highest blended score wins; exact ties go to the lowest candidate index."""
    scorer = ImageScorer(params, config, space, candidates)
    scores = scorer.scores(raw, gamma)
    best = int(np.argmax(scores))
    pair = scorer.candidates[best]
    s, o = space.pairs[pair]
    return Prediction(pair=pair, state=s, obj=o, scores=scores)


# ---------------------------------------------------------------------------
# label-only transport for the open-world filter
# ---------------------------------------------------------------------------


def composition_primitive_plans(params: ModelParams, config: ModelConfig,
                                space: CompositionSpace):
    """Image-independent plans between all compositions and all primitives.

    Uses the raw composer outputs and primitive tables (no patch fusion,
    which needs an image) with uniform marginals, normalized exactly as the
    in-graph transport normalizes, under the composition/primitive
    temperature. Returns (comp_to_prim, prim_to_comp)."""
    _check_compat(params, config)
    s_idx = [s for s, _ in space.pairs]
    o_idx = [o for _, o in space.pairs]
    y_in = (
        params.comb_w
        @ np.concatenate(
            [params.state_table[:, s_idx], params.object_table[:, o_idx]], axis=0
        )
        + params.comb_b[:, None]
    )
    z = np.concatenate([params.state_table, params.object_table], axis=1)
    yn = y_in / np.maximum(np.linalg.norm(y_in, axis=0), 1e-12)
    zn = z / np.maximum(np.linalg.norm(z, axis=0), 1e-12)
    temp = Temperature(psi=float(params.psi[2 if config.split_temperatures else 0]))
    sims = (yn.T @ zn) / temp.value
    m, k = sims.shape
    theta = np.full(m, 1.0 / m)
    alpha = np.full(k, 1.0 / k)
    return (
        forward_plan(theta, alpha, sims),
        backward_plan(theta, alpha, sims),
    )


def sample_triset(params: ModelParams, config: ModelConfig, space: CompositionSpace,
                  sample: Sample, candidates=None) -> TriSet:
    """The three aligned distributions of one image under `params`.

    Built on the value path (no persistent graph); `candidates` defaults to
    the full composition vocabulary so every sample's ground-truth pair has
    a position, which plan export and cycle inspection rely on.
    """
    _check_compat(params, config)
    if candidates is None:
        candidates = tuple(range(len(space.pairs)))
    candidates = _candidate_pairs(space, candidates)
    if sample.gt_pair not in candidates:
        raise ContractError("sample's ground-truth pair is not in the candidate set")
    if sample.raw_patches.shape[0] != config.raw_dim:
        raise ContractError(
            f"sample raw dimension {sample.raw_patches.shape[0]} != config {config.raw_dim}"
        )
    fusion = FusionWeights(
        wq=params.fusion_wq, wk=params.fusion_wk, wv=params.fusion_wv,
        wo=params.fusion_wo, heads=config.heads,
    )
    adapter = AdapterWeights(
        state_w=params.adapter_state_w, state_b=params.adapter_state_b,
        object_w=params.adapter_object_w, object_b=params.adapter_object_b,
    )
    x = params.vis_w @ sample.raw_patches + params.vis_b[:, None]
    p1 = build_patch_set(x)
    cls_c = x @ np.full(x.shape[1], 1.0 / x.shape[1]) + params.cls_token
    s_idx = [space.pairs[c][0] for c in candidates]
    o_idx = [space.pairs[c][1] for c in candidates]
    y_in = (
        params.comb_w
        @ np.concatenate([params.state_table[:, s_idx], params.object_table[:, o_idx]])
        + params.comb_b[:, None]
    )
    p2, _ = build_composition_set(y_in, p1, cls_c, fusion)
    cls_s, cls_o = adapt_visual(adapter, cls_c)
    p3, _, beta_s, beta_o = build_primitive_set(
        params.state_table, params.object_table, p1, cls_s, cls_o, fusion,
        renorm=config.renorm_primitives,
    )
    return TriSet(
        p1=p1, p2=p2, p3=p3, beta_s=beta_s, beta_o=beta_o,
        cls_c=cls_c, cls_s=cls_s, cls_o=cls_o,
        gt_composition=candidates.index(sample.gt_pair),
        gt_state=sample.gt_state, gt_object=sample.gt_object,
    )


def triset_temperatures(params: ModelParams, config: ModelConfig):
    """Temperature argument for total_ct matching the training graph: one
    shared value, or the (patch/comp, patch/prim, comp/prim) triple."""
    if config.split_temperatures:
        return tuple(Temperature(psi=float(params.psi[k])) for k in (0, 1, 2))
    return Temperature(psi=float(params.psi[0]))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: ModelParams, config: ModelConfig) -> None:
    _check_compat(params, config)
    flags = 1 if config.renorm_primitives else 0
    header = struct.pack(
        "<6I", config.dim, config.n_states, config.n_objects,
        config.raw_dim, config.heads, config.n_temps,
    ) + struct.pack("<I", flags)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(header)
        for _, arr in named_params(params):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (params, config) or raises ParseError on malformed files."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ParseError("not a model checkpoint (bad magic)")
    head_end = len(CHECKPOINT_MAGIC) + 7 * 4
    if len(blob) < head_end:
        raise ParseError("checkpoint header truncated")
    d, n_states, n_objects, raw_dim, heads, n_temps, flags = struct.unpack(
        "<7I", blob[len(CHECKPOINT_MAGIC): head_end]
    )
    if n_temps not in (1, 3):
        raise ParseError(f"checkpoint declares {n_temps} temperatures, expected 1 or 3")
    try:
        config = ModelConfig(
            n_states=n_states, n_objects=n_objects, dim=d, raw_dim=raw_dim,
            heads=heads, renorm_primitives=bool(flags & 1),
            split_temperatures=(n_temps == 3),
        )
    except ConfigError as exc:
        raise ParseError(f"checkpoint header is inconsistent: {exc}") from None
    shapes = {
        "state_table": (d, n_states),
        "object_table": (d, n_objects),
        "comb_w": (d, 2 * d),
        "comb_b": (d,),
        "vis_w": (d, raw_dim),
        "vis_b": (d,),
        "cls_token": (d,),
        "fusion_wq": (d, d),
        "fusion_wk": (d, d),
        "fusion_wv": (d, d),
        "fusion_wo": (d, d),
        "adapter_state_w": (d, d),
        "adapter_state_b": (d,),
        "adapter_object_w": (d, d),
        "adapter_object_b": (d,),
        "psi": (n_temps,),
    }
    expected = head_end + 8 * sum(int(np.prod(s)) for s in shapes.values())
    if len(blob) != expected:
        raise ParseError(
            f"checkpoint holds {len(blob)} bytes, expected {expected} for its header"
        )
    offset = head_end
    arrays = {}
    for name, shape in shapes.items():
        count = int(np.prod(shape))
        arrays[name] = np.frombuffer(
            blob, dtype="<f8", count=count, offset=offset
        ).reshape(shape).astype(np.float64)
        offset += count * 8
    try:
        params = ModelParams(**arrays)
    except ContractError as exc:
        raise ParseError(f"checkpoint blocks are invalid: {exc}") from None
    return params, config
