"""Synthetic compositional datasets and the on-disk split format.

A dataset is a CompositionSpace (state/object vocabularies, the pair list
with seen/unseen masks, and the test-pair inventory) plus a list of Samples
(raw patch features with ground-truth labels and a train/val/test tag).

Generation plants one unit prototype per primitive and composes each
sample's patches from state-dominant, object-dominant, mixed and distractor
roles, so recognizability is controlled by the noise level. Unseen pairs are
the complement of the seen pairs within the full product, never appear in
the train split, and always keep the compositional premise: each of their
primitives occurs in at least one seen pair.

On disk a split is seven files: states.txt, objects.txt, pairs_train.txt,
pairs_val.txt, pairs_test.txt (one "state object" per line), samples.jsonl
(offset, n, state, object, split per line) and features.bin. features.bin
is the concatenation of per-sample blocks, each N rows of f little-endian
f32 values (one row per patch); offsets are byte offsets into the file. The
raw feature width f is not stored; it is inferred as
filesize / (4 * total patch count), which requires the file to contain
exactly the declared blocks.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from tsca.errors import ConfigError, ContractError, ParseError

Array = np.ndarray

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class CompositionSpace:
    states: tuple
    objects: tuple
    pairs: tuple  # of (state_idx, object_idx)
    seen_mask: Array
    unseen_mask: Array
    test_pairs: tuple  # indices into pairs

    def __post_init__(self):
        states = tuple(str(s) for s in self.states)
        objects = tuple(str(o) for o in self.objects)
        pairs = tuple((int(s), int(o)) for s, o in self.pairs)
        if not states or not objects:
            raise ContractError("states and objects must be nonempty")
        if len(set(states)) != len(states) or len(set(objects)) != len(objects):
            raise ContractError("duplicate primitive names")
        if len(set(pairs)) != len(pairs):
            raise ContractError("duplicate composition pairs")
        for s, o in pairs:
            if not (0 <= s < len(states) and 0 <= o < len(objects)):
                raise ContractError(f"pair ({s}, {o}) out of primitive range")
        seen = np.asarray(self.seen_mask, dtype=bool)
        unseen = np.asarray(self.unseen_mask, dtype=bool)
        if seen.shape != (len(pairs),) or unseen.shape != (len(pairs),):
            raise ContractError("mask lengths must match the pair list")
        if (seen & unseen).any():
            raise ContractError("seen and unseen pair sets must be disjoint")
        seen_states = {pairs[i][0] for i in np.flatnonzero(seen)}
        seen_objects = {pairs[i][1] for i in np.flatnonzero(seen)}
        for i in np.flatnonzero(unseen):
            s, o = pairs[i]
            if s not in seen_states or o not in seen_objects:
                raise ContractError(
                    f"unseen pair ({states[s]}, {objects[o]}) has a primitive "
                    "absent from every seen pair"
                )
        test_pairs = tuple(int(i) for i in self.test_pairs)
        for i in test_pairs:
            if not 0 <= i < len(pairs):
                raise ContractError(f"test pair index {i} out of range")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "objects", objects)
        object.__setattr__(self, "pairs", pairs)
        object.__setattr__(self, "seen_mask", seen)
        object.__setattr__(self, "unseen_mask", unseen)
        object.__setattr__(self, "test_pairs", test_pairs)
        object.__setattr__(self, "_pair_index", {p: i for i, p in enumerate(pairs)})

    @property
    def n_states(self) -> int:
        return len(self.states)

    @property
    def n_objects(self) -> int:
        return len(self.objects)

    def pair_index(self, state: int, obj: int):
        """Index of (state, obj) in the pair list, or None."""
        return self._pair_index.get((state, obj))

    def seen_pairs(self) -> Array:
        return np.flatnonzero(self.seen_mask)

    def unseen_pairs(self) -> Array:
        return np.flatnonzero(self.unseen_mask)


@dataclass(frozen=True)
class Sample:
    raw_patches: Array  # (f, N), columns are patches
    gt_state: int
    gt_object: int
    gt_pair: int
    split: str

    def __post_init__(self):
        patches = np.array(self.raw_patches, dtype=np.float64, order="C")
        if patches.ndim != 2 or patches.shape[1] < 1:
            raise ContractError(f"raw_patches must be (f, N) with N >= 1, got {patches.shape}")
        if not np.isfinite(patches).all():
            raise ContractError("raw_patches contain non-finite values")
        if self.split not in SPLITS:
            raise ContractError(f"split must be one of {SPLITS}, got {self.split!r}")
        object.__setattr__(self, "raw_patches", patches)

    @property
    def n_patches(self) -> int:
        return self.raw_patches.shape[1]


@dataclass(frozen=True)
class GenConfig:
    n_states: int = 4
    n_objects: int = 4
    seen_fraction: float = 0.6
    samples_per_pair: int = 8
    n_patches: int = 12
    raw_dim: int = 32
    noise: float = 0.15
    distractor_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        for name in ("n_states", "n_objects", "samples_per_pair", "n_patches", "raw_dim"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 < self.seen_fraction < 1.0:
            raise ConfigError(f"seen_fraction must lie in (0, 1), got {self.seen_fraction}")
        if self.noise < 0:
            raise ConfigError(f"noise must be >= 0, got {self.noise}")
        if not 0.0 <= self.distractor_fraction <= 1.0:
            raise ConfigError(
                f"distractor_fraction must lie in [0, 1], got {self.distractor_fraction}"
            )


def _unit(rng, f: int) -> Array:
    v = rng.normal(size=f)
    return v / np.linalg.norm(v)


def _pick_seen_pairs(rng, n_states: int, n_objects: int, seen_fraction: float):
    """Seen/unseen split of the full product honoring the compositional premise."""
    all_pairs = [(s, o) for s in range(n_states) for o in range(n_objects)]
    n_pairs = len(all_pairs)
    n_seen = int(round(seen_fraction * n_pairs))
    n_seen = min(max(n_seen, 1), n_pairs - 1)
    for _ in range(100):
        chosen = rng.choice(n_pairs, size=n_seen, replace=False)
        seen = sorted(int(i) for i in chosen)
        seen_states = {all_pairs[i][0] for i in seen}
        seen_objects = {all_pairs[i][1] for i in seen}
        if len(seen_states) == n_states and len(seen_objects) == n_objects:
            unseen = [i for i in range(n_pairs) if i not in set(seen)]
            return all_pairs, seen, unseen
    raise ConfigError(
        f"could not draw a seen split covering every primitive in 100 attempts "
        f"(states={n_states}, objects={n_objects}, seen_fraction={seen_fraction}); "
        "raise seen_fraction or shrink the grid"
    )


def _role_counts(n_patches: int, distractor_fraction: float):
    n_dis = int(round(distractor_fraction * n_patches))
    n_dis = min(n_dis, n_patches - 1) if n_patches > 1 else 0
    rest = n_patches - n_dis
    n_state = rest // 3
    n_obj = rest // 3
    n_mix = rest - n_state - n_obj
    return n_state, n_obj, n_mix, n_dis


def _split_counts(spp: int, seen: bool):
    if seen:
        n_val = max(1, int(round(0.15 * spp)))
        n_test = max(1, int(round(0.15 * spp)))
        n_train = spp - n_val - n_test
        if n_train < 1:
            raise ConfigError(f"samples_per_pair={spp} too small for a train/val/test split")
        return n_train, n_val, n_test
    n_test = math.ceil(spp / 2)
    return 0, spp - n_test, n_test


def generate(config: GenConfig):
    """Deterministic synthetic dataset: returns (CompositionSpace, samples)."""
    rng = np.random.default_rng(config.seed)
    f = config.raw_dim
    protos_s = np.stack([_unit(rng, f) for _ in range(config.n_states)], axis=1)
    protos_o = np.stack([_unit(rng, f) for _ in range(config.n_objects)], axis=1)

    all_pairs, seen, unseen = _pick_seen_pairs(
        rng, config.n_states, config.n_objects, config.seen_fraction
    )
    # seen pairs first, then unseen, each in lexicographic order: this is the
    # order the on-disk format reconstructs, so round-trips are exact
    pairs = tuple(all_pairs[i] for i in seen) + tuple(all_pairs[i] for i in unseen)
    seen_mask = np.zeros(len(pairs), dtype=bool)
    seen_mask[: len(seen)] = True
    unseen_mask = ~seen_mask

    n_state, n_obj, n_mix, n_dis = _role_counts(config.n_patches, config.distractor_fraction)
    sigma = config.noise
    samples = []
    test_pairs = []
    for j, (s, o) in enumerate(pairs):
        is_seen = bool(seen_mask[j])
        n_train, n_val, n_test = _split_counts(config.samples_per_pair, is_seen)
        if n_test > 0:
            test_pairs.append(j)
        tags = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
        mixed_proto = protos_s[:, s] + protos_o[:, o]
        mixed_proto = mixed_proto / np.linalg.norm(mixed_proto)
        for tag in tags:
            cols = []
            for _ in range(n_state):
                cols.append(protos_s[:, s] + sigma * rng.normal(size=f))
            for _ in range(n_obj):
                cols.append(protos_o[:, o] + sigma * rng.normal(size=f))
            for _ in range(n_mix):
                cols.append(mixed_proto + sigma * rng.normal(size=f))
            for _ in range(n_dis):
                cols.append(_unit(rng, f))
            patches = np.stack(cols, axis=1)
            # quantize so that a save/load round-trip reproduces values exactly
            patches = patches.astype(np.float32).astype(np.float64)
            samples.append(
                Sample(raw_patches=patches, gt_state=s, gt_object=o, gt_pair=j, split=tag)
            )

    space = CompositionSpace(
        states=tuple(f"s{i}" for i in range(config.n_states)),
        objects=tuple(f"o{i}" for i in range(config.n_objects)),
        pairs=pairs,
        seen_mask=seen_mask,
        unseen_mask=unseen_mask,
        test_pairs=tuple(test_pairs),
    )
    return space, samples


def open_world_space(space: CompositionSpace) -> CompositionSpace:
    """Widen the pair list to the full product; masks follow the pairs over."""
    full = [(s, o) for s in range(space.n_states) for o in range(space.n_objects)]
    seen_set = {space.pairs[i] for i in space.seen_pairs()}
    unseen_set = {space.pairs[i] for i in space.unseen_pairs()}
    seen_mask = np.array([p in seen_set for p in full])
    unseen_mask = np.array([p in unseen_set for p in full])
    index = {p: i for i, p in enumerate(full)}
    test_pairs = tuple(index[space.pairs[i]] for i in space.test_pairs)
    return CompositionSpace(
        states=space.states,
        objects=space.objects,
        pairs=tuple(full),
        seen_mask=seen_mask,
        unseen_mask=unseen_mask,
        test_pairs=test_pairs,
    )


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------

SPLIT_FILES = (
    "states.txt",
    "objects.txt",
    "pairs_train.txt",
    "pairs_val.txt",
    "pairs_test.txt",
    "samples.jsonl",
    "features.bin",
)
_FILES = SPLIT_FILES


def _write_lines(path, lines):
    with open(path, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(line + "\n")


def save_split(dirpath, space: CompositionSpace, samples) -> list:
    """Write the seven split files; returns the paths written."""
    os.makedirs(dirpath, exist_ok=True)
    paths = [os.path.join(dirpath, name) for name in _FILES]
    _write_lines(paths[0], space.states)
    _write_lines(paths[1], space.objects)

    def pair_lines(indices):
        return [f"{space.states[space.pairs[i][0]]} {space.objects[space.pairs[i][1]]}" for i in indices]

    _write_lines(paths[2], pair_lines(space.seen_pairs()))
    # every pair is a validation candidate; test pairs as recorded
    _write_lines(paths[3], pair_lines(range(len(space.pairs))))
    _write_lines(paths[4], pair_lines(space.test_pairs))

    offset = 0
    records = []
    blocks = []
    for sample in samples:
        block = np.ascontiguousarray(sample.raw_patches.T, dtype="<f4")
        records.append(
            {
                "offset": offset,
                "n": sample.n_patches,
                "state": space.states[sample.gt_state],
                "object": space.objects[sample.gt_object],
                "split": sample.split,
            }
        )
        blocks.append(block.tobytes())
        offset += len(blocks[-1])
    _write_lines(paths[5], [json.dumps(r) for r in records])
    with open(paths[6], "wb") as fh:
        for b in blocks:
            fh.write(b)
    return paths


def _read_names(path) -> list:
    with open(path, encoding="utf-8") as fh:
        names = [line.strip() for line in fh if line.strip()]
    if len(set(names)) != len(names):
        raise ParseError(f"{os.path.basename(path)}: duplicate names")
    return names


def _read_pairs(path, state_idx, object_idx) -> list:
    pairs = []
    base = os.path.basename(path)
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ParseError(f"{base}:{lineno}: expected 'state object', got {line!r}")
            s, o = parts
            if s not in state_idx:
                raise ParseError(f"{base}:{lineno}: unknown state {s!r}")
            if o not in object_idx:
                raise ParseError(f"{base}:{lineno}: unknown object {o!r}")
            pairs.append((state_idx[s], object_idx[o]))
    return pairs


def load_split(dirpath):
    """Read a split directory back into (CompositionSpace, samples)."""
    paths = {name: os.path.join(dirpath, name) for name in _FILES}
    for name, path in paths.items():
        if not os.path.exists(path):
            raise ParseError(f"missing dataset file: {name}")

    states = _read_names(paths["states.txt"])
    objects = _read_names(paths["objects.txt"])
    state_idx = {s: i for i, s in enumerate(states)}
    object_idx = {o: i for i, o in enumerate(objects)}

    train_pairs = _read_pairs(paths["pairs_train.txt"], state_idx, object_idx)
    val_pairs = _read_pairs(paths["pairs_val.txt"], state_idx, object_idx)
    test_pairs_named = _read_pairs(paths["pairs_test.txt"], state_idx, object_idx)

    # pair order: train pairs first, then unseen pairs in val/test order
    pairs = []
    seen_flags = []
    known = {}
    for p in train_pairs:
        if p not in known:
            known[p] = len(pairs)
            pairs.append(p)
            seen_flags.append(True)
    for p in val_pairs + test_pairs_named:
        if p not in known:
            known[p] = len(pairs)
            pairs.append(p)
            seen_flags.append(False)
    seen_mask = np.array(seen_flags, dtype=bool)
    unseen_mask = ~seen_mask
    test_pair_ids = []
    for p in test_pairs_named:
        if known[p] not in test_pair_ids:
            test_pair_ids.append(known[p])

    space = CompositionSpace(
        states=tuple(states),
        objects=tuple(objects),
        pairs=tuple(pairs),
        seen_mask=seen_mask,
        unseen_mask=unseen_mask,
        test_pairs=tuple(test_pair_ids),
    )

    with open(paths["features.bin"], "rb") as fh:
        blob = fh.read()
    if len(blob) % 4 != 0:
        raise ParseError("features.bin length is not a multiple of 4 bytes")

    records = []
    with open(paths["samples.jsonl"], encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"samples.jsonl:{lineno}: invalid JSON ({exc.msg})") from None
            for key in ("offset", "n", "state", "object", "split"):
                if key not in rec:
                    raise ParseError(f"samples.jsonl:{lineno}: missing key {key!r}")
            if rec["state"] not in state_idx:
                raise ParseError(f"samples.jsonl:{lineno}: unknown state {rec['state']!r}")
            if rec["object"] not in object_idx:
                raise ParseError(f"samples.jsonl:{lineno}: unknown object {rec['object']!r}")
            if rec["split"] not in SPLITS:
                raise ParseError(f"samples.jsonl:{lineno}: bad split {rec['split']!r}")
            n = int(rec["n"])
            offset = int(rec["offset"])
            if n < 1 or offset < 0 or offset % 4 != 0:
                raise ParseError(f"samples.jsonl:{lineno}: bad offset/n ({offset}, {n})")
            records.append((lineno, offset, n, state_idx[rec["state"]], object_idx[rec["object"]], rec["split"]))

    total_patches = sum(r[2] for r in records)
    if total_patches == 0:
        raise ParseError("samples.jsonl lists no samples")
    total_floats = len(blob) // 4
    if total_floats % total_patches != 0:
        raise ParseError(
            f"features.bin holds {total_floats} values, not divisible by the "
            f"{total_patches} patches declared in samples.jsonl"
        )
    f = total_floats // total_patches

    samples = []
    for lineno, offset, n, s, o, split in records:
        end = offset + n * f * 4
        if end > len(blob):
            raise ParseError(
                f"samples.jsonl:{lineno}: offset {offset} + {n}x{f} floats "
                f"overruns features.bin ({len(blob)} bytes)"
            )
        rows = np.frombuffer(blob, dtype="<f4", count=n * f, offset=offset).reshape(n, f)
        pair = space.pair_index(s, o)
        if pair is None:
            raise ParseError(
                f"samples.jsonl:{lineno}: pair ({states[s]}, {objects[o]}) "
                "is not declared in any pairs file"
            )
        if split == "train" and not space.seen_mask[pair]:
            raise ParseError(f"samples.jsonl:{lineno}: train sample uses an unseen pair")
        samples.append(
            Sample(
                raw_patches=rows.T.astype(np.float64),
                gt_state=s,
                gt_object=o,
                gt_pair=pair,
                split=split,
            )
        )
    return space, samples
