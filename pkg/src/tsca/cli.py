"""Command-line entry point: generate, train, eval, export-plans.

Every command is deterministic given its options and seed, and all outputs
are plain files. Numeric options resolve through four layers, strongest
first: explicit command-line flags, `key=value` lines in a config file
(`--config`), a named dataset preset (`--preset`), and built-in defaults.
Unknown config keys are rejected. Exit codes: 0 success, 2 for usage,
config, or data-format problems, 3 for numeric failure during training.
"""

from __future__ import annotations

import argparse
import os
import sys

from tsca.data import SPLIT_FILES, GenConfig, generate, load_split, save_split
from tsca.errors import ConfigError, ContractError, NumericError
from tsca.evaluation import evaluate, to_json
from tsca.model import LossWeights, ModelConfig, TrainConfig
from tsca.model import init_params, load_checkpoint, sample_triset, save_checkpoint
from tsca.model import train, triset_temperatures
from tsca.transport import PlanSet, cycle_matrix, export_plan_csv, export_plan_pgm
from tsca.transport import total_ct

# Per-command option keys that may come from a config file, with their types.
KEYS = {
    "generate": {
        "states": int,
        "objects": int,
        "seen_fraction": float,
        "samples_per_pair": int,
        "patches": int,
        "raw_dim": int,
        "noise": float,
        "distractor_fraction": float,
        "seed": int,
    },
    "train": {
        "dim": int,
        "heads": int,
        "epochs": int,
        "lr": float,
        "momentum": float,
        "seed": int,
        "lam_base": float,
        "lam_ct": float,
        "lam_cyc": float,
        "lam_de": float,
        "renorm_primitives": bool,
        "split_temperatures": bool,
    },
    "eval": {
        "mode": str,
        "gamma": float,
        "gamma_closed": float,
        "gamma_open": float,
        "filter_quantile": float,
        "filter_threshold": float,
        "keep_seen": bool,
        "exclude_mode": bool,
    },
}

DEFAULTS = {
    "generate": {
        "states": 4,
        "objects": 4,
        "seen_fraction": 0.6,
        "samples_per_pair": 8,
        "patches": 12,
        "raw_dim": 32,
        "noise": 0.15,
        "distractor_fraction": 0.25,
        "seed": 0,
    },
    "train": {
        "dim": 16,
        "heads": 2,
        "epochs": 10,
        "lr": 5e-2,
        "momentum": 0.9,
        "seed": 0,
        "lam_base": 1.0,
        "lam_ct": 0.1,
        "lam_cyc": 10.0,
        "lam_de": 0.1,
        "renorm_primitives": False,
        "split_temperatures": False,
    },
    "eval": {
        "mode": "closed",
        "gamma": None,
        "gamma_closed": 0.8,
        "gamma_open": 0.4,
        "filter_quantile": None,
        "filter_threshold": None,
        "keep_seen": True,
        "exclude_mode": False,
    },
}

# Loss-term weights and score-mixing coefficients per dataset regime.
PRESETS = {
    "ut-zappos-like": {
        "lam_base": 1.0, "lam_ct": 0.1, "lam_cyc": 10.0, "lam_de": 0.1,
        "gamma_closed": 0.8, "gamma_open": 0.4,
    },
    "mit-states-like": {
        "lam_base": 1.0, "lam_ct": 0.01, "lam_cyc": 0.1, "lam_de": 0.01,
        "gamma_closed": 0.4, "gamma_open": 0.3,
    },
    "c-gqa-like": {
        "lam_base": 1.0, "lam_ct": 0.01, "lam_cyc": 0.3, "lam_de": 0.01,
        "gamma_closed": 0.4, "gamma_open": 0.2,
    },
}

_BOOL_WORDS = {
    "true": True, "yes": True, "1": True,
    "false": False, "no": False, "0": False,
}


def _parse_value(raw: str, typ, key: str, where: str):
    if typ is bool:
        try:
            return _BOOL_WORDS[raw.lower()]
        except KeyError:
            raise ConfigError(f"{where}: {key} expects true/false, got {raw!r}") from None
    try:
        return typ(raw)
    except ValueError:
        raise ConfigError(
            f"{where}: {key} expects {typ.__name__}, got {raw!r}"
        ) from None


def _read_config_file(path: str) -> dict:
    """key=value lines; blank lines and #-comments ignored; values stay raw."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    entries = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            key, sep, value = text.partition("=")
            key = key.strip()
            value = value.strip()
            if not sep or not key:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {text!r}")
            if key in entries:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            entries[key] = value
    return entries


def _resolve(command: str, args) -> dict:
    """Built-ins <- preset <- config file <- explicit flags."""
    keys = KEYS[command]
    merged = dict(DEFAULTS[command])

    file_entries = {}
    if getattr(args, "config", None) is not None:
        file_entries = _read_config_file(args.config)

    preset = getattr(args, "preset", None)
    if preset is None:
        preset = file_entries.pop("preset", None)
    else:
        file_entries.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(
                f"unknown preset {preset!r}; choose from {', '.join(sorted(PRESETS))}"
            )
        for key, value in PRESETS[preset].items():
            if key in merged:
                merged[key] = value

    for key, raw in file_entries.items():
        if key not in keys:
            raise ConfigError(f"unknown config key {key!r} for command {command!r}")
        merged[key] = _parse_value(raw, keys[key], key, args.config)

    for key in keys:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def _refuse_overwrite(paths, force: bool) -> None:
    existing = [p for p in paths if os.path.exists(p)]
    if existing and not force:
        raise ConfigError(
            f"refusing to overwrite {existing[0]} (pass --force to allow)"
        )


def _require_file(path: str, what: str) -> None:
    if not os.path.exists(path):
        raise ConfigError(f"{what} not found: {path}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = _resolve("generate", args)
    gen = GenConfig(
        n_states=cfg["states"],
        n_objects=cfg["objects"],
        seen_fraction=cfg["seen_fraction"],
        samples_per_pair=cfg["samples_per_pair"],
        n_patches=cfg["patches"],
        raw_dim=cfg["raw_dim"],
        noise=cfg["noise"],
        distractor_fraction=cfg["distractor_fraction"],
        seed=cfg["seed"],
    )
    _refuse_overwrite([os.path.join(args.out, n) for n in SPLIT_FILES], args.force)
    space, samples = generate(gen)
    paths = save_split(args.out, space, samples)
    print(
        f"wrote {len(paths)} files to {args.out}: {len(samples)} samples, "
        f"{len(space.seen_pairs())} seen / {len(space.unseen_pairs())} unseen pairs"
    )
    return 0


def _write_trace(path: str, trace) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,base,ct,cyc,de,total\n")
        for row in trace:
            fh.write(
                f"{row['epoch']},{row['base']!r},{row['ct']!r},"
                f"{row['cyc']!r},{row['de']!r},{row['total']!r}\n"
            )


def cmd_train(args) -> int:
    cfg = _resolve("train", args)
    if getattr(args, "ablate_ct", None):
        cfg["lam_ct"] = 0.0
    if getattr(args, "ablate_cyc", None):
        cfg["lam_cyc"] = 0.0
    if getattr(args, "ablate_de", None):
        cfg["lam_de"] = 0.0

    space, samples = load_split(args.data)
    checkpoint_path = os.path.join(args.out, "checkpoint.tsca")
    trace_path = os.path.join(args.out, "trace.csv")
    _refuse_overwrite([checkpoint_path, trace_path], args.force)

    raw_dim = samples[0].raw_patches.shape[0]
    model_cfg = ModelConfig(
        n_states=space.n_states,
        n_objects=space.n_objects,
        dim=cfg["dim"],
        raw_dim=raw_dim,
        heads=cfg["heads"],
        renorm_primitives=cfg["renorm_primitives"],
        split_temperatures=cfg["split_temperatures"],
        init_seed=cfg["seed"],
    )
    weights = LossWeights(
        lam_base=cfg["lam_base"], lam_ct=cfg["lam_ct"],
        lam_cyc=cfg["lam_cyc"], lam_de=cfg["lam_de"],
    )
    tcfg = TrainConfig(
        epochs=cfg["epochs"], lr=cfg["lr"], momentum=cfg["momentum"], weights=weights
    )
    params = init_params(model_cfg)
    trained, trace = train(params, model_cfg, space, samples, tcfg)

    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(checkpoint_path, trained, model_cfg)
    _write_trace(trace_path, trace)
    if trace:
        print(
            f"trained {len(trace)} epochs: total {trace[0]['total']:.6f} -> "
            f"{trace[-1]['total']:.6f}; wrote {checkpoint_path} and {trace_path}"
        )
    else:
        print(f"trained 0 epochs; wrote {checkpoint_path} and {trace_path}")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve("eval", args)
    space, samples = load_split(args.data)
    _require_file(args.checkpoint, "checkpoint")
    params, model_cfg = load_checkpoint(args.checkpoint)

    mode = cfg["mode"]
    gamma = cfg["gamma"]
    if gamma is None:
        gamma = cfg["gamma_closed"] if mode == "closed" else cfg["gamma_open"]
    result = evaluate(
        params, model_cfg, space, samples,
        mode=mode, gamma=gamma,
        quantile=cfg["filter_quantile"], threshold=cfg["filter_threshold"],
        keep_seen=cfg["keep_seen"], exclude_mode=cfg["exclude_mode"],
    )
    text = to_json(result)
    print(text)
    if args.out is not None:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text + "\n")
    return 0


def cmd_export_plans(args) -> int:
    space, samples = load_split(args.data)
    _require_file(args.checkpoint, "checkpoint")
    params, model_cfg = load_checkpoint(args.checkpoint)
    if not 0 <= args.sample < len(samples):
        raise ConfigError(
            f"sample id {args.sample} out of range [0, {len(samples)})"
        )
    tri = sample_triset(params, model_cfg, space, samples[args.sample])
    total, plans = total_ct(tri, triset_temperatures(params, model_cfg))
    cyc = cycle_matrix(
        plans.compositions_to_patches,
        plans.patches_to_primitives,
        plans.primitives_to_compositions,
    )
    os.makedirs(args.out, exist_ok=True)
    written = []
    matrices = [
        (f"plan_{name}", getattr(plans, name).joint)
        for name in (f.name for f in PlanSet.__dataclass_fields__.values())
    ]
    matrices.append(("cycle_matrix", cyc))
    for name, matrix in matrices:
        csv_path = os.path.join(args.out, f"{name}.csv")
        pgm_path = os.path.join(args.out, f"{name}.pgm")
        export_plan_csv(csv_path, matrix)
        export_plan_pgm(pgm_path, matrix)
        written += [csv_path, pgm_path]
    print(
        f"wrote {len(written)} files to {args.out} for sample {args.sample} "
        f"(total transport cost {total!r})"
    )
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_config_options(sub, with_preset: bool) -> None:
    sub.add_argument("--config", metavar="FILE",
                     help="key=value option file (flags take precedence)")
    if with_preset:
        sub.add_argument("--preset", choices=sorted(PRESETS),
                         help="named loss-weight/score-mixing defaults")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tsca",
        description="Triset alignment: dataset generation, training, "
                    "seen/unseen evaluation, and transport-plan export.",
    )
    subs = parser.add_subparsers(dest="command", required=True)
    bool_flag = argparse.BooleanOptionalAction

    gen = subs.add_parser("generate", help="write a synthetic dataset directory")
    _add_config_options(gen, with_preset=False)
    gen.add_argument("-o", "--out", required=True, help="output directory")
    gen.add_argument("--force", action="store_true",
                     help="overwrite existing dataset files")
    gen.add_argument("--states", type=int)
    gen.add_argument("--objects", type=int)
    gen.add_argument("--seen-fraction", type=float)
    gen.add_argument("--samples-per-pair", type=int)
    gen.add_argument("--patches", type=int)
    gen.add_argument("--raw-dim", type=int)
    gen.add_argument("--noise", type=float)
    gen.add_argument("--distractor-fraction", type=float)
    gen.add_argument("--seed", type=int)
    gen.set_defaults(func=cmd_generate)

    tr = subs.add_parser("train", help="train on a dataset directory")
    _add_config_options(tr, with_preset=True)
    tr.add_argument("--data", required=True, help="dataset directory")
    tr.add_argument("-o", "--out", default=".",
                    help="directory for checkpoint.tsca and trace.csv")
    tr.add_argument("--force", action="store_true",
                    help="overwrite existing checkpoint/trace")
    tr.add_argument("--dim", type=int)
    tr.add_argument("--heads", type=int)
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--momentum", type=float)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--lam-base", type=float)
    tr.add_argument("--lam-ct", type=float)
    tr.add_argument("--lam-cyc", type=float)
    tr.add_argument("--lam-de", type=float)
    tr.add_argument("--ablate-ct", action="store_const", const=True,
                    help="drop the transport term (lam_ct = 0)")
    tr.add_argument("--ablate-cyc", action="store_const", const=True,
                    help="drop the cycle term (lam_cyc = 0)")
    tr.add_argument("--ablate-de", action="store_const", const=True,
                    help="drop the decoupler term (lam_de = 0)")
    tr.add_argument("--renorm-primitives", action=bool_flag, default=None)
    tr.add_argument("--split-temperatures", action=bool_flag, default=None)
    tr.set_defaults(func=cmd_train)

    ev = subs.add_parser("eval", help="run the seen/unseen protocol")
    _add_config_options(ev, with_preset=True)
    ev.add_argument("--data", required=True, help="dataset directory")
    ev.add_argument("--checkpoint", required=True, help="trained checkpoint")
    ev.add_argument("-o", "--out", default="results.json",
                    help="write the JSON result here as well as printing it")
    ev.add_argument("--mode", choices=("closed", "open"))
    ev.add_argument("--gamma", type=float,
                    help="composition/primitive mixing weight (overrides presets)")
    ev.add_argument("--gamma-closed", type=float)
    ev.add_argument("--gamma-open", type=float)
    ev.add_argument("--filter-quantile", type=float,
                    help="feasibility-filter cut as a score quantile")
    ev.add_argument("--filter-threshold", type=float,
                    help="feasibility-filter cut as an absolute score")
    ev.add_argument("--keep-seen", action=bool_flag, default=None,
                    help="always keep seen pairs when filtering (default on)")
    ev.add_argument("--exclude-mode", action=bool_flag, default=None,
                    help="invert the filter: drop scores at or above the cut")
    ev.set_defaults(func=cmd_eval)

    ex = subs.add_parser("export-plans",
                         help="write one sample's transport plans as CSV and PGM")
    ex.add_argument("--data", required=True, help="dataset directory")
    ex.add_argument("--checkpoint", required=True, help="trained checkpoint")
    ex.add_argument("--sample", type=int, required=True,
                    help="sample id (position in samples.jsonl)")
    ex.add_argument("-o", "--out", default="plans", help="output directory")
    ex.set_defaults(func=cmd_export_plans)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
