"""Command-line front end.

Subcommands: ``train``, ``eval``, ``synth``, ``convert``, ``sweep``,
``ablate``, ``inspect``. Every run resolves its configuration fully
(defaults <- config file <- flags), writes it to a ``manifest.json`` in the
run directory, and puts all artifacts under that directory. Exit codes:
0 success, 2 usage/configuration error, 3 data error, 4 training
divergence. Failures print a one-line JSON error document to stderr and,
when a run directory exists, drop the same document in ``error.json``.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoint import load_checkpoint
from .data import PatchPack, SynthConfig, convert_external, generate_synthetic, load_patch_pack, save_patch_pack
from .errors import (
    ConfigError,
    DataError,
    DivergenceError,
    EXIT_DATA,
    EXIT_DIVERGED,
    EXIT_OK,
    EXIT_USAGE,
)
from .evaluator import (
    SCORE_HEADS,
    emit_samples,
    evaluate,
    score_pairs,
    write_report,
    write_roc_csv,
    write_scores_csv,
)
from .network import (
    ArchitectureConfig,
    PRESET_NAMES,
    build_metric_only,
    build_network,
    count_parameters,
    shared_parameter_report,
)
from .trainer import TrainConfig, train

OUTPUT_ROOT_ENV = "KGLNET_OUTPUT_ROOT"
_CONFIG_SECTIONS = {"train", "eval", "out"}


# ---------------------------------------------------------------------------
# config resolution


def _load_config_file(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    # a run manifest is accepted anywhere a config file is: its resolved
    # config lives under "config"
    if doc.get("format") == "kglnet-run-v1":
        doc = doc.get("config", {})
    unknown = set(doc) - _CONFIG_SECTIONS
    if unknown:
        raise ConfigError(
            f"unknown config sections: {', '.join(sorted(unknown))} "
            f"(expected {sorted(_CONFIG_SECTIONS)})"
        )
    return doc


def _resolve_train_config(args) -> TrainConfig:
    doc = _load_config_file(args.config) if getattr(args, "config", None) else {}
    train_doc = dict(doc.get("train", {}))
    arch_doc = dict(train_doc.get("architecture", {}))

    if getattr(args, "arch", None):
        arch_doc = {"preset": args.arch}
    for flag, key in (
        ("channel_scale", "channel_scale"),
        ("descriptor_dim", "descriptor_dim"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            arch_doc[key] = value
    if getattr(args, "no_eca", False):
        arch_doc["use_eca"] = False
    if arch_doc:
        train_doc["architecture"] = arch_doc

    for flag in (
        "batch_size",
        "epochs",
        "lr_feature",
        "lr_metric_branch",
        "schedule",
        "seed",
        "margin",
        "clip_norm",
        "checkpoint_every",
    ):
        value = getattr(args, flag, None)
        if value is not None:
            train_doc[flag] = value
    if getattr(args, "no_hnsm", False):
        train_doc["use_hnsm"] = False
    if getattr(args, "no_fgl", False):
        train_doc["use_fgl"] = False
    return TrainConfig.from_dict(train_doc)


def _resolve_head(args) -> str:
    doc = _load_config_file(args.config) if getattr(args, "config", None) else {}
    head = getattr(args, "head", None) or doc.get("eval", {}).get("head", "metric")
    if head not in SCORE_HEADS:
        raise ConfigError(f"eval head must be one of {SCORE_HEADS}")
    return head


def _resolve_out_dir(args, default_name: str) -> Path:
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    out = getattr(args, "out", None)
    if out is None and getattr(args, "config", None):
        out = _load_config_file(args.config).get("out")
    path = Path(out) if out else root / default_name
    if not path.is_absolute() and out is None:
        path = root / default_name
    path.mkdir(parents=True, exist_ok=True)
    return path


def _config_digest(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:8]


def _write_manifest(out_dir: Path, command: str, config_doc: dict, inputs: dict) -> Path:
    manifest = {
        "format": "kglnet-run-v1",
        "command": command,
        "config": config_doc,
        "inputs": inputs,
        "versions": {
            "kglnet": __version__,
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "torch": torch.__version__,
        },
    }
    # "run_manifest" rather than "manifest": pack directories already use
    # manifest.json for their own metadata, and synth/convert write packs
    path = out_dir / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _pack_input(pack: PatchPack, path) -> dict:
    return {"path": str(path), "name": pack.name, "n_pairs": pack.n_pairs, "digest": pack.digest()}


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    config = _resolve_train_config(args)
    pack = load_patch_pack(args.data)
    out_dir = _resolve_out_dir(args, f"train-{config.architecture.name}-s{config.seed}-{_config_digest(config.to_dict())}")
    _register_run_dir(out_dir)
    config_doc = {"train": config.to_dict()}
    _write_manifest(out_dir, "train", config_doc, {"data": _pack_input(pack, args.data)})

    if args.metric_only:
        net = build_metric_only(config.architecture, seed=config.seed)
    else:
        net = build_network(config.architecture, seed=config.seed)
    result = train(net, pack, config, out_dir, resume=args.resume)

    summary = {
        "steps": result.steps_run,
        "epochs": result.epochs_completed,
        "final_checkpoint": str(result.final_checkpoint),
        "final_losses": dataclasses.asdict(result.breakdowns[-1]) if result.breakdowns else None,
    }
    (out_dir / "result.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"trained {result.steps_run} steps -> {result.final_checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    head = _resolve_head(args)
    ckpt = load_checkpoint(args.ckpt)
    net = ckpt.build_network()
    packs = [load_patch_pack(p) for p in args.data]
    out_dir = _resolve_out_dir(args, f"eval-{Path(args.ckpt).stem}")
    _register_run_dir(out_dir)
    _write_manifest(
        out_dir,
        "eval",
        {"eval": {"head": head}, "train": ckpt.config},
        {
            "checkpoint": {"path": str(args.ckpt), "epoch": ckpt.epoch},
            "data": [_pack_input(p, src) for p, src in zip(packs, args.data)],
        },
    )

    report = evaluate(net, packs, head=head, checkpoint_id=str(args.ckpt))
    write_report(report, out_dir / "report.json")
    for i, (pack, src) in enumerate(zip(packs, args.data)):
        scored = score_pairs(net, pack, head=head)
        tag = f"{i:02d}_{pack.subset or pack.name}"
        write_scores_csv(scored, out_dir / f"scores_{tag}.csv")
        write_roc_csv(scored, out_dir / f"roc_{tag}.csv")
        if args.emit_samples:
            emit_samples(net, pack, out_dir / f"samples_{tag}", head=head)
    for subset, value in zip(report.subsets, report.fpr95_percent):
        print(f"{subset}: FPR95 {value:.2f}%")
    print(f"mean: FPR95 {report.mean_percent:.2f}%")
    return EXIT_OK


def cmd_synth(args) -> int:
    config = SynthConfig(
        n_pairs=args.n_pairs,
        octaves=args.octaves,
        severity=args.severity,
        noise=args.noise,
        seed=args.seed,
        pairs_per_scene=args.pairs_per_scene,
        hard_negative_fraction=args.hard_negative_fraction,
        name=args.name,
        split=args.split,
    )
    pack = generate_synthetic(config)
    out_dir = Path(args.out)
    save_patch_pack(pack, out_dir)
    _register_run_dir(out_dir)
    _write_manifest(
        out_dir,
        "synth",
        {"train": {}, "out": str(out_dir)},
        {"generator": dataclasses.asdict(config), "pack_digest": pack.digest()},
    )
    print(f"wrote {pack.n_pairs} pairs to {out_dir} (digest {pack.digest()[:16]})")
    return EXIT_OK


def cmd_convert(args) -> int:
    pack = convert_external(args.layout, args.src, name=args.name, split=args.split)
    out_dir = Path(args.out)
    save_patch_pack(pack, out_dir)
    _register_run_dir(out_dir)
    _write_manifest(
        out_dir,
        "convert",
        {"train": {}, "out": str(out_dir)},
        {"source": {"layout": args.layout, "path": str(args.src)}, "pack_digest": pack.digest()},
    )
    print(f"converted {pack.n_pairs} pairs from {args.src} -> {out_dir}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    if args.ckpt:
        ckpt = load_checkpoint(args.ckpt)
        net = ckpt.build_network()
        origin = f"checkpoint {args.ckpt} (epoch {ckpt.epoch})"
    elif args.arch:
        net = build_network(ArchitectureConfig.from_dict({"preset": args.arch}), seed=0)
        origin = f"preset {args.arch}"
    else:
        raise ConfigError("inspect needs --ckpt or --arch")
    report = shared_parameter_report(net)
    doc = {
        "origin": origin,
        "architecture": net.config.to_dict(),
        "total_parameters": report.total_parameters,
        "aliased_parameters": report.aliased_parameters,
        "aliased_groups": [
            {"key": g.key, "parameters": g.parameter_count, "positions": [list(p) for p in g.positions]}
            for g in report.aliased_groups
        ],
        "cross_spectrum_positions": {k: list(v) for k, v in report.cross_spectrum_positions.items()},
    }
    if args.as_json:
        print(json.dumps(doc, indent=2, sort_keys=True))
        return EXIT_OK
    print(f"{origin}: {net.config.name}")
    print(f"total parameters: {report.total_parameters:,}")
    print(f"parameters in stack-shared groups: {report.aliased_parameters:,}")
    for g in report.aliased_groups:
        spots = ", ".join(f"{s}/{sp}#{pos}" for s, sp, pos in g.positions)
        print(f"  group {g.key}: {g.parameter_count:,} params used by {spots}")
    for stack, positions in report.cross_spectrum_positions.items():
        shown = ", ".join(map(str, positions)) if positions else "none"
        print(f"{stack} stack shares blocks across spectra at: {shown}")
    return EXIT_OK


def _train_and_eval(arch, train_config, train_pack, eval_pack, run_dir, head, metric_only=False):
    """One sweep/ablation cell. Returns (mean FPR95 percent, status)."""
    net = build_metric_only(arch, seed=train_config.seed) if metric_only else build_network(arch, seed=train_config.seed)
    train(net, train_pack, train_config, run_dir)
    use_head = "metric" if metric_only else head
    report = evaluate(net, eval_pack, head=use_head, checkpoint_id=str(run_dir / "final.ckpt"))
    write_report(report, run_dir / "report.json")
    return report.mean_percent, "ok"


def _parse_seeds(raw: str) -> list:
    try:
        return [int(s) for s in raw.split(",") if s != ""]
    except ValueError as exc:
        raise ConfigError(f"--seeds must be comma-separated integers, got {raw!r}") from exc


def cmd_sweep(args) -> int:
    base = _resolve_train_config(args)
    head = _resolve_head(args)
    archs = args.archs.split(",") if args.archs else list(PRESET_NAMES)
    for name in archs:
        if name not in PRESET_NAMES:
            raise ConfigError(f"unknown preset {name!r} in --archs")
    seeds = _parse_seeds(args.seeds)
    train_pack = load_patch_pack(args.data)
    eval_pack = load_patch_pack(args.eval_data) if args.eval_data else train_pack
    out_dir = _resolve_out_dir(args, f"sweep-{_config_digest(base.to_dict())}")
    _register_run_dir(out_dir)
    _write_manifest(
        out_dir,
        "sweep",
        {"train": base.to_dict(), "eval": {"head": head}},
        {
            "archs": archs,
            "seeds": seeds,
            "data": _pack_input(train_pack, args.data),
            "eval_data": _pack_input(eval_pack, args.eval_data or args.data),
        },
    )

    rows = ["arch,use_hnsm,seed,fpr95_percent,status"]
    for name in archs:
        for use_hnsm in (True, False):
            for seed in seeds:
                arch = dataclasses.replace(
                    ArchitectureConfig.from_dict({"preset": name}),
                    channel_scale=base.architecture.channel_scale,
                    descriptor_dim=base.architecture.descriptor_dim,
                    use_eca=base.architecture.use_eca,
                )
                cfg = dataclasses.replace(base, architecture=arch, use_hnsm=use_hnsm, seed=seed)
                cell = out_dir / f"{name}_{'hnsm' if use_hnsm else 'rand'}_s{seed}"
                try:
                    value, status = _train_and_eval(arch, cfg, train_pack, eval_pack, cell, head)
                    rows.append(f"{name},{int(use_hnsm)},{seed},{value:.4f},{status}")
                except (ConfigError, DataError, DivergenceError) as exc:
                    rows.append(f"{name},{int(use_hnsm)},{seed},,{type(exc).__name__}")
                print(rows[-1])
    (out_dir / "sweep.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    print(f"sweep table -> {out_dir / 'sweep.csv'}")
    return EXIT_OK


ABLATION_VARIANTS = (
    # (row name, metric-only network?, mining on?, guidance on?)
    ("metric_only", True, False, False),
    ("combined", False, False, False),
    ("combined_mining", False, True, False),
    ("full", False, True, True),
)


def cmd_ablate(args) -> int:
    base = _resolve_train_config(args)
    head = _resolve_head(args)
    seeds = _parse_seeds(args.seeds)
    train_pack = load_patch_pack(args.data)
    eval_pack = load_patch_pack(args.eval_data) if args.eval_data else train_pack
    out_dir = _resolve_out_dir(args, f"ablate-{_config_digest(base.to_dict())}")
    _register_run_dir(out_dir)
    _write_manifest(
        out_dir,
        "ablate",
        {"train": base.to_dict(), "eval": {"head": head}},
        {
            "seeds": seeds,
            "data": _pack_input(train_pack, args.data),
            "eval_data": _pack_input(eval_pack, args.eval_data or args.data),
        },
    )

    rows = ["variant,seed,fpr95_percent,status"]
    for name, metric_only, use_hnsm, use_fgl in ABLATION_VARIANTS:
        for seed in seeds:
            cfg = dataclasses.replace(base, use_hnsm=use_hnsm, use_fgl=use_fgl, seed=seed)
            cell = out_dir / f"{name}_s{seed}"
            try:
                value, status = _train_and_eval(
                    cfg.architecture, cfg, train_pack, eval_pack, cell, head, metric_only=metric_only
                )
                rows.append(f"{name},{seed},{value:.4f},{status}")
            except (ConfigError, DataError, DivergenceError) as exc:
                rows.append(f"{name},{seed},,{type(exc).__name__}")
            print(rows[-1])
    (out_dir / "ablation.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    print(f"ablation table -> {out_dir / 'ablation.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# wiring


def _add_train_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON config file (or a previous run's run_manifest.json)")
    p.add_argument("--arch", choices=PRESET_NAMES, help="architecture preset")
    p.add_argument("--channel-scale", dest="channel_scale", type=float)
    p.add_argument("--descriptor-dim", dest="descriptor_dim", type=int)
    p.add_argument("--no-eca", dest="no_eca", action="store_true", help="drop the channel-attention gates")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr-feature", dest="lr_feature", type=float)
    p.add_argument("--lr-metric-branch", dest="lr_metric_branch", type=float)
    p.add_argument("--schedule", choices=("none", "cosine", "simulated_annealing"))
    p.add_argument("--seed", type=int)
    p.add_argument("--margin", type=float)
    p.add_argument("--clip-norm", dest="clip_norm", type=float)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--no-hnsm", dest="no_hnsm", action="store_true", help="uniform random negatives instead of mined ones")
    p.add_argument("--no-fgl", dest="no_fgl", action="store_true", help="disable the feature-guidance terms")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kglnet",
        description="Cross-spectral patch matching: training, evaluation, and data tooling.",
    )
    parser.add_argument("--version", action="version", version=f"kglnet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network on a patch pack")
    p.add_argument("--data", required=True, help="training pack directory")
    p.add_argument("--out", help="run directory (default under the output root)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--metric-only", dest="metric_only", action="store_true",
                   help="train the classifier-only ablation network")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a pack's evaluation pairs with a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, nargs="+", help="pack directories (one report row each)")
    p.add_argument("--head", choices=SCORE_HEADS)
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--emit-samples", dest="emit_samples", action="store_true",
                   help="write image grids of the four judgment categories")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate a synthetic cross-spectral pack")
    p.add_argument("--out", required=True, help="pack directory to create")
    p.add_argument("--n-pairs", dest="n_pairs", type=int, required=True)
    p.add_argument("--severity", type=float, default=0.5)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--octaves", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pairs-per-scene", dest="pairs_per_scene", type=int, default=8,
                   help="crops drawn from each underlying scene")
    p.add_argument("--hard-negative-fraction", dest="hard_negative_fraction", type=float,
                   default=0.5, help="share of evaluation negatives from the anchor's scene")
    p.add_argument("--name", default="synthetic")
    p.add_argument("--split", default="train")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("convert", help="convert an external patch layout into a pack")
    p.add_argument("--layout", required=True)
    p.add_argument("--src", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--name")
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("sweep", help="train/evaluate presets with and without mining")
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data", dest="eval_data")
    p.add_argument("--archs", help="comma-separated preset names (default: all 20)")
    p.add_argument("--seeds", default="0", help="comma-separated seeds, paired across variants")
    p.add_argument("--out")
    p.add_argument("--head", choices=SCORE_HEADS)
    _add_train_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="run the four-variant component ablation")
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data", dest="eval_data")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--out")
    p.add_argument("--head", choices=SCORE_HEADS)
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("inspect", help="parameter and sharing summary of a network")
    p.add_argument("--ckpt")
    p.add_argument("--arch", choices=PRESET_NAMES)
    p.add_argument("--json", dest="as_json", action="store_true")
    p.set_defaults(func=cmd_inspect)

    return parser


_run_dir: Path | None = None


def _register_run_dir(path: Path):
    global _run_dir
    _run_dir = Path(path)


def _emit_error(exc: Exception, code: int) -> int:
    doc = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    if isinstance(exc, DivergenceError):
        doc["component"] = exc.component
        if exc.step is not None:
            doc["step"] = exc.step
    line = json.dumps(doc, sort_keys=True)
    print(line, file=sys.stderr)
    if _run_dir is not None and _run_dir.is_dir():
        (_run_dir / "error.json").write_text(line + "\n", encoding="utf-8")
    return code


def main(argv=None) -> int:
    global _run_dir
    _run_dir = None
    torch.set_num_threads(max(1, os.cpu_count() or 1))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse handles usage errors with exit 2
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _emit_error(exc, EXIT_USAGE)
    except DataError as exc:
        return _emit_error(exc, EXIT_DATA)
    except DivergenceError as exc:
        return _emit_error(exc, EXIT_DIVERGED)


if __name__ == "__main__":
    sys.exit(main())
