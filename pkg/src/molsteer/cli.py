"""Command line: split datasets, train, sample, evaluate, verify.

Every command is deterministic given its config and seed, uses long-form
flags only, and writes self-describing artifacts (format version, seed,
and config digest in headers). Exit codes: 0 success, 1 internal failure,
2 usage or validation error. The MOLSTEER_DATA_DIR environment variable
names a directory against which relative dataset paths are resolved.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from .autoencoder import AutoencoderError, zero_prior
from .chem.bonds import ChemError, infer_bonds
from .chem.graphs import canonical_hash, murcko_scaffold
from .chem.metrics import MODES, compute_metrics, format_report
from .config import (
    ConfigError,
    config_digest,
    autoencoder_config_from,
    denoiser_config_from,
    load_config,
    schedule_from,
    train_config_from,
)
from .data import (
    DataError,
    build_manifest,
    build_training_pairs,
    generate_toy_dataset,
    load_dataset,
    split_by_ring_count,
    split_by_scaffold_frequency,
)
from .diffusion import DiffusionError, sample
from .geometry import DEFAULT_ALPHABET, GeometryError
from .training import (
    TrainingError,
    build_trainer_from_checkpoint,
    delta_histogram,
    ema_modules,
    make_trainer,
    save_checkpoint,
    train_loop,
    variational_bound_diagnostic,
    draw_bound_probes,
    prepare_pair,
)
from .verify import SUITES, all_passed, format_results, run_suites
from .xyz import XyzFormatError, write_xyz_file

DATA_DIR_ENV = "MOLSTEER_DATA_DIR"
SPLIT_MANIFEST_VERSION = 1
USAGE_ERRORS = (
    ConfigError,
    DataError,
    XyzFormatError,
    ChemError,
    GeometryError,
    AutoencoderError,
    DiffusionError,
    FileNotFoundError,
    NotADirectoryError,
)


def _resolve_data_path(raw: str) -> Path:
    """Resolve a dataset path, falling back to the data-cache directory."""
    path = Path(raw)
    if path.exists():
        return path
    root = os.environ.get(DATA_DIR_ENV)
    if root and not path.is_absolute():
        candidate = Path(root) / raw
        if candidate.exists():
            return candidate
    return path


def _parse_int_set(text: str, flag: str) -> set[int]:
    try:
        values = {int(tok) for tok in text.split(",") if tok.strip() != ""}
    except ValueError as err:
        raise DataError(f"{flag} expects comma-separated integers, got {text!r}") from err
    if not values:
        raise DataError(f"{flag} must name at least one integer")
    return values


def _ring_histogram_text(histogram: dict[int, int]) -> str:
    return ",".join(f"{k}:{v}" for k, v in sorted(histogram.items())) or "-"


def cmd_toy(args: argparse.Namespace) -> int:
    lo, hi = (int(x) for x in args.ring_range.split(","))
    molecules = generate_toy_dataset(args.count, (lo, hi), seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_xyz_file(out, molecules, comments=[m.label for m in molecules])
    manifest = build_manifest(out.stem, molecules)
    print(f"wrote {len(molecules)} toy molecules to {out}")
    print(f"ring histogram: {_ring_histogram_text(manifest.ring_count_histogram)}")
    return 0


def _write_split_file(out_dir: Path, name: str, molecules: list) -> Path:
    path = out_dir / f"{name}.xyz"
    write_xyz_file(path, molecules, comments=[m.label for m in molecules])
    return path


def cmd_split(args: argparse.Namespace) -> int:
    dataset_path = _resolve_data_path(args.dataset)
    molecules, skipped = load_dataset(dataset_path)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.mode == "ring":
        split = split_by_ring_count(
            molecules,
            _parse_int_set(args.train_rings, "--train-rings"),
            _parse_int_set(args.held_out_rings, "--held-out-rings"),
        )
        parts = [
            ("train", split.train),
            ("held_out", split.held_out),
            ("excluded", split.excluded),
        ]
    else:
        split = split_by_scaffold_frequency(molecules, high=args.high, low=args.low)
        parts = [
            ("train", split.in_distribution),
            ("near_ood", split.near_ood),
            ("far_ood", split.far_ood),
        ]

    lines = [
        "# split manifest",
        f"format_version {SPLIT_MANIFEST_VERSION}",
        f"mode {args.mode}",
        f"dataset {dataset_path}",
        f"seed {args.seed}",
        f"skipped {skipped}",
    ]
    print(f"{'split':<12} {'molecules':>9}  ring histogram")
    for name, subset in parts:
        path = _write_split_file(out_dir, name, subset)
        manifest = build_manifest(name, subset)
        rings = _ring_histogram_text(manifest.ring_count_histogram)
        lines += [
            f"[split {name}]",
            f"file {path.name}",
            f"count {len(subset)}",
            f"rings {rings}",
        ]
        if args.mode == "scaffold":
            digests = {
                canonical_hash(murcko_scaffold(infer_bonds(m))) for m in subset
            }
            lines.append(f"scaffolds {len(digests)}")
            print(f"{name:<12} {len(subset):>9}  {rings}  scaffolds={len(digests)}")
        else:
            print(f"{name:<12} {len(subset):>9}  {rings}")
    manifest_path = out_dir / "split.txt"
    manifest_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"manifest: {manifest_path}")
    return 0


def _read_split_manifest(path: Path) -> dict[str, Path]:
    if not path.exists():
        raise DataError(f"split manifest {path} does not exist")
    files: dict[str, Path] = {}
    current = ""
    for raw in path.read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if line.startswith("[split ") and line.endswith("]"):
            current = line[len("[split ") : -1]
        elif line.startswith("file ") and current:
            files[current] = path.parent / line.split(" ", 1)[1]
    if not files:
        raise DataError(f"{path} holds no split entries")
    return files


def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, args.set)
    digest = config_digest(cfg)
    if args.manifest:
        files = _read_split_manifest(Path(args.manifest))
        if "train" not in files:
            raise DataError(f"manifest {args.manifest} has no train split")
        molecules, _ = load_dataset(files["train"])
    else:
        molecules, _ = load_dataset(_resolve_data_path(args.dataset))
    if not molecules:
        raise DataError("train split is empty")

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.resume:
        trainer, ckpt = build_trainer_from_checkpoint(args.resume)
        mode = ckpt.header.get("substructure_mode", cfg["substructure_mode"])
        fraction = float(ckpt.header.get("fragment_fraction", cfg["fragment_fraction"]))
        digest = ckpt.header.get("config_digest", digest)
        if args.config:
            print("note: --config is ignored on resume; checkpoint settings win")
    else:
        trainer = make_trainer(
            train_config_from(cfg),
            autoencoder_config=autoencoder_config_from(cfg),
            denoiser_config=denoiser_config_from(cfg),
            schedule=schedule_from(cfg),
            alphabet_size=len(DEFAULT_ALPHABET),
        )
        mode = cfg["substructure_mode"]
        fraction = cfg["fragment_fraction"]

    pairs, unusable = build_training_pairs(
        molecules, mode, rng=np.random.default_rng(trainer.config.seed), fragment_fraction=fraction
    )
    if not pairs:
        raise DataError(f"no molecule in the train split has a {mode} substructure")
    if unusable:
        print(f"note: {unusable} molecules lack a {mode} substructure and were skipped")

    if args.steps is not None:
        steps = args.steps
    elif cfg["steps"] > 0:
        steps = cfg["steps"]
    else:
        per_epoch = max(1, -(-len(pairs) // trainer.config.batch_size))
        steps = trainer.config.epochs * per_epoch
    remaining = steps - trainer.step if args.resume else steps
    if remaining <= 0:
        print(f"checkpoint already at step {trainer.step}; nothing to do")
        return 0

    deltas = delta_histogram(pairs)
    extra = {
        "config_digest": digest,
        "substructure_mode": mode,
        "fragment_fraction": repr(float(fraction)),
    }
    checkpoint_every = cfg["checkpoint_every"]
    log_path = out_dir / "train.log"
    probe_pair = prepare_pair(pairs[0])
    probe_gen = torch.Generator().manual_seed(trainer.config.seed + 1)
    probes = draw_bound_probes(
        8, probe_pair.mol_coords.shape[0], trainer.denoiser.feature_dim, trainer.schedule, probe_gen
    )
    start = time.monotonic()

    with open(log_path, "a", encoding="utf-8") as log_file:
        log_file.write(f"# train log seed={trainer.config.seed} config={digest}\n")

        def on_step(step: int, metrics: dict[str, float]) -> None:
            line = (
                f"step={step} ae={metrics['autoencoder']:.4f} "
                f"diffusion={metrics['diffusion']:.4f} total={metrics['total']:.4f}"
            )
            if step % checkpoint_every == 0 or step == steps:
                with torch.no_grad():
                    prior = trainer.autoencoder.encode(
                        probe_pair.sub_coords, probe_pair.sub_feats, generator=probe_gen
                    )
                    bound = variational_bound_diagnostic(
                        trainer.denoiser,
                        prior,
                        probe_pair.mol_coords * trainer.autoencoder.scaler.coord_weight,
                        trainer.autoencoder.scale_feats(probe_pair.mol_feats),
                        trainer.schedule,
                        probes,
                    )
                line += f" bound={bound:.4f}"
                save_checkpoint(out_dir / f"step_{step:06d}.ckpt", trainer, deltas, extra)
            line += f" wall={time.monotonic() - start:.1f}"
            log_file.write(line + "\n")
            if step % max(1, checkpoint_every // 5) == 0 or step == steps:
                print(line)

        train_loop(trainer, pairs, remaining, on_step=on_step)

    save_checkpoint(out_dir / "model.ckpt", trainer, deltas, extra)
    print(f"final checkpoint: {out_dir / 'model.ckpt'} (step {trainer.step})")
    return 0


def _draw_delta(deltas: dict[int, int], generator: torch.Generator) -> int:
    gaps = sorted(deltas)
    weights = torch.tensor([float(deltas[g]) for g in gaps])
    idx = int(torch.multinomial(weights, 1, generator=generator).item())
    return gaps[idx]


def cmd_sample(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.count == 0:
        return 0
    trainer, ckpt = build_trainer_from_checkpoint(args.checkpoint)
    if args.raw_params:
        autoencoder, denoiser = trainer.autoencoder, trainer.denoiser
    else:
        autoencoder, denoiser = ema_modules(trainer)
    autoencoder.eval()
    denoiser.eval()

    substructures, _ = load_dataset(_resolve_data_path(args.substructures))
    if not substructures:
        raise DataError(f"no substructures parsed from {args.substructures}")
    if autoencoder.alphabet_size != len(DEFAULT_ALPHABET):
        raise DataError(
            f"checkpoint expects an alphabet of {autoencoder.alphabet_size} elements, "
            f"substructure files use {len(DEFAULT_ALPHABET)}"
        )
    if args.atoms is None and not ckpt.deltas:
        raise DataError("checkpoint has no size histogram; pass --atoms")

    generator = torch.Generator().manual_seed(args.seed)
    digest = ckpt.header.get("config_digest", "-")
    latent_dim = autoencoder.config.latent_feat_dim
    for i in range(args.count):
        sub = substructures[i % len(substructures)]
        sub_coords = torch.as_tensor(sub.coords, dtype=torch.float32)
        sub_feats = torch.as_tensor(sub.features, dtype=torch.float32)
        with torch.no_grad():
            prior = autoencoder.encode(sub_coords, sub_feats, generator=generator)
        if args.zero_prior:
            prior = zero_prior(sub.atom_count, latent_dim)
        n_atoms = args.atoms if args.atoms is not None else sub.atom_count + _draw_delta(
            ckpt.deltas, generator
        )
        n_atoms = max(n_atoms, sub.atom_count)
        molecule = sample(
            prior,
            n_atoms,
            trainer.schedule,
            denoiser,
            autoencoder.scaler,
            DEFAULT_ALPHABET,
            with_charges=autoencoder.with_charges,
            generator=generator,
            label=f"sample-{i:05d}",
        )
        sub_digest = canonical_hash(infer_bonds(sub))[:16]
        comment = f"sample-{i:05d} seed={args.seed} prior={sub_digest} config={digest}"
        write_xyz_file(out_dir / f"sample_{i:05d}.xyz", [molecule], comments=[comment])
    print(f"wrote {args.count} molecules to {out_dir}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    generated, _ = load_dataset(_resolve_data_path(args.generated))
    reference, _ = load_dataset(_resolve_data_path(args.reference))
    training_hashes = {canonical_hash(infer_bonds(m)) for m in reference}

    ring_targets = scaffold_targets = fragment_targets = None
    target_note = ""
    if args.mode == "ring":
        if not args.ring_targets:
            raise DataError("ring mode needs --ring-targets")
        ring_targets = _parse_int_set(args.ring_targets, "--ring-targets")
        target_note = ",".join(str(r) for r in sorted(ring_targets))
    elif args.mode == "scaffold":
        if not args.scaffold_targets:
            raise DataError("scaffold mode needs --scaffold-targets")
        targets, _ = load_dataset(_resolve_data_path(args.scaffold_targets))
        scaffold_targets = {
            canonical_hash(murcko_scaffold(infer_bonds(m))) for m in targets
        }
        target_note = f"{len(scaffold_targets)} scaffolds from {args.scaffold_targets}"
    else:
        if not args.fragment_targets:
            raise DataError("fragment mode needs --fragment-targets")
        needles, _ = load_dataset(_resolve_data_path(args.fragment_targets))
        fragment_targets = [infer_bonds(m) for m in needles]
        target_note = f"{len(fragment_targets)} fragments from {args.fragment_targets}"

    report = compute_metrics(
        generated,
        mode=args.mode,
        ring_targets=ring_targets,
        scaffold_targets=scaffold_targets,
        fragment_targets=fragment_targets,
        training_hashes=training_hashes,
    )
    table = format_report(report)
    print(table)
    if args.out:
        def show(value: float | None) -> str:
            return "-" if value is None else f"{value:.4f}"

        lines = [
            "# evaluation report",
            "format_version 1",
            f"mode {args.mode}",
            f"targets {target_note}",
            f"generated {args.generated} {len(generated)}",
            f"reference {args.reference} {len(reference)}",
            f"proportion {show(report.proportion)}",
            f"coverage {show(report.coverage)}",
            f"atom_stability {show(report.atom_stability)}",
            f"molecule_stability {show(report.molecule_stability)}",
            f"validity {show(report.validity)}",
            f"novelty {show(report.novelty)}",
            f"success_rate {show(report.success_rate)}",
        ]
        lines += [f"count_{k} {v}" for k, v in sorted(report.counts.items())]
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text("\n".join(lines) + "\n", encoding="utf-8")
        print(f"report: {out}")
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    names = args.suite if args.suite else None
    results = run_suites(names, seed=args.seed, inject_cog_fault=args.inject_cog_fault)
    print(format_results(results))
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 0 if not failed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="molsteer",
        description=(
            "Structural-prior-steered diffusion for 3D molecules: dataset splitting, "
            "training, conditioned sampling, evaluation, and verification. Relative "
            f"dataset paths are also resolved against ${DATA_DIR_ENV}."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_toy = sub.add_parser("toy", help="generate a toy fused-ring dataset")
    p_toy.add_argument("--count", type=int, required=True)
    p_toy.add_argument("--ring-range", default="0,3", help="LO,HI inclusive ring counts")
    p_toy.add_argument("--seed", type=int, default=0)
    p_toy.add_argument("--out", required=True, help="output .xyz file")
    p_toy.set_defaults(func=cmd_toy)

    p_split = sub.add_parser("split", help="split a dataset by structure")
    p_split.add_argument("--dataset", required=True)
    p_split.add_argument("--mode", choices=["ring", "scaffold"], required=True)
    p_split.add_argument("--train-rings", default="0,1", help="ring counts kept for training")
    p_split.add_argument("--held-out-rings", default="2", help="ring counts held out")
    p_split.add_argument("--high", type=int, default=100, help="scaffold frequency for train")
    p_split.add_argument("--low", type=int, default=10, help="scaffold frequency for near-OOD")
    p_split.add_argument("--seed", type=int, default=0)
    p_split.add_argument("--out", required=True, help="output directory")
    p_split.set_defaults(func=cmd_split)

    p_train = sub.add_parser("train", help="train the model")
    source = p_train.add_mutually_exclusive_group(required=True)
    source.add_argument("--manifest", help="split manifest from the split command")
    source.add_argument("--dataset", help="train directly on one .xyz dataset")
    p_train.add_argument("--config", help="key-value config file")
    p_train.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE", help="config override"
    )
    p_train.add_argument("--steps", type=int, help="total update count override")
    p_train.add_argument("--resume", help="checkpoint to continue from")
    p_train.add_argument("--out", required=True, help="output directory")
    p_train.set_defaults(func=cmd_train)

    p_sample = sub.add_parser("sample", help="sample molecules under a structural prior")
    p_sample.add_argument("--checkpoint", required=True)
    p_sample.add_argument("--substructures", required=True, help=".xyz file of priors")
    p_sample.add_argument("--count", type=int, required=True)
    p_sample.add_argument("--seed", type=int, default=0)
    p_sample.add_argument("--atoms", type=int, help="fixed atom count (else size histogram)")
    p_sample.add_argument(
        "--zero-prior", action="store_true", help="ignore the encoder; unconditional baseline"
    )
    p_sample.add_argument(
        "--raw-params", action="store_true", help="sample with raw instead of EMA weights"
    )
    p_sample.add_argument("--out", required=True, help="output directory")
    p_sample.set_defaults(func=cmd_sample)

    p_eval = sub.add_parser("eval", help="score generated molecules")
    p_eval.add_argument("--generated", required=True, help="directory of generated .xyz files")
    p_eval.add_argument("--reference", required=True, help="training set for novelty")
    p_eval.add_argument("--mode", choices=list(MODES), required=True)
    p_eval.add_argument("--ring-targets", help="comma-separated target ring counts")
    p_eval.add_argument("--scaffold-targets", help=".xyz file of target-scaffold molecules")
    p_eval.add_argument("--fragment-targets", help=".xyz file of fragment needles")
    p_eval.add_argument("--out", help="report file")
    p_eval.set_defaults(func=cmd_eval)

    p_verify = sub.add_parser("verify", help="run the structural verification suites")
    p_verify.add_argument(
        "--suite", action="append", choices=list(SUITES), help="suite to run (repeatable)"
    )
    p_verify.add_argument("--seed", type=int, default=0)
    p_verify.add_argument(
        "--inject-cog-fault",
        action="store_true",
        help="break the CoG projection to prove the suite catches it",
    )
    p_verify.set_defaults(func=cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_request:
        return int(exit_request.code or 0)
    try:
        return args.func(args)
    except USAGE_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (TrainingError, RuntimeError) as err:
        print(f"internal failure: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
