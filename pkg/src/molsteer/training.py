"""Joint training of the autoencoder and the prior-conditioned denoiser.

One optimizer update covers both loss terms; there is no pre-training
stage. All randomness flows through a single explicit generator so runs
are reproducible and noise can be injected for matched-noise symmetry
tests. Checkpoints are a text header plus named float32 blocks, written
atomically so readers never observe a torn file.
"""

from __future__ import annotations

import copy
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Callable, Sequence

import numpy as np
import torch
from torch import Tensor

from .autoencoder import (
    AutoencoderConfig,
    AutoencoderNoise,
    LatentPrior,
    SubstructureAutoencoder,
)
from .data import TrainingPair
from .diffusion import (
    ConditionalDenoiser,
    NoiseSchedule,
    build_condition,
    diffusion_loss,
    make_schedule,
    q_sample,
)
from .egnn import EgnnConfig, project_zero_cog
from .geometry import FeatureScaler

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "molsteer-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    """Raised for aborted updates and malformed checkpoints."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 64
    epochs: int = 1
    seed: int = 0
    ema_decay: float = 0.999
    grad_clip: float = 1.0
    loss_coefficient: float = 1.0

    def __post_init__(self) -> None:
        if self.learning_rate < 0:
            raise ValueError(f"learning rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError(f"ema decay must be in [0, 1), got {self.ema_decay}")
        if self.grad_clip <= 0:
            raise ValueError(f"grad clip must be positive, got {self.grad_clip}")
        if self.loss_coefficient <= 0:
            raise ValueError(f"loss coefficient must be positive, got {self.loss_coefficient}")


@dataclass(frozen=True)
class PreparedPair:
    """Tensor view of a training pair, coordinates CoG-projected."""

    mol_coords: Tensor
    mol_feats: Tensor
    sub_coords: Tensor
    sub_feats: Tensor
    index_map: tuple[int, ...]
    label: str


def prepare_pair(pair: TrainingPair, dtype: torch.dtype = torch.float32) -> PreparedPair:
    """Convert a raw training pair into projected tensors for the loss."""
    if pair.molecule.feature_scale is not None or pair.substructure.feature_scale is not None:
        raise TrainingError("training pairs must carry unscaled features")
    mol_coords = torch.as_tensor(pair.molecule.coords, dtype=dtype)
    return PreparedPair(
        mol_coords=project_zero_cog(mol_coords),
        mol_feats=torch.as_tensor(pair.molecule.features, dtype=dtype),
        sub_coords=torch.as_tensor(pair.substructure.coords, dtype=dtype),
        sub_feats=torch.as_tensor(pair.substructure.features, dtype=dtype),
        index_map=pair.index_map,
        label=pair.molecule.label,
    )


@dataclass
class NoiseBundle:
    """Injectable randomness for one total-loss evaluation.

    Any field left as None is drawn from the generator, in the order:
    encoder coords, encoder feats, virtual coords, diffusion step,
    diffusion coordinate noise, diffusion feature noise.
    """

    encoder_coords: Tensor | None = None
    encoder_feats: Tensor | None = None
    virtual_coords: Tensor | None = None
    step: int | None = None
    eps_coords: Tensor | None = None
    eps_feats: Tensor | None = None


def total_loss(
    autoencoder: SubstructureAutoencoder,
    denoiser: ConditionalDenoiser,
    schedule: NoiseSchedule,
    pair: PreparedPair,
    generator: torch.Generator | None = None,
    bundle: NoiseBundle | None = None,
    loss_coefficient: float = 1.0,
) -> dict[str, Tensor | int]:
    """Autoencoder loss plus coefficient-weighted diffusion loss for one pair.

    The reparameterized prior sample is shared: the same encoder noise
    produces the prior scored by the KL/reconstruction terms and the prior
    conditioning the denoiser, as in joint training.
    """
    bundle = bundle or NoiseBundle()
    n_total = pair.mol_coords.shape[0]
    n_known = pair.sub_coords.shape[0]
    dtype = pair.mol_coords.dtype

    def draw(value: Tensor | None, shape: tuple[int, ...]) -> Tensor:
        if value is not None:
            return value
        return torch.randn(shape, dtype=dtype, generator=generator)

    latent_dim = autoencoder.config.latent_feat_dim
    encoder_coords = draw(bundle.encoder_coords, (n_known, 3))
    encoder_feats = draw(bundle.encoder_feats, (n_known, latent_dim))
    extra = n_total - n_known
    virtual_coords = draw(bundle.virtual_coords, (extra, 3)) if extra > 0 else None

    ae_terms = autoencoder.loss(
        pair.mol_coords,
        pair.mol_feats,
        pair.sub_coords,
        pair.sub_feats,
        list(pair.index_map),
        noise=AutoencoderNoise(
            encoder_coords=encoder_coords,
            encoder_feats=encoder_feats,
            virtual_coords=virtual_coords,
        ),
    )
    prior = autoencoder.encode(
        pair.sub_coords, pair.sub_feats, noise_coords=encoder_coords, noise_feats=encoder_feats
    )

    clean_coords = pair.mol_coords * autoencoder.scaler.coord_weight
    clean_feats = autoencoder.scale_feats(pair.mol_feats)
    diff_loss, step = diffusion_loss(
        clean_coords,
        clean_feats,
        prior,
        schedule,
        denoiser,
        generator=generator,
        t=bundle.step,
        eps_coords=bundle.eps_coords,
        eps_feats=bundle.eps_feats,
    )
    return {
        "total": ae_terms["total"] + loss_coefficient * diff_loss,
        "autoencoder": ae_terms["total"],
        "reconstruction": ae_terms["reconstruction"],
        "kl": ae_terms["kl"],
        "diffusion": diff_loss,
        "step": step,
    }


@dataclass
class Trainer:
    """Models, optimizer, EMA shadow, and the run's random generator."""

    config: TrainConfig
    autoencoder: SubstructureAutoencoder
    denoiser: ConditionalDenoiser
    schedule: NoiseSchedule
    optimizer: torch.optim.Adam
    ema: dict[str, Tensor]
    generator: torch.Generator
    step: int = 0

    def named_parameters(self) -> list[tuple[str, torch.nn.Parameter]]:
        named = [(f"autoencoder.{n}", p) for n, p in self.autoencoder.named_parameters()]
        named += [(f"denoiser.{n}", p) for n, p in self.denoiser.named_parameters()]
        return named


def make_trainer(
    config: TrainConfig,
    autoencoder_config: AutoencoderConfig | None = None,
    denoiser_config: EgnnConfig | None = None,
    schedule: NoiseSchedule | None = None,
    alphabet_size: int = 5,
    with_charges: bool = True,
    scaler: FeatureScaler | None = None,
    dtype: torch.dtype = torch.float32,
) -> Trainer:
    """Build freshly initialized models and their optimizer, seeded."""
    torch.manual_seed(config.seed)
    ae_config = autoencoder_config if autoencoder_config is not None else AutoencoderConfig()
    dn_config = denoiser_config if denoiser_config is not None else EgnnConfig(num_layers=4)
    sched = schedule if schedule is not None else make_schedule(1000, "polynomial")
    autoencoder = SubstructureAutoencoder(
        ae_config, alphabet_size=alphabet_size, with_charges=with_charges, scaler=scaler
    )
    denoiser = ConditionalDenoiser(
        dn_config,
        feature_dim=alphabet_size + (1 if with_charges else 0),
        prior_feat_dim=ae_config.latent_feat_dim,
    )
    if dtype != torch.float32:
        autoencoder.to(dtype)
        denoiser.to(dtype)
    params = list(autoencoder.parameters()) + list(denoiser.parameters())
    optimizer = torch.optim.Adam(params, lr=config.learning_rate)
    generator = torch.Generator().manual_seed(config.seed)
    trainer = Trainer(
        config=config,
        autoencoder=autoencoder,
        denoiser=denoiser,
        schedule=sched,
        optimizer=optimizer,
        ema={},
        generator=generator,
    )
    trainer.ema = {name: p.detach().clone() for name, p in trainer.named_parameters()}
    return trainer


def train_step(trainer: Trainer, batch: Sequence[PreparedPair]) -> dict[str, float]:
    """One joint optimizer update over a batch; returns per-term means."""
    if not batch:
        raise TrainingError("empty batch")
    trainer.optimizer.zero_grad()
    sums: dict[str, Tensor] = {}
    for pair in batch:
        terms = total_loss(
            trainer.autoencoder,
            trainer.denoiser,
            trainer.schedule,
            pair,
            generator=trainer.generator,
            loss_coefficient=trainer.config.loss_coefficient,
        )
        for key in ("total", "autoencoder", "reconstruction", "kl", "diffusion"):
            sums[key] = sums.get(key, 0.0) + terms[key]
    batch_loss = sums["total"] / len(batch)
    if not torch.isfinite(batch_loss):
        labels = ", ".join(pair.label for pair in batch)
        raise TrainingError(f"non-finite loss at step {trainer.step}; batch: {labels}")
    batch_loss.backward()
    torch.nn.utils.clip_grad_norm_(
        [p for _, p in trainer.named_parameters()], trainer.config.grad_clip
    )
    trainer.optimizer.step()
    decay = trainer.config.ema_decay
    with torch.no_grad():
        for name, param in trainer.named_parameters():
            trainer.ema[name].mul_(decay).add_(param.detach(), alpha=1.0 - decay)
    trainer.step += 1
    return {key: float(value.item()) / len(batch) for key, value in sums.items()}


def ema_modules(trainer: Trainer) -> tuple[SubstructureAutoencoder, ConditionalDenoiser]:
    """Copies of the models carrying the EMA shadow weights."""
    autoencoder = copy.deepcopy(trainer.autoencoder)
    denoiser = copy.deepcopy(trainer.denoiser)
    with torch.no_grad():
        for name, param in autoencoder.named_parameters():
            param.copy_(trainer.ema[f"autoencoder.{name}"])
        for name, param in denoiser.named_parameters():
            param.copy_(trainer.ema[f"denoiser.{name}"])
    return autoencoder, denoiser


@dataclass(frozen=True)
class BoundProbe:
    """One fixed (step, noise) evaluation point for the bound diagnostic."""

    step: int
    eps_coords: Tensor
    eps_feats: Tensor


def draw_bound_probes(
    count: int,
    atom_count: int,
    feature_dim: int,
    schedule: NoiseSchedule,
    generator: torch.Generator | None = None,
    dtype: torch.dtype = torch.float32,
) -> list[BoundProbe]:
    """Fixed probe set: one step-1 probe plus ``count`` in [2, T]."""
    probes = [
        BoundProbe(
            step=1,
            eps_coords=torch.randn(atom_count, 3, dtype=dtype, generator=generator),
            eps_feats=torch.randn(atom_count, feature_dim, dtype=dtype, generator=generator),
        )
    ]
    for _ in range(count):
        t = int(torch.randint(2, schedule.steps + 1, (1,), generator=generator).item())
        probes.append(
            BoundProbe(
                step=t,
                eps_coords=torch.randn(atom_count, 3, dtype=dtype, generator=generator),
                eps_feats=torch.randn(atom_count, feature_dim, dtype=dtype, generator=generator),
            )
        )
    return probes


def variational_bound_diagnostic(
    denoiser: ConditionalDenoiser,
    prior: LatentPrior,
    clean_coords: Tensor,
    clean_feats: Tensor,
    schedule: NoiseSchedule,
    probes: Sequence[BoundProbe],
) -> float:
    """Reweighted bound estimate over fixed probes; reporting only.

    Steps t >= 2 are weighted by beta^2 / (2 rho^2 (1-beta) (1-alpha_bar));
    the step-1 probe contributes the reconstruction surrogate 0.5 * error.
    Never part of the gradient path.
    """
    recon_terms: list[float] = []
    weighted_terms: list[float] = []
    with torch.no_grad():
        for probe in probes:
            t = probe.step
            eps_coords = project_zero_cog(probe.eps_coords)
            noisy_coords, noisy_feats = q_sample(
                clean_coords, clean_feats, t, schedule, eps_coords, probe.eps_feats
            )
            pred_coords, pred_feats = denoiser.predict(
                build_condition(noisy_coords, noisy_feats, t, prior, schedule)
            )
            err = float(
                ((eps_coords - pred_coords) ** 2).sum() + ((probe.eps_feats - pred_feats) ** 2).sum()
            )
            if t == 1:
                recon_terms.append(0.5 * err)
            else:
                beta = schedule.beta(t)
                rho = schedule.posterior_noise_scale(t)
                weight = beta**2 / (
                    2.0 * rho**2 * (1.0 - beta) * (1.0 - float(schedule.alpha_bar[t]))
                )
                weighted_terms.append((schedule.steps - 1) * weight * err)
    bound = 0.0
    if recon_terms:
        bound += sum(recon_terms) / len(recon_terms)
    if weighted_terms:
        bound += sum(weighted_terms) / len(weighted_terms)
    return bound


def delta_histogram(pairs: Sequence[TrainingPair]) -> dict[int, int]:
    """Histogram of molecule-minus-substructure atom-count gaps."""
    gaps: dict[int, int] = {}
    for pair in pairs:
        gap = pair.molecule.atom_count - pair.substructure.atom_count
        gaps[gap] = gaps.get(gap, 0) + 1
    return gaps


def _egnn_header(prefix: str, config: EgnnConfig) -> list[str]:
    return [
        f"{prefix}_layers {config.num_layers}",
        f"{prefix}_hidden {config.hidden_dim}",
        f"{prefix}_attention {int(config.use_attention)}",
        f"{prefix}_mlp_depth {config.message_mlp_depth}",
    ]


def save_checkpoint(
    path: str | Path,
    trainer: Trainer,
    deltas: dict[int, int] | None = None,
    extra: dict[str, str] | None = None,
) -> None:
    """Write a versioned container: text header, then named float32 blocks.

    The file is written to a sibling temp path and atomically renamed, so a
    concurrent reader sees either the old or the new checkpoint, never a mix.
    """
    path = Path(path)
    ae = trainer.autoencoder
    cfg = trainer.config
    header: list[str] = [
        CHECKPOINT_MAGIC,
        f"format_version {CHECKPOINT_VERSION}",
        f"step {trainer.step}",
        f"learning_rate {cfg.learning_rate!r}",
        f"batch_size {cfg.batch_size}",
        f"epochs {cfg.epochs}",
        f"seed {cfg.seed}",
        f"ema_decay {cfg.ema_decay!r}",
        f"grad_clip {cfg.grad_clip!r}",
        f"loss_coefficient {cfg.loss_coefficient!r}",
        f"alphabet_size {ae.alphabet_size}",
        f"with_charges {int(ae.with_charges)}",
        f"scaler {ae.scaler.coord_weight!r},{ae.scaler.onehot_weight!r},{ae.scaler.charge_weight!r}",
        f"latent_feat_dim {ae.config.latent_feat_dim}",
        f"sigma_0 {ae.config.sigma_0!r}",
        f"virtual_noise_scale {ae.config.virtual_noise_scale!r}",
        f"asymmetric {int(ae.config.asymmetric)}",
        f"schedule_kind {trainer.schedule.kind}",
        f"schedule_steps {trainer.schedule.steps}",
        f"rng_state {bytes(trainer.generator.get_state().numpy().tobytes()).hex()}",
    ]
    header += _egnn_header("encoder", ae.config.encoder)
    header += _egnn_header("decoder", ae.config.decoder)
    header += _egnn_header("denoiser", trainer.denoiser.config)
    deltas = deltas or {}
    delta_text = ",".join(f"{k}:{v}" for k, v in sorted(deltas.items())) or "-"
    header.append(f"delta_histogram {delta_text}")
    for key, value in (extra or {}).items():
        if any(ch.isspace() for ch in key):
            raise TrainingError(f"header key {key!r} contains whitespace")
        header.append(f"{key} {value}")

    blocks: list[tuple[str, Tensor]] = []
    for name, param in trainer.named_parameters():
        blocks.append((f"param/{name}", param.detach()))
        state = trainer.optimizer.state.get(param, {})
        if state:
            blocks.append((f"adam_step/{name}", torch.as_tensor([float(state["step"])])))
            blocks.append((f"adam_m/{name}", state["exp_avg"]))
            blocks.append((f"adam_v/{name}", state["exp_avg_sq"]))
        blocks.append((f"ema/{name}", trainer.ema[name]))

    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as handle:
        for line in header:
            handle.write((line + "\n").encode("utf-8"))
        handle.write(f"blocks {len(blocks)}\n".encode("utf-8"))
        for name, tensor in blocks:
            array = tensor.detach().to(torch.float32).cpu().numpy()
            dims = ",".join(str(d) for d in array.shape) or "0"
            handle.write(f"block {name} {dims}\n".encode("utf-8"))
            handle.write(array.astype("<f4").tobytes())
            handle.write(b"\n")
    os.replace(tmp, path)


@dataclass
class CheckpointData:
    header: dict[str, str]
    deltas: dict[int, int]
    blocks: dict[str, np.ndarray]


def read_checkpoint(path: str | Path) -> CheckpointData:
    """Parse a checkpoint container, rejecting unknown versions."""
    path = Path(path)
    with open(path, "rb") as handle:
        magic = _read_line(handle, path)
        if magic != CHECKPOINT_MAGIC:
            raise TrainingError(f"{path} is not a checkpoint (bad magic {magic!r})")
        header: dict[str, str] = {}
        while True:
            line = _read_line(handle, path)
            if line.startswith("blocks "):
                count = int(line.split()[1])
                break
            key, _, value = line.partition(" ")
            header[key] = value
        if header.get("format_version") != str(CHECKPOINT_VERSION):
            raise TrainingError(
                f"checkpoint format version {header.get('format_version')!r} is not "
                f"{CHECKPOINT_VERSION}; refusing to load"
            )
        blocks: dict[str, np.ndarray] = {}
        for _ in range(count):
            line = _read_line(handle, path)
            parts = line.split()
            if len(parts) != 3 or parts[0] != "block":
                raise TrainingError(f"corrupt block header {line!r} in {path}")
            name, dims = parts[1], parts[2]
            shape = tuple(int(d) for d in dims.split(",")) if dims != "0" else ()
            numel = int(np.prod(shape, dtype=np.int64)) if shape else 1
            payload = handle.read(numel * 4)
            if len(payload) != numel * 4:
                raise TrainingError(f"truncated block {name!r} in {path}")
            if handle.read(1) != b"\n":
                raise TrainingError(f"missing block terminator after {name!r} in {path}")
            blocks[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    deltas: dict[int, int] = {}
    delta_text = header.get("delta_histogram", "-")
    if delta_text != "-":
        for token in delta_text.split(","):
            gap, _, count_text = token.partition(":")
            deltas[int(gap)] = int(count_text)
    return CheckpointData(header=header, deltas=deltas, blocks=blocks)


def _read_line(handle: BinaryIO, path: Path) -> str:
    raw = handle.readline()
    if not raw:
        raise TrainingError(f"unexpected end of checkpoint {path}")
    return raw.decode("utf-8").rstrip("\n")


def load_checkpoint(path: str | Path, trainer: Trainer) -> CheckpointData:
    """Restore parameters, optimizer state, EMA, step, and RNG into a trainer."""
    data = read_checkpoint(path)
    expected = {name for name, _ in trainer.named_parameters()}
    found = {name[len("param/") :] for name in data.blocks if name.startswith("param/")}
    if expected != found:
        missing = sorted(expected - found)
        surplus = sorted(found - expected)
        raise TrainingError(
            f"checkpoint parameters do not match the models (missing {missing}, unknown {surplus})"
        )
    with torch.no_grad():
        for name, param in trainer.named_parameters():
            param.copy_(torch.from_numpy(data.blocks[f"param/{name}"]).to(param.dtype))
            trainer.ema[name] = torch.from_numpy(data.blocks[f"ema/{name}"]).to(param.dtype)
            step_key = f"adam_step/{name}"
            if step_key in data.blocks:
                trainer.optimizer.state[param] = {
                    "step": torch.tensor(float(data.blocks[step_key][0])),
                    "exp_avg": torch.from_numpy(data.blocks[f"adam_m/{name}"]).to(param.dtype),
                    "exp_avg_sq": torch.from_numpy(data.blocks[f"adam_v/{name}"]).to(param.dtype),
                }
    trainer.step = int(data.header["step"])
    state_bytes = bytes.fromhex(data.header["rng_state"])
    trainer.generator.set_state(torch.from_numpy(np.frombuffer(state_bytes, dtype=np.uint8).copy()))
    return data


def build_trainer_from_checkpoint(path: str | Path) -> tuple[Trainer, CheckpointData]:
    """Reconstruct models and trainer state purely from a checkpoint file."""
    data = read_checkpoint(path)
    h = data.header
    config = TrainConfig(
        learning_rate=float(h["learning_rate"]),
        batch_size=int(h["batch_size"]),
        epochs=int(h["epochs"]),
        seed=int(h["seed"]),
        ema_decay=float(h["ema_decay"]),
        grad_clip=float(h["grad_clip"]),
        loss_coefficient=float(h["loss_coefficient"]),
    )
    scaler_parts = [float(x) for x in h["scaler"].split(",")]
    ae_config = AutoencoderConfig(
        encoder=_egnn_from_header(h, "encoder"),
        decoder=_egnn_from_header(h, "decoder"),
        latent_feat_dim=int(h["latent_feat_dim"]),
        sigma_0=float(h["sigma_0"]),
        virtual_noise_scale=float(h["virtual_noise_scale"]),
        asymmetric=bool(int(h["asymmetric"])),
    )
    trainer = make_trainer(
        config,
        autoencoder_config=ae_config,
        denoiser_config=_egnn_from_header(h, "denoiser"),
        schedule=make_schedule(int(h["schedule_steps"]), h["schedule_kind"]),
        alphabet_size=int(h["alphabet_size"]),
        with_charges=bool(int(h["with_charges"])),
        scaler=FeatureScaler(*scaler_parts),
    )
    load_checkpoint(path, trainer)
    return trainer, data


def _egnn_from_header(header: dict[str, str], prefix: str) -> EgnnConfig:
    return EgnnConfig(
        num_layers=int(header[f"{prefix}_layers"]),
        hidden_dim=int(header[f"{prefix}_hidden"]),
        use_attention=bool(int(header[f"{prefix}_attention"])),
        message_mlp_depth=int(header[f"{prefix}_mlp_depth"]),
    )


def train_loop(
    trainer: Trainer,
    pairs: Sequence[TrainingPair],
    steps: int,
    on_step: Callable[[int, dict[str, float]], None] | None = None,
    dtype: torch.dtype = torch.float32,
) -> list[dict[str, float]]:
    """Run ``steps`` updates over uniformly drawn batches; returns the logs."""
    if not pairs:
        raise TrainingError("no training pairs")
    prepared = [prepare_pair(pair, dtype=dtype) for pair in pairs]
    history: list[dict[str, float]] = []
    # Batches draw with replacement, so small datasets still fill the batch;
    # repeated entries carry independent (t, eps) draws.
    batch_size = trainer.config.batch_size
    for _ in range(steps):
        idx = torch.randint(0, len(prepared), (batch_size,), generator=trainer.generator)
        batch = [prepared[int(i)] for i in idx]
        metrics = train_step(trainer, batch)
        history.append(metrics)
        if on_step is not None:
            on_step(trainer.step, metrics)
    return history
