"""Denoising diffusion over molecular point clouds, steered by a structural prior.

The forward process mixes signal and noise by a monotone schedule; the
reverse process is driven by a noise-prediction network conditioned on the
latent prior from the substructure autoencoder. Coordinates always live in
the zero-CoG subspace: initial noise, per-step noise, and every predicted
coordinate field are projected there, which is what makes the generated
distribution exactly invariant to rigid motions of the conditioning.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

from .autoencoder import LatentPrior
from .egnn import Egnn, EgnnConfig, project_zero_cog
from .geometry import FeatureScaler, MolecularPointCloud

TERMINAL_ALPHA_BAR = 1e-4
RATIO_FLOOR = 1e-3
PRECISION_FLOOR = 1e-4
SCHEDULE_KINDS = ("polynomial", "cosine")


class DiffusionError(ValueError):
    """Raised for malformed schedules or inconsistent diffusion inputs."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal schedule: alpha_bar[t] for t = 0..steps.

    alpha_bar is the squared cumulative signal coefficient: a state at step
    t is sqrt(alpha_bar[t]) * clean + sqrt(1 - alpha_bar[t]) * noise.
    """

    kind: str
    steps: int
    alpha_bar: np.ndarray

    def validate(self) -> None:
        if self.steps < 2:
            raise DiffusionError(f"schedule needs at least 2 steps, got {self.steps}")
        bar = np.asarray(self.alpha_bar, dtype=np.float64)
        if bar.shape != (self.steps + 1,):
            raise DiffusionError(f"alpha_bar must have steps+1 entries, got {bar.shape}")
        if not np.isfinite(bar).all():
            raise DiffusionError("non-finite schedule")
        if np.any(bar <= 0.0) or np.any(bar > 1.0):
            raise DiffusionError("alpha_bar values must lie in (0, 1]")
        if bar[0] < 0.999:
            raise DiffusionError(f"alpha_bar[0] must be >= 0.999, got {bar[0]}")
        if np.any(np.diff(bar) >= 0.0):
            raise DiffusionError("alpha_bar must be strictly decreasing")
        if bar[-1] > TERMINAL_ALPHA_BAR:
            raise DiffusionError(
                f"alpha_bar[steps] must be <= {TERMINAL_ALPHA_BAR}, got {bar[-1]}"
            )

    def _check_step(self, t: int, lowest: int) -> None:
        if not lowest <= t <= self.steps:
            raise DiffusionError(f"step {t} outside [{lowest}, {self.steps}]")

    def signal(self, t: int) -> float:
        """sqrt(alpha_bar[t]), the cumulative signal coefficient."""
        self._check_step(t, 0)
        return math.sqrt(float(self.alpha_bar[t]))

    def sigma(self, t: int) -> float:
        """sqrt(1 - alpha_bar[t]), the cumulative noise coefficient."""
        self._check_step(t, 0)
        return math.sqrt(1.0 - float(self.alpha_bar[t]))

    def beta(self, t: int) -> float:
        """Per-step variance increment 1 - alpha_bar[t]/alpha_bar[t-1]."""
        self._check_step(t, 1)
        return 1.0 - float(self.alpha_bar[t] / self.alpha_bar[t - 1])

    def step_signal(self, t: int) -> float:
        """Per-step signal coefficient sqrt(alpha_bar[t]/alpha_bar[t-1])."""
        self._check_step(t, 1)
        return math.sqrt(float(self.alpha_bar[t] / self.alpha_bar[t - 1]))

    def posterior_noise_scale(self, t: int) -> float:
        """Reverse-step noise scale sqrt(beta_t * (1-alpha_bar[t-1]) / (1-alpha_bar[t]))."""
        self._check_step(t, 1)
        one_minus_prev = 1.0 - float(self.alpha_bar[t - 1])
        one_minus_curr = 1.0 - float(self.alpha_bar[t])
        return math.sqrt(self.beta(t) * one_minus_prev / one_minus_curr)


def raw_schedule_ramp(steps: int, kind: str) -> np.ndarray:
    """The unclipped alpha_bar ramp for a schedule kind."""
    t = np.arange(steps + 1, dtype=np.float64)
    if kind == "polynomial":
        return (1.0 - (t / steps) ** 2) ** 2
    if kind == "cosine":
        offset = 0.008
        f = np.cos((t / steps + offset) / (1.0 + offset) * math.pi / 2.0) ** 2
        return f / f[0]
    raise DiffusionError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")


def make_schedule(steps: int, kind: str = "polynomial") -> NoiseSchedule:
    """Build and validate a schedule, clipping per-step ratios into [1e-3, 1].

    After the ratio clip the ramp is squeezed into [PRECISION_FLOOR,
    1 - PRECISION_FLOOR]; without that floor the last reverse step would
    divide by sqrt(alpha_bar[T] / alpha_bar[T-1]) ~ 0.03 and amplify any
    denoiser error more than thirtyfold, which destabilizes sampling from
    any imperfectly trained model. The squeeze raises every ratio toward 1,
    so the ratio bounds survive it. The terminal value is then capped at the
    near-noise bound; the residual ratio stays legal for T >= 6 and the cap
    only distorts ratios for degenerate toy step counts (T <= 5).
    """
    if steps < 2:
        raise DiffusionError(f"schedule needs at least 2 steps, got {steps}")
    raw = raw_schedule_ramp(steps, kind)
    ratios = np.clip(raw[1:] / raw[:-1], RATIO_FLOOR, 1.0)
    alpha_bar = np.concatenate([raw[:1], raw[0] * np.cumprod(ratios)])
    alpha_bar = (1.0 - 2.0 * PRECISION_FLOOR) * alpha_bar + PRECISION_FLOOR
    alpha_bar[-1] = min(alpha_bar[-1], TERMINAL_ALPHA_BAR)
    schedule = NoiseSchedule(kind=kind, steps=steps, alpha_bar=alpha_bar)
    schedule.validate()
    return schedule


def q_sample(
    clean_coords: Tensor,
    clean_feats: Tensor,
    t: int,
    schedule: NoiseSchedule,
    eps_coords: Tensor,
    eps_feats: Tensor,
) -> tuple[Tensor, Tensor]:
    """Forward-diffuse a clean state to step t in one jump.

    Both the clean coordinates and the coordinate noise are projected to the
    zero-CoG subspace, so the noisy coordinate block stays in it exactly.
    """
    schedule._check_step(t, 1)
    if eps_coords.shape != clean_coords.shape or eps_feats.shape != clean_feats.shape:
        raise DiffusionError("noise shape does not match the state shape")
    signal = schedule.signal(t)
    sigma = schedule.sigma(t)
    noisy_coords = signal * project_zero_cog(clean_coords) + sigma * project_zero_cog(eps_coords)
    noisy_feats = signal * clean_feats + sigma * eps_feats
    return noisy_coords, noisy_feats


@dataclass(frozen=True)
class DenoiserInput:
    """A noisy state plus its conditioning, padded to a common atom count.

    Prior rows beyond the substructure's atoms are identically zero; the
    time embedding is the normalized step t/steps broadcast per atom.
    """

    noisy_coords: Tensor
    noisy_feats: Tensor
    time_embed: Tensor
    prior_coords: Tensor
    prior_feats: Tensor
    step: int
    total_steps: int

    def __post_init__(self) -> None:
        n = self.noisy_coords.shape[0]
        shapes = {
            "noisy_coords": (self.noisy_coords, 3),
            "time_embed": (self.time_embed, 1),
            "prior_coords": (self.prior_coords, 3),
        }
        for name, (tensor, width) in shapes.items():
            if tensor.dim() != 2 or tensor.shape != (n, width):
                raise DiffusionError(f"{name} must be ({n}, {width}), got {tuple(tensor.shape)}")
        for name, tensor in (("noisy_feats", self.noisy_feats), ("prior_feats", self.prior_feats)):
            if tensor.dim() != 2 or tensor.shape[0] != n:
                raise DiffusionError(f"{name} must have {n} rows, got {tuple(tensor.shape)}")
        if not 1 <= self.step <= self.total_steps:
            raise DiffusionError(f"step {self.step} outside [1, {self.total_steps}]")

    def concatenated_features(self) -> Tensor:
        """Per-atom conditioning tensor of width d + 3 + k + 1."""
        return torch.cat(
            [self.noisy_feats, self.time_embed, self.prior_coords, self.prior_feats], dim=-1
        )


def build_condition(
    noisy_coords: Tensor,
    noisy_feats: Tensor,
    t: int,
    prior: LatentPrior,
    schedule: NoiseSchedule,
) -> DenoiserInput:
    """Zero-pad the prior to the molecule's atom count and attach the step."""
    n = noisy_coords.shape[0]
    known = prior.atom_count
    if known > n:
        raise DiffusionError(f"prior has {known} atoms but the state has only {n}")
    pad = n - known
    prior_coords = torch.cat(
        [prior.coords, torch.zeros(pad, 3, dtype=prior.coords.dtype)], dim=0
    )
    prior_feats = torch.cat(
        [prior.feats, torch.zeros(pad, prior.feat_dim, dtype=prior.feats.dtype)], dim=0
    )
    time_embed = torch.full((n, 1), t / schedule.steps, dtype=noisy_coords.dtype)
    return DenoiserInput(
        noisy_coords=noisy_coords,
        noisy_feats=noisy_feats,
        time_embed=time_embed,
        prior_coords=prior_coords.to(noisy_coords.dtype),
        prior_feats=prior_feats.to(noisy_coords.dtype),
        step=t,
        total_steps=schedule.steps,
    )


class ConditionalDenoiser(nn.Module):
    """Noise-prediction network over the concatenated conditioning.

    The three prior-coordinate columns of the conditioning are equivariant
    quantities, so they are routed through the geometric stream instead of
    being read as raw scalars: per node as the invariant squared norm, per
    edge as the squared prior distance and the alignment between state and
    prior edge vectors. All conditioning therefore enters via rotation
    invariants and the predicted coordinate field transforms exactly.
    """

    def __init__(self, config: EgnnConfig, feature_dim: int, prior_feat_dim: int) -> None:
        super().__init__()
        self.config = config
        self.feature_dim = feature_dim
        self.prior_feat_dim = prior_feat_dim
        # scalars: noisy feats (d), time (1), prior feats (k), prior norm (1)
        self.net = Egnn(
            config,
            in_dim=feature_dim + 1 + prior_feat_dim + 1,
            out_dim=feature_dim,
            edge_attr_dim=2,
        )

    def predict(self, condition: DenoiserInput) -> tuple[Tensor, Tensor]:
        """Predict (coordinate noise, feature noise) for a conditioned state."""
        merged = condition.concatenated_features()
        d = self.feature_dim
        if merged.shape[-1] != d + 3 + self.prior_feat_dim + 1:
            raise DiffusionError(
                f"conditioning width {merged.shape[-1]} does not match the denoiser "
                f"({d}+3+{self.prior_feat_dim}+1)"
            )
        prior_vec = merged[..., d + 1 : d + 4]
        scalars = torch.cat([merged[..., : d + 1], merged[..., d + 4 :]], dim=-1)
        prior_norm = (prior_vec * prior_vec).sum(dim=-1, keepdim=True)
        feats_in = torch.cat([scalars, prior_norm], dim=-1)

        coords = condition.noisy_coords
        coord_diff = coords.unsqueeze(-2) - coords.unsqueeze(-3)
        prior_diff = prior_vec.unsqueeze(-2) - prior_vec.unsqueeze(-3)
        edge_attr = torch.cat(
            [
                (prior_diff * prior_diff).sum(dim=-1, keepdim=True),
                (coord_diff * prior_diff).sum(dim=-1, keepdim=True),
            ],
            dim=-1,
        )
        coords_out, feats_out = self.net(coords, feats_in, edge_attr)
        eps_coords = project_zero_cog(coords_out - coords)
        eps_feats = feats_out
        if not torch.isfinite(eps_coords).all() or not torch.isfinite(eps_feats).all():
            raise RuntimeError("non-finite denoiser prediction")
        return eps_coords, eps_feats


def diffusion_loss(
    clean_coords: Tensor,
    clean_feats: Tensor,
    prior: LatentPrior,
    schedule: NoiseSchedule,
    denoiser: ConditionalDenoiser,
    generator: torch.Generator | None = None,
    t: int | None = None,
    eps_coords: Tensor | None = None,
    eps_feats: Tensor | None = None,
) -> tuple[Tensor, int]:
    """Uniform-step squared error between drawn and predicted noise.

    The step weight is constant (1) across t. Returns (loss, step used).
    """
    if t is None:
        t = int(torch.randint(1, schedule.steps + 1, (1,), generator=generator).item())
    schedule._check_step(t, 1)
    if eps_coords is None:
        eps_coords = torch.randn(clean_coords.shape, dtype=clean_coords.dtype, generator=generator)
    if eps_feats is None:
        eps_feats = torch.randn(clean_feats.shape, dtype=clean_feats.dtype, generator=generator)
    eps_coords = project_zero_cog(eps_coords)
    noisy_coords, noisy_feats = q_sample(clean_coords, clean_feats, t, schedule, eps_coords, eps_feats)
    pred_coords, pred_feats = denoiser.predict(
        build_condition(noisy_coords, noisy_feats, t, prior, schedule)
    )
    loss = ((eps_coords - pred_coords) ** 2).sum() + ((eps_feats - pred_feats) ** 2).sum()
    return loss, t


def denoise_step(
    noisy_coords: Tensor,
    noisy_feats: Tensor,
    t: int,
    prior: LatentPrior,
    schedule: NoiseSchedule,
    denoiser: ConditionalDenoiser,
    noise_coords: Tensor,
    noise_feats: Tensor,
    project_fn=project_zero_cog,
) -> tuple[Tensor, Tensor]:
    """One reverse transition from step t to t-1."""
    schedule._check_step(t, 1)
    pred_coords, pred_feats = denoiser.predict(
        build_condition(noisy_coords, noisy_feats, t, prior, schedule)
    )
    beta = schedule.beta(t)
    scale = 1.0 / math.sqrt(1.0 - beta)
    eps_weight = beta / schedule.sigma(t)
    rho = schedule.posterior_noise_scale(t)
    coords = scale * (noisy_coords - eps_weight * pred_coords) + rho * project_fn(noise_coords)
    feats = scale * (noisy_feats - eps_weight * pred_feats) + rho * noise_feats
    return project_fn(coords), feats


def onehot_level_probability(mu: Tensor, sigma: float, level: float = 1.0) -> Tensor:
    """Probability mass of N(mu, sigma^2) on the unit interval around ``level``."""
    if sigma <= 0:
        raise DiffusionError("sigma must be positive")
    upper = (level + 0.5 - mu) / (sigma * math.sqrt(2.0))
    lower = (level - 0.5 - mu) / (sigma * math.sqrt(2.0))
    return 0.5 * (torch.erf(upper) - torch.erf(lower))


def final_decode(
    coords_t1: Tensor,
    feats_t1: Tensor,
    prior: LatentPrior,
    schedule: NoiseSchedule,
    denoiser: ConditionalDenoiser,
    scaler: FeatureScaler,
    element_alphabet: tuple[str, ...],
    with_charges: bool = True,
    label: str = "",
) -> MolecularPointCloud:
    """Read out a discrete molecule from the state at step 1.

    Coordinates take the noise-corrected Gaussian mean. Atom types take the
    class whose unit-interval integral around the one-hot level is largest
    (computed after unscaling); charges round the unscaled mean.
    """
    pred_coords, pred_feats = denoiser.predict(
        build_condition(coords_t1, feats_t1, 1, prior, schedule)
    )
    signal = schedule.signal(1)
    sigma = schedule.sigma(1)
    mean_coords = project_zero_cog(coords_t1 / signal - (sigma / signal) * pred_coords)
    mean_feats = feats_t1 / signal - (sigma / signal) * pred_feats

    coords = (mean_coords / scaler.coord_weight).detach().to(torch.float64).numpy()
    n_elem = len(element_alphabet)
    onehot_mu = mean_feats[:, :n_elem] / scaler.onehot_weight
    onehot_sigma = (sigma / signal) / scaler.onehot_weight
    probs = onehot_level_probability(onehot_mu, onehot_sigma)
    # The interval integral is monotone in |mu - 1|, so fall back to that
    # score for rows where every class underflows to zero mass.
    scores = torch.where(
        probs.sum(dim=1, keepdim=True) > 0.0, probs, -(onehot_mu - 1.0).abs()
    )
    types = scores.argmax(dim=1)

    n = coords.shape[0]
    features = np.zeros((n, n_elem + (1 if with_charges else 0)), dtype=np.float64)
    features[np.arange(n), types.detach().numpy()] = 1.0
    if with_charges:
        charge_mu = mean_feats[:, -1] / scaler.charge_weight
        features[:, -1] = np.rint(charge_mu.detach().to(torch.float64).numpy())
    return MolecularPointCloud(
        coords=coords,
        features=features,
        element_alphabet=tuple(element_alphabet),
        label=label,
    )


@dataclass
class SampleNoise:
    """Pre-drawn noise for a full sampling trajectory (matched-noise tests)."""

    initial_coords: Tensor
    initial_feats: Tensor
    step_coords: dict[int, Tensor]
    step_feats: dict[int, Tensor]


def draw_sample_noise(
    atom_count: int,
    feature_dim: int,
    schedule: NoiseSchedule,
    generator: torch.Generator | None = None,
    dtype: torch.dtype = torch.float32,
) -> SampleNoise:
    """Draw the full noise stack for one trajectory in a fixed order."""
    initial_coords = torch.randn(atom_count, 3, dtype=dtype, generator=generator)
    initial_feats = torch.randn(atom_count, feature_dim, dtype=dtype, generator=generator)
    step_coords: dict[int, Tensor] = {}
    step_feats: dict[int, Tensor] = {}
    for t in range(schedule.steps, 1, -1):
        step_coords[t] = torch.randn(atom_count, 3, dtype=dtype, generator=generator)
        step_feats[t] = torch.randn(atom_count, feature_dim, dtype=dtype, generator=generator)
    return SampleNoise(
        initial_coords=initial_coords,
        initial_feats=initial_feats,
        step_coords=step_coords,
        step_feats=step_feats,
    )


def sample(
    prior: LatentPrior,
    atom_count: int,
    schedule: NoiseSchedule,
    denoiser: ConditionalDenoiser,
    scaler: FeatureScaler,
    element_alphabet: tuple[str, ...],
    with_charges: bool = True,
    generator: torch.Generator | None = None,
    noise: SampleNoise | None = None,
    on_state=None,
    project_fn=project_zero_cog,
    label: str = "",
) -> MolecularPointCloud:
    """Run the reverse chain from pure noise down to a decoded molecule.

    The chain starts at step T from projected Gaussian noise, applies the
    reverse transition down to step 1, and reads the molecule out of the
    step-1 state. ``noise`` overrides all random draws; ``on_state`` is
    called with (t, coords, feats) for the initial and every later state.
    """
    if atom_count < prior.atom_count:
        raise DiffusionError(
            f"cannot sample {atom_count} atoms under a prior with {prior.atom_count}"
        )
    dtype = prior.coords.dtype
    if noise is None:
        noise = draw_sample_noise(
            atom_count, denoiser.feature_dim, schedule, generator=generator, dtype=dtype
        )
    coords = project_fn(noise.initial_coords)
    feats = noise.initial_feats
    if on_state is not None:
        on_state(schedule.steps, coords, feats)
    with torch.no_grad():
        for t in range(schedule.steps, 1, -1):
            coords, feats = denoise_step(
                coords,
                feats,
                t,
                prior,
                schedule,
                denoiser,
                noise.step_coords[t],
                noise.step_feats[t],
                project_fn=project_fn,
            )
            if on_state is not None:
                on_state(t - 1, coords, feats)
        molecule = final_decode(
            coords,
            feats,
            prior,
            schedule,
            denoiser,
            scaler,
            element_alphabet,
            with_charges=with_charges,
            label=label,
        )
    return molecule
