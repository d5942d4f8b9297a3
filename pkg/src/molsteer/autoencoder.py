"""Asymmetric autoencoder mapping a substructure to a latent structural prior.

The encoder reads a substructure (N' atoms) and emits an equivariant latent
point set plus invariant per-atom features; a Gaussian with fixed width
sigma_0 around that mean is the variational posterior, with coordinate noise
confined to the zero-CoG subspace. The decoder reconstructs a complete
molecule of N >= N' atoms from the latent alone, growing virtual nodes for
the missing atoms. Training balances reconstruction in the original
molecular space against a closed-form KL to the standard normal with the
coordinate block counted in its (3N'-3)-dim subspace.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import Tensor, nn
from torch.nn import functional as F

from .egnn import Egnn, EgnnConfig, project_zero_cog
from .geometry import FeatureScaler


class AutoencoderError(ValueError):
    """Raised for inconsistent autoencoder inputs."""


@dataclass(frozen=True)
class LatentPrior:
    """Equivariant latent point set plus invariant latent features.

    ``coords`` is (N', 3) with zero center of gravity; ``feats`` is (N', k).
    """

    coords: Tensor
    feats: Tensor

    def __post_init__(self) -> None:
        if self.coords.dim() != 2 or self.coords.shape[-1] != 3:
            raise AutoencoderError(f"prior coords must be (N', 3), got {tuple(self.coords.shape)}")
        if self.feats.dim() != 2 or self.feats.shape[0] != self.coords.shape[0]:
            raise AutoencoderError(
                f"prior feats must be (N', k) aligned with coords, got {tuple(self.feats.shape)}"
            )
        if self.coords.shape[0] < 1:
            raise AutoencoderError("prior needs at least one atom")
        if not torch.isfinite(self.coords).all() or not torch.isfinite(self.feats).all():
            raise AutoencoderError("non-finite prior")
        drift = self.coords.mean(dim=0).abs().max().item()
        if self.coords.dtype == torch.float64:
            tol = 1e-6
        else:
            # A single ulp at large magnitudes exceeds the strict tolerance.
            tol = 1e-5 * max(1.0, self.coords.abs().max().item())
        if drift > tol:
            raise AutoencoderError(f"prior coords must have zero center of gravity (drift {drift:g})")

    @property
    def atom_count(self) -> int:
        return self.coords.shape[0]

    @property
    def feat_dim(self) -> int:
        return self.feats.shape[1]


def zero_prior(atom_count: int, feat_dim: int, dtype: torch.dtype = torch.float32) -> LatentPrior:
    """The all-zeros prior used as an unconditional baseline."""
    return LatentPrior(
        coords=torch.zeros(atom_count, 3, dtype=dtype),
        feats=torch.zeros(atom_count, feat_dim, dtype=dtype),
    )


@dataclass(frozen=True)
class AutoencoderConfig:
    encoder: EgnnConfig = field(default_factory=lambda: EgnnConfig(num_layers=1))
    decoder: EgnnConfig = field(default_factory=lambda: EgnnConfig(num_layers=9))
    latent_feat_dim: int = 1
    sigma_0: float = 0.01
    asymmetric: bool = True
    virtual_noise_scale: float = 0.1

    def __post_init__(self) -> None:
        if self.latent_feat_dim < 1:
            raise AutoencoderError(f"latent_feat_dim must be >= 1, got {self.latent_feat_dim}")
        if self.sigma_0 < 0:
            raise AutoencoderError(f"sigma_0 must be >= 0, got {self.sigma_0}")
        if self.virtual_noise_scale <= 0:
            raise AutoencoderError("virtual_noise_scale must be positive")


@dataclass(frozen=True)
class AutoencoderNoise:
    """Explicit noise injection for matched-noise invariance tests."""

    encoder_coords: Tensor | None = None
    encoder_feats: Tensor | None = None
    virtual_coords: Tensor | None = None


def standard_normal_kl(mean_sq_sum: Tensor | float, sigma: float, dims: int) -> Tensor | float:
    """KL(N(mu, sigma^2 I) || N(0, I)) for ``dims`` dimensions, ||mu||^2 given."""
    if sigma <= 0:
        raise AutoencoderError("sigma must be positive for a finite KL")
    return 0.5 * mean_sq_sum + dims * (0.5 * sigma * sigma - 0.5 - math.log(sigma))


class SubstructureAutoencoder(nn.Module):
    """Encoder/decoder pair around the latent structural prior."""

    def __init__(
        self,
        config: AutoencoderConfig,
        alphabet_size: int,
        with_charges: bool = True,
        scaler: FeatureScaler | None = None,
    ) -> None:
        super().__init__()
        self.config = config
        self.alphabet_size = alphabet_size
        self.with_charges = with_charges
        self.scaler = scaler if scaler is not None else FeatureScaler()
        self.feature_dim = alphabet_size + (1 if with_charges else 0)
        self.encoder = Egnn(config.encoder, in_dim=self.feature_dim, out_dim=config.latent_feat_dim)
        self.decoder = Egnn(config.decoder, in_dim=config.latent_feat_dim, out_dim=self.feature_dim)

    def scale_feats(self, feats_raw: Tensor) -> Tensor:
        """Apply the per-modality weights to a raw feature tensor."""
        scaled = feats_raw.clone()
        scaled[..., : self.alphabet_size] *= self.scaler.onehot_weight
        if self.with_charges:
            scaled[..., -1:] *= self.scaler.charge_weight
        return scaled

    def encode_mean(self, coords_raw: Tensor, feats_raw: Tensor) -> tuple[Tensor, Tensor]:
        """Posterior mean: projected equivariant coords and invariant features."""
        if coords_raw.dim() != 2:
            raise AutoencoderError("encode takes a single substructure (N', 3)")
        coords = project_zero_cog(coords_raw * self.scaler.coord_weight)
        latent_coords, latent_feats = self.encoder(coords, self.scale_feats(feats_raw))
        return project_zero_cog(latent_coords), latent_feats

    def encode(
        self,
        coords_raw: Tensor,
        feats_raw: Tensor,
        noise_coords: Tensor | None = None,
        noise_feats: Tensor | None = None,
        generator: torch.Generator | None = None,
    ) -> LatentPrior:
        """Reparameterized posterior sample around the encoder mean."""
        mean_coords, mean_feats = self.encode_mean(coords_raw, feats_raw)
        sigma = self.config.sigma_0
        if sigma == 0.0:
            return LatentPrior(coords=mean_coords, feats=mean_feats)
        if noise_coords is None:
            noise_coords = _randn_like(mean_coords, generator)
        if noise_feats is None:
            noise_feats = _randn_like(mean_feats, generator)
        coords = mean_coords + sigma * project_zero_cog(noise_coords)
        feats = mean_feats + sigma * noise_feats
        return LatentPrior(coords=coords, feats=feats)

    def decode(
        self,
        prior: LatentPrior,
        atom_count: int,
        virtual_noise: Tensor | None = None,
        generator: torch.Generator | None = None,
    ) -> tuple[Tensor, Tensor, Tensor | None]:
        """Reconstruct ``atom_count`` atoms from the latent alone.

        Rows 0..N'-1 of the output correspond to the prior's atoms, later
        rows to virtual nodes. Returns (coords, type_logits, charge_pred);
        coordinates live in the scaled coordinate frame and are zero-CoG.
        """
        known = prior.atom_count
        if atom_count < known:
            raise AutoencoderError(f"target atom count {atom_count} is smaller than the prior ({known})")
        if atom_count > known and not self.config.asymmetric:
            raise AutoencoderError("symmetric autoencoder cannot grow atoms beyond the prior")
        extra = atom_count - known
        if extra > 0:
            if virtual_noise is None:
                virtual_noise = _randn(
                    (extra, 3), like=prior.coords, generator=generator
                )
            elif virtual_noise.shape != (extra, 3):
                raise AutoencoderError(
                    f"virtual noise must be ({extra}, 3), got {tuple(virtual_noise.shape)}"
                )
            # Virtual nodes start in a small Gaussian cloud around the prior's
            # center of gravity (the origin) and carry zero latent features.
            scale = self.config.virtual_noise_scale * self.scaler.coord_weight
            coords = torch.cat([prior.coords, scale * virtual_noise], dim=0)
            feats = torch.cat(
                [prior.feats, torch.zeros(extra, prior.feat_dim, dtype=prior.feats.dtype)], dim=0
            )
        else:
            coords = prior.coords
            feats = prior.feats
        coords = project_zero_cog(coords)
        out_coords, out_feats = self.decoder(coords, feats)
        out_coords = project_zero_cog(out_coords)
        logits = out_feats[:, : self.alphabet_size]
        charge = out_feats[:, -1] if self.with_charges else None
        return out_coords, logits, charge

    def loss(
        self,
        mol_coords_raw: Tensor,
        mol_feats_raw: Tensor,
        sub_coords_raw: Tensor,
        sub_feats_raw: Tensor,
        index_map: list[int],
        noise: AutoencoderNoise | None = None,
        generator: torch.Generator | None = None,
    ) -> dict[str, Tensor]:
        """Reconstruction plus KL for one (molecule, substructure) pair.

        ``index_map[r]`` is the parent-molecule row of substructure row r;
        virtual nodes are matched to the remaining parent rows in ascending
        order. Reconstruction is scored in the original molecular space.
        """
        n_total = mol_coords_raw.shape[0]
        n_known = sub_coords_raw.shape[0]
        if sorted(set(index_map)) != sorted(index_map) or len(index_map) != n_known:
            raise AutoencoderError("index_map must injectively map substructure rows to parent rows")
        if any(not 0 <= i < n_total for i in index_map):
            raise AutoencoderError("index_map points outside the parent molecule")
        if self.config.sigma_0 <= 0:
            raise AutoencoderError("sigma_0 must be positive for the variational loss")
        noise = noise or AutoencoderNoise()

        mean_coords, mean_feats = self.encode_mean(sub_coords_raw, sub_feats_raw)
        sigma = self.config.sigma_0
        noise_coords = (
            noise.encoder_coords if noise.encoder_coords is not None else _randn_like(mean_coords, generator)
        )
        noise_feats = (
            noise.encoder_feats if noise.encoder_feats is not None else _randn_like(mean_feats, generator)
        )
        prior = LatentPrior(
            coords=mean_coords + sigma * project_zero_cog(noise_coords),
            feats=mean_feats + sigma * noise_feats,
        )
        coords_hat, logits, charge_hat = self.decode(
            prior, n_total, virtual_noise=noise.virtual_coords, generator=generator
        )

        remaining = [i for i in range(n_total) if i not in set(index_map)]
        perm = torch.as_tensor(list(index_map) + remaining, dtype=torch.long)
        target_coords = project_zero_cog(mol_coords_raw)[perm]
        target_types = mol_feats_raw[:, : self.alphabet_size].argmax(dim=1)[perm]

        coords_hat_raw = coords_hat / self.scaler.coord_weight
        recon_coord = ((coords_hat_raw - target_coords) ** 2).sum()
        recon_type = F.cross_entropy(logits, target_types, reduction="sum")
        if self.with_charges and charge_hat is not None:
            target_charges = mol_feats_raw[:, -1][perm]
            recon_charge = ((charge_hat - target_charges) ** 2).sum()
        else:
            recon_charge = torch.zeros((), dtype=mol_coords_raw.dtype)

        coord_dims = 3 * n_known - 3
        feat_dims = n_known * self.config.latent_feat_dim
        mean_sq = (mean_coords**2).sum() + (mean_feats**2).sum()
        kl = standard_normal_kl(mean_sq, sigma, coord_dims + feat_dims)

        reconstruction = recon_coord + recon_type + recon_charge
        return {
            "total": reconstruction + kl,
            "reconstruction": reconstruction,
            "recon_coord": recon_coord,
            "recon_type": recon_type,
            "recon_charge": recon_charge,
            "kl": kl,
        }


def _randn_like(ref: Tensor, generator: torch.Generator | None) -> Tensor:
    return torch.randn(ref.shape, dtype=ref.dtype, device=ref.device, generator=generator)


def _randn(shape: tuple[int, ...], like: Tensor, generator: torch.Generator | None) -> Tensor:
    return torch.randn(shape, dtype=like.dtype, device=like.device, generator=generator)
