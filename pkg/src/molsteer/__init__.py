"""Structural-prior-steered equivariant diffusion for 3D molecules."""

from .geometry import (
    DEFAULT_ALPHABET,
    FeatureScaler,
    GeometryError,
    MolecularPointCloud,
    Substructure,
    SubstructureKind,
    aligned_rmsd,
    apply_rigid_transform,
    center_of_gravity_project,
    molecule_from_atoms,
    random_rotation,
)
from .xyz import XyzFormatError, XyzRecord, format_xyz, read_xyz_file, read_xyz_text, write_xyz_file
from .egnn import Egnn, EgnnConfig, gradient_check, project_zero_cog
from .autoencoder import (
    AutoencoderConfig,
    AutoencoderError,
    AutoencoderNoise,
    LatentPrior,
    SubstructureAutoencoder,
    zero_prior,
)
from .diffusion import (
    ConditionalDenoiser,
    DenoiserInput,
    DiffusionError,
    NoiseSchedule,
    SampleNoise,
    build_condition,
    denoise_step,
    diffusion_loss,
    draw_sample_noise,
    final_decode,
    make_schedule,
    q_sample,
    sample,
)
from .data import (
    DataError,
    DatasetManifest,
    NoSubstructureError,
    RingSplit,
    ScaffoldSplit,
    TrainingPair,
    build_manifest,
    build_training_pairs,
    extract_training_pair,
    generate_toy_dataset,
    load_dataset,
    load_manifest,
    load_qm9_directory,
    read_qm9_record,
    save_manifest,
    split_by_ring_count,
    split_by_scaffold_frequency,
)
from .training import (
    CheckpointData,
    NoiseBundle,
    TrainConfig,
    Trainer,
    TrainingError,
    build_trainer_from_checkpoint,
    delta_histogram,
    ema_modules,
    load_checkpoint,
    make_trainer,
    prepare_pair,
    read_checkpoint,
    save_checkpoint,
    total_loss,
    train_loop,
    train_step,
    variational_bound_diagnostic,
)
from .config import ConfigError, config_digest, default_config, load_config
from . import chem

__all__ = [
    "DEFAULT_ALPHABET",
    "FeatureScaler",
    "GeometryError",
    "MolecularPointCloud",
    "Substructure",
    "SubstructureKind",
    "aligned_rmsd",
    "apply_rigid_transform",
    "center_of_gravity_project",
    "molecule_from_atoms",
    "random_rotation",
    "XyzFormatError",
    "XyzRecord",
    "format_xyz",
    "read_xyz_file",
    "read_xyz_text",
    "write_xyz_file",
    "Egnn",
    "EgnnConfig",
    "gradient_check",
    "project_zero_cog",
    "AutoencoderConfig",
    "AutoencoderError",
    "AutoencoderNoise",
    "LatentPrior",
    "SubstructureAutoencoder",
    "zero_prior",
    "ConditionalDenoiser",
    "DenoiserInput",
    "DiffusionError",
    "NoiseSchedule",
    "SampleNoise",
    "build_condition",
    "denoise_step",
    "diffusion_loss",
    "draw_sample_noise",
    "final_decode",
    "make_schedule",
    "q_sample",
    "sample",
    "DataError",
    "DatasetManifest",
    "NoSubstructureError",
    "RingSplit",
    "ScaffoldSplit",
    "TrainingPair",
    "build_manifest",
    "build_training_pairs",
    "extract_training_pair",
    "generate_toy_dataset",
    "load_dataset",
    "load_manifest",
    "load_qm9_directory",
    "read_qm9_record",
    "save_manifest",
    "split_by_ring_count",
    "split_by_scaffold_frequency",
    "CheckpointData",
    "NoiseBundle",
    "TrainConfig",
    "Trainer",
    "TrainingError",
    "build_trainer_from_checkpoint",
    "delta_histogram",
    "ema_modules",
    "load_checkpoint",
    "make_trainer",
    "prepare_pair",
    "read_checkpoint",
    "save_checkpoint",
    "total_loss",
    "train_loop",
    "train_step",
    "variational_bound_diagnostic",
    "ConfigError",
    "config_digest",
    "default_config",
    "load_config",
    "chem",
]
