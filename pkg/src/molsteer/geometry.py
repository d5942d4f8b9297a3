"""Geometric data model for 3D molecules with typed atom features.

Coordinates are in Angstrom. Atom features are a one-hot element block,
optionally followed by a single integer charge column. Coordinate handling
follows a zero center-of-gravity convention throughout: distributions over
coordinates are supported on the linear subspace with vanishing column
means, which is what makes translation handling exact downstream.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

DEFAULT_ALPHABET: tuple[str, ...] = ("H", "C", "N", "O", "F")

ONEHOT_TOL = 1e-9


class GeometryError(ValueError):
    """Raised for malformed molecular geometry or feature layout."""


@dataclass(frozen=True)
class FeatureScaler:
    """Per-modality input scaling applied before any model sees a molecule."""

    coord_weight: float = 1.0
    onehot_weight: float = 0.25
    charge_weight: float = 0.1

    def __post_init__(self) -> None:
        for name in ("coord_weight", "onehot_weight", "charge_weight"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0.0:
                raise GeometryError(f"scaler weight {name} must be finite and positive, got {value}")


@dataclass(frozen=True)
class MolecularPointCloud:
    """A molecule as N points with coordinates and per-atom feature rows.

    ``features`` holds a one-hot block over ``element_alphabet`` and, when the
    row width is one wider than the alphabet, a trailing integer charge
    column. ``feature_scale`` records the scaler currently applied to the
    arrays (None means raw, unscaled values).
    """

    coords: np.ndarray
    features: np.ndarray
    element_alphabet: tuple[str, ...] = DEFAULT_ALPHABET
    feature_scale: FeatureScaler | None = None
    label: str = ""

    def __post_init__(self) -> None:
        coords = np.asarray(self.coords, dtype=np.float64)
        features = np.asarray(self.features, dtype=np.float64)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "features", features)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise GeometryError(f"coords must be (N, 3), got {coords.shape}")
        if coords.shape[0] == 0:
            raise GeometryError("empty point set")
        if not np.isfinite(coords).all():
            raise GeometryError("non-finite coordinates")
        if not np.isfinite(features).all():
            raise GeometryError("non-finite features")
        n_elem = len(self.element_alphabet)
        if n_elem == 0 or len(set(self.element_alphabet)) != n_elem:
            raise GeometryError("element alphabet must be non-empty and free of duplicates")
        if features.ndim != 2 or features.shape[0] != coords.shape[0]:
            raise GeometryError(
                f"features must be (N, d) aligned with coords, got {features.shape} for N={coords.shape[0]}"
            )
        if features.shape[1] not in (n_elem, n_elem + 1):
            raise GeometryError(
                f"feature width {features.shape[1]} does not match alphabet size {n_elem} (+1 for charges)"
            )
        block = features[:, :n_elem]
        unit = 1.0 if self.feature_scale is None else self.feature_scale.onehot_weight
        on_level = np.isclose(block, unit, atol=ONEHOT_TOL)
        off_level = np.abs(block) <= ONEHOT_TOL
        if not np.all(on_level | off_level) or not np.all(on_level.sum(axis=1) == 1):
            raise GeometryError("each one-hot block row must have exactly one entry at the unit level")

    @property
    def atom_count(self) -> int:
        return self.coords.shape[0]

    @property
    def with_charges(self) -> bool:
        return self.features.shape[1] == len(self.element_alphabet) + 1

    def symbols(self) -> tuple[str, ...]:
        block = self.features[:, : len(self.element_alphabet)]
        return tuple(self.element_alphabet[i] for i in np.argmax(block, axis=1))

    def charges(self) -> np.ndarray:
        """Integer formal charges per atom (zeros when no charge column)."""
        if not self.with_charges:
            return np.zeros(self.atom_count, dtype=np.int64)
        col = self.features[:, -1]
        if self.feature_scale is not None:
            col = col / self.feature_scale.charge_weight
        return np.rint(col).astype(np.int64)


class SubstructureKind(str, Enum):
    SCAFFOLD = "scaffold"
    RING_SYSTEM = "ring_system"
    FRAGMENT = "fragment"


@dataclass(frozen=True)
class Substructure(MolecularPointCloud):
    """A molecular fragment used as conditioning input (N' >= 1 atoms)."""

    kind: SubstructureKind = SubstructureKind.FRAGMENT


def center_of_gravity_project(coords: np.ndarray) -> np.ndarray:
    """Subtract the column mean so the point set has zero center of gravity."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise GeometryError(f"coords must be (N, 3), got {coords.shape}")
    if coords.shape[0] == 0:
        raise GeometryError("empty point set")
    if not np.isfinite(coords).all():
        raise GeometryError("non-finite coordinates")
    return coords - coords.mean(axis=0, keepdims=True)


def project_molecule(mol: MolecularPointCloud) -> MolecularPointCloud:
    """Return the same molecule with zero-CoG coordinates."""
    return dataclasses.replace(mol, coords=center_of_gravity_project(mol.coords))


def scale_features(mol: MolecularPointCloud, scaler: FeatureScaler) -> MolecularPointCloud:
    """Apply per-modality weights to coordinates, one-hot block and charges."""
    if mol.feature_scale is not None:
        raise GeometryError("molecule features are already scaled")
    n_elem = len(mol.element_alphabet)
    features = mol.features.copy()
    features[:, :n_elem] *= scaler.onehot_weight
    if mol.with_charges:
        features[:, -1] *= scaler.charge_weight
    return dataclasses.replace(
        mol,
        coords=mol.coords * scaler.coord_weight,
        features=features,
        feature_scale=scaler,
    )


def unscale_features(mol: MolecularPointCloud) -> MolecularPointCloud:
    """Invert :func:`scale_features`."""
    scaler = mol.feature_scale
    if scaler is None:
        raise GeometryError("molecule features are not scaled")
    n_elem = len(mol.element_alphabet)
    features = mol.features.copy()
    features[:, :n_elem] /= scaler.onehot_weight
    if mol.with_charges:
        features[:, -1] /= scaler.charge_weight
    return dataclasses.replace(
        mol,
        coords=mol.coords / scaler.coord_weight,
        features=features,
        feature_scale=None,
    )


def check_rotation(rotation: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    """Validate that ``rotation`` is a proper rotation matrix (det +1)."""
    rotation = np.asarray(rotation, dtype=np.float64)
    if rotation.shape != (3, 3):
        raise GeometryError(f"rotation must be (3, 3), got {rotation.shape}")
    if not np.allclose(rotation.T @ rotation, np.eye(3), atol=tol):
        raise GeometryError("invalid rotation: not orthogonal")
    if abs(np.linalg.det(rotation) - 1.0) > tol:
        raise GeometryError("invalid rotation: determinant is not +1")
    return rotation


def apply_rigid_transform(
    mol: MolecularPointCloud, rotation: np.ndarray, translation: np.ndarray
) -> MolecularPointCloud:
    """Rotate then translate coordinates; features are untouched."""
    rotation = check_rotation(rotation)
    translation = np.asarray(translation, dtype=np.float64).reshape(3)
    coords = mol.coords @ rotation.T + translation
    return dataclasses.replace(mol, coords=coords)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """A rotation matrix drawn uniformly from SO(3) (QR of a Gaussian)."""
    gauss = rng.standard_normal((3, 3))
    q, r = np.linalg.qr(gauss)
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def aligned_rmsd(reference: np.ndarray, other: np.ndarray) -> float:
    """RMSD after optimal rigid alignment, rows taken as corresponding atoms.

    Both point sets are centered, the optimal rotation comes from the SVD of
    the cross-covariance with the usual reflection fix, and the RMSD is
    measured between the aligned sets.
    """
    reference = np.asarray(reference, dtype=np.float64)
    other = np.asarray(other, dtype=np.float64)
    if reference.shape != other.shape or reference.ndim != 2 or reference.shape[1] != 3:
        raise GeometryError(
            f"aligned point sets must share an (N, 3) shape, got {reference.shape} and {other.shape}"
        )
    a = reference - reference.mean(axis=0)
    b = other - other.mean(axis=0)
    u, _, vt = np.linalg.svd(b.T @ a)
    sign = np.sign(np.linalg.det(u @ vt))
    d = np.diag([1.0, 1.0, sign])
    rotation = u @ d @ vt
    return float(np.sqrt(np.mean(np.sum((b @ rotation - a) ** 2, axis=1))))


def molecule_from_atoms(
    symbols: list[str] | tuple[str, ...],
    coords: np.ndarray,
    charges: np.ndarray | list[int] | None = None,
    element_alphabet: tuple[str, ...] = DEFAULT_ALPHABET,
    with_charges: bool = True,
    label: str = "",
) -> MolecularPointCloud:
    """Assemble a molecule from symbols and coordinates, one-hot encoding types."""
    coords = np.asarray(coords, dtype=np.float64)
    n = len(symbols)
    index = {sym: i for i, sym in enumerate(element_alphabet)}
    width = len(element_alphabet) + (1 if with_charges else 0)
    features = np.zeros((n, width), dtype=np.float64)
    for row, sym in enumerate(symbols):
        if sym not in index:
            raise GeometryError(f"element {sym!r} is not in the alphabet {element_alphabet}")
        features[row, index[sym]] = 1.0
    if with_charges and charges is not None:
        features[:, -1] = np.asarray(charges, dtype=np.float64)
    elif charges is not None and np.any(np.asarray(charges) != 0):
        raise GeometryError("nonzero charges given but the feature layout has no charge column")
    return MolecularPointCloud(
        coords=coords, features=features, element_alphabet=tuple(element_alphabet), label=label
    )
