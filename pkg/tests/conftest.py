"""Shared fixtures: deterministic RNGs and small molecule builders."""

from __future__ import annotations

import numpy as np
import pytest
import torch

from molsteer.geometry import DEFAULT_ALPHABET, MolecularPointCloud, molecule_from_atoms


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240817)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


def random_molecule(
    n: int, rng: np.random.Generator, with_charges: bool = True, label: str = "mol"
) -> MolecularPointCloud:
    symbols = [str(s) for s in rng.choice(DEFAULT_ALPHABET, size=n)]
    coords = rng.standard_normal((n, 3)) * 2.0
    charges = rng.integers(-1, 2, size=n) if with_charges else None
    return molecule_from_atoms(symbols, coords, charges, with_charges=with_charges, label=label)


def molecule_tensors(mol: MolecularPointCloud, dtype=torch.float64):
    return (
        torch.as_tensor(mol.coords, dtype=dtype),
        torch.as_tensor(mol.features, dtype=dtype),
    )
