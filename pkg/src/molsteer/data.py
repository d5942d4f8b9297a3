"""Dataset loading, manifests, structural splits, and training pairs.

Splits here are deliberately structural rather than random: holding out
molecules by ring count or by scaffold frequency is what creates the
out-of-distribution evaluation the rest of the package targets.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .chem.bonds import BondGraph, ChemError, infer_bonds
from .chem.graphs import (
    canonical_hash,
    cycle_atom_indices,
    murcko_scaffold,
    ring_count,
    scaffold_atom_indices,
)
from .chem.metrics import MODES
from .geometry import (
    GeometryError,
    MolecularPointCloud,
    Substructure,
    SubstructureKind,
    molecule_from_atoms,
)
from .xyz import read_xyz_file

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
TOY_BOND_LENGTH = 1.45
TOY_Z_JITTER = 0.02


class DataError(ValueError):
    """Raised for malformed datasets, manifests, or split arguments."""


class NoSubstructureError(DataError):
    """Raised when a molecule has no substructure of the requested kind."""


def load_dataset(path: str | Path) -> tuple[list[MolecularPointCloud], int]:
    """Load molecules from one concatenated file or a directory of .xyz files.

    Malformed records and records with out-of-alphabet elements are skipped
    with a warning; the second return value counts the skips.
    """
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("*.xyz"))
        if not files:
            raise DataError(f"no .xyz files under {path}")
    elif path.is_file():
        files = [path]
    else:
        raise DataError(f"dataset path {path} does not exist")
    molecules: list[MolecularPointCloud] = []
    skipped = 0
    for file in files:
        records, bad = read_xyz_file(file)
        skipped += bad
        for i, record in enumerate(records):
            label = record.comment.strip() or f"{file.stem}:{i}"
            try:
                molecules.append(
                    molecule_from_atoms(
                        record.symbols, record.coords, record.charges, label=label
                    )
                )
            except GeometryError as err:
                log.warning("skipping record %s: %s", label, err)
                skipped += 1
    return molecules, skipped


def read_qm9_record(text: str, fallback_label: str = "") -> MolecularPointCloud:
    """Parse one quantum-chemistry benchmark record (one molecule per file).

    Layout: atom count, a property line starting ``gdb <index>``, then one
    ``symbol x y z partial_charge`` line per atom. Coordinates may use the
    Fortran ``*^`` exponent spelling. The fractional partial-charge column is
    measurement output, not a formal charge, so it is dropped.
    """
    lines = text.splitlines()
    if len(lines) < 3:
        raise DataError("record too short")
    try:
        n = int(lines[0].strip())
    except ValueError as err:
        raise DataError(f"bad atom count line {lines[0]!r}") from err
    if n < 1 or len(lines) < 2 + n:
        raise DataError(f"record holds fewer than {n} atom lines")
    tag = lines[1].split()
    label = f"gdb_{tag[1]}" if len(tag) >= 2 and tag[0] == "gdb" else fallback_label
    symbols: list[str] = []
    rows: list[list[float]] = []
    for line in lines[2 : 2 + n]:
        parts = line.split()
        if len(parts) < 4:
            raise DataError(f"bad atom line {line!r}")
        symbols.append(parts[0])
        try:
            rows.append([float(p.replace("*^", "e")) for p in parts[1:4]])
        except ValueError as err:
            raise DataError(f"bad coordinate in line {line!r}") from err
    return molecule_from_atoms(symbols, np.asarray(rows, dtype=np.float64), label=label)


def _qm9_exclusions(directory: Path) -> set[str]:
    """Record labels to drop, read from an optional exclusion list.

    A file named ``uncharacterized.txt`` in the dataset directory lists the
    indices of geometries that failed consistency checks; every line whose
    first token is an integer names one excluded record.
    """
    path = directory / "uncharacterized.txt"
    if not path.exists():
        return set()
    excluded: set[str] = set()
    for line in path.read_text(encoding="utf-8", errors="replace").splitlines():
        token = line.split()[0] if line.split() else ""
        if token.lstrip("-").isdigit():
            excluded.add(f"gdb_{int(token)}")
    return excluded


def load_qm9_directory(
    path: str | Path, limit: int | None = None
) -> tuple[list[MolecularPointCloud], int]:
    """Load a directory of one-molecule benchmark files, applying exclusions.

    Returns the molecules and the number skipped (parse failures plus
    excluded records). ``limit`` caps how many files are read.
    """
    directory = Path(path)
    if not directory.is_dir():
        raise DataError(f"{directory} is not a directory")
    files = sorted(directory.glob("*.xyz"))
    if not files:
        raise DataError(f"no .xyz files under {directory}")
    if limit is not None:
        files = files[:limit]
    excluded = _qm9_exclusions(directory)
    molecules: list[MolecularPointCloud] = []
    skipped = 0
    for file in files:
        try:
            mol = read_qm9_record(
                file.read_text(encoding="utf-8", errors="replace"), fallback_label=file.stem
            )
        except (DataError, GeometryError) as err:
            log.warning("skipping %s: %s", file.name, err)
            skipped += 1
            continue
        if mol.label in excluded:
            skipped += 1
            continue
        molecules.append(mol)
    return molecules, skipped


@dataclass(frozen=True)
class DatasetManifest:
    """Summary counts for a dataset, storable as a small text file."""

    name: str
    molecule_count: int
    skipped_count: int
    atom_count_histogram: dict[int, int] = field(default_factory=dict)
    ring_count_histogram: dict[int, int] = field(default_factory=dict)
    element_histogram: dict[str, int] = field(default_factory=dict)


def build_manifest(
    name: str,
    molecules: Sequence[MolecularPointCloud],
    skipped_count: int = 0,
    with_rings: bool = True,
) -> DatasetManifest:
    atoms: dict[int, int] = {}
    rings: dict[int, int] = {}
    elements: dict[str, int] = {}
    for mol in molecules:
        atoms[mol.atom_count] = atoms.get(mol.atom_count, 0) + 1
        for sym in mol.symbols():
            elements[sym] = elements.get(sym, 0) + 1
        if with_rings:
            try:
                r = ring_count(infer_bonds(mol))
            except ChemError:
                continue
            rings[r] = rings.get(r, 0) + 1
    return DatasetManifest(
        name=name,
        molecule_count=len(molecules),
        skipped_count=skipped_count,
        atom_count_histogram=atoms,
        ring_count_histogram=rings,
        element_histogram=elements,
    )


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    lines = [
        "# dataset manifest",
        f"format_version {MANIFEST_VERSION}",
        f"name {manifest.name}",
        f"molecule_count {manifest.molecule_count}",
        f"skipped_count {manifest.skipped_count}",
        "",
        "[atom_count]",
    ]
    lines += [f"{k} {v}" for k, v in sorted(manifest.atom_count_histogram.items())]
    lines += ["", "[ring_count]"]
    lines += [f"{k} {v}" for k, v in sorted(manifest.ring_count_histogram.items())]
    lines += ["", "[element]"]
    lines += [f"{k} {v}" for k, v in sorted(manifest.element_histogram.items())]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path: str | Path) -> DatasetManifest:
    head: dict[str, str] = {}
    sections: dict[str, dict[str, int]] = {"atom_count": {}, "ring_count": {}, "element": {}}
    current: dict[str, int] | None = None
    current_name = ""
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current_name = line[1:-1]
            if current_name not in sections:
                raise DataError(f"unknown manifest section {current_name!r}")
            current = sections[current_name]
            continue
        parts = line.split()
        if len(parts) != 2:
            raise DataError(f"malformed manifest line {line!r}")
        key, value = parts
        if current is None:
            head[key] = value
        else:
            try:
                current[key] = int(value)
            except ValueError as err:
                raise DataError(f"non-integer count in manifest line {line!r}") from err
    for required in ("format_version", "name", "molecule_count", "skipped_count"):
        if required not in head:
            raise DataError(f"manifest is missing {required!r}")
    if int(head["format_version"]) != MANIFEST_VERSION:
        raise DataError(
            f"manifest format version {head['format_version']} is not {MANIFEST_VERSION}"
        )
    return DatasetManifest(
        name=head["name"],
        molecule_count=int(head["molecule_count"]),
        skipped_count=int(head["skipped_count"]),
        atom_count_histogram={int(k): v for k, v in sections["atom_count"].items()},
        ring_count_histogram={int(k): v for k, v in sections["ring_count"].items()},
        element_histogram=dict(sections["element"]),
    )


@dataclass(frozen=True)
class RingSplit:
    """Ring-count split: train and held-out sets plus everything else."""

    train: list[MolecularPointCloud]
    held_out: list[MolecularPointCloud]
    excluded: list[MolecularPointCloud]


def split_by_ring_count(
    molecules: Sequence[MolecularPointCloud],
    train_counts: Iterable[int],
    held_out_counts: Iterable[int],
) -> RingSplit:
    """Partition by inferred ring count; overlapping count sets are an error."""
    train_set = {int(c) for c in train_counts}
    held_set = {int(c) for c in held_out_counts}
    if not train_set or not held_set:
        raise DataError("both ring-count sets must be non-empty")
    if train_set & held_set:
        raise DataError(f"ring-count sets overlap: {sorted(train_set & held_set)}")
    split = RingSplit(train=[], held_out=[], excluded=[])
    for mol in molecules:
        r = ring_count(infer_bonds(mol))
        if r in train_set:
            split.train.append(mol)
        elif r in held_set:
            split.held_out.append(mol)
        else:
            split.excluded.append(mol)
    return split


@dataclass(frozen=True)
class ScaffoldSplit:
    """Scaffold-frequency split into common, mid-frequency, and rare tiers."""

    in_distribution: list[MolecularPointCloud]
    near_ood: list[MolecularPointCloud]
    far_ood: list[MolecularPointCloud]
    scaffold_counts: dict[str, int]


def split_by_scaffold_frequency(
    molecules: Sequence[MolecularPointCloud],
    high: int = 100,
    low: int = 10,
) -> ScaffoldSplit:
    """Tier molecules by how often their scaffold occurs across the dataset.

    Scaffolds seen at least ``high`` times are in-distribution, at least
    ``low`` but fewer than ``high`` are near-OOD, and rarer ones (including
    acyclic molecules grouped under the empty-scaffold marker) are far-OOD.
    """
    if low < 1 or high <= low:
        raise DataError(f"need high > low >= 1, got high={high} low={low}")
    digests = [canonical_hash(murcko_scaffold(infer_bonds(mol))) for mol in molecules]
    counts: dict[str, int] = {}
    for digest in digests:
        counts[digest] = counts.get(digest, 0) + 1
    split = ScaffoldSplit(in_distribution=[], near_ood=[], far_ood=[], scaffold_counts=counts)
    for mol, digest in zip(molecules, digests):
        seen = counts[digest]
        if seen >= high:
            split.in_distribution.append(mol)
        elif seen >= low:
            split.near_ood.append(mol)
        else:
            split.far_ood.append(mol)
    return split


@dataclass(frozen=True)
class TrainingPair:
    """A molecule with one of its substructures and the row correspondence.

    ``index_map[r]`` is the molecule atom index that substructure row r came
    from; rows are in ascending molecule order.
    """

    molecule: MolecularPointCloud
    substructure: Substructure
    index_map: tuple[int, ...]
    mode: str


def extract_training_pair(
    mol: MolecularPointCloud,
    mode: str,
    bond_graph: BondGraph | None = None,
    rng: np.random.Generator | None = None,
    fragment_fraction: float = 0.5,
) -> TrainingPair:
    """Carve the conditioning substructure of the given kind out of a molecule.

    Scaffold mode keeps the ring systems plus their connecting linkers, ring
    mode keeps only atoms on some cycle, and fragment mode grows a seeded
    connected patch covering roughly ``fragment_fraction`` of the atoms.
    """
    if mode not in MODES:
        raise DataError(f"unknown substructure mode {mode!r}; expected one of {MODES}")
    bg = bond_graph if bond_graph is not None else infer_bonds(mol)
    if mode == "scaffold":
        indices = scaffold_atom_indices(bg)
    elif mode == "ring":
        indices = cycle_atom_indices(bg)
    else:
        indices = _grow_fragment(bg, rng, fragment_fraction)
    if not indices:
        raise NoSubstructureError(f"molecule {mol.label!r} has no {mode} substructure")
    index_map = tuple(sorted(indices))
    rows = list(index_map)
    sub = Substructure(
        coords=mol.coords[rows].copy(),
        features=mol.features[rows].copy(),
        element_alphabet=mol.element_alphabet,
        feature_scale=mol.feature_scale,
        label=f"{mol.label}|{mode}",
        kind=SubstructureKind.RING_SYSTEM if mode == "ring" else SubstructureKind(mode),
    )
    return TrainingPair(molecule=mol, substructure=sub, index_map=index_map, mode=mode)


def _grow_fragment(
    bg: BondGraph, rng: np.random.Generator | None, fraction: float
) -> list[int]:
    if not 0.0 < fraction <= 1.0:
        raise DataError(f"fragment fraction must be in (0, 1], got {fraction}")
    n = bg.atom_count
    target = max(1, round(fraction * n))
    start = 0 if rng is None else int(rng.integers(0, n))
    adjacency = bg.adjacency()
    chosen = {start}
    frontier = [start]
    while frontier and len(chosen) < target:
        node = frontier.pop(0)
        for neighbor in sorted(adjacency[node]):
            if neighbor not in chosen and len(chosen) < target:
                chosen.add(neighbor)
                frontier.append(neighbor)
    return sorted(chosen)


def build_training_pairs(
    molecules: Sequence[MolecularPointCloud],
    mode: str,
    rng: np.random.Generator | None = None,
    fragment_fraction: float = 0.5,
) -> tuple[list[TrainingPair], int]:
    """Extract pairs for every molecule, counting those with no substructure."""
    pairs: list[TrainingPair] = []
    skipped = 0
    for mol in molecules:
        try:
            pairs.append(
                extract_training_pair(mol, mode, rng=rng, fragment_fraction=fragment_fraction)
            )
        except NoSubstructureError:
            skipped += 1
    return pairs, skipped


def _regular_polygon(sides: int, edge: float) -> np.ndarray:
    radius = edge / (2.0 * math.sin(math.pi / sides))
    angles = 2.0 * math.pi * np.arange(sides) / sides
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


class _ToyBuilder:
    """Incremental planar builder for fused-ring toy molecules."""

    def __init__(self) -> None:
        self.xy: list[np.ndarray] = []
        self.bonds: set[tuple[int, int]] = set()
        self.ring_edge_use: dict[tuple[int, int], int] = {}

    def _add_atom(self, point: np.ndarray) -> int:
        self.xy.append(np.asarray(point, dtype=np.float64))
        return len(self.xy) - 1

    def _add_bond(self, i: int, j: int, ring_edge: bool) -> None:
        edge = (min(i, j), max(i, j))
        self.bonds.add(edge)
        if ring_edge:
            self.ring_edge_use[edge] = self.ring_edge_use.get(edge, 0) + 1

    def degree(self, i: int) -> int:
        return sum(1 for a, b in self.bonds if i in (a, b))

    def centroid(self) -> np.ndarray:
        return np.mean(np.stack(self.xy), axis=0)

    def add_chain(self, length: int) -> None:
        for j in range(length):
            idx = self._add_atom(np.array([j * TOY_BOND_LENGTH, 0.0]))
            if j > 0:
                self._add_bond(idx - 1, idx, ring_edge=False)

    def add_first_ring(self, sides: int) -> None:
        points = _regular_polygon(sides, TOY_BOND_LENGTH)
        idx = [self._add_atom(p) for p in points]
        for k in range(sides):
            self._add_bond(idx[k], idx[(k + 1) % sides], ring_edge=True)

    def fusable_edges(self) -> list[tuple[int, int]]:
        return sorted(e for e, uses in self.ring_edge_use.items() if uses == 1)

    def fuse_ring(self, sides: int) -> None:
        """Attach a new ring sharing the boundary edge farthest from the centroid."""
        center = self.centroid()
        edges = self.fusable_edges()
        if not edges:
            raise DataError("no boundary edge left to fuse on")
        mids = [(self.xy[a] + self.xy[b]) / 2.0 for a, b in edges]
        far = int(np.argmax([np.linalg.norm(m - center) for m in mids]))
        a, b = edges[far]
        mid = mids[far]
        pa, pb = self.xy[a], self.xy[b]
        edge_vec = pb - pa
        normal = np.array([-edge_vec[1], edge_vec[0]]) / np.linalg.norm(edge_vec)
        outward = mid - center
        if float(np.dot(normal, outward)) < 0.0:
            normal = -normal
        apothem = TOY_BOND_LENGTH / (2.0 * math.tan(math.pi / sides))
        ring_center = mid + apothem * normal
        radius = TOY_BOND_LENGTH / (2.0 * math.sin(math.pi / sides))
        phi_a = math.atan2(*(pa - ring_center)[::-1])
        phi_b = math.atan2(*(pb - ring_center)[::-1])
        step = 2.0 * math.pi / sides
        wrapped = math.atan2(math.sin(phi_b - phi_a), math.cos(phi_b - phi_a))
        direction = 1.0 if wrapped > 0 else -1.0
        prev = b
        for k in range(1, sides - 1):
            angle = phi_b + direction * step * k
            idx = self._add_atom(ring_center + radius * np.array([math.cos(angle), math.sin(angle)]))
            self._add_bond(prev, idx, ring_edge=True)
            prev = idx
        self._add_bond(prev, a, ring_edge=True)
        self.ring_edge_use[(min(a, b), max(a, b))] += 1

    def add_pendants(self, rng: np.random.Generator, max_chains: int = 3) -> None:
        """Grow short outward chains from low-degree atoms, spaced apart."""
        n_chains = int(rng.integers(0, max_chains + 1))
        if n_chains == 0:
            return
        adjacency: dict[int, set[int]] = {i: set() for i in range(len(self.xy))}
        for a, b in self.bonds:
            adjacency[a].add(b)
            adjacency[b].add(a)
        center = self.centroid()
        pure_path = not self.ring_edge_use
        candidates = [i for i in range(len(self.xy)) if self.degree(i) <= 2]
        blocked: set[int] = set()
        for _ in range(n_chains):
            open_atoms = [i for i in candidates if i not in blocked]
            if not open_atoms:
                break
            attach = int(open_atoms[rng.integers(0, len(open_atoms))])
            blocked.add(attach)
            blocked.update(adjacency[attach])
            if pure_path:
                direction = np.array([0.0, 1.0 if rng.random() < 0.5 else -1.0])
            else:
                radial = self.xy[attach] - center
                norm = float(np.linalg.norm(radial))
                direction = radial / norm if norm > 1e-9 else np.array([1.0, 0.0])
            prev = attach
            for j in range(int(rng.integers(1, 4))):
                idx = self._add_atom(self.xy[attach] + (j + 1) * TOY_BOND_LENGTH * direction)
                self._add_bond(prev, idx, ring_edge=False)
                prev = idx


def _build_toy_candidate(
    rng: np.random.Generator, rings: int
) -> tuple[np.ndarray, list[str], set[tuple[int, int]]]:
    builder = _ToyBuilder()
    if rings == 0:
        builder.add_chain(int(rng.integers(2, 7)))
    else:
        builder.add_first_ring(int(rng.integers(3, 7)))
        for _ in range(rings - 1):
            builder.fuse_ring(int(rng.integers(3, 7)))
    builder.add_pendants(rng)
    n = len(builder.xy)
    coords = np.zeros((n, 3), dtype=np.float64)
    coords[:, :2] = np.stack(builder.xy)
    coords[:, 2] = rng.normal(0.0, TOY_Z_JITTER, size=n)
    symbols = []
    for i in range(n):
        draw = rng.random()
        degree = builder.degree(i)
        if draw < 0.15 and degree <= 3:
            symbols.append("N")
        elif draw < 0.25 and degree <= 2:
            symbols.append("O")
        else:
            symbols.append("C")
    return coords, symbols, builder.bonds


def generate_toy_dataset(
    count: int,
    ring_range: tuple[int, int] = (0, 3),
    seed: int = 0,
    label_prefix: str = "toy",
) -> list[MolecularPointCloud]:
    """Generate planar fused-ring molecules with known ring counts.

    Every molecule is connected, single-bonded at the toy bond length, and
    valid under the default tables; candidates whose inferred bond graph
    disagrees with the construction (rare geometric collisions) are redrawn.
    """
    lo, hi = ring_range
    if not (0 <= lo <= hi):
        raise DataError(f"bad ring range {ring_range}")
    if count < 1:
        raise DataError("count must be positive")
    rng = np.random.default_rng(seed)
    molecules: list[MolecularPointCloud] = []
    for i in range(count):
        rings = int(rng.integers(lo, hi + 1))
        for attempt in range(200):
            coords, symbols, intended = _build_toy_candidate(rng, rings)
            mol = molecule_from_atoms(
                symbols, coords, label=f"{label_prefix}-{i:05d}"
            )
            bg = infer_bonds(mol)
            inferred = {(a, b) for a, b, order in bg.bonds if order == 1}
            orders_ok = all(order == 1 for _, _, order in bg.bonds)
            if inferred == intended and orders_ok and bg.is_connected():
                molecules.append(mol)
                break
        else:
            raise RuntimeError(f"could not realize a toy molecule with {rings} rings")
    return molecules
