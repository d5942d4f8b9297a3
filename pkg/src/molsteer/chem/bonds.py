"""Distance-based bond inference and valence bookkeeping.

Bonds are assigned from interatomic distances against per-element-pair
distance bands shipped as a plain-text table. Stability asks whether each
atom's bond-order sum equals an allowed valence for its element and formal
charge; the validity proxy asks for connectivity plus valence caps.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable

import numpy as np

from ..geometry import MolecularPointCloud

log = logging.getLogger(__name__)

BAND_EDGE_TOL = 1e-9


class ChemError(ValueError):
    """Raised for malformed bond graphs or chemistry-table problems."""


@dataclass(frozen=True)
class BondGraph:
    """A typed molecular graph: atoms with charges plus ordered bonds.

    Bonds are (i, j, order) with i < j and order in {1, 2, 3}.
    """

    symbols: tuple[str, ...]
    charges: tuple[int, ...]
    bonds: tuple[tuple[int, int, int], ...]

    def __post_init__(self) -> None:
        n = len(self.symbols)
        if n == 0:
            raise ChemError("empty molecule")
        if len(self.charges) != n:
            raise ChemError("charges must align with symbols")
        seen: set[tuple[int, int]] = set()
        for i, j, order in self.bonds:
            if not (0 <= i < j < n):
                raise ChemError(f"bad bond indices ({i}, {j}) for {n} atoms")
            if order not in (1, 2, 3):
                raise ChemError(f"bad bond order {order}")
            if (i, j) in seen:
                raise ChemError(f"duplicate bond ({i}, {j})")
            seen.add((i, j))

    @property
    def atom_count(self) -> int:
        return len(self.symbols)

    @property
    def bond_count(self) -> int:
        return len(self.bonds)

    def adjacency(self) -> dict[int, dict[int, int]]:
        adj: dict[int, dict[int, int]] = {i: {} for i in range(self.atom_count)}
        for i, j, order in self.bonds:
            adj[i][j] = order
            adj[j][i] = order
        return adj

    def order_sums(self) -> tuple[int, ...]:
        sums = [0] * self.atom_count
        for i, j, order in self.bonds:
            sums[i] += order
            sums[j] += order
        return tuple(sums)

    def components(self) -> list[set[int]]:
        parent = list(range(self.atom_count))

        def find(a: int) -> int:
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for i, j, _ in self.bonds:
            ri, rj = find(i), find(j)
            if ri != rj:
                parent[ri] = rj
        groups: dict[int, set[int]] = {}
        for i in range(self.atom_count):
            groups.setdefault(find(i), set()).add(i)
        return list(groups.values())

    def is_connected(self) -> bool:
        return len(self.components()) == 1


BondTable = dict[tuple[str, str], list[tuple[int, float, float]]]
ValenceTable = dict[tuple[str, int], set[int]]

_default_bond_table: BondTable | None = None
_default_valences: ValenceTable | None = None
_warned_pairs: set[tuple[str, str]] = set()


def _data_text(name: str) -> str:
    return resources.files("molsteer.chem").joinpath("data").joinpath(name).read_text()


def load_bond_table(path: str | Path | None = None) -> BondTable:
    """Parse a distance-band table (element element order min max per line)."""
    text = Path(path).read_text() if path is not None else _data_text("bond_lengths.tsv")
    table: BondTable = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 5:
            raise ChemError(f"bond table line {lineno} needs 5 fields, got {len(parts)}")
        a, b, order, lo, hi = parts[0], parts[1], int(parts[2]), float(parts[3]), float(parts[4])
        if order not in (1, 2, 3) or lo < 0 or hi <= lo:
            raise ChemError(f"bond table line {lineno} is malformed: {line!r}")
        key = (a, b) if a <= b else (b, a)
        table.setdefault(key, []).append((order, lo, hi))
    return table


def load_valence_table(path: str | Path | None = None) -> ValenceTable:
    """Parse allowed valences (element charge valence per line)."""
    text = Path(path).read_text() if path is not None else _data_text("valences.tsv")
    table: ValenceTable = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ChemError(f"valence table line {lineno} needs 3 fields, got {len(parts)}")
        sym, charge, valence = parts[0], int(parts[1]), int(parts[2])
        if valence < 0:
            raise ChemError(f"valence table line {lineno} is malformed: {line!r}")
        table.setdefault((sym, charge), set()).add(valence)
    return table


def default_bond_table() -> BondTable:
    global _default_bond_table
    if _default_bond_table is None:
        _default_bond_table = load_bond_table()
    return _default_bond_table


def default_valence_table() -> ValenceTable:
    global _default_valences
    if _default_valences is None:
        _default_valences = load_valence_table()
    return _default_valences


def bond_order_for_distance(sym_a: str, sym_b: str, distance: float, table: BondTable | None = None) -> int:
    """Bond order for one atom pair at the given distance; 0 means no bond."""
    table = table if table is not None else default_bond_table()
    key = (sym_a, sym_b) if sym_a <= sym_b else (sym_b, sym_a)
    rows = table.get(key)
    if rows is None:
        if key not in _warned_pairs:
            _warned_pairs.add(key)
            log.warning("no distance bands for element pair %s-%s; treating as unbonded", *key)
        return 0
    best = 0
    for order, lo, hi in rows:
        if lo - BAND_EDGE_TOL <= distance <= hi + BAND_EDGE_TOL and order > best:
            best = order
    return best


def infer_bonds(mol: MolecularPointCloud, table: BondTable | None = None) -> BondGraph:
    """Build the typed bond graph of a molecule from interatomic distances."""
    if mol.feature_scale is not None:
        raise ChemError("bond inference needs unscaled coordinates and features")
    symbols = mol.symbols()
    charges = tuple(int(c) for c in mol.charges())
    diffs = mol.coords[:, None, :] - mol.coords[None, :, :]
    dists = np.sqrt((diffs**2).sum(axis=-1))
    bonds: list[tuple[int, int, int]] = []
    for i in range(mol.atom_count):
        for j in range(i + 1, mol.atom_count):
            order = bond_order_for_distance(symbols[i], symbols[j], float(dists[i, j]), table)
            if order > 0:
                bonds.append((i, j, order))
    return BondGraph(symbols=symbols, charges=charges, bonds=tuple(bonds))


def atom_stability(bg: BondGraph, valences: ValenceTable | None = None) -> tuple[float, tuple[bool, ...]]:
    """Fraction and per-atom flags of atoms whose bond-order sum is an allowed valence."""
    valences = valences if valences is not None else default_valence_table()
    sums = bg.order_sums()
    flags = tuple(
        sums[i] in valences.get((bg.symbols[i], bg.charges[i]), set())
        for i in range(bg.atom_count)
    )
    return sum(flags) / bg.atom_count, flags


def molecule_stability(bg: BondGraph, valences: ValenceTable | None = None) -> bool:
    """True when every atom in the molecule is stable."""
    fraction, _ = atom_stability(bg, valences)
    return fraction == 1.0


def _max_cap(sym: str, charge: int, valences: ValenceTable) -> int | None:
    exact = valences.get((sym, charge))
    if exact:
        return max(exact)
    fallback = [max(v) for (s, _), v in valences.items() if s == sym and v]
    return max(fallback) if fallback else None


ValidityAdapter = Callable[[BondGraph], bool]
_validity_adapter: ValidityAdapter | None = None


def set_validity_adapter(adapter: ValidityAdapter | None) -> None:
    """Install an external-toolkit validity override (None restores the proxy)."""
    global _validity_adapter
    _validity_adapter = adapter


def validity(
    bg: BondGraph,
    valences: ValenceTable | None = None,
    adapter: ValidityAdapter | None = None,
) -> bool:
    """Proxy validity: connected, and every atom has 1 <= order sum <= cap."""
    chosen = adapter if adapter is not None else _validity_adapter
    if chosen is not None:
        return bool(chosen(bg))
    valences = valences if valences is not None else default_valence_table()
    if not bg.is_connected():
        return False
    sums = bg.order_sums()
    for i in range(bg.atom_count):
        cap = _max_cap(bg.symbols[i], bg.charges[i], valences)
        if cap is None or sums[i] < 1 or sums[i] > cap:
            return False
    return True
