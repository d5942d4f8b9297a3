"""Chemistry layer: bond inference, graph analysis, and generation metrics."""

from .bonds import (
    BondGraph,
    BondTable,
    ChemError,
    ValenceTable,
    atom_stability,
    bond_order_for_distance,
    default_bond_table,
    default_valence_table,
    infer_bonds,
    load_bond_table,
    load_valence_table,
    molecule_stability,
    set_validity_adapter,
    validity,
)
from .graphs import (
    EMPTY_SCAFFOLD,
    EMPTY_SCAFFOLD_DIGEST,
    canonical_hash,
    contains_substructure,
    cycle_atom_indices,
    induced_subgraph,
    murcko_scaffold,
    ring_count,
    scaffold_atom_indices,
)
from .metrics import MetricReport, compute_metrics, evaluate_molecule, format_report

__all__ = [
    "BondGraph",
    "BondTable",
    "ChemError",
    "ValenceTable",
    "atom_stability",
    "bond_order_for_distance",
    "canonical_hash",
    "compute_metrics",
    "contains_substructure",
    "cycle_atom_indices",
    "default_bond_table",
    "default_valence_table",
    "evaluate_molecule",
    "format_report",
    "induced_subgraph",
    "infer_bonds",
    "load_bond_table",
    "load_valence_table",
    "molecule_stability",
    "murcko_scaffold",
    "MetricReport",
    "ring_count",
    "scaffold_atom_indices",
    "set_validity_adapter",
    "validity",
    "EMPTY_SCAFFOLD",
    "EMPTY_SCAFFOLD_DIGEST",
]
