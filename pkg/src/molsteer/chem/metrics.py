"""Aggregate generation-quality metrics over a set of generated molecules.

All metrics are percentages. "On target" means the molecule exhibits the
requested structure: a ring count in the target set (ring mode), a scaffold
whose digest is in the target set (scaffold mode), or containment of one of
the target fragments (fragment mode).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from ..geometry import MolecularPointCloud
from .bonds import (
    BondGraph,
    BondTable,
    ChemError,
    ValenceTable,
    atom_stability,
    infer_bonds,
    molecule_stability,
    validity,
)
from .graphs import canonical_hash, contains_substructure, murcko_scaffold, ring_count

MODES = ("ring", "scaffold", "fragment")


@dataclass(frozen=True)
class MetricReport:
    """Percentages in [0, 100]; coverage is None outside scaffold mode."""

    proportion: float
    coverage: float | None
    atom_stability: float
    molecule_stability: float
    validity: float
    novelty: float
    success_rate: float
    counts: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name in (
            "proportion",
            "atom_stability",
            "molecule_stability",
            "validity",
            "novelty",
            "success_rate",
        ):
            value = getattr(self, name)
            if not 0.0 <= value <= 100.0:
                raise ChemError(f"metric {name} out of range: {value}")
        if self.coverage is not None and not 0.0 <= self.coverage <= 100.0:
            raise ChemError(f"metric coverage out of range: {self.coverage}")


@dataclass(frozen=True)
class _Row:
    graph: BondGraph
    digest: str
    scaffold_digest: str
    rings: int
    valid: bool
    stable_atoms: int
    stable: bool
    on_target: bool


def _pct(numerator: int, denominator: int) -> float:
    return 100.0 * numerator / denominator if denominator else 0.0


def evaluate_molecule(
    mol: MolecularPointCloud,
    bond_table: BondTable | None = None,
    valences: ValenceTable | None = None,
) -> tuple[BondGraph, bool, str]:
    """Convenience single-molecule evaluation: (bond graph, valid, digest)."""
    bg = infer_bonds(mol, bond_table)
    return bg, validity(bg, valences), canonical_hash(bg)


def compute_metrics(
    generated: list[MolecularPointCloud],
    mode: str,
    ring_targets: set[int] | None = None,
    scaffold_targets: set[str] | None = None,
    fragment_targets: list[BondGraph] | None = None,
    training_hashes: frozenset[str] | set[str] = frozenset(),
    bond_table: BondTable | None = None,
    valences: ValenceTable | None = None,
) -> MetricReport:
    """Score generated molecules against a structural target.

    Metrics: proportion (on-target share of valid molecules), coverage
    (target scaffolds hit, scaffold mode only), atom/molecule stability over
    on-target molecules, validity over on-target molecules, novelty over
    valid on-target molecules, and the success rate: the share of all
    generated samples that are simultaneously valid, unique (first occurrence
    of their canonical digest), novel, and on target.
    """
    if not generated:
        raise ChemError("no generated molecules to evaluate")
    if mode not in MODES:
        raise ChemError(f"unknown metric mode {mode!r}; expected one of {MODES}")
    if mode == "ring" and not ring_targets:
        raise ChemError("ring mode needs a non-empty set of target ring counts")
    if mode == "scaffold" and not scaffold_targets:
        raise ChemError("scaffold mode needs a non-empty set of target scaffold digests")
    if mode == "fragment" and not fragment_targets:
        raise ChemError("fragment mode needs a non-empty list of target fragments")

    rows: list[_Row] = []
    for mol in generated:
        bg = infer_bonds(mol, bond_table)
        digest = canonical_hash(bg)
        scaffold = murcko_scaffold(bg)
        scaffold_digest = canonical_hash(scaffold)
        rings = ring_count(bg)
        if mode == "ring":
            on_target = rings in (ring_targets or set())
        elif mode == "scaffold":
            on_target = scaffold_digest in (scaffold_targets or set())
        else:
            on_target = any(contains_substructure(bg, frag) for frag in fragment_targets or [])
        _, flags = atom_stability(bg, valences)
        rows.append(
            _Row(
                graph=bg,
                digest=digest,
                scaffold_digest=scaffold_digest,
                rings=rings,
                valid=validity(bg, valences),
                stable_atoms=sum(flags),
                stable=molecule_stability(bg, valences),
                on_target=on_target,
            )
        )

    total = len(rows)
    valid_rows = [r for r in rows if r.valid]
    target_rows = [r for r in rows if r.on_target]
    target_valid = [r for r in target_rows if r.valid]
    novel_target_valid = [r for r in target_valid if r.digest not in training_hashes]

    seen: set[str] = set()
    success = 0
    for row in rows:
        first = row.digest not in seen
        seen.add(row.digest)
        if first and row.valid and row.on_target and row.digest not in training_hashes:
            success += 1

    coverage = None
    covered = 0
    if mode == "scaffold":
        generated_scaffolds = {r.scaffold_digest for r in rows}
        covered = len(generated_scaffolds & (scaffold_targets or set()))
        coverage = _pct(covered, len(scaffold_targets or set()))

    target_atoms = sum(r.graph.atom_count for r in target_rows)
    target_stable_atoms = sum(r.stable_atoms for r in target_rows)

    counts = {
        "generated": total,
        "valid": len(valid_rows),
        "on_target": len(target_rows),
        "on_target_valid": len(target_valid),
        "on_target_valid_novel": len(novel_target_valid),
        "on_target_atoms": target_atoms,
        "on_target_stable_atoms": target_stable_atoms,
        "on_target_stable_molecules": sum(1 for r in target_rows if r.stable),
        "success": success,
        "covered_scaffolds": covered,
        "target_scaffolds": len(scaffold_targets) if scaffold_targets else 0,
    }
    return MetricReport(
        proportion=_pct(len(target_valid), len(valid_rows)),
        coverage=coverage,
        atom_stability=_pct(target_stable_atoms, target_atoms),
        molecule_stability=_pct(counts["on_target_stable_molecules"], len(target_rows)),
        validity=_pct(len(target_valid), len(target_rows)),
        novelty=_pct(len(novel_target_valid), len(target_valid)),
        success_rate=_pct(success, total),
        counts=counts,
    )


def format_report(report: MetricReport) -> str:
    """Render a report as aligned text lines (counts included)."""

    def show(value: float | None) -> str:
        return "-" if value is None else f"{value:.1f}"

    lines = [
        f"proportion          P  {show(report.proportion)}",
        f"coverage            C  {show(report.coverage)}",
        f"atom stability      AS {show(report.atom_stability)}",
        f"molecule stability  MS {show(report.molecule_stability)}",
        f"validity            V  {show(report.validity)}",
        f"novelty             N  {show(report.novelty)}",
        f"success rate        S  {show(report.success_rate)}",
    ]
    counts = " ".join(f"{k}={v}" for k, v in sorted(report.counts.items()))
    lines.append(f"counts: {counts}")
    return "\n".join(lines)
