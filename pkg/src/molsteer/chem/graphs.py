"""Graph-level structure analysis on typed bond graphs.

Ring counting uses the circuit rank. Scaffolds come from iterative pruning
of acyclic degree-1 atoms. Canonical hashing runs color refinement over
element/charge node labels and bond-order edge labels, then digests the
refined colors together with component sizes and the edge multiset.
"""

from __future__ import annotations

import hashlib

from .bonds import BondGraph, ChemError

# Reserved digest for the empty scaffold marker "-".
EMPTY_SCAFFOLD = "-"
EMPTY_SCAFFOLD_DIGEST = hashlib.sha256(b"molsteer:empty-scaffold").hexdigest()

SUBSTRUCTURE_ATOM_LIMIT = 12


def ring_count(bg: BondGraph) -> int:
    """Number of independent rings: bonds - atoms + connected components."""
    return bg.bond_count - bg.atom_count + len(bg.components())


def scaffold_atom_indices(bg: BondGraph) -> list[int]:
    """Atoms surviving iterative pruning of degree-1 atoms (ring systems plus linkers)."""
    adj = {i: set(neigh) for i, neigh in bg.adjacency().items()}
    alive = set(adj)
    while True:
        leaves = [i for i in alive if len(adj[i]) <= 1]
        if not leaves:
            break
        for leaf in leaves:
            for other in adj[leaf]:
                adj[other].discard(leaf)
            adj[leaf] = set()
            alive.discard(leaf)
    return sorted(alive)


def induced_subgraph(bg: BondGraph, indices: list[int]) -> BondGraph:
    """The subgraph on ``indices`` with every bond among them, reindexed."""
    index_of = {orig: new for new, orig in enumerate(indices)}
    keep = set(indices)
    bonds = tuple(
        (min(index_of[i], index_of[j]), max(index_of[i], index_of[j]), order)
        for i, j, order in bg.bonds
        if i in keep and j in keep
    )
    return BondGraph(
        symbols=tuple(bg.symbols[i] for i in indices),
        charges=tuple(bg.charges[i] for i in indices),
        bonds=bonds,
    )


def murcko_scaffold(bg: BondGraph) -> BondGraph | None:
    """The molecule's ring-and-linker core; None is the '-' marker for acyclic input."""
    indices = scaffold_atom_indices(bg)
    if not indices:
        return None
    return induced_subgraph(bg, indices)


def canonical_hash(bg: BondGraph | None) -> str:
    """Isomorphism-invariant hex digest of a typed graph (or of the '-' marker).

    Color refinement runs atom_count rounds; the digest covers the refined
    color multiset, atom count, sorted component sizes, and the typed edge
    multiset under final colors. Digests are crypto-strength per round, so
    accidental collisions require a refinement tie, not a hash accident.
    """
    if bg is None:
        return EMPTY_SCAFFOLD_DIGEST
    adj = bg.adjacency()
    colors = [f"{bg.symbols[i]}|{bg.charges[i]}" for i in range(bg.atom_count)]
    for _ in range(bg.atom_count):
        fresh = []
        for i in range(bg.atom_count):
            neigh = ",".join(sorted(f"{order}:{colors[j]}" for j, order in adj[i].items()))
            fresh.append(hashlib.sha256(f"{colors[i]}#{neigh}".encode()).hexdigest())
        colors = fresh
    comp_sizes = sorted(len(c) for c in bg.components())
    edges = sorted(
        f"{min(colors[i], colors[j])}~{max(colors[i], colors[j])}~{order}"
        for i, j, order in bg.bonds
    )
    payload = "|".join(
        [
            str(bg.atom_count),
            ",".join(map(str, comp_sizes)),
            ",".join(sorted(colors)),
            ";".join(edges),
        ]
    )
    return hashlib.sha256(payload.encode()).hexdigest()


def contains_substructure(haystack: BondGraph, needle: BondGraph) -> bool:
    """Whether a label-preserving embedding of ``needle`` exists in ``haystack``.

    Backtracking search; atoms match on (element, charge) and every needle
    bond must map to a haystack bond of the same order. Needles are capped
    at 12 atoms; hash whole scaffolds instead of matching them atomwise.
    """
    if needle.atom_count > SUBSTRUCTURE_ATOM_LIMIT:
        raise ChemError(
            f"substructure search is capped at {SUBSTRUCTURE_ATOM_LIMIT} atoms "
            f"(got {needle.atom_count}); use scaffold-hash matching instead"
        )
    if needle.atom_count > haystack.atom_count or needle.bond_count > haystack.bond_count:
        return False
    hay_adj = haystack.adjacency()
    ndl_adj = needle.adjacency()
    hay_label = [(haystack.symbols[i], haystack.charges[i]) for i in range(haystack.atom_count)]
    ndl_label = [(needle.symbols[i], needle.charges[i]) for i in range(needle.atom_count)]

    # Visit needle atoms so each one after the first per component touches a
    # mapped neighbor, which keeps candidate sets small.
    order: list[int] = []
    seen: set[int] = set()
    for root in range(needle.atom_count):
        if root in seen:
            continue
        stack = [root]
        seen.add(root)
        while stack:
            node = stack.pop()
            order.append(node)
            for neigh in sorted(ndl_adj[node], reverse=True):
                if neigh not in seen:
                    seen.add(neigh)
                    stack.append(neigh)

    mapping: dict[int, int] = {}
    used: set[int] = set()

    def extend(depth: int) -> bool:
        if depth == len(order):
            return True
        node = order[depth]
        mapped_neighbors = [(j, ndl_adj[node][j]) for j in ndl_adj[node] if j in mapping]
        if mapped_neighbors:
            anchor, anchor_order = mapped_neighbors[0]
            candidates = [
                h for h, o in hay_adj[mapping[anchor]].items() if o == anchor_order
            ]
        else:
            candidates = list(range(haystack.atom_count))
        for cand in candidates:
            if cand in used or hay_label[cand] != ndl_label[node]:
                continue
            if len(ndl_adj[node]) > len(hay_adj[cand]):
                continue
            ok = True
            for j, needed in mapped_neighbors:
                if hay_adj[cand].get(mapping[j]) != needed:
                    ok = False
                    break
            if not ok:
                continue
            mapping[node] = cand
            used.add(cand)
            if extend(depth + 1):
                return True
            del mapping[node]
            used.discard(cand)
        return False

    return extend(0)


def bridge_edges(bg: BondGraph) -> set[tuple[int, int]]:
    """Edges whose removal disconnects their endpoints (iterative lowlink DFS)."""
    adj = bg.adjacency()
    disc = [-1] * bg.atom_count
    low = [0] * bg.atom_count
    bridges: set[tuple[int, int]] = set()
    timer = 0
    for root in range(bg.atom_count):
        if disc[root] != -1:
            continue
        stack: list[tuple[int, int, list[int]]] = [(root, -1, sorted(adj[root]))]
        disc[root] = low[root] = timer
        timer += 1
        while stack:
            node, parent, children = stack[-1]
            if children:
                child = children.pop()
                if child == parent:
                    # Skip one edge back to the parent (no multi-edges exist).
                    parent = -2
                    stack[-1] = (node, parent, children)
                    continue
                if disc[child] == -1:
                    disc[child] = low[child] = timer
                    timer += 1
                    stack.append((child, node, sorted(adj[child])))
                else:
                    low[node] = min(low[node], disc[child])
            else:
                stack.pop()
                if stack:
                    up, _, _ = stack[-1]
                    low[up] = min(low[up], low[node])
                    if low[node] > disc[up]:
                        bridges.add((min(up, node), max(up, node)))
    return bridges


def cycle_atom_indices(bg: BondGraph) -> list[int]:
    """Atoms lying on at least one cycle (endpoints of non-bridge edges)."""
    bridges = bridge_edges(bg)
    atoms: set[int] = set()
    for i, j, _ in bg.bonds:
        if (i, j) not in bridges:
            atoms.add(i)
            atoms.add(j)
    return sorted(atoms)
