"""Reading and writing the XYZ dialect used by all file interchange.

Record layout: first line is the atom count, second line is a free-form
comment (used for provenance annotations), then one row per atom of
``SYMBOL x y z [charge]`` with whitespace separation. Files either hold a
single record or several records back to back.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, TextIO

import numpy as np

from .geometry import MolecularPointCloud

log = logging.getLogger(__name__)


class XyzFormatError(ValueError):
    """Raised when an XYZ record cannot be parsed."""


@dataclass(frozen=True)
class XyzRecord:
    symbols: tuple[str, ...]
    coords: np.ndarray
    charges: tuple[int, ...]
    comment: str


def _parse_atom_line(line: str) -> tuple[str, float, float, float, int]:
    parts = line.split()
    if len(parts) not in (4, 5):
        raise XyzFormatError(f"atom row needs 4 or 5 fields, got {len(parts)}: {line!r}")
    sym = parts[0]
    if not sym.isalpha():
        raise XyzFormatError(f"bad element symbol {sym!r}")
    try:
        x, y, z = (float(parts[i]) for i in (1, 2, 3))
    except ValueError as exc:
        raise XyzFormatError(f"bad coordinate in row {line!r}") from exc
    charge = 0
    if len(parts) == 5:
        try:
            charge = int(round(float(parts[4])))
        except ValueError as exc:
            raise XyzFormatError(f"bad charge in row {line!r}") from exc
    if not all(np.isfinite(v) for v in (x, y, z)):
        raise XyzFormatError(f"non-finite coordinate in row {line!r}")
    return sym, x, y, z, charge


def parse_records(lines: list[str]) -> Iterator[XyzRecord | XyzFormatError]:
    """Yield parsed records, or the error for records that fail to parse.

    On a malformed record the parser scans forward to the next line that
    looks like a bare atom count and resumes there, so one corrupt record
    does not take down the rest of a concatenated file.
    """
    pos = 0
    total = len(lines)
    while pos < total:
        if not lines[pos].strip():
            pos += 1
            continue
        try:
            count = int(lines[pos].strip())
            if count <= 0:
                raise ValueError
        except ValueError:
            err = XyzFormatError(f"expected an atom count at line {pos + 1}, got {lines[pos]!r}")
            pos += 1
            yield err
            continue
        if pos + 2 + count > total:
            yield XyzFormatError(f"record at line {pos + 1} is truncated (needs {count} atom rows)")
            return
        comment = lines[pos + 1].rstrip("\n")
        symbols: list[str] = []
        coords: list[tuple[float, float, float]] = []
        charges: list[int] = []
        try:
            for row in range(count):
                sym, x, y, z, charge = _parse_atom_line(lines[pos + 2 + row])
                symbols.append(sym)
                coords.append((x, y, z))
                charges.append(charge)
        except XyzFormatError as exc:
            # Resync: skip to the next plausible count line after this record head.
            pos = _resync(lines, pos + 1)
            yield exc
            continue
        yield XyzRecord(
            symbols=tuple(symbols),
            coords=np.asarray(coords, dtype=np.float64),
            charges=tuple(charges),
            comment=comment,
        )
        pos += 2 + count


def _resync(lines: list[str], start: int) -> int:
    for pos in range(start, len(lines)):
        token = lines[pos].strip()
        if token.isdigit() and int(token) > 0:
            # A count line is followed by a comment line and then atom rows;
            # require the line after next to look like an atom row.
            if pos + 2 < len(lines):
                try:
                    _parse_atom_line(lines[pos + 2])
                except XyzFormatError:
                    continue
                return pos
    return len(lines)


def read_xyz_text(text: str) -> tuple[list[XyzRecord], int]:
    """Parse concatenated records; returns (records, skipped_count)."""
    records: list[XyzRecord] = []
    skipped = 0
    for item in parse_records(text.splitlines()):
        if isinstance(item, XyzRecord):
            records.append(item)
        else:
            skipped += 1
            log.warning("skipping malformed XYZ record: %s", item)
    return records, skipped


def read_xyz_file(path: str | Path) -> tuple[list[XyzRecord], int]:
    return read_xyz_text(Path(path).read_text())


def format_xyz(mol: MolecularPointCloud, comment: str = "") -> str:
    """Render a molecule as one XYZ record (raw, unscaled values)."""
    if mol.feature_scale is not None:
        raise XyzFormatError("refusing to serialize scaled features; unscale first")
    if "\n" in comment:
        raise XyzFormatError("comment must be a single line")
    symbols = mol.symbols()
    charges = mol.charges()
    rows = [str(mol.atom_count), comment]
    for i in range(mol.atom_count):
        x, y, z = mol.coords[i]
        rows.append(f"{symbols[i]} {x:.10f} {y:.10f} {z:.10f} {charges[i]:d}")
    return "\n".join(rows) + "\n"


def write_xyz_file(path: str | Path, molecules: Iterable[MolecularPointCloud], comments: Iterable[str] | None = None) -> None:
    path = Path(path)
    mols = list(molecules)
    notes = list(comments) if comments is not None else [""] * len(mols)
    if len(notes) != len(mols):
        raise XyzFormatError("comments must align with molecules")
    with path.open("w") as handle:
        _write(handle, mols, notes)


def _write(handle: TextIO, mols: list[MolecularPointCloud], notes: list[str]) -> None:
    for mol, note in zip(mols, notes):
        handle.write(format_xyz(mol, note))
