"""Barcode records and seven-rank taxonomic labels."""
from __future__ import annotations

from dataclasses import dataclass, field

RANKS = ("kingdom", "phylum", "class", "order", "family", "genus", "species")
RANK_PREFIXES = ("k", "p", "c", "o", "f", "g", "s")
N_RANKS = 7

# IUPAC nucleotide codes; everything outside ACGT counts as ambiguous.
IUPAC_ALPHABET = frozenset("ACGTRYSWKMBDHVN")
UNAMBIGUOUS = frozenset("ACGT")


@dataclass(frozen=True)
class TaxonomicLabel:
    """Up to seven class names ordered kingdom..species; None marks an unlabelled rank."""

    ranks: tuple[str | None, ...] = field(default=(None,) * N_RANKS)

    def __post_init__(self):
        if len(self.ranks) != N_RANKS:
            raise ValueError(f"expected {N_RANKS} ranks, got {len(self.ranks)}")

    @property
    def depth(self) -> int:
        """Number of labelled ranks counted from kingdom down to the first gap."""
        d = 0
        for name in self.ranks:
            if name is None:
                break
            d += 1
        return d

    @property
    def is_prefix_closed(self) -> bool:
        """True when no labelled rank sits below an unlabelled one."""
        return all(name is None for name in self.ranks[self.depth:])

    def truncated(self, depth: int) -> "TaxonomicLabel":
        return TaxonomicLabel(self.ranks[:depth] + (None,) * (N_RANKS - depth))


@dataclass(frozen=True)
class BarcodeRecord:
    """One barcode sequence with its identifier and (possibly partial) label."""

    id: str
    sequence: str
    label: TaxonomicLabel = field(default_factory=TaxonomicLabel)

    def key(self) -> tuple:
        """Dedup key: exact (sequence, full label) pair."""
        return (self.sequence, self.label.ranks)


def make_label(*names: str | None) -> TaxonomicLabel:
    """Build a label from up to seven names, padding the tail with None."""
    if len(names) > N_RANKS:
        raise ValueError(f"at most {N_RANKS} rank names, got {len(names)}")
    return TaxonomicLabel(tuple(names) + (None,) * (N_RANKS - len(names)))
