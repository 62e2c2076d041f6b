"""Seven-rank class registry with lift matrices, class weights and smoothed targets."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ParseError, ShapeError, TaxonomyConflictError
from .records import N_RANKS, RANKS, TaxonomicLabel

SMOOTHING_MODES = ("none", "standard", "hierarchical")
LIFT_MODES = ("sum", "argmax_path")


@dataclass
class Taxonomy:
    """Per-rank class registries plus parent links and training-set frequencies.

    `parent[r][i]` is the index of class i of rank r within rank r-1; the lift
    matrix of rank r maps species indices to their rank-r ancestors and is
    rebuilt from the parent arrays, never serialized.
    """

    names_per_rank: list[list[str]]
    parent: list[np.ndarray]  # parent[0] is empty
    freq_per_rank: list[np.ndarray]
    index_per_rank: list[dict[str, int]] = field(init=False)

    def __post_init__(self):
        self.index_per_rank = [
            {name: i for i, name in enumerate(names)} for names in self.names_per_rank
        ]
        self._lifts: dict[int, np.ndarray] = {}

    def n_classes(self, rank: int) -> int:
        return len(self.names_per_rank[rank])

    def class_counts(self) -> list[int]:
        return [self.n_classes(r) for r in range(N_RANKS)]

    def ancestor(self, rank: int, index: int, target_rank: int) -> int:
        """Index of the target_rank ancestor of class `index` at `rank`."""
        if target_rank > rank:
            raise ConfigError(f"target rank {target_rank} is below rank {rank}")
        i = index
        for r in range(rank, target_rank, -1):
            i = int(self.parent[r][i])
        return i

    def ancestor_path(self, rank: int, index: int) -> list[int]:
        """Ancestor indices from kingdom (inclusive) down to `rank` (inclusive)."""
        path = [index]
        i = index
        for r in range(rank, 0, -1):
            i = int(self.parent[r][i])
            path.append(i)
        return path[::-1]

    def lift_matrix(self, rank: int) -> np.ndarray:
        """Binary (n_species x n_classes_at_rank) matrix; each row has exactly one 1."""
        if rank not in self._lifts:
            n_species = self.n_classes(N_RANKS - 1)
            m = np.zeros((n_species, self.n_classes(rank)), dtype=np.float64)
            for s in range(n_species):
                m[s, self.ancestor(N_RANKS - 1, s, rank)] = 1.0
            self._lifts[rank] = m
        return self._lifts[rank]

    def label_indices(self, label: TaxonomicLabel) -> list[int | None]:
        """Per-rank class indices for a label; None where unlabelled."""
        out: list[int | None] = []
        for r in range(N_RANKS):
            name = label.ranks[r]
            if name is None:
                out.append(None)
                continue
            idx = self.index_per_rank[r].get(name)
            if idx is None:
                raise ConfigError(f"unknown {RANKS[r]} class '{name}'")
            out.append(idx)
        return out

    def to_json(self) -> str:
        payload = {
            "names_per_rank": self.names_per_rank,
            "parent": [arr.tolist() for arr in self.parent],
            "freq_per_rank": [arr.tolist() for arr in self.freq_per_rank],
        }
        return json.dumps(payload)

    @classmethod
    def from_json(cls, text: str) -> "Taxonomy":
        try:
            payload = json.loads(text)
            return cls(
                names_per_rank=payload["names_per_rank"],
                parent=[np.asarray(a, dtype=np.int64) for a in payload["parent"]],
                freq_per_rank=[np.asarray(a, dtype=np.int64) for a in payload["freq_per_rank"]],
            )
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise ParseError(f"bad taxonomy payload: {exc}") from exc

    def save(self, path):
        with open(path, "w", encoding="ascii") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "Taxonomy":
        with open(path, "r", encoding="ascii") as fh:
            return cls.from_json(fh.read())


@dataclass
class TargetDistribution:
    """Per-rank target probability vectors with a labelled-rank mask.

    true_index keeps the unsmoothed class index per labelled rank so losses can
    look up per-class weights without un-smoothing the distribution.
    """

    per_rank: list[np.ndarray | None]
    mask: tuple[bool, ...]
    true_index: tuple[int | None, ...] = (None,) * N_RANKS


@dataclass
class ClassWeights:
    """Inverse-square-root frequency weights, rescaled to mean 1 within each rank."""

    per_rank: list[np.ndarray]


def build_taxonomy(records) -> Taxonomy:
    """Register classes in first-seen order and count per-rank frequencies.

    Raises on labels that skip a rank or reuse a class name under two parents.
    """
    names_per_rank: list[list[str]] = [[] for _ in range(N_RANKS)]
    index_per_rank: list[dict[str, int]] = [{} for _ in range(N_RANKS)]
    parent: list[dict[int, int]] = [{} for _ in range(N_RANKS)]
    freq: list[dict[int, int]] = [{} for _ in range(N_RANKS)]

    for rec in records:
        label = rec.label
        if not label.is_prefix_closed:
            raise TaxonomyConflictError(
                f"record '{rec.id}' labels a rank below an unlabelled one: {label.ranks}"
            )
        prev_idx = None
        for r in range(label.depth):
            name = label.ranks[r]
            idx = index_per_rank[r].get(name)
            if idx is None:
                idx = len(names_per_rank[r])
                names_per_rank[r].append(name)
                index_per_rank[r][name] = idx
                if r > 0:
                    parent[r][idx] = prev_idx
            elif r > 0 and parent[r][idx] != prev_idx:
                old_parent = names_per_rank[r - 1][parent[r][idx]]
                new_parent = names_per_rank[r - 1][prev_idx]
                raise TaxonomyConflictError(
                    f"{RANKS[r]} '{name}' appears under both "
                    f"{RANKS[r - 1]} '{old_parent}' and {RANKS[r - 1]} '{new_parent}'"
                )
            freq[r][idx] = freq[r].get(idx, 0) + 1
            prev_idx = idx

    return Taxonomy(
        names_per_rank=names_per_rank,
        parent=[
            np.array([parent[r][i] for i in range(len(names_per_rank[r]))], dtype=np.int64)
            if r > 0
            else np.zeros(0, dtype=np.int64)
            for r in range(N_RANKS)
        ],
        freq_per_rank=[
            np.array([freq[r][i] for i in range(len(names_per_rank[r]))], dtype=np.int64)
            for r in range(N_RANKS)
        ],
    )


def class_weights(taxonomy: Taxonomy) -> ClassWeights:
    """Per class: freq^(-1/2), then each rank rescaled so its mean weight is 1."""
    per_rank = []
    for r in range(N_RANKS):
        freq = taxonomy.freq_per_rank[r].astype(np.float64)
        if freq.size and freq.min() < 1:
            raise ConfigError(f"rank {RANKS[r]} has a zero-frequency class")
        raw = freq ** -0.5 if freq.size else freq
        per_rank.append(raw / raw.mean() if raw.size else raw)
    return ClassWeights(per_rank)


def shared_ancestor_depth(taxonomy: Taxonomy, rank: int, a: int, b: int) -> int:
    """Depth of the deepest ancestor rank two classes at `rank` share, kingdom = 1.

    Zero when they share nothing (distinct kingdoms); at most `rank` for
    distinct classes at 0-based rank `rank`.
    """
    if a == b:
        return rank + 1
    pa = taxonomy.ancestor_path(rank, a)
    pb = taxonomy.ancestor_path(rank, b)
    depth = 0
    for x, y in zip(pa, pb):
        if x != y:
            break
        depth += 1
    return depth


def _smooth_at_rank(taxonomy: Taxonomy, rank: int, y: int, mode: str, epsilon: float) -> np.ndarray:
    n = taxonomy.n_classes(rank)
    q = np.zeros(n, dtype=np.float64)
    if mode == "none" or epsilon == 0.0 or n == 1:
        q[y] = 1.0
        return q
    if mode == "standard":
        q[:] = epsilon / (n - 1)
        q[y] = 1.0 - epsilon
        return q
    # hierarchical: spread epsilon proportionally to shared-ancestor depth
    s = np.array(
        [0.0 if c == y else shared_ancestor_depth(taxonomy, rank, c, y) for c in range(n)],
        dtype=np.float64,
    )
    total = s.sum()
    if total == 0.0:
        q[:] = epsilon / (n - 1)
    else:
        q[:] = epsilon * s / total
    q[y] = 1.0 - epsilon
    return q


def smooth_target(
    taxonomy: Taxonomy,
    label: TaxonomicLabel,
    mode: str = "hierarchical",
    epsilon: float = 0.1,
) -> TargetDistribution:
    """Smoothed per-rank targets for one label.

    The deepest labelled rank receives the smoothed distribution; shallower
    ranks get it lifted through the parent chain, and deeper ranks are masked
    out. `mode` is one of none/standard/hierarchical.
    """
    if mode not in SMOOTHING_MODES:
        raise ConfigError(f"mode must be one of {SMOOTHING_MODES}, got '{mode}'")
    if not 0.0 <= epsilon < 1.0:
        raise ConfigError(f"epsilon must be in [0,1), got {epsilon}")
    depth = label.depth
    per_rank: list[np.ndarray | None] = [None] * N_RANKS
    mask = [False] * N_RANKS
    if depth == 0:
        return TargetDistribution(per_rank, tuple(mask))

    deepest = depth - 1
    y = taxonomy.index_per_rank[deepest].get(label.ranks[deepest])
    if y is None:
        raise ConfigError(f"unknown {RANKS[deepest]} class '{label.ranks[deepest]}'")
    q = _smooth_at_rank(taxonomy, deepest, y, mode, epsilon)
    per_rank[deepest] = q
    mask[deepest] = True
    true_index: list[int | None] = [None] * N_RANKS
    true_index[deepest] = y
    for r in range(deepest - 1, -1, -1):
        child = per_rank[r + 1]
        lifted = np.zeros(taxonomy.n_classes(r), dtype=np.float64)
        np.add.at(lifted, taxonomy.parent[r + 1], child)
        per_rank[r] = lifted
        mask[r] = True
        true_index[r] = taxonomy.ancestor(deepest, y, r)
    return TargetDistribution(per_rank, tuple(mask), tuple(true_index))


def truncate_to_known(taxonomy: Taxonomy, label: TaxonomicLabel) -> TaxonomicLabel:
    """Longest label prefix whose classes all exist in this taxonomy.

    Lets targets be built for records carrying classes never seen in training;
    the unknown tail is simply left unlabelled (and so masked out of losses).
    """
    depth = 0
    for r in range(label.depth):
        name = label.ranks[r]
        if name not in taxonomy.index_per_rank[r]:
            break
        if r > 0:
            idx = taxonomy.index_per_rank[r][name]
            parent_idx = taxonomy.index_per_rank[r - 1][label.ranks[r - 1]]
            if int(taxonomy.parent[r][idx]) != parent_idx:
                break
        depth = r + 1
    return label.truncated(depth)


def lift_species_probs(
    taxonomy: Taxonomy, species_probs: np.ndarray, mode: str = "sum"
) -> list[np.ndarray]:
    """Derive all seven rank distributions from species probabilities.

    "sum" pushes probability mass through the lift matrices; "argmax_path"
    puts all mass on the ancestors of the most probable species.
    """
    if mode not in LIFT_MODES:
        raise ConfigError(f"mode must be one of {LIFT_MODES}, got '{mode}'")
    probs = np.asarray(species_probs, dtype=np.float64)
    n_species = taxonomy.n_classes(N_RANKS - 1)
    if probs.shape != (n_species,):
        raise ShapeError(f"species_probs shape {probs.shape} != ({n_species},)")
    if abs(float(probs.sum()) - 1.0) > 1e-6:
        raise ConfigError(f"species_probs must sum to 1, got {probs.sum()!r}")

    out: list[np.ndarray] = []
    if mode == "sum":
        for r in range(N_RANKS - 1):
            out.append(probs @ taxonomy.lift_matrix(r))
        out.append(probs.copy())
    else:
        best = int(np.argmax(probs))
        path = taxonomy.ancestor_path(N_RANKS - 1, best)
        for r in range(N_RANKS):
            v = np.zeros(taxonomy.n_classes(r), dtype=np.float64)
            v[path[r]] = 1.0
            out.append(v)
    return out
