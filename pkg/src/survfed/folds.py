"""Per-site cross-fitting fold assignment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import InvalidFoldCount
from .rng import substream


@dataclass(frozen=True)
class FoldAssignment:
    """For each site, a fold id per site row (ordered like ``Dataset.site_rows``).

    Folds within a site are disjoint, exhaustive and balanced to within one
    observation.
    """

    site_folds: dict
    m: int

    def fold_of_rows(self, dataset: Dataset) -> np.ndarray:
        """Fold id aligned with the dataset's global row order."""
        out = np.empty(dataset.n, dtype=np.int64)
        for k, folds in self.site_folds.items():
            out[dataset.site_rows(k)] = folds
        return out


def make_folds(dataset: Dataset, m: int, seed: int) -> FoldAssignment:
    """Deterministic balanced per-site partition into ``m`` validation folds."""
    sizes = [dataset.site_size(int(k)) for k in dataset.sites]
    min_size = min(sizes)
    if not 2 <= m <= min_size // 2:
        raise InvalidFoldCount(
            f"fold count {m} outside [2, {min_size // 2}] for smallest site size {min_size}"
        )
    site_folds = {}
    for k in dataset.sites:
        k = int(k)
        n_k = dataset.site_size(k)
        rng = substream(seed, "folds", k)
        site_folds[k] = rng.permutation(n_k) % m
    return FoldAssignment(site_folds=site_folds, m=m)
