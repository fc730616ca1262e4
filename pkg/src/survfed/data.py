"""Observation records, the columnar dataset container, and CSV ingestion.

CSV schema: header ``x1,...,xd,a,y,delta,r`` with floats for covariates and
times, integers for the treatment, event indicator and site id. The writer
emits shortest-roundtrip float representations so a write/read cycle is
lossless.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput


@dataclass(frozen=True)
class Observation:
    """One subject: covariates, treatment, observed time, event flag, site id."""

    x: tuple
    a: int
    y: float
    delta: int
    r: int

    def __post_init__(self):
        if self.y < 0:
            raise InvalidInput("observed time must be nonnegative")
        if self.a not in (0, 1):
            raise InvalidInput("treatment must be 0 or 1")
        if self.delta not in (0, 1):
            raise InvalidInput("event indicator must be 0 or 1")
        if self.r < 0:
            raise InvalidInput("site id must be nonnegative")
        if any(not np.isfinite(v) for v in self.x):
            raise InvalidInput("covariates must be finite")


@dataclass
class Dataset:
    """Columnar view of a list of observations."""

    x: np.ndarray
    a: np.ndarray
    y: np.ndarray
    delta: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.a = np.asarray(self.a, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=float)
        self.delta = np.asarray(self.delta, dtype=np.int64)
        self.r = np.asarray(self.r, dtype=np.int64)
        n = self.x.shape[0]
        for name in ("a", "y", "delta", "r"):
            if getattr(self, name).shape != (n,):
                raise InvalidInput(f"column {name} has wrong length")
        if n == 0:
            raise InvalidInput("empty dataset")
        if not np.isfinite(self.x).all() or not np.isfinite(self.y).all():
            raise InvalidInput("non-finite values in dataset")
        if np.any(self.y < 0):
            raise InvalidInput("negative observation times")
        if not np.isin(self.a, (0, 1)).all():
            raise InvalidInput("treatment must be binary")
        if not np.isin(self.delta, (0, 1)).all():
            raise InvalidInput("event indicator must be binary")
        if np.any(self.r < 0):
            raise InvalidInput("site ids must be nonnegative")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def sites(self) -> np.ndarray:
        return np.unique(self.r)

    @property
    def n_sites(self) -> int:
        return int(self.r.max()) + 1

    def site_rows(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.r == k)

    def site_size(self, k: int) -> int:
        return int((self.r == k).sum())

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(self.x[rows], self.a[rows], self.y[rows], self.delta[rows], self.r[rows])

    def relabel_single_site(self) -> "Dataset":
        """All rows assigned to site 0 (used by the pooled competitor)."""
        return Dataset(self.x, self.a, self.y, self.delta, np.zeros(self.n, dtype=np.int64))

    @classmethod
    def from_observations(cls, observations) -> "Dataset":
        obs = list(observations)
        if not obs:
            raise InvalidInput("empty dataset")
        return cls(
            x=np.array([o.x for o in obs], dtype=float),
            a=np.array([o.a for o in obs]),
            y=np.array([o.y for o in obs], dtype=float),
            delta=np.array([o.delta for o in obs]),
            r=np.array([o.r for o in obs]),
        )

    def to_observations(self) -> list:
        return [
            Observation(tuple(self.x[i]), int(self.a[i]), float(self.y[i]), int(self.delta[i]), int(self.r[i]))
            for i in range(self.n)
        ]

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise InvalidInput(f"{path}: empty file") from None
            header = [h.strip() for h in header]
            d = sum(1 for h in header if h.startswith("x"))
            expected = [f"x{j + 1}" for j in range(d)] + ["a", "y", "delta", "r"]
            if header != expected or d == 0:
                raise InvalidInput(f"{path}: expected header x1,...,xd,a,y,delta,r, got {header}")
            xs, aa, yy, dd, rr = [], [], [], [], []
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != d + 4:
                    raise InvalidInput(f"{path}:{lineno}: expected {d + 4} fields, got {len(row)}")
                try:
                    xs.append([float(v) for v in row[:d]])
                    a = int(row[d])
                    y = float(row[d + 1])
                    delta = int(row[d + 2])
                    r = int(row[d + 3])
                except ValueError as exc:
                    raise InvalidInput(f"{path}:{lineno}: {exc}") from None
                if a not in (0, 1):
                    raise InvalidInput(f"{path}:{lineno}: treatment must be 0 or 1, got {a}")
                if delta not in (0, 1):
                    raise InvalidInput(f"{path}:{lineno}: delta must be 0 or 1, got {delta}")
                if y < 0:
                    raise InvalidInput(f"{path}:{lineno}: negative time {y}")
                if r < 0:
                    raise InvalidInput(f"{path}:{lineno}: negative site id {r}")
                aa.append(a)
                yy.append(y)
                dd.append(delta)
                rr.append(r)
        if not aa:
            raise InvalidInput(f"{path}: no data rows")
        return cls(np.array(xs), np.array(aa), np.array(yy), np.array(dd), np.array(rr))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"x{j + 1}" for j in range(self.d)] + ["a", "y", "delta", "r"])
            for i in range(self.n):
                writer.writerow(
                    [repr(float(v)) for v in self.x[i]]
                    + [int(self.a[i]), repr(float(self.y[i])), int(self.delta[i]), int(self.r[i])]
                )
