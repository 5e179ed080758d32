"""Particle representation of compactly supported measures.

A measure is a weighted point cloud: positions ``(N, d)``, strictly positive
weights ``(N,)`` and an optional per-particle string tag (used to mark the
untouched set left aside by the approximate controller). All operations are
pure: they return new values and never mutate their inputs.
"""
from __future__ import annotations

import csv
import hashlib
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ParticleMeasure",
    "DensitySpec",
    "GridPartition",
    "sample",
    "push_forward",
    "restrict",
    "combine",
    "quantile_partition",
    "LinePartition",
    "line_quantile_partition",
]


class ParticleMeasure:
    """Weighted point cloud standing for a compactly supported measure."""

    __slots__ = ("dim", "positions", "weights", "tags")

    def __init__(self, positions, weights, tags=None):
        positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
        weights = np.asarray(weights, dtype=np.float64).reshape(-1)
        if positions.shape[0] != weights.shape[0]:
            raise ValueError(
                f"{positions.shape[0]} positions vs {weights.shape[0]} weights")
        if positions.size and not np.all(np.isfinite(positions)):
            bad = int(np.argwhere(~np.isfinite(positions).all(axis=1))[0, 0])
            raise ValueError(f"non-finite coordinate at particle {bad}")
        if weights.size and (not np.all(np.isfinite(weights)) or np.any(weights <= 0.0)):
            bad = int(np.argwhere(~(np.isfinite(weights) & (weights > 0.0)))[0, 0])
            raise ValueError(f"weight at particle {bad} must be positive and finite")
        self.positions = positions
        self.weights = weights
        self.dim = int(positions.shape[1]) if positions.shape[1] else 1
        if tags is not None:
            tags = np.asarray(tags, dtype=object).reshape(-1)
            if tags.shape[0] != weights.shape[0]:
                raise ValueError("tags length mismatch")
        self.tags = tags
        self.positions.setflags(write=False)
        self.weights.setflags(write=False)

    # -- basic queries ----------------------------------------------------
    def __len__(self):
        return int(self.weights.shape[0])

    def total_mass(self) -> float:
        return float(np.sum(self.weights))

    def support_bbox(self):
        """(lo, hi) corners of the tightest axis-aligned box holding every particle."""
        if len(self) == 0:
            raise ValueError("empty measure has no support")
        return self.positions.min(axis=0), self.positions.max(axis=0)

    def is_probability(self, tol: float = 1e-12) -> bool:
        return abs(self.total_mass() - 1.0) <= tol

    # -- constructive helpers ---------------------------------------------
    def scaled(self, c: float) -> "ParticleMeasure":
        if c <= 0:
            raise ValueError("scale must be positive")
        return ParticleMeasure(self.positions, self.weights * c, self.tags)

    def with_positions(self, positions) -> "ParticleMeasure":
        return ParticleMeasure(positions, self.weights, self.tags)

    def with_tags(self, tags) -> "ParticleMeasure":
        return ParticleMeasure(self.positions, self.weights, tags)

    def subset(self, mask) -> "ParticleMeasure":
        mask = np.asarray(mask, dtype=bool)
        tags = self.tags[mask] if self.tags is not None else None
        return ParticleMeasure(self.positions[mask], self.weights[mask], tags)

    def normalized(self) -> "ParticleMeasure":
        return self.scaled(1.0 / self.total_mass())

    def merged_coincident(self, decimals: int = 12) -> "ParticleMeasure":
        """Sum weights of particles sharing a position (rounded comparison)."""
        key = np.round(self.positions, decimals)
        uniq, inv = np.unique(key, axis=0, return_inverse=True)
        w = np.zeros(len(uniq))
        np.add.at(w, inv, self.weights)
        pos = np.zeros_like(uniq)
        # mass-weighted representative keeps exact positions when they agree
        np.add.at(pos, inv, self.positions * self.weights[:, None])
        pos /= w[:, None]
        return ParticleMeasure(pos, w)

    # -- serialization -----------------------------------------------------
    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.positions).tobytes())
        h.update(np.ascontiguousarray(self.weights).tobytes())
        return h.hexdigest()

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"x_{a + 1}" for a in range(self.dim)] + ["weight", "tag"])
            tags = self.tags if self.tags is not None else [""] * len(self)
            for row, w, tag in zip(self.positions, self.weights, tags):
                writer.writerow([f"{v:.17g}" for v in row] + [f"{w:.17g}", tag or ""])

    @classmethod
    def from_csv(cls, path) -> "ParticleMeasure":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            dim = len([c for c in header if c.startswith("x_")])
            pos, wts, tags = [], [], []
            for row in reader:
                pos.append([float(v) for v in row[:dim]])
                wts.append(float(row[dim]))
                tags.append(row[dim + 1] if len(row) > dim + 1 else "")
        tag_arr = np.array(tags, dtype=object)
        if not any(tags):
            tag_arr = None
        return cls(np.array(pos), np.array(wts), tag_arr)

    def json_envelope(self) -> dict:
        return {"dim": self.dim, "count": len(self), "total_mass": self.total_mass(),
                "checksum": self.checksum()}

    def save(self, csv_path, json_path=None) -> None:
        self.to_csv(csv_path)
        if json_path is not None:
            with open(json_path, "w") as fh:
                json.dump(self.json_envelope(), fh, indent=2, sort_keys=True)


def combine(*measures: ParticleMeasure) -> ParticleMeasure:
    """Concatenate particle clouds (the measure sum)."""
    dims = {m.dim for m in measures}
    if len(dims) != 1:
        raise ValueError("dimension mismatch")
    pos = np.concatenate([m.positions for m in measures])
    wts = np.concatenate([m.weights for m in measures])
    if any(m.tags is not None for m in measures):
        tags = np.concatenate([
            m.tags if m.tags is not None else np.array([""] * len(m), dtype=object)
            for m in measures])
    else:
        tags = None
    return ParticleMeasure(pos, wts, tags)


# ---------------------------------------------------------------------------
# density specifications
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DensitySpec:
    """Bounded-support density we can sample from.

    kinds: ``uniform_box`` (lo, hi), ``truncated_gaussian`` (mean, sigma, lo,
    hi), ``mixture`` (components, mix_weights), ``profile_box`` (lo, hi,
    per-axis polynomial density coefficients, low order first). Every kind is
    normalized over its bounded support by construction.
    """

    kind: str
    dim: int
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind == "uniform_box":
            lo, hi = self._box()
            if not np.all(hi > lo):
                raise ValueError("degenerate box")
        elif self.kind == "truncated_gaussian":
            lo, hi = self._box()
            sigma = np.broadcast_to(np.asarray(self.params["sigma"], float), (self.dim,))
            if not (np.all(hi > lo) and np.all(sigma > 0)):
                raise ValueError("need a non-degenerate box and positive sigma")
        elif self.kind == "mixture":
            comps = self.params["components"]
            mw = np.asarray(self.params["mix_weights"], float)
            if len(comps) != len(mw) or np.any(mw <= 0):
                raise ValueError("mixture weights must be positive, one per component")
            if any(c.dim != self.dim for c in comps):
                raise ValueError("mixture component dimension mismatch")
        elif self.kind == "profile_box":
            lo, hi = self._box()
            if not np.all(hi > lo):
                raise ValueError("degenerate box")
            for coeffs in self.params["profiles"]:
                grid = np.linspace(0.0, 1.0, 257)
                vals = np.polynomial.polynomial.polyval(grid, np.asarray(coeffs, float))
                if np.any(vals < -1e-12) or np.all(vals <= 0):
                    raise ValueError("profile must be nonnegative with positive mass")
        else:
            raise ValueError(f"unknown density kind {self.kind!r}")

    def _box(self):
        lo = np.broadcast_to(np.asarray(self.params["lo"], float), (self.dim,))
        hi = np.broadcast_to(np.asarray(self.params["hi"], float), (self.dim,))
        return lo, hi

    @property
    def support_box(self):
        if self.kind == "mixture":
            boxes = [c.support_box for c in self.params["components"]]
            lo = np.min([b[0] for b in boxes], axis=0)
            hi = np.max([b[1] for b in boxes], axis=0)
            return lo, hi
        return self._box()

    def draw(self, count: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "uniform_box":
            lo, hi = self._box()
            return lo + (hi - lo) * rng.random((count, self.dim))
        if self.kind == "truncated_gaussian":
            lo, hi = self._box()
            mean = np.broadcast_to(np.asarray(self.params["mean"], float), (self.dim,))
            sigma = np.broadcast_to(np.asarray(self.params["sigma"], float), (self.dim,))
            out = np.empty((0, self.dim))
            while out.shape[0] < count:
                block = mean + sigma * rng.standard_normal((2 * count + 64, self.dim))
                keep = np.all((block >= lo) & (block <= hi), axis=1)
                out = np.concatenate([out, block[keep]])
            return out[:count]
        if self.kind == "mixture":
            comps = self.params["components"]
            mw = np.asarray(self.params["mix_weights"], float)
            mw = mw / mw.sum()
            idx = rng.choice(len(comps), size=count, p=mw)
            out = np.empty((count, self.dim))
            for ci, comp in enumerate(comps):
                take = idx == ci
                if np.any(take):
                    out[take] = comp.draw(int(take.sum()), rng)
            return out
        if self.kind == "profile_box":
            lo, hi = self._box()
            out = np.empty((count, self.dim))
            for a in range(self.dim):
                coeffs = np.asarray(self.params["profiles"][a], float)
                grid = np.linspace(0.0, 1.0, 4097)
                pdf = np.maximum(np.polynomial.polynomial.polyval(grid, coeffs), 0.0)
                cdf = np.concatenate([[0.0], np.cumsum((pdf[1:] + pdf[:-1]) * 0.5)])
                cdf /= cdf[-1]
                u = rng.random(count)
                out[:, a] = lo[a] + (hi[a] - lo[a]) * np.interp(u, cdf, grid)
            return out
        raise AssertionError(self.kind)

    def to_dict(self) -> dict:
        if self.kind == "mixture":
            return {"kind": self.kind, "dim": self.dim,
                    "components": [c.to_dict() for c in self.params["components"]],
                    "mix_weights": list(map(float, self.params["mix_weights"]))}
        out = {"kind": self.kind, "dim": self.dim}
        for key, val in self.params.items():
            out[key] = np.asarray(val, float).tolist() if key != "profiles" else [
                list(map(float, c)) for c in val]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "DensitySpec":
        data = dict(data)
        kind = data.pop("kind")
        dim = int(data.pop("dim"))
        if kind == "mixture":
            comps = [cls.from_dict(c) for c in data["components"]]
            return cls("mixture", dim, {"components": comps,
                                        "mix_weights": data["mix_weights"]})
        return cls(kind, dim, data)


def sample(spec: DensitySpec, count: int, seed: int) -> ParticleMeasure:
    """``count`` i.i.d. particles of equal weight 1/count; deterministic in seed."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    pos = spec.draw(count, rng)
    return ParticleMeasure(pos, np.full(count, 1.0 / count))


# ---------------------------------------------------------------------------
# push-forward and restriction
# ---------------------------------------------------------------------------

def push_forward(mu: ParticleMeasure, mapping) -> ParticleMeasure:
    """Image measure: positions mapped, weights and tags untouched.

    ``mapping`` takes an ``(N, d)`` array and returns the mapped ``(N, d)``
    array (a pointwise map applied via numpy broadcasting qualifies).
    """
    new_pos = np.asarray(mapping(mu.positions), dtype=np.float64)
    if new_pos.shape != mu.positions.shape:
        raise ValueError("mapping changed the shape of the cloud")
    if not np.all(np.isfinite(new_pos)):
        bad = int(np.argwhere(~np.isfinite(new_pos).all(axis=1))[0, 0])
        raise ValueError(
            f"mapping produced a non-finite image for particle {bad} "
            f"at {mu.positions[bad].tolist()}")
    return ParticleMeasure(new_pos, mu.weights, mu.tags)


def restrict(mu: ParticleMeasure, region) -> tuple[ParticleMeasure, ParticleMeasure]:
    """Split by region membership; together the parts carry every particle."""
    inside = region.contains(mu.positions)
    return mu.subset(inside), mu.subset(~inside)


# ---------------------------------------------------------------------------
# quantile grid partition
# ---------------------------------------------------------------------------

@dataclass
class GridPartition:
    """Nested quantile mesh of a planar measure.

    ``outer_x[i]`` are the column breakpoints (mass 1/n per strip),
    ``outer_y[i, j]`` the cell breakpoints within column i (mass 1/n² per
    cell), ``inner_x[i] = (lo, hi)`` trims column margins carrying
    column-mass/n each, and ``inner_y[i, j] = (lo, hi)`` trims the matching
    top/bottom strips of the band-restricted cell. The retained inner cells
    carry mass (n-2)²/n⁴ of a unit-mass measure, up to particle resolution.
    """

    n: int
    outer_x: np.ndarray          # (n+1,)
    outer_y: np.ndarray          # (n, n+1)
    inner_x: np.ndarray          # (n, 2)
    inner_y: np.ndarray          # (n, n, 2)
    cell_mass: np.ndarray        # (n, n) empirical mass of each inner cell
    dim: int = 2

    def validate(self) -> None:
        n = self.n
        if not np.all(np.diff(self.outer_x) >= 0):
            raise ValueError("outer_x not nondecreasing")
        if self.outer_x[0] != 0.0 or self.outer_x[-1] > 1.0 + 1e-12:
            raise ValueError("outer_x must start at 0 and stay within the unit box")
        for i in range(n):
            if not np.all(np.diff(self.outer_y[i]) >= 0):
                raise ValueError(f"outer_y[{i}] not nondecreasing")
            lo, hi = self.inner_x[i]
            if not (self.outer_x[i] < lo < hi < self.outer_x[i + 1] + 1e-12):
                raise ValueError(f"inner x bounds out of order in column {i}")

    def inner_cell(self, i: int, j: int):
        """((xlo, ylo), (xhi, yhi)) corners of the retained cell (i, j)."""
        xlo, xhi = self.inner_x[i]
        ylo, yhi = self.inner_y[i, j]
        return np.array([xlo, ylo]), np.array([xhi, yhi])


@dataclass
class LinePartition:
    """Quantile mesh on the line: strips of mass 1/n, margins of mass 1/n²."""

    n: int
    outer: np.ndarray   # (n+1,)
    inner: np.ndarray   # (n, 2)
    dim: int = 1

    def validate(self) -> None:
        if not np.all(np.diff(self.outer) >= 0):
            raise ValueError("outer breakpoints not nondecreasing")
        for i in range(self.n):
            lo, hi = self.inner[i]
            if not (self.outer[i] < lo < hi < self.outer[i + 1] + 1e-12):
                raise ValueError(f"inner bounds out of order in strip {i}")


def line_quantile_partition(mu: ParticleMeasure, n: int) -> LinePartition:
    """One-dimensional analogue of the planar quantile mesh."""
    if n < 3:
        raise ValueError("n must be >= 3")
    if mu.dim != 1:
        raise ValueError("measure must be one-dimensional")
    lo, hi = mu.support_bbox()
    if lo[0] < -1e-9 or hi[0] > 1.0 + 1e-9:
        raise ValueError("support must sit inside the unit interval")
    pos, wts = mu.positions, mu.weights
    total = mu.total_mass()
    order = _axis_order(pos, 0)
    cum = np.cumsum(wts[order])
    outer = np.zeros(n + 1)
    inner = np.zeros((n, 2))
    start = 0
    for i in range(1, n + 1):
        idx = _first_crossing(cum, total * i / n)
        outer[i] = pos[order[idx], 0]
        strip = order[start:idx + 1]
        scum = np.cumsum(wts[strip])
        smass = scum[-1]
        lo_idx = _first_crossing(scum, smass / n)
        hi_idx = _first_crossing(scum, smass * (n - 1) / n)
        inner[i - 1] = (pos[strip[lo_idx], 0], pos[strip[hi_idx], 0])
        start = idx + 1
    part = LinePartition(n=n, outer=outer, inner=inner)
    part.validate()
    return part


def _first_crossing(cum: np.ndarray, target: float) -> int:
    idx = int(np.searchsorted(cum, target - 1e-12 * max(cum[-1], 1.0), side="left"))
    return min(idx, len(cum) - 1)


def _axis_order(pos: np.ndarray, axis: int) -> np.ndarray:
    # ties broken by (coordinate, insertion index)
    return np.lexsort((np.arange(pos.shape[0]), pos[:, axis]))


def _partition_one(mu: ParticleMeasure, n: int) -> GridPartition:
    pos, wts = mu.positions, mu.weights
    total = mu.total_mass()
    order = _axis_order(pos, 0)
    cum = np.cumsum(wts[order])

    outer_x = np.zeros(n + 1)
    col_slices = []
    start = 0
    for i in range(1, n + 1):
        idx = _first_crossing(cum, total * i / n)
        outer_x[i] = pos[order[idx], 0]
        col_slices.append(order[start:idx + 1])
        start = idx + 1

    outer_y = np.zeros((n, n + 1))
    inner_x = np.zeros((n, 2))
    inner_y = np.zeros((n, n, 2))
    cell_mass = np.zeros((n, n))

    for i, col in enumerate(col_slices):
        cpos, cwts = pos[col], wts[col]
        cmass = cwts.sum()

        # cells: y-quantiles within the column
        yord = np.lexsort((np.arange(len(col)), cpos[:, 1]))
        ycum = np.cumsum(cwts[yord])
        cell_rows = []
        start = 0
        for j in range(1, n + 1):
            idx = _first_crossing(ycum, cmass * j / n)
            outer_y[i, j] = cpos[yord[idx], 1]
            cell_rows.append(col[yord[start:idx + 1]])
            start = idx + 1

        # inner band: trim column margins of mass cmass/n on each side
        xord = np.lexsort((np.arange(len(col)), cpos[:, 0]))
        xcum = np.cumsum(cwts[xord])
        lo_idx = _first_crossing(xcum, cmass / n)
        hi_idx = _first_crossing(xcum, cmass * (n - 1) / n)
        inner_x[i] = (cpos[xord[lo_idx], 0], cpos[xord[hi_idx], 0])
        band_members = np.zeros(pos.shape[0], dtype=bool)
        band_members[col[xord[lo_idx + 1:hi_idx + 1]]] = True

        for j, cell in enumerate(cell_rows):
            in_band = cell[band_members[cell]]
            if len(in_band) < 4:
                raise ValueError(
                    f"cell ({i}, {j}) holds {len(in_band)} band particles; "
                    f"not enough resolution for n={n}")
            bpos, bwts = pos[in_band], wts[in_band]
            bord = np.lexsort((np.arange(len(in_band)), bpos[:, 1]))
            bcum = np.cumsum(bwts[bord])
            bmass = bcum[-1]
            lo_j = _first_crossing(bcum, bmass / n)
            hi_j = _first_crossing(bcum, bmass * (n - 1) / n)
            inner_y[i, j] = (bpos[bord[lo_j], 1], bpos[bord[hi_j], 1])
            cell_mass[i, j] = bwts[bord[lo_j + 1:hi_j + 1]].sum()

    part = GridPartition(n=n, outer_x=outer_x, outer_y=outer_y,
                         inner_x=inner_x, inner_y=inner_y, cell_mass=cell_mass)
    part.validate()
    return part


def quantile_partition(mu_src: ParticleMeasure, mu_tgt: ParticleMeasure,
                       n: int) -> tuple[GridPartition, GridPartition]:
    """Nested quantile meshes of source and target over the unit box.

    Both measures must live in the closed unit square (callers rescale
    first). ``n >= 3`` because at n = 2 the retained inner cells have zero
    mass: 1/n² - 2/n³ vanishes.
    """
    if n < 3:
        raise ValueError("n must be >= 3 (inner cells degenerate below that)")
    for name, mu in (("source", mu_src), ("target", mu_tgt)):
        if mu.dim != 2:
            raise ValueError(f"{name} must be planar")
        lo, hi = mu.support_bbox()
        if np.any(lo < -1e-9) or np.any(hi > 1.0 + 1e-9):
            raise ValueError(f"{name} support must sit inside the unit box")
        if np.max(mu.weights) > mu.total_mass() / n ** 3:
            warnings.warn(
                f"{name} has an atom heavier than one margin mass (1/n^3); "
                "quantile ties are broken by position order", stacklevel=2)
    return _partition_one(mu_src, n), _partition_one(mu_tgt, n)
