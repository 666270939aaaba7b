"""Biome-balanced stratified allocation of samples to ecoregions."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Hashable, Mapping

from ..errors import InvalidArgument


@dataclass(frozen=True)
class StratumAllocation:
    counts: dict[Hashable, int]
    areas: dict[Hashable, float]
    parent: dict[Hashable, Hashable]
    biome_areas: dict[Hashable, float]
    fractional: dict[Hashable, Fraction]
    total_requested: int

    def biome_totals(self, counts: Mapping[Hashable, int] | None = None) -> dict[Hashable, int]:
        counts = self.counts if counts is None else counts
        totals = {b: 0 for b in self.biome_areas}
        for e, n in counts.items():
            totals[self.parent[e]] += n
        return totals

    def with_residual(self) -> dict[Hashable, int]:
        """Counts topped up to exactly ``total_requested``.

        Leftover samples go one per ecoregion in descending order of the
        fractional part lost to flooring; ties keep insertion order.
        """
        counts = dict(self.counts)
        residual = self.total_requested - sum(counts.values())
        order = sorted(counts, key=lambda e: -self.fractional[e])  # stable sort keeps ties in order
        for e in order[: max(0, min(residual, len(order)))]:
            counts[e] += 1
        return counts


def allocate_stratified(
    total: int,
    areas: Mapping[Hashable, tuple[float, Hashable]],
    biome_count: int | None = None,
) -> StratumAllocation:
    """Give each ecoregion ``floor(total / B * A_e / A_B)`` samples.

    ``areas`` maps ecoregion -> (area, parent biome). ``B`` defaults to the
    number of distinct biomes present. Exact rational arithmetic avoids
    floor errors on values like 85714.000000001.
    """
    if not areas:
        raise InvalidArgument("empty area map")
    if total <= 0:
        raise InvalidArgument(f"total must be positive, got {total}")
    parent = {e: b for e, (_, b) in areas.items()}
    biome_areas: dict[Hashable, Fraction] = {}
    for e, (a, b) in areas.items():
        if not (math.isfinite(a) and a > 0):
            raise InvalidArgument(f"ecoregion {e!r} has non-positive area {a}")
        biome_areas[b] = biome_areas.get(b, Fraction(0)) + Fraction(a)
    n_biomes = len(biome_areas) if biome_count is None else biome_count
    if n_biomes < len(biome_areas):
        raise InvalidArgument(f"biome_count={n_biomes} smaller than the {len(biome_areas)} biomes present")
    counts, frac = {}, {}
    for e, (a, b) in areas.items():
        exact = Fraction(total, n_biomes) * Fraction(a) / biome_areas[b]
        counts[e] = math.floor(exact)
        frac[e] = exact - counts[e]
    return StratumAllocation(
        counts=counts,
        areas={e: float(a) for e, (a, _) in areas.items()},
        parent=parent,
        biome_areas={b: float(a) for b, a in biome_areas.items()},
        fractional=frac,
        total_requested=total,
    )
