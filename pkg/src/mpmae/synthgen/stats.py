"""Per-band standardization statistics over a dataset split."""

from __future__ import annotations

import numpy as np

from ..errors import InvalidArgument
from ..schema import OPTICAL, PRODUCT_LEVELS, STD_FLOOR, BandStats


class _Moments:
    """Chan-style merge of per-band count/mean/M2 over chunks."""

    def __init__(self, bands: int):
        self.n = np.zeros(bands)
        self.mean = np.zeros(bands)
        self.m2 = np.zeros(bands)

    def update(self, values: np.ndarray) -> None:
        # values: (bands, k) with NaN for missing entries
        ok = np.isfinite(values)
        n_b = ok.sum(axis=1).astype(np.float64)
        if not n_b.any():
            return
        v = np.where(ok, values, 0.0).astype(np.float64)
        with np.errstate(invalid="ignore", divide="ignore"):
            mean_b = np.where(n_b > 0, v.sum(axis=1) / np.maximum(n_b, 1), 0.0)
        m2_b = (np.where(ok, v - mean_b[:, None], 0.0) ** 2).sum(axis=1)
        total = self.n + n_b
        delta = mean_b - self.mean
        safe = np.maximum(total, 1)
        self.mean = self.mean + delta * n_b / safe
        self.m2 = self.m2 + m2_b + delta**2 * self.n * n_b / safe
        self.n = total

    def result(self) -> tuple[np.ndarray, np.ndarray]:
        var = self.m2 / np.maximum(self.n, 1)
        return self.mean.copy(), np.sqrt(var)


def compute_band_stats(dataset, split: str = "pretrain", chunk: int = 256) -> BandStats:
    """Population mean/std per band over ``split``; missing values excluded.

    Optical statistics are computed separately for each product level. A
    level absent from the split falls back to the pooled optical statistics
    with a warning.
    """
    idx = np.sort(dataset.split(split))
    if len(idx) == 0:
        raise InvalidArgument(f"split {split!r} is empty")
    levels = np.asarray(dataset.arrays["product_level"])[idx]
    mods = [m for m in dataset.registry if m.standardized]
    acc: dict[str, _Moments] = {}
    for m in mods:
        keys = [BandStats.key(m.name, lv) for lv in PRODUCT_LEVELS] + [m.name] if m.name == OPTICAL else [m.name]
        for k in keys:
            acc[k] = _Moments(m.band_count)
    for start in range(0, len(idx), chunk):
        sel = idx[start : start + chunk]
        lv = levels[start : start + chunk]
        for m in mods:
            block = np.asarray(dataset.arrays[m.name][sel], dtype=np.float64)
            if m.is_pixel:
                flat = lambda b: np.moveaxis(b, 1, 0).reshape(m.band_count, -1)  # noqa: E731
            else:
                flat = lambda b: b.T  # noqa: E731
            if m.name == OPTICAL:
                acc[m.name].update(flat(block))
                for li, name in enumerate(PRODUCT_LEVELS):
                    if (lv == li).any():
                        acc[BandStats.key(m.name, name)].update(flat(block[lv == li]))
            else:
                acc[m.name].update(flat(block))
    mean, std, warnings = {}, {}, []
    for k, mom in acc.items():
        if k == OPTICAL:
            continue
        if mom.n.max() == 0:
            if k.startswith(OPTICAL + "/"):
                mom = acc[OPTICAL]
                warnings.append(f"{k}: no samples in split; using pooled optical statistics")
            else:
                raise InvalidArgument(f"{k}: no finite values in split {split!r}")
        mu, sd = mom.result()
        low = sd < STD_FLOOR
        if low.any():
            warnings.append(f"{k}: bands {np.nonzero(low)[0].tolist()} have zero variance; std floored at {STD_FLOOR}")
            sd = np.maximum(sd, STD_FLOOR)
        mean[k], std[k] = mu, sd
    return BandStats(mean, std, warnings)
