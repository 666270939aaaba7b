"""Label-efficiency sweep and the on-disk results store."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import fields
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from ..errors import CorruptDataset, InvalidArgument
from ..model import MaskedEncoder
from .downstream import DownstreamTask, stratified_subsample
from .probe import MetricReport, ProbeConfig, linear_probe

DEFAULT_FRACTIONS = (0.01, 0.05, 0.2, 1.0)


def sweep_train_subset(task: DownstreamTask, fraction: float, seed: int) -> DownstreamTask:
    """The task restricted to the stratified training subset for (fraction, seed)."""
    rng = np.random.default_rng([seed, int(round(fraction * 1e6))])
    return task.with_train(stratified_subsample(task.strata, task.splits["train"], fraction, rng))


def label_efficiency_sweep(
    checkpoints: Mapping[str, MaskedEncoder],
    task: DownstreamTask,
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    seeds: Sequence[int] = (0,),
    cfg: ProbeConfig | None = None,
) -> list[MetricReport]:
    """Linear-probe every checkpoint at every training fraction and seed.

    The test split is fixed; the training subset for a (fraction, seed)
    pair is the same for every checkpoint so curves are paired.
    """
    cfg = cfg or ProbeConfig()
    bad = [f for f in fractions if not 0.0 < f <= 1.0]
    if bad:
        raise InvalidArgument(f"fractions must lie in (0, 1]: {bad}")
    reports = []
    for seed in seeds:
        for frac in fractions:
            sub = sweep_train_subset(task, frac, seed)
            run_cfg = ProbeConfig(**{**cfg.to_dict(), "seed": seed})
            for name, enc in checkpoints.items():
                reports.append(linear_probe(enc, sub, run_cfg, name, frac))
    return reports


# ---------------------------------------------------------------------------
# results store

REPORT_FIELDS = tuple(f.name for f in fields(MetricReport))


class ResultsStore:
    """JSON store keyed by (checkpoint, task, mode, fraction, seed), mirrored to CSV.

    Re-adding a key overwrites it; the CSV is an append-only log of
    every report written.
    """

    def __init__(self, directory: str | os.PathLike):
        self.dir = Path(directory)
        self.json_path = self.dir / "results.json"
        self.csv_path = self.dir / "results.csv"
        self.records: dict[str, dict] = {}
        if self.json_path.exists():
            try:
                self.records = json.loads(self.json_path.read_text())
            except json.JSONDecodeError as exc:
                raise CorruptDataset(f"results store {self.json_path} is not valid JSON: {exc}") from exc

    def add(self, reports: Iterable[MetricReport]) -> None:
        reports = list(reports)
        self.dir.mkdir(parents=True, exist_ok=True)
        new_csv = not self.csv_path.exists()
        with open(self.csv_path, "a", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
            if new_csv:
                w.writeheader()
            for r in reports:
                w.writerow(r.to_dict())
                self.records[r.key()] = r.to_dict()
        tmp = self.json_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.records, indent=1, sort_keys=True))
        os.replace(tmp, self.json_path)

    def reports(self) -> list[MetricReport]:
        return [MetricReport(**v) for v in self.records.values()]

    def __len__(self) -> int:
        return len(self.records)
