"""Distribution-alignment and safety metrics."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class SampleSet:
    samples: np.ndarray
    label: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).ravel()
        if not np.all(np.isfinite(self.samples)):
            raise ValueError(f"sample set {self.label!r} contains non-finite values")

    def __len__(self) -> int:
        return len(self.samples)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([self.label or "value"])
            for x in self.samples:
                w.writerow([repr(float(x))])


def _values(a) -> np.ndarray:
    x = a.samples if isinstance(a, SampleSet) else np.asarray(a, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("empty sample set")
    return x


def zscore(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    sd = x.std()
    return (x - x.mean()) / (sd if sd > 0 else 1.0)


def w2_distance(a, b, normalize: bool = False, grid: int | None = None) -> float:
    """1-D 2-Wasserstein distance between two empirical distributions.

    By default this is exact: both quantile functions are step functions, so
    the integral of their squared difference is summed over the merged set of
    breakpoints.  ``grid=n`` instead averages over n midpoint quantile levels
    (sorted-sample lookup).  ``normalize`` z-scores each set first.
    """
    x, y = np.sort(_values(a)), np.sort(_values(b))
    if normalize:
        x, y = np.sort(zscore(x)), np.sort(zscore(y))
    n, m = len(x), len(y)
    if grid is not None:
        if grid < 1:
            raise ValueError("grid must be positive")
        q = (np.arange(grid) + 0.5) / grid
        qx = x[np.minimum((q * n).astype(np.int64), n - 1)]
        qy = y[np.minimum((q * m).astype(np.int64), m - 1)]
        return float(np.sqrt(np.mean((qx - qy) ** 2)))
    if n == m:
        return float(np.sqrt(np.mean((x - y) ** 2)))
    # breakpoints i/n and j/m; integer arithmetic keeps them exact
    cuts = np.union1d(np.arange(n + 1) * m, np.arange(m + 1) * n)
    widths = np.diff(cuts) / (n * m)
    mids = (cuts[:-1] + cuts[1:]) / 2
    ix = np.minimum((mids // m).astype(np.int64), n - 1)
    iy = np.minimum((mids // n).astype(np.int64), m - 1)
    return float(np.sqrt(np.sum(widths * (x[ix] - y[iy]) ** 2)))


def bias_to_threshold(mean_cost: float, d: float) -> float:
    return abs(mean_cost - d)


def tail_probability(a, z: float) -> float:
    """Fraction of samples >= z."""
    return float(np.mean(_values(a) >= z))


def tail_curve(a, zs) -> np.ndarray:
    x = np.sort(_values(a))
    return 1.0 - np.searchsorted(x, np.asarray(zs, dtype=np.float64), side="left") / len(x)


def heavy_tail_stats(x) -> dict:
    """Skewness, excess kurtosis and the mass beyond mean + 2 std."""
    x = _values(x)
    mu, sd = x.mean(), x.std()
    if sd == 0:
        return {"mean": float(mu), "std": 0.0, "skewness": 0.0, "kurtosis": 0.0, "tail_2sd": 0.0}
    z = (x - mu) / sd
    return {
        "mean": float(mu), "std": float(sd), "skewness": float(np.mean(z**3)),
        "kurtosis": float(np.mean(z**4) - 3.0), "tail_2sd": float(np.mean(x >= mu + 2 * sd)),
    }


def _average_ranks(x) -> np.ndarray:
    vals, inv, counts = np.unique(np.asarray(x, dtype=np.float64), return_inverse=True, return_counts=True)
    upper = np.cumsum(counts)
    return ((upper - counts + 1 + upper) / 2.0)[inv]


def spearman(x, y) -> float:
    """Spearman rank correlation with average ranks for ties (nan if either side is constant)."""
    rx, ry = _average_ranks(x), _average_ranks(y)
    if rx.std() == 0 or ry.std() == 0:
        return float("nan")
    return float(np.corrcoef(rx, ry)[0, 1])


# -- ablation tables -----------------------------------------------------------------

TABLE_METRICS = ("mid_return", "mid_true_cost", "final_return", "final_true_cost", "bias", "w2")
TABLE_SCHEMA_VERSION = 1


def assemble_ablation_report(runs: dict, order=None) -> list[dict]:
    """One row per configuration with mean and std over seeds.

    ``runs`` maps a configuration label to a list of per-seed summaries (dicts
    holding any of ``TABLE_METRICS``) or objects with a ``summary`` attribute.
    Runs within a configuration must share the threshold if they record one.
    """
    labels = list(order) if order is not None else list(runs)
    rows = []
    for label in labels:
        summaries = [getattr(r, "summary", r) for r in runs[label]]
        if not summaries:
            raise ValueError(f"configuration {label!r} has no runs")
        thresholds = {getattr(r, "threshold", None) for r in runs[label]} - {None}
        if len(thresholds) > 1:
            raise ValueError(f"configuration {label!r} mixes thresholds {sorted(thresholds)}")
        row = {"config": label, "n_seeds": len(summaries)}
        for k in TABLE_METRICS:
            vals = [s[k] for s in summaries if k in s and s[k] is not None]
            if vals:
                row[f"{k}_mean"] = float(np.mean(vals))
                row[f"{k}_std"] = float(np.std(vals))
        rows.append(row)
    return rows


def write_table(rows: list[dict], directory, name: str = "ablation") -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cols = ["config", "n_seeds"] + sorted({k for r in rows for k in r} - {"config", "n_seeds"})
    csv_path, json_path = directory / f"{name}.csv", directory / f"{name}.json"
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow(r)
    json_path.write_text(json.dumps({"schema_version": TABLE_SCHEMA_VERSION, "rows": rows}, indent=2))
    return csv_path, json_path
