"""Iteration-count studies, angle and residual statistics, fits and plots."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .krylov import NetworkPreconditioner, fgmres

__all__ = [
    "BenchSummary",
    "FitResult",
    "bench",
    "evolution_table",
    "fit_exponential",
    "fit_linear",
    "read_bench",
    "report",
    "sine_product_estimate",
    "svg_plot",
]

SETTINGS = ("none", "static", "dynamic")


@dataclass(frozen=True)
class FitResult:
    """Least-squares fit ``y = a j + b`` (linear) or ``y = exp(beta) exp(alpha j)``.

    For the exponential kind ``coef = (alpha, beta)`` and ``rss`` is measured
    on ``log y``.
    """

    kind: str
    coef: tuple
    rss: float
    n_points: int

    def __call__(self, j):
        j = np.asarray(j, dtype=np.float64)
        if self.kind == "linear":
            return self.coef[0] * j + self.coef[1]
        return np.exp(self.coef[1] + self.coef[0] * j)


def _lstsq_line(j, y):
    j = np.asarray(j, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if j.shape != y.shape or j.ndim != 1:
        raise ValueError("abscissae and ordinates must be 1-d of equal length")
    if np.unique(j).size < 2:
        raise ValueError("need at least two distinct abscissae")
    if not (np.all(np.isfinite(j)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite data")
    X = np.column_stack([j, np.ones_like(j)])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    rss = float(np.sum((X @ coef - y) ** 2))
    return (float(coef[0]), float(coef[1])), rss


def fit_linear(j, y) -> FitResult:
    coef, rss = _lstsq_line(j, y)
    return FitResult("linear", coef, rss, len(y))


def fit_exponential(j, y) -> FitResult:
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0):
        raise ValueError("exponential fit needs strictly positive data")
    coef, rss = _lstsq_line(j, np.log(y))
    return FitResult("exponential", coef, rss, len(y))


def sine_product_estimate(mean_sines):
    """Return ``(mean ** M, product)`` for the per-iteration mean sines."""
    s = np.asarray(mean_sines, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ValueError("expected a non-empty list of sines")
    return float(s.mean() ** s.size), float(np.prod(s))


# --- iteration-count study --------------------------------------------------


@dataclass
class BenchSummary:
    """Per-instance iteration counts for each preconditioner setting."""

    counts: dict
    converged: dict
    tol: float
    max_iter: int
    grid_n: int
    seeds: list = field(default_factory=list)

    def stats(self, setting):
        c = np.asarray(self.counts[setting], dtype=np.float64)
        return {"mean": float(c.mean()), "min": int(c.min()), "max": int(c.max())}

    def mean(self, setting):
        return self.stats(setting)["mean"]

    @property
    def n_failed(self):
        return {k: int(np.sum(~np.asarray(v))) for k, v in self.converged.items()}


def _solve_count(instance, params, tol, max_iter):
    pre = None if params is None else NetworkPreconditioner(params, instance.d)
    _, trace, iters = fgmres(instance.A, instance.b, pre, tol=tol, max_iter=max_iter)
    return max(1, iters), bool(trace.converged)


def bench(dataset, checkpoints, tol=1e-6, max_iter=400, out_dir=None, workers=1) -> BenchSummary:
    """Solve every instance with no, static and dynamic preconditioning.

    Parameters
    ----------
    dataset : sequence of ProblemInstance
        Test geometries.
    checkpoints : dict
        ``{"static": ModelParams, "dynamic": ModelParams}``; missing settings
        are skipped.
    workers : int
        Thread count for the solves. Results are collected in dataset order,
        so the output does not depend on scheduling.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("empty dataset")
    settings = {"none": None}
    for name in ("static", "dynamic"):
        if checkpoints.get(name) is not None:
            settings[name] = checkpoints[name]
    counts, conv = {}, {}
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for name, params in settings.items():
            res = list(pool.map(lambda inst: _solve_count(inst, params, tol, max_iter), dataset))
            counts[name] = [r[0] for r in res]
            conv[name] = [r[1] for r in res]
    summary = BenchSummary(counts, conv, tol, max_iter, dataset[0].grid_n,
                           [inst.mu.seed if inst.mu is not None else i for i, inst in enumerate(dataset)])
    if out_dir is not None:
        write_bench(Path(out_dir), summary)
    return summary


def write_bench(out_dir: Path, summary: BenchSummary):
    out_dir.mkdir(parents=True, exist_ok=True)
    names = list(summary.counts)
    with open(out_dir / "bench.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed"] + [f"iters_{n}" for n in names] + [f"converged_{n}" for n in names])
        for i, seed in enumerate(summary.seeds):
            w.writerow([seed] + [summary.counts[n][i] for n in names]
                       + [int(summary.converged[n][i]) for n in names])
    with open(out_dir / "bench_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["setting", "mean", "min", "max", "n_failed", "tol", "max_iter", "grid_n"])
        for n in names:
            st = summary.stats(n)
            w.writerow([n, repr(st["mean"]), st["min"], st["max"], summary.n_failed[n],
                        repr(summary.tol), summary.max_iter, summary.grid_n])


def read_bench(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: empty")
    return {k: [int(r[k]) for r in rows] for k in rows[0] if k.startswith("iters_")}


# --- reporting --------------------------------------------------------------


def evolution_table(per_epoch, kind):
    """Summaries of per-iteration curves, one row per epoch.

    ``per_epoch`` maps epoch to an ``(n_instances, M)`` array (sines or
    relative residuals). Each row carries the instance mean at ``j = M``,
    the largest positive and negative deviation from that mean across
    instances, and the fit of the mean curve over ``j = 1..M``.
    """
    rows = []
    for epoch in sorted(per_epoch):
        Y = np.atleast_2d(np.asarray(per_epoch[epoch], dtype=np.float64))
        mean = Y.mean(axis=0)
        j = np.arange(1, Y.shape[1] + 1)
        if kind == "sine":
            fit = fit_linear(j, mean) if j.size >= 2 else None
            stat = mean.mean()
        else:
            fit = fit_exponential(j, mean) if j.size >= 2 else None
            stat = mean[-1]
        ref = Y.mean(axis=1) if kind == "sine" else Y[:, -1]
        rows.append({"epoch": epoch, "value": float(stat),
                     "delta_plus": float(ref.max() - stat), "delta_minus": float(stat - ref.min()),
                     "fit": fit})
    return rows


def svg_plot(series, path, title="", xlabel="j", ylabel="", logy=False, width=480, height=320):
    """Write a polyline plot. ``series`` maps label to ``(x, y)``."""
    pad = 48
    xs = np.concatenate([np.asarray(x, float) for x, _ in series.values()])
    ys = np.concatenate([np.asarray(y, float) for _, y in series.values()])
    if logy:
        ys = np.log10(np.maximum(ys, 1e-300))
    x0, x1 = xs.min(), xs.max()
    y0, y1 = ys.min(), ys.max()
    x1 = x1 if x1 > x0 else x0 + 1
    y1 = y1 if y1 > y0 else y0 + 1

    def px(x, y):
        return (pad + (x - x0) / (x1 - x0) * (width - 2 * pad),
                height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad))

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
           f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
           f'<text x="{width / 2}" y="20" text-anchor="middle">{title}</text>',
           f'<text x="{width / 2}" y="{height - 10}" text-anchor="middle">{xlabel}</text>',
           f'<text x="12" y="{height / 2}" transform="rotate(-90 12 {height / 2})" '
           f'text-anchor="middle">{ylabel}{" (log10)" if logy else ""}</text>',
           f'<text x="{pad - 4}" y="{height - pad}" text-anchor="end" font-size="10">{y0:.3g}</text>',
           f'<text x="{pad - 4}" y="{pad + 4}" text-anchor="end" font-size="10">{y1:.3g}</text>']
    for k, (label, (x, y)) in enumerate(series.items()):
        y = np.asarray(y, float)
        if logy:
            y = np.log10(np.maximum(y, 1e-300))
        pts = " ".join("%.2f,%.2f" % px(a, b) for a, b in zip(np.asarray(x, float), y))
        color = colors[k % len(colors)]
        out.append(f'<polyline fill="none" stroke="{color}" points="{pts}"/>')
        out.append(f'<text x="{width - pad}" y="{pad + 14 * k}" text-anchor="end" '
                   f'font-size="10" fill="{color}">{label}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")


def _read_required(path, required):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        for col in required:
            if col not in cols:
                raise ValueError(f"{path}: missing column {col!r}")
        rows = list(reader)
    return cols, rows


def report(metrics_path, out_dir, traces=None, svg=True):
    """Render the sine-evolution table (and residual table when traces exist).

    Parameters
    ----------
    metrics_path : path
        CSV written during training.
    out_dir : path
        Destination of ``sine_table.csv``, ``residual_table.csv`` and plots.
    traces : dict, optional
        ``{epoch: (n_instances, M) relative residuals}``.

    Returns
    -------
    dict with the table rows.
    """
    cols, rows = _read_required(metrics_path, ["epoch", "phase", "mean_sine_1"])
    if not rows:
        raise ValueError(f"{metrics_path}: no epochs recorded")
    M = sum(1 for c in cols if c.startswith("mean_sine_"))
    for j in range(1, M + 1):
        if f"mean_sine_{j}" not in cols:
            raise ValueError(f"{metrics_path}: missing column 'mean_sine_{j}'")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    sine_rows = []
    series = {}
    for r in rows:
        s = np.array([float(r[f"mean_sine_{j}"]) for j in range(1, M + 1)])
        est, prod = sine_product_estimate(s)
        fit = fit_linear(np.arange(1, M + 1), s) if M >= 2 and len(rows) > 1 else None
        sine_rows.append({"epoch": int(r["epoch"]), "phase": r["phase"], "mean_sine": float(s.mean()),
                          "delta_plus": float(s.max() - s.mean()), "delta_minus": float(s.mean() - s.min()),
                          "product_estimate": est, "product": prod,
                          "fit_a": fit.coef[0] if fit else math.nan, "fit_b": fit.coef[1] if fit else math.nan})
        series[f'{r["phase"]} {r["epoch"]}'] = (np.arange(1, M + 1), s)
    header = list(sine_rows[0])
    with open(out_dir / "sine_table.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in sine_rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r.values()])

    result = {"sine": sine_rows}
    if traces:
        res_rows = evolution_table(traces, "residual")
        with open(out_dir / "residual_table.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "mean_rel_res_M", "delta_plus", "delta_minus", "alpha", "beta"])
            for r in res_rows:
                f = r["fit"]
                w.writerow([r["epoch"], repr(r["value"]), repr(r["delta_plus"]), repr(r["delta_minus"]),
                            repr(f.coef[0]) if f else "", repr(f.coef[1]) if f else ""])
        result["residual"] = res_rows
        if svg:
            svg_plot({f"epoch {e}": (np.arange(1, np.shape(t)[1] + 1), np.mean(t, axis=0))
                      for e, t in sorted(traces.items())},
                     out_dir / "residuals.svg", "relative residual", ylabel="||r_j||/||r_0||", logy=True)
    if svg:
        keep = dict(list(series.items())[:: max(1, len(series) // 6)])
        svg_plot(keep, out_dir / "sines.svg", "mean sine per iteration", ylabel="<|s_j|>")
    return result
