"""Scaling analysis: compute-optimal frontier, power-law fits, break
detection, incremental cost-effectiveness, and rank correlation.

The power-law fitter is a self-contained Levenberg-Marquardt loop on raw
residuals of y = C * x^e, initialized from ordinary least squares in
log-log space. Spearman's rho uses average ranks for ties; its two-sided
p-value is exact (permutation distribution via a subset dynamic program)
for n <= 12 and a t-approximation above.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict, field
from typing import Sequence

import numpy as np
from scipy.special import stdtr

from .config import ModelConfig
from .trainer import RunLog


# ---------------------------------------------------------------------------
# compute-optimal frontier


@dataclass(frozen=True)
class FrontierPoint:
    flops_bin: tuple[float, float]
    flops: float
    loss: float
    source: tuple[str, int]          # (run id, step)
    covariates: tuple[float, float]  # (model size, tokens seen)

    def to_dict(self) -> dict:
        return asdict(self)


def compute_optimal_frontier(runs: Sequence[RunLog],
                             n_bins: int = 32) -> list[FrontierPoint]:
    """Per log-spaced FLOPs bin, the record with minimum eval loss.

    Bins span [min, max] FLOPs over all records; empty bins are omitted.
    """
    from . import costmodel
    records = []
    for run in runs:
        size = costmodel.count_params(run.config)
        for (step, tokens, flops, _tl, eval_loss, _pp) in run.records:
            records.append((flops, eval_loss, run.run_id, step, size, tokens))
    if not records:
        raise ValueError("no records in any run")
    flops_all = np.array([r[0] for r in records])
    lo, hi = flops_all.min(), flops_all.max()
    edges = np.logspace(np.log10(lo), np.log10(hi), n_bins + 1)
    # guard against log/exp round-trip error at both ends of the range
    edges[0] = min(edges[0], lo)
    edges[-1] = max(np.nextafter(edges[-1], np.inf), np.nextafter(hi, np.inf))
    out = []
    for b in range(n_bins):
        in_bin = [r for r in records if edges[b] <= r[0] < edges[b + 1]]
        if not in_bin:
            continue
        best = min(in_bin, key=lambda r: (r[1], r[0]))
        out.append(FrontierPoint(
            flops_bin=(float(edges[b]), float(edges[b + 1])),
            flops=float(best[0]), loss=float(best[1]),
            source=(best[2], best[3]),
            covariates=(float(best[4]), float(best[5]))))
    return out


# ---------------------------------------------------------------------------
# power-law fitting


@dataclass(frozen=True)
class PowerFit:
    """y = C * x^e with raw-space goodness of fit."""

    c: float
    e: float
    r2: float
    n: int
    domain: tuple[float, float]
    converged: bool = True

    def predict(self, x):
        return self.c * np.asarray(x, dtype=float) ** self.e

    def to_dict(self) -> dict:
        return asdict(self)


def _check_points(points):
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("points must be an (n, 2) array of (x, y)")
    if pts.shape[0] < 3:
        raise ValueError("need at least 3 points")
    if (pts <= 0).any():
        raise ValueError("all x and y must be positive")
    return pts[:, 0], pts[:, 1]


def fit_power_law(points, log_space: bool = False,
                  max_iter: int = 500, lambda0: float = 1e-3) -> PowerFit:
    """Least-squares fit of y = C * x^e.

    Raw-space residuals are minimized by Levenberg-Marquardt: the
    damping factor starts at ``lambda0``, grows 10x on a rejected step
    and shrinks 10x on an accepted one; iteration stops at a relative
    step below 1e-10. Initial (C, e) comes from OLS on (ln x, ln y).
    ``log_space=True`` skips the LM refinement and returns the log-OLS
    solution directly.
    """
    x, y = _check_points(points)
    lx, ly = np.log(x), np.log(y)
    e0, lc0 = np.polyfit(lx, ly, 1)
    c, e = float(np.exp(lc0)), float(e0)
    if log_space:
        fit = PowerFit(c=c, e=e, r2=0.0, n=len(x), domain=(x.min(), x.max()))
        return PowerFit(c=c, e=e, r2=r_squared(points, fit), n=len(x),
                        domain=(float(x.min()), float(x.max())))

    lam = lambda0
    converged = False

    def sse(cc, ee):
        r = y - cc * x ** ee
        return float(r @ r)

    best_sse = sse(c, e)
    for _ in range(max_iter):
        pred = c * x ** e
        r = y - pred
        # Jacobian of residuals wrt (C, e)
        j_c = -(x ** e)
        j_e = -pred * np.log(x)
        jtj = np.array([[j_c @ j_c, j_c @ j_e],
                        [j_e @ j_c, j_e @ j_e]])
        jtr = -np.array([j_c @ r, j_e @ r])
        aug = jtj + lam * np.diag(np.diag(jtj))
        try:
            delta = np.linalg.solve(aug, jtr)
        except np.linalg.LinAlgError:
            lam *= 10
            continue
        c_new, e_new = c + delta[0], e + delta[1]
        if c_new <= 0 or not np.isfinite([c_new, e_new]).all():
            lam *= 10
            continue
        new_sse = sse(c_new, e_new)
        if new_sse <= best_sse:
            rel = np.abs(delta) / (np.abs([c, e]) + 1e-300)
            c, e, best_sse = c_new, e_new, new_sse
            lam = max(lam / 10, 1e-300)
            if rel.max() < 1e-10:
                converged = True
                break
        else:
            lam *= 10
            if lam > 1e300:
                break
    fit = PowerFit(c=c, e=e, r2=0.0, n=len(x),
                   domain=(float(x.min()), float(x.max())),
                   converged=converged)
    return PowerFit(c=c, e=e, r2=r_squared(points, fit), n=len(x),
                    domain=fit.domain, converged=converged)


def r_squared(points, fit: PowerFit) -> float:
    """1 - SS_res / SS_tot, totals taken about the mean of y."""
    pts = np.asarray(points, dtype=float)
    if pts.shape[0] < 2:
        raise ValueError("need at least 2 points")
    x, y = pts[:, 0], pts[:, 1]
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0:
        raise ValueError("zero variance in y; r^2 undefined")
    ss_res = float(((y - fit.predict(x)) ** 2).sum())
    return 1.0 - ss_res / ss_tot


# ---------------------------------------------------------------------------
# break detection


@dataclass(frozen=True)
class BreakReport:
    threshold: float
    fit_low: PowerFit
    fit_high: PowerFit
    combined_r2: float
    is_break: bool

    def to_dict(self) -> dict:
        return {"threshold": self.threshold,
                "fit_low": self.fit_low.to_dict(),
                "fit_high": self.fit_high.to_dict(),
                "combined_r2": self.combined_r2,
                "is_break": self.is_break}


def detect_break(points, candidate_thresholds: Sequence[float],
                 min_exponent_gap: float = 0.02) -> BreakReport:
    """Two-regime power-law fit over candidate split thresholds.

    For each candidate with >= 3 points on both sides, both sides are
    fitted; the winner maximizes the SSE-weighted combined r^2 (one
    minus pooled residual sum over pooled total sum). ``is_break`` is
    false when the two exponents differ by less than
    ``min_exponent_gap``.
    """
    pts = np.asarray(points, dtype=float)
    x, y = pts[:, 0], pts[:, 1]
    ss_tot = float(((y - y.mean()) ** 2).sum())
    best = None
    for thr in candidate_thresholds:
        low = pts[x < thr]
        high = pts[x >= thr]
        if len(low) < 3 or len(high) < 3:
            continue
        fit_lo = fit_power_law(low)
        fit_hi = fit_power_law(high)
        sse = float(((low[:, 1] - fit_lo.predict(low[:, 0])) ** 2).sum())
        sse += float(((high[:, 1] - fit_hi.predict(high[:, 0])) ** 2).sum())
        combined = 1.0 - sse / ss_tot
        if best is None or combined > best[0]:
            best = (combined, float(thr), fit_lo, fit_hi)
    if best is None:
        raise ValueError("no candidate threshold leaves >= 3 points per side")
    combined, thr, fit_lo, fit_hi = best
    return BreakReport(threshold=thr, fit_low=fit_lo, fit_high=fit_hi,
                       combined_r2=combined,
                       is_break=bool(abs(fit_lo.e - fit_hi.e)
                                     >= min_exponent_gap))


# ---------------------------------------------------------------------------
# ICER


@dataclass(frozen=True)
class IcerEntry:
    from_config: ModelConfig
    to_config: ModelConfig
    delta_perplexity: float
    delta_flops: float
    icer: float                  # perplexity reduction per FLOP
    icer_per_1e15: float         # conventional reporting unit

    def to_dict(self) -> dict:
        return {"from_config": self.from_config.to_dict(),
                "to_config": self.to_config.to_dict(),
                "delta_perplexity": self.delta_perplexity,
                "delta_flops": self.delta_flops,
                "icer": self.icer, "icer_per_1e15": self.icer_per_1e15}


def icer(ladder: Sequence[tuple[ModelConfig, float, float]]) -> list[IcerEntry]:
    """Incremental cost-effectiveness along a cost-ordered ladder.

    Entry i compares rung i to rung i-1: perplexity reduction divided by
    additional FLOPs. The ladder must be strictly increasing in FLOPs;
    no entry is produced for the first rung.
    """
    out = []
    for i in range(1, len(ladder)):
        cfg_prev, ppl_prev, flops_prev = ladder[i - 1]
        cfg, ppl, flops = ladder[i]
        d_flops = flops - flops_prev
        if d_flops <= 0:
            raise ValueError("ladder is not strictly cost-increasing")
        d_ppl = ppl_prev - ppl
        out.append(IcerEntry(from_config=cfg_prev, to_config=cfg,
                             delta_perplexity=d_ppl, delta_flops=d_flops,
                             icer=d_ppl / d_flops,
                             icer_per_1e15=d_ppl / d_flops * 1e15))
    return out


# ---------------------------------------------------------------------------
# Spearman rank correlation


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    i = 0
    sorted_vals = values[order]
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1  # 1-based average rank
        i = j + 1
    return ranks


def _exact_perm_pvalue(rx: np.ndarray, ry: np.ndarray, rho_obs: float) -> float:
    """Two-sided exact permutation p-value for Spearman's rho.

    Under permutation the rank multisets are fixed, so rho is a strictly
    increasing affine function of T = sum(rx_i * ry_perm(i)). The exact
    distribution of T over all n! assignments is built with a
    subset-sum dynamic program (ranks are half-integers; scaling by 4
    makes products integral).
    """
    n = len(rx)
    a = np.rint(rx * 2).astype(np.int64)
    b = np.rint(ry * 2).astype(np.int64)
    max_t = int(np.sort(a) @ np.sort(b))
    # dp[mask] = counts over T values using ranks b[j] for j in mask,
    # assigned to positions 0..popcount(mask)-1
    dp = {0: np.zeros(max_t + 1, dtype=float)}
    dp[0][0] = 1.0
    for mask in range(1, 1 << n):
        k = bin(mask).count("1") - 1  # position being assigned
        acc = np.zeros(max_t + 1, dtype=float)
        rem = mask
        while rem:
            j = (rem & -rem).bit_length() - 1
            rem &= rem - 1
            prod = int(a[k] * b[j])
            prev = dp[mask ^ (1 << j)]
            if prod >= 0:
                acc[prod:] += prev[:max_t + 1 - prod]
            else:
                acc[:prod] += prev[-prod:]
        dp[mask] = acc
    dist = dp[(1 << n) - 1]
    total = dist.sum()
    t_vals = np.arange(max_t + 1)
    # map T back to rho: rho = (T/4 - n*mean_rx*mean_ry) / (n*sx*sy)
    mean_x, mean_y = rx.mean(), ry.mean()
    sx = np.sqrt(((rx - mean_x) ** 2).mean())
    sy = np.sqrt(((ry - mean_y) ** 2).mean())
    rho_vals = (t_vals / 4.0 - n * mean_x * mean_y) / (n * sx * sy)
    extreme = np.abs(rho_vals) >= abs(rho_obs) - 1e-12
    return float(dist[extreme].sum() / total)


def spearman(x: Sequence[float], y: Sequence[float]) -> tuple[float, float]:
    """Spearman's rho with average ranks for ties, plus a two-sided
    p-value (exact permutation for n <= 12, t-approximation beyond)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) != len(y) or len(x) < 3:
        raise ValueError("need two equal-length series with n >= 3")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise ValueError("constant series; rho undefined")
    rx = _average_ranks(x)
    ry = _average_ranks(y)
    rho = float(np.corrcoef(rx, ry)[0, 1])
    n = len(x)
    if n <= 12:
        p = _exact_perm_pvalue(rx, ry, rho)
    else:
        if abs(rho) >= 1.0:
            p = 0.0
        else:
            t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
            p = 2.0 * float(stdtr(n - 2, -abs(t)))
    return rho, min(1.0, p)
