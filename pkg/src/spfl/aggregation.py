"""Server-side aggregation rules.

Every rule takes a list of client submissions (``ParamVector`` or 1-D arrays)
and returns the same type as its first input.
"""
from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, ParameterError
from .nn import ParamVector


class AggregatorMethod(str, enum.Enum):
    FedAvg = "FedAvg"
    Median = "Median"
    RFA = "RFA"
    RLR = "RLR"


class ConvergenceWarning(UserWarning):
    pass


@dataclass
class AggregatorConfig:
    method: AggregatorMethod = AggregatorMethod.FedAvg
    weights: Sequence[float] | None = None
    eta: float = 1.0
    theta: int = 4
    weiszfeld_iters: int = 10
    weiszfeld_eps: float = 1e-6

    def __post_init__(self):
        self.method = AggregatorMethod(self.method)
        if self.theta < 0:
            raise ParameterError("RLR threshold must be >= 0")
        if not self.weiszfeld_eps > 0:
            raise ParameterError("weiszfeld_eps must be > 0")
        if self.weights is not None and (min(self.weights) < 0 or sum(self.weights) <= 0):
            raise ParameterError("weights must be nonnegative with a positive sum")


def _stack(updates) -> np.ndarray:
    if len(updates) == 0:
        raise ConfigError("no updates to aggregate")
    rows = [u.values if isinstance(u, ParamVector) else np.asarray(u) for u in updates]
    if len({r.shape for r in rows}) != 1:
        raise ConfigError("updates differ in length")
    return np.stack(rows)


def _wrap(template, values: np.ndarray):
    if isinstance(template, ParamVector):
        return template.with_values(values.astype(template.values.dtype))
    return values


def fedavg(updates, weights=None):
    """Weighted arithmetic mean per coordinate."""
    w = _stack(updates)
    if weights is None:
        return _wrap(updates[0], w.mean(axis=0))
    a = np.asarray(weights, dtype=np.float64)
    if a.shape != (len(w),) or a.min() < 0 or a.sum() <= 0:
        raise ParameterError("weights must be nonnegative, one per update, with positive sum")
    return _wrap(updates[0], (a @ w.astype(np.float64)) / a.sum())


def coordinate_median(updates):
    """Per-coordinate median; an even count averages the two central values."""
    w = _stack(updates)
    return _wrap(updates[0], np.median(w, axis=0))


def _objective(points: np.ndarray, m: np.ndarray) -> float:
    return float(np.linalg.norm(points - m, axis=1).sum())


def geometric_median(updates, iters: int = 10, eps: float = 1e-6, ftol: float = 1e-10,
                     return_info: bool = False):
    """Smoothed Weiszfeld iteration started at the mean.

    Returns the best candidate seen (iterates and input points) by the
    sum-of-distances objective.  Warns with :class:`ConvergenceWarning` when the
    relative objective change is still above ``ftol`` after ``iters`` steps.
    """
    pts = _stack(updates).astype(np.float64)
    m = pts.mean(axis=0)
    best, best_obj = m, _objective(pts, m)
    prev = best_obj
    converged = False
    for _ in range(iters):
        d = np.maximum(np.linalg.norm(pts - m, axis=1), eps)
        beta = 1.0 / d
        m = beta @ pts / beta.sum()
        obj = _objective(pts, m)
        if obj < best_obj:
            best, best_obj = m, obj
        if abs(prev - obj) <= ftol * max(prev, 1e-300):
            converged = True
            break
        prev = obj
    for p in pts:
        obj = _objective(pts, p)
        if obj < best_obj:
            best, best_obj = p, obj
    if not converged:
        warnings.warn(f"Weiszfeld did not converge in {iters} iterations", ConvergenceWarning, stacklevel=2)
    out = _wrap(updates[0], best)
    return (out, converged) if return_info else out


def rlr_rates(deltas, theta: int, eta: float) -> np.ndarray:
    """Per-coordinate server rate: +eta where |sum of signs| >= theta, else -eta."""
    signs = np.sign(_stack(deltas)).sum(axis=0)
    return np.where(np.abs(signs) >= theta, eta, -eta)


def rlr_aggregate(deltas, theta: int, eta: float = 1.0, base=None):
    """``base + rate * mean(deltas)`` with the sign-agreement learning rate."""
    d = _stack(deltas)
    step = rlr_rates(deltas, theta, eta) * d.mean(axis=0)
    if base is not None:
        base_values = base.values if isinstance(base, ParamVector) else np.asarray(base)
        return _wrap(base if isinstance(base, ParamVector) else deltas[0], base_values + step)
    return _wrap(deltas[0], step)


def aggregate(cfg: AggregatorConfig, global_params: ParamVector, submissions: list[ParamVector]) -> ParamVector:
    """Apply the configured rule to full-model submissions."""
    if cfg.method is AggregatorMethod.FedAvg:
        return fedavg(submissions, cfg.weights)
    if cfg.method is AggregatorMethod.Median:
        return coordinate_median(submissions)
    if cfg.method is AggregatorMethod.RFA:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            return geometric_median(submissions, cfg.weiszfeld_iters, cfg.weiszfeld_eps)
    deltas = [s.values - global_params.values for s in submissions]
    return rlr_aggregate(deltas, cfg.theta, cfg.eta, base=global_params)
