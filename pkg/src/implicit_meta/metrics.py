"""Timers, allocation accounting and approximate-vs-exact comparisons."""

from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .hypergrad import (
    ApproxKind,
    DEFAULT_EXACT_CAP,
    ApproxSpec,
    HypergradError,
    approx_inverse_hvp,
    exact_inv_hvp,
)


@dataclass
class PhaseTimer:
    label: str
    accumulated_ns: int = 0
    count: int = 0

    @contextmanager
    def time(self):
        t0 = time.perf_counter_ns()
        try:
            yield self
        finally:
            self.add(time.perf_counter_ns() - t0)

    def add(self, ns: int) -> None:
        self.accumulated_ns += max(int(ns), 0)
        self.count += 1

    @property
    def mean_ns(self) -> float:
        return self.accumulated_ns / self.count if self.count else 0.0


def measure(approx_call):
    """Run ``approx_call`` and return (result, wall_time_ns, transient_floats).

    The call must return an :class:`ApproxReport`; wall time is measured
    around the whole call, allocations come from the approximator itself.
    """
    t0 = time.perf_counter_ns()
    report = approx_call()
    return report.result, time.perf_counter_ns() - t0, report.transient_floats_allocated


@dataclass(frozen=True)
class HessianComparison:
    meta_epoch: int
    method: str
    rel_l2_error: float
    cosine_similarity: float
    exact_stable: bool


def compare_vectors(approx: np.ndarray, exact: np.ndarray) -> tuple[float, float]:
    diff = np.linalg.norm(approx - exact)
    ref = np.linalg.norm(exact)
    rel = diff / ref if ref > 0 else float(diff)
    denom = np.sqrt((approx @ approx) * (exact @ exact))
    cos = float(np.clip((approx @ exact) / denom, -1.0, 1.0)) if denom > 0 else 0.0
    return float(rel), cos


def compare_to_exact(hvp, v: np.ndarray, specs, meta_epoch: int, exact_cap: int | None = None):
    """Compare each approximation in ``specs`` against the exact inverse HVP at one point.

    An exact solve that fails yields a single ``exact_stable=False`` entry
    and no comparisons for that point.
    """
    specs = [specs] if isinstance(specs, ApproxSpec) else list(specs)
    cap = exact_cap or max((s.exact_cap for s in specs), default=DEFAULT_EXACT_CAP)
    try:
        exact = exact_inv_hvp(hvp, v, cap=cap).result
    except HypergradError:
        return [HessianComparison(meta_epoch, "exact", float("nan"), float("nan"), False)]
    out = []
    for spec in specs:
        try:
            # the exact solve is deterministic, so it is not repeated
            approx = exact if spec.kind == ApproxKind.EXACT else approx_inverse_hvp(spec, hvp, v).result
        except HypergradError:
            out.append(HessianComparison(meta_epoch, str(spec), float("inf"), float("nan"), True))
            continue
        rel, cos = compare_vectors(approx, exact)
        out.append(HessianComparison(meta_epoch, str(spec), rel, cos, True))
    return out


def comparison_due(meta_epoch: int, every_k: int) -> bool:
    return every_k > 0 and meta_epoch > 0 and meta_epoch % every_k == 0
