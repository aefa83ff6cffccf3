"""Inverse Hessian-vector product approximators and IFT hypergradient assembly.

All approximators take the Hessian only through a callable ``hvp(v) -> H v``.
Memory is accounted as the number of float64 slots held in temporaries
created inside the call, which is deterministic for a given (spec, dim).
"""

from __future__ import annotations

import enum
import time
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg

Vector = np.ndarray
Hvp = Callable[[Vector], Vector]

DEFAULT_EXACT_CAP = 8000
CG_TOL = 1e-10


class HypergradError(RuntimeError):
    pass


class DivergenceError(HypergradError):
    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration


class IllConditionedError(HypergradError):
    pass


class ApproxKind(str, enum.Enum):
    NEUMANN = "neumann"
    CG = "cg"
    IDENTITY = "identity"
    EXACT = "exact"


@dataclass(frozen=True)
class ApproxSpec:
    kind: ApproxKind
    terms: int = 0
    alpha: float = 0.1
    scale_by_alpha: bool = False
    steps: int = 0
    damping: float = 0.0
    exact_cap: int = DEFAULT_EXACT_CAP

    def __post_init__(self):
        object.__setattr__(self, "kind", ApproxKind(self.kind))
        if self.kind == ApproxKind.NEUMANN and (self.terms < 1 or self.alpha <= 0):
            raise ValueError("Neumann needs terms >= 1 and alpha > 0")
        if self.kind == ApproxKind.CG and self.steps < 1:
            raise ValueError("CG needs steps >= 1")

    @classmethod
    def neumann(cls, terms: int, alpha: float = 0.1, scale: bool = False) -> ApproxSpec:
        return cls(ApproxKind.NEUMANN, terms=terms, alpha=alpha, scale_by_alpha=scale)

    @classmethod
    def cg(cls, steps: int, damping: float = 0.0) -> ApproxSpec:
        return cls(ApproxKind.CG, steps=steps, damping=damping)

    @classmethod
    def identity(cls) -> ApproxSpec:
        return cls(ApproxKind.IDENTITY)

    @classmethod
    def exact(cls, cap: int = DEFAULT_EXACT_CAP) -> ApproxSpec:
        return cls(ApproxKind.EXACT, exact_cap=cap)

    @classmethod
    def parse(cls, text: str) -> ApproxSpec:
        """Parse ``neumann:3``, ``neumann:3:0.1:scaled``, ``cg:5``, ``identity``, ``exact``."""
        parts = text.strip().lower().split(":")
        kind = parts[0]
        try:
            if kind == "neumann":
                alpha = float(parts[2]) if len(parts) > 2 else 0.1
                scale = len(parts) > 3 and parts[3] == "scaled"
                return cls.neumann(int(parts[1]), alpha, scale)
            if kind == "cg":
                return cls.cg(int(parts[1]), float(parts[2]) if len(parts) > 2 else 0.0)
            if kind == "identity" and len(parts) == 1:
                return cls.identity()
            if kind == "exact":
                return cls.exact(int(parts[1]) if len(parts) > 1 else DEFAULT_EXACT_CAP)
        except (IndexError, ValueError) as exc:
            raise ValueError(f"malformed approximation spec {text!r}") from exc
        raise ValueError(f"unknown approximation spec {text!r}")

    def __str__(self) -> str:
        if self.kind == ApproxKind.NEUMANN:
            base = f"neumann:{self.terms}:{self.alpha:g}"
            return base + (":scaled" if self.scale_by_alpha else "")
        if self.kind == ApproxKind.CG:
            return f"cg:{self.steps}" + (f":{self.damping:g}" if self.damping else "")
        if self.kind == ApproxKind.EXACT and self.exact_cap != DEFAULT_EXACT_CAP:
            return f"exact:{self.exact_cap}"
        return self.kind.value

    @property
    def label(self) -> str:
        if self.kind == ApproxKind.NEUMANN:
            return f"Neumann({self.terms})"
        if self.kind == ApproxKind.CG:
            return f"CG({self.steps})"
        return self.kind.value.capitalize()


@dataclass(frozen=True)
class ApproxReport:
    result: Vector
    wall_time_ns: int
    transient_floats_allocated: int


def _finite_or_raise(x: Vector, what: str, iteration: int) -> None:
    if not np.all(np.isfinite(x)):
        raise DivergenceError(f"non-finite {what}", iteration)


def neumann_inv_hvp(hvp: Hvp, v: Vector, terms: int, alpha: float = 0.1, scale: bool = False,
                    max_growth: float | None = None) -> ApproxReport:
    """Truncated Neumann series p = sum_j (I - alpha H)^j v.

    With ``scale`` the sum is multiplied by alpha so it converges to H^-1 v
    when the spectral radius of (I - alpha H) is below one. ``max_growth``
    turns geometric blow-up of the running term (relative to the input)
    into a :class:`DivergenceError`; non-finite terms always raise.
    """
    if terms < 1:
        raise ValueError("terms must be >= 1")
    t0 = time.perf_counter_ns()
    v = np.array(v, dtype=np.float64)
    _finite_or_raise(v, "input vector", 0)
    p = v.copy()
    start_norm = np.linalg.norm(v)
    for j in range(1, terms + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            v -= alpha * hvp(v)
            p += v
        _finite_or_raise(v, "Neumann term", j)
        if max_growth is not None and np.linalg.norm(v) > max_growth * start_norm:
            raise DivergenceError("Neumann terms growing geometrically", j)
    if scale:
        p *= alpha
    # p, the running v and the hvp output
    return ApproxReport(p, time.perf_counter_ns() - t0, 3 * v.size)


def cg_inv_hvp(hvp: Hvp, v: Vector, steps: int, damping: float = 0.0, tol: float = CG_TOL) -> ApproxReport:
    """Plain conjugate gradient on (H + damping I) x = v from x0 = 0."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    t0 = time.perf_counter_ns()
    b = np.asarray(v, dtype=np.float64)
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rs = r @ r
    for k in range(1, steps + 1):
        if np.sqrt(rs) < tol:
            break
        Ap = hvp(p) + damping * p
        alpha = rs / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        _finite_or_raise(x, "CG iterate", k)
        rs_new = r @ r
        p = r + (rs_new / rs) * p
        rs = rs_new
    # x, r, p, Ap
    return ApproxReport(x, time.perf_counter_ns() - t0, 4 * b.size)


def identity_inv_hvp(v: Vector) -> ApproxReport:
    t0 = time.perf_counter_ns()
    return ApproxReport(v, time.perf_counter_ns() - t0, 0)


def assemble_hessian(hvp: Hvp, dim: int) -> np.ndarray:
    H = np.empty((dim, dim))
    e = np.zeros(dim)
    for i in range(dim):
        e[i] = 1.0
        H[:, i] = hvp(e)
        e[i] = 0.0
    return H


def exact_inv_hvp(hvp: Hvp, v: Vector, dim: int | None = None, cap: int = DEFAULT_EXACT_CAP) -> ApproxReport:
    v = np.asarray(v, dtype=np.float64)
    dim = v.size if dim is None else dim
    if dim != v.size:
        raise ValueError(f"dim {dim} does not match vector length {v.size}")
    if dim > cap:
        raise ValueError(f"exact inverse refused: {dim} parameters exceeds cap {cap}")
    t0 = time.perf_counter_ns()
    H = assemble_hessian(hvp, dim)
    if not np.all(np.isfinite(H)):
        raise IllConditionedError("Hessian has non-finite entries")
    scale = np.abs(H).max()
    with warnings.catch_warnings():
        # singularity is detected from the pivots below
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(H, overwrite_a=True, check_finite=False)
    min_pivot = np.abs(np.diag(lu)).min()
    if scale == 0 or min_pivot < 1e-12 * scale:
        raise IllConditionedError(f"Hessian numerically singular (min pivot {min_pivot:.3e}, max |H| {scale:.3e})")
    x = scipy.linalg.lu_solve((lu, piv), v, check_finite=False)
    return ApproxReport(x, time.perf_counter_ns() - t0, dim * dim + dim)


def approx_inverse_hvp(spec: ApproxSpec, hvp: Hvp, v: Vector) -> ApproxReport:
    if spec.kind == ApproxKind.NEUMANN:
        return neumann_inv_hvp(hvp, v, spec.terms, spec.alpha, spec.scale_by_alpha)
    if spec.kind == ApproxKind.CG:
        return cg_inv_hvp(hvp, v, spec.steps, spec.damping)
    if spec.kind == ApproxKind.IDENTITY:
        return identity_inv_hvp(v)
    return exact_inv_hvp(hvp, v, cap=spec.exact_cap)


def hypergradient(grad_val_w: Vector, spec: ApproxSpec, hvp: Hvp, mixed: Callable[[Vector], Vector]):
    """IFT estimate of dL_V*/dlambda, assuming no direct lambda term.

    Returns ``(hypergrad, report)`` where ``report`` describes the
    inverse-HVP call only.
    """
    report = approx_inverse_hvp(spec, hvp, np.asarray(grad_val_w, dtype=np.float64))
    return -np.asarray(mixed(report.result)), report
